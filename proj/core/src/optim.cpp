#include "rvit/optim.hpp"

#include <cmath>

namespace rvit {

float LrSchedule::at(double epoch) const {
  const double eff = static_cast<double>(base_lr) * static_cast<double>(scale);
  if (warmup_epochs > 0 && epoch + 1.0 < static_cast<double>(warmup_epochs)) {
    return static_cast<float>(eff * (epoch + 1.0) / static_cast<double>(warmup_epochs));
  }
  const double span = std::max(1.0, static_cast<double>(total_epochs - warmup_epochs));
  const double progress = std::min(1.0, std::max(0.0, (epoch - warmup_epochs) / span));
  return static_cast<float>(eff * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));
}

AdamW::AdamW(std::vector<Tensor> params, std::vector<uint8_t> decay_mask, AdamWConfig cfg)
    : params_(std::move(params)), decay_(std::move(decay_mask)), cfg_(cfg) {
  if (decay_.size() != params_.size()) throw ValueError("adamw: decay mask size mismatch");
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0f);
    v_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0f);
  }
}

void AdamW::step(const GradMap& grads, float lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const Tensor& g = grads.at(p);
    const double wd = decay_[i] ? static_cast<double>(cfg_.weight_decay) : 0.0;
    for (int64_t e = 0; e < p.numel(); ++e) {
      const double gv = g.data()[e];
      const double m = b1 * m_[i][static_cast<size_t>(e)] + (1.0 - b1) * gv;
      const double v = b2 * v_[i][static_cast<size_t>(e)] + (1.0 - b2) * gv * gv;
      m_[i][static_cast<size_t>(e)] = static_cast<float>(m);
      v_[i][static_cast<size_t>(e)] = static_cast<float>(v);
      const double mh = m / bc1;
      const double vh = v / bc2;
      double pv = p.data()[e];
      pv -= static_cast<double>(lr) * (mh / (std::sqrt(vh) + cfg_.eps) + wd * pv);
      p.data()[e] = static_cast<float>(pv);
    }
  }
}

double clip_grad_norm(GradMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [node, g] : grads.by_node) {
    for (int64_t e = 0; e < g.numel(); ++e) sq += static_cast<double>(g.data()[e]) * g.data()[e];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& [node, g] : grads.by_node) {
      for (int64_t e = 0; e < g.numel(); ++e) g.data()[e] *= scale;
    }
  }
  return norm;
}

std::vector<uint8_t> default_decay_mask(const NamedParams& params) {
  std::vector<uint8_t> mask;
  mask.reserve(params.items.size());
  for (const auto& [name, t] : params.items) {
    const bool exempt = t.ndim() < 2 || name.find("e_pos") != std::string::npos ||
                        name.find("mask_token") != std::string::npos || name.find(".pos") != std::string::npos;
    mask.push_back(exempt ? 0 : 1);
  }
  return mask;
}

}  // namespace rvit
