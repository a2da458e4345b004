#include "rvit/adversarial.hpp"

#include <algorithm>
#include <cmath>

namespace rvit {

namespace {

float sign_of(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

Tensor clip01(const Tensor& x) {
  Tensor out = x.clone();
  for (auto& v : out.vec()) v = std::min(1.0f, std::max(0.0f, v));
  return out;
}

// Gradient of the cross-entropy toward `label` with respect to x.
Tensor input_gradient(const DiffModel& model, const Tensor& x, int label) {
  Tape tape;
  Tensor xin = x.clone();
  tape.watch(xin);
  Tensor logits = model.forward(tape, xin);
  Tensor rows = tape.reshape(logits, {1, logits.dim(0)});
  Tensor loss = tape.cross_entropy_logits(rows, {label});
  GradMap grads = tape.backward(loss);
  if (!grads.contains(xin)) throw ValueError("attack: model does not propagate gradients to its input");
  return grads.at(xin);
}

}  // namespace

void AdvConfig::validate() const {
  if (epsilon < 0.0f || epsilon >= 1.0f) throw ConfigError(cat("attack: epsilon ", epsilon, " outside [0,1)"));
  if (steps < 1) throw ConfigError("attack: steps must be >= 1");
  if (step_size < 0.0f) throw ConfigError("attack: negative step size");
}

int least_likely_class(const Tensor& logits) {
  if (logits.ndim() != 1 || logits.dim(0) < 2) {
    throw ShapeError(cat("least_likely_class: expected rank-1 logits with C >= 2, got ", shape_str(logits.shape())));
  }
  int best = 0;
  for (int i = 1; i < logits.dim(0); ++i) {
    if (logits.data()[i] < logits.data()[best]) best = i;
  }
  return best;
}

Tensor project_linf(const Tensor& delta, float epsilon) {
  Tensor out = delta.clone();
  for (auto& v : out.vec()) v = std::max(std::min(v, epsilon), -epsilon);
  return out;
}

namespace {

AdvExample one_step(const DiffModel& model, const Tensor& x, int loss_label, float grad_sign,
                    const AdvConfig& cfg, Rng& rng) {
  Tensor delta(x.shape());
  if (cfg.random_start && cfg.epsilon > 0.0f) {
    for (auto& v : delta.vec()) v = rng.uniform(-cfg.epsilon, cfg.epsilon);
  }
  Tensor g = input_gradient(model, x, loss_label);
  for (int64_t i = 0; i < delta.numel(); ++i) {
    delta.data()[i] += cfg.epsilon * grad_sign * sign_of(g.data()[i]);
  }
  delta = project_linf(delta, cfg.epsilon);

  AdvExample ex;
  Tensor sum = x.clone();
  for (int64_t i = 0; i < sum.numel(); ++i) sum.data()[i] += delta.data()[i];
  ex.x_adv = clip01(sum);
  // Keep the recorded perturbation consistent with the clipped image.
  ex.delta = Tensor(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) ex.delta.data()[i] = ex.x_adv.data()[i] - x.data()[i];
  return ex;
}

}  // namespace

AdvExample fgsm_rs(const DiffModel& model, const Tensor& x, int y, const AdvConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.steps != 1) throw ConfigError("fgsm_rs: steps must be 1");
  AdvExample ex = one_step(model, x, y, +1.0f, cfg, rng);
  ex.source_label = y;
  return ex;
}

AdvExample fgsm_ll(const DiffModel& model, const Tensor& x, const AdvConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.steps != 1) throw ConfigError("fgsm_ll: steps must be 1");
  int target = 0;
  {
    Tape tape;
    Tensor logits = model.forward(tape, x);
    target = least_likely_class(logits);
  }
  const float grad_sign = cfg.descend_to_target ? -1.0f : +1.0f;
  AdvExample ex = one_step(model, x, target, grad_sign, cfg, rng);
  ex.target_label = target;
  return ex;
}

AdvExample pgd(const DiffModel& model, const Tensor& x, int y, const AdvConfig& cfg, Rng& rng) {
  cfg.validate();
  Tensor delta(x.shape());
  if (cfg.random_start && cfg.epsilon > 0.0f) {
    for (auto& v : delta.vec()) v = rng.uniform(-cfg.epsilon, cfg.epsilon);
  }
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor xs = x.clone();
    for (int64_t i = 0; i < xs.numel(); ++i) xs.data()[i] += delta.data()[i];
    xs = clip01(xs);
    Tensor g = input_gradient(model, xs, y);
    for (int64_t i = 0; i < delta.numel(); ++i) {
      delta.data()[i] += cfg.step_size * sign_of(g.data()[i]);
    }
    delta = project_linf(delta, cfg.epsilon);
  }
  AdvExample ex;
  Tensor sum = x.clone();
  for (int64_t i = 0; i < sum.numel(); ++i) sum.data()[i] += delta.data()[i];
  ex.x_adv = clip01(sum);
  ex.delta = Tensor(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) ex.delta.data()[i] = ex.x_adv.data()[i] - x.data()[i];
  ex.source_label = y;
  return ex;
}

}  // namespace rvit
