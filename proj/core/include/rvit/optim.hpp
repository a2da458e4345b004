#pragma once

#include <cstdint>
#include <vector>

#include "rvit/tape.hpp"
#include "rvit/vit.hpp"

namespace rvit {

// Linear warmup to the effective rate, then cosine decay to zero. `scale`
// carries the batch-size/256 convention applied to the base rate.
struct LrSchedule {
  float base_lr = 1e-3f;
  int warmup_epochs = 5;
  int total_epochs = 100;
  float scale = 1.0f;

  float at(double epoch) const;
};

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float weight_decay = 0.05f;
  double eps = 1e-8;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, std::vector<uint8_t> decay_mask, AdamWConfig cfg);

  void step(const GradMap& grads, float lr);
  int64_t steps_taken() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<uint8_t> decay_;
  AdamWConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

// Decay applies to weight matrices only; rank-1 parameters, positional
// embeddings and mask tokens are exempt.
std::vector<uint8_t> default_decay_mask(const NamedParams& params);

// Scales all gradients so their global l2 norm is at most max_norm; returns
// the pre-clip norm.
double clip_grad_norm(GradMap& grads, double max_norm);

}  // namespace rvit
