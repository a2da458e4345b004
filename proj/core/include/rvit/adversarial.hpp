#pragma once

#include <optional>

#include "rvit/rng.hpp"
#include "rvit/vit.hpp"

namespace rvit {

struct AdvConfig {
  float epsilon = 8.0f / 255.0f;  // l-inf budget in pixel units
  int steps = 1;                  // 1 for FGSM, k for PGD
  float step_size = 2.0f / 255.0f;
  bool targeted = false;
  bool random_start = true;
  // The targeted one-step attack ascends the loss toward the target by
  // default; this flips it to descend (conventional targeted FGSM).
  bool descend_to_target = false;

  void validate() const;
};

struct AdvExample {
  Tensor x_adv;
  Tensor delta;
  int source_label = -1;
  std::optional<int> target_label;
};

// Index of the minimum logit; ties break toward the lowest index.
int least_likely_class(const Tensor& logits);

// Elementwise clamp of delta into [-epsilon, epsilon].
Tensor project_linf(const Tensor& delta, float epsilon);

// One-step signed-gradient attack with uniform random init, projected back
// into the l-inf ball, pixels clipped to [0,1].
AdvExample fgsm_rs(const DiffModel& model, const Tensor& x, int y, const AdvConfig& cfg, Rng& rng);

// Targeted variant aimed at the model's least-likely class for x.
AdvExample fgsm_ll(const DiffModel& model, const Tensor& x, const AdvConfig& cfg, Rng& rng);

// Multi-step projected signed-gradient evaluator.
AdvExample pgd(const DiffModel& model, const Tensor& x, int y, const AdvConfig& cfg, Rng& rng);

}  // namespace rvit
