#pragma once

#include "rvit/vit.hpp"

namespace rvit {

enum class SaliencyTarget { top1, fixed };

struct SaliencyResult {
  Tensor x_prime;          // image-shaped, min-max normalized to [0,1]
  bool degenerate = false; // constant gradient collapsed to all 0.5
  int target_class = -1;
};

// Guided-backprop input variant: the guided gradient of the selected logit
// with respect to the image, min-max normalized per image.
SaliencyResult guided_backprop(const DiffModel& model, const Tensor& image,
                               SaliencyTarget rule = SaliencyTarget::top1, int fixed_class = 0);

}  // namespace rvit
