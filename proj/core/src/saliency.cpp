#include "rvit/saliency.hpp"

#include <algorithm>

namespace rvit {

SaliencyResult guided_backprop(const DiffModel& model, const Tensor& image, SaliencyTarget rule,
                               int fixed_class) {
  Tape tape;
  tape.set_backward_mode(Tape::BackwardMode::guided);
  Tensor x = image.clone();
  tape.watch(x);
  Tensor logits = model.forward(tape, x);

  int target = fixed_class;
  if (rule == SaliencyTarget::top1) {
    target = 0;
    for (int i = 1; i < logits.dim(0); ++i) {
      if (logits.data()[i] > logits.data()[target]) target = i;
    }
  }
  if (target < 0 || target >= logits.dim(0)) {
    throw ValueError(cat("guided_backprop: target class ", target, " out of range"));
  }

  Tensor selected = tape.sum(tape.slice(logits, 0, target, 1));
  GradMap grads = tape.guided_backward(selected);
  if (!grads.contains(x)) throw ValueError("guided_backprop: model does not propagate gradients to its input");
  Tensor g = grads.at(x);

  SaliencyResult res;
  res.target_class = target;
  float lo = g.data()[0], hi = g.data()[0];
  for (int64_t i = 0; i < g.numel(); ++i) {
    lo = std::min(lo, g.data()[i]);
    hi = std::max(hi, g.data()[i]);
  }
  res.x_prime = Tensor(image.shape());
  if (hi - lo < 1e-12f) {
    res.degenerate = true;
    for (auto& v : res.x_prime.vec()) v = 0.5f;
  } else {
    const float inv = 1.0f / (hi - lo);
    for (int64_t i = 0; i < g.numel(); ++i) res.x_prime.data()[i] = (g.data()[i] - lo) * inv;
  }
  return res;
}

}  // namespace rvit
