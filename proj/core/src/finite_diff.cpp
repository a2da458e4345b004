#include "rvit/finite_diff.hpp"

#include <cmath>

namespace rvit {

FiniteDiffReport finite_diff_check(const ScalarFn& f, std::vector<Tensor> inputs, double h, double tol,
                                   double floor) {
  if (h <= 0.0) throw ValueError("finite_diff_check: h must be positive");

  Tape tape;
  for (Tensor& t : inputs) tape.watch(t);
  Tensor loss = f(tape, inputs);
  if (loss.numel() != 1) throw ValueError("finite_diff_check: f must be scalar-valued");
  GradMap grads = tape.backward(loss);

  FiniteDiffReport rep;
  rep.max_rel_err = 0.0;

  for (size_t which = 0; which < inputs.size(); ++which) {
    const Tensor& t = inputs[which];
    const Tensor& g = grads.at(t);
    std::vector<double> base(static_cast<size_t>(t.numel()));
    for (int64_t e = 0; e < t.numel(); ++e) base[static_cast<size_t>(e)] = t.data()[e];

    for (int64_t e = 0; e < t.numel(); ++e) {
      std::unordered_map<int, std::vector<double>> ov;
      std::vector<double> pert = base;
      pert[static_cast<size_t>(e)] = base[static_cast<size_t>(e)] + h;
      ov[t.node_id()] = pert;
      const double fp = tape.replay_f64(loss, ov);
      pert[static_cast<size_t>(e)] = base[static_cast<size_t>(e)] - h;
      ov[t.node_id()] = pert;
      const double fm = tape.replay_f64(loss, ov);
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = g.data()[e];
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
      const double rel = std::fabs(analytic - numeric) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = static_cast<int>(which);
        rep.worst_elem = e;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace rvit
