#pragma once

#include <functional>
#include <vector>

#include "rvit/tape.hpp"

namespace rvit {

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int64_t checked = 0;
  // Location of the worst entry, for diagnostics.
  int worst_input = -1;
  int64_t worst_elem = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// f builds a scalar loss on the given tape from the (already watched) inputs.
using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Central-difference gradient check. The analytic gradient comes from the f32
// tape; the numeric one from re-evaluating the recorded graph in f64 at
// perturbed leaf values. Relative error uses an absolute floor for near-zero
// entries. Never throws on mismatch; the report carries the result.
FiniteDiffReport finite_diff_check(const ScalarFn& f, std::vector<Tensor> inputs, double h, double tol,
                                   double floor = 1e-6);

}  // namespace rvit
