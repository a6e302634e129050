#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nexvitad/tensor.hpp"

namespace nexvitad {

struct GradCheckEntry {
    std::string param;
    real max_rel_err = 0.0;
    int worst_index = -1;
    real analytic = 0.0;
    real numeric = 0.0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    real max_rel_err = 0.0;
    std::size_t params_checked = 0;
    bool passed(real tol) const { return max_rel_err < tol; }
};

// Central-difference validation of hand-written gradients.
//   loss_only     : evaluates the scalar objective at the current params
//                   (must be free of side effects)
//   loss_and_grad : zeroes grads, evaluates the objective, and fills
//                   param.grad for every listed param
// Frozen params are skipped. Relative error is |fd - an| / max(|fd|,|an|,1).
GradCheckReport finite_diff_check(const std::function<real()>& loss_only,
                                  const std::function<real()>& loss_and_grad,
                                  const std::vector<ParamTensor*>& params, real h);

} // namespace nexvitad
