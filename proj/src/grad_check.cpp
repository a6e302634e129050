#include "nexvitad/grad_check.hpp"

#include <cmath>

namespace nexvitad {

GradCheckReport finite_diff_check(const std::function<real()>& loss_only,
                                  const std::function<real()>& loss_and_grad,
                                  const std::vector<ParamTensor*>& params, real h) {
    GradCheckReport report;
    loss_and_grad(); // fill analytic grads once
    for (ParamTensor* p : params) {
        if (p->frozen) continue;
        GradCheckEntry entry;
        entry.param = p->name;
        entry.checked = p->value.size();
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            const real saved = p->value.data[i];
            p->value.data[i] = saved + h;
            const real f_plus = loss_only();
            p->value.data[i] = saved - h;
            const real f_minus = loss_only();
            p->value.data[i] = saved;
            const real fd = (f_plus - f_minus) / (2.0 * h);
            const real an = p->grad.data[i];
            const real rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), static_cast<real>(1.0)});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = static_cast<int>(i);
                entry.analytic = an;
                entry.numeric = fd;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.params_checked += 1;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

} // namespace nexvitad
