#include "nexvitad/optim.hpp"

#include <cmath>

namespace nexvitad {

void adam_step(ParamTensor& p, AdamState& s) {
    if (p.frozen) throw_contract("adam_step on frozen param '" + p.name + "'");
    require_same_dims(p.value, p.grad, "param value", "param grad");
    require_same_dims(p.value, s.m, "param value", "adam m");
    s.step_count += 1;
    const real b1t = 1.0 - std::pow(s.beta1, static_cast<real>(s.step_count));
    const real b2t = 1.0 - std::pow(s.beta2, static_cast<real>(s.step_count));
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
        const real g = p.grad.data[i];
        s.m.data[i] = s.beta1 * s.m.data[i] + (1.0 - s.beta1) * g;
        s.v.data[i] = s.beta2 * s.v.data[i] + (1.0 - s.beta2) * g * g;
        const real m_hat = s.m.data[i] / b1t;
        const real v_hat = s.v.data[i] / b2t;
        p.value.data[i] -= s.lr * m_hat / (std::sqrt(v_hat) + s.eps);
    }
}

real lr_at(int epoch, int total_epochs, int warmup_epochs, real base_lr) {
    if (warmup_epochs >= total_epochs) throw_config("warmup_epochs must be < total_epochs");
    if (epoch < 0 || epoch >= total_epochs) throw_config("epoch out of range for lr_at");
    if (epoch < warmup_epochs) return base_lr * (epoch + 1) / warmup_epochs;
    const real progress = static_cast<real>(epoch - warmup_epochs) / (total_epochs - warmup_epochs);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

} // namespace nexvitad
