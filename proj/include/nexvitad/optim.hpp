#pragma once

#include "nexvitad/tensor.hpp"

namespace nexvitad {

struct AdamState {
    Tensor m;
    Tensor v;
    long step_count = 0;
    real lr = 1e-4;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;

    AdamState() = default;
    explicit AdamState(const std::vector<int>& dims, real learning_rate = 1e-4)
        : m(dims), v(dims), lr(learning_rate) {}
};

// Standard bias-corrected Adam update from p.grad. Throws on frozen params.
void adam_step(ParamTensor& p, AdamState& s);

// Linear warmup to base_lr over warmup_epochs, then cosine decay over the
// remaining span.
real lr_at(int epoch, int total_epochs, int warmup_epochs, real base_lr);

} // namespace nexvitad
