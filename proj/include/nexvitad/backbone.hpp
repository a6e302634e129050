#pragma once

#include <cstdint>
#include <vector>

#include "nexvitad/tensor.hpp"

namespace nexvitad {

// Frozen deterministic stand-ins for the two pretrained feature extractors.
// Weights are seed-derived scaled Gaussians and never receive updates.
struct BackboneConfig {
    std::vector<int> hiera_dims = {32, 64, 128, 256};
    std::vector<int> hiera_strides = {4, 8, 16, 32};
    int d_dino = 48;
    int dino_stride = 16;
    std::uint64_t seed = 7;
};

struct FrozenConv {
    Tensor kernel; // (kh,kw,c_in,c_out)
    Tensor bias;   // (c_out)
    int stride = 1;
    int pad = 0;
};

class HierarchicalEncoder {
public:
    explicit HierarchicalEncoder(const BackboneConfig& cfg);

    // (b,h,w,3) -> 4 feature maps (b, h/stride_n, w/stride_n, dims[n])
    std::vector<Tensor> forward(const Tensor& images) const;

    const BackboneConfig& config() const { return cfg_; }
    std::uint64_t checksum() const;

private:
    BackboneConfig cfg_;
    std::vector<FrozenConv> layers_;     // two per stage
    std::vector<int> stage_boundaries_;  // layer index where each stage's output is taken
};

class DenseEncoder {
public:
    explicit DenseEncoder(const BackboneConfig& cfg);

    // (b,h,w,3) -> (b, h/dino_stride, w/dino_stride, d_dino)
    Tensor forward(const Tensor& images) const;

    std::uint64_t checksum() const;

private:
    BackboneConfig cfg_;
    std::vector<FrozenConv> layers_;
};

} // namespace nexvitad
