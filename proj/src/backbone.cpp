#include "nexvitad/backbone.hpp"

#include <cmath>

#include "nexvitad/ops.hpp"
#include "nexvitad/rng.hpp"

namespace nexvitad {

namespace {

FrozenConv make_conv(int kh, int kw, int c_in, int c_out, int stride, int pad, Rng& rng) {
    FrozenConv layer;
    layer.kernel = Tensor({kh, kw, c_in, c_out});
    const real std_dev = std::sqrt(2.0 / (kh * kw * c_in));
    for (auto& v : layer.kernel.data) v = rng.normal(0.0, std_dev);
    layer.bias = Tensor({c_out});
    for (auto& v : layer.bias.data) v = rng.normal(0.0, 0.1);
    layer.stride = stride;
    layer.pad = pad;
    return layer;
}

std::uint64_t layers_checksum(const std::vector<FrozenConv>& layers) {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (const auto& l : layers) {
        h ^= tensor_checksum(l.kernel) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h ^= tensor_checksum(l.bias) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return h;
}

} // namespace

HierarchicalEncoder::HierarchicalEncoder(const BackboneConfig& cfg) : cfg_(cfg) {
    if (cfg_.hiera_dims.size() != 4 || cfg_.hiera_strides.size() != 4) {
        throw_config("hierarchical encoder needs exactly 4 dims and 4 strides");
    }
    for (int d : cfg_.hiera_dims) {
        if (d % 4 != 0) throw_config("hiera dims must be divisible by 4 (adapter bottleneck r = d/4)");
    }
    Rng rng(mix_seed(cfg_.seed, 0x41e12au));
    int prev_channels = 3;
    int prev_stride = 1;
    for (int n = 0; n < 4; ++n) {
        const int d = cfg_.hiera_dims[static_cast<std::size_t>(n)];
        const int stage_stride = cfg_.hiera_strides[static_cast<std::size_t>(n)] / prev_stride;
        if (stage_stride < 1 || cfg_.hiera_strides[static_cast<std::size_t>(n)] % prev_stride != 0) {
            throw_config("hiera strides must be increasing multiples");
        }
        if (stage_stride <= 2) {
            layers_.push_back(make_conv(3, 3, prev_channels, d, stage_stride, 1, rng));
        } else {
            layers_.push_back(make_conv(stage_stride, stage_stride, prev_channels, d, stage_stride, 0, rng));
        }
        stage_boundaries_.push_back(static_cast<int>(layers_.size()) - 1);
        prev_channels = d;
        prev_stride = cfg_.hiera_strides[static_cast<std::size_t>(n)];
    }
}

std::vector<Tensor> HierarchicalEncoder::forward(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(3) != 3) {
        throw_shape("encoder input must be (b,h,w,3), got " + dims_to_string(images.dims));
    }
    const int max_stride = cfg_.hiera_strides.back();
    if (images.dim(1) % max_stride != 0 || images.dim(2) % max_stride != 0) {
        throw_shape("input extents must be divisible by " + std::to_string(max_stride) + ", got " +
                    dims_to_string(images.dims));
    }
    std::vector<Tensor> pyramid;
    Tensor x = images;
    std::size_t next_stage = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const FrozenConv& l = layers_[i];
        x = gelu(conv2d(x, l.kernel, &l.bias, l.stride, l.pad));
        if (next_stage < stage_boundaries_.size() &&
            static_cast<int>(i) == stage_boundaries_[next_stage]) {
            pyramid.push_back(x);
            ++next_stage;
        }
    }
    return pyramid;
}

std::uint64_t HierarchicalEncoder::checksum() const { return layers_checksum(layers_); }

DenseEncoder::DenseEncoder(const BackboneConfig& cfg) : cfg_(cfg) {
    if (cfg_.dino_stride < 2 || (cfg_.dino_stride & (cfg_.dino_stride - 1)) != 0) {
        throw_config("dino_stride must be a power of two >= 2");
    }
    Rng rng(mix_seed(cfg_.seed, 0xd1a0u));
    const int mid = std::max(8, cfg_.d_dino / 2);
    const int s1 = cfg_.dino_stride / 4 >= 2 ? 4 : 2;
    const int s2 = cfg_.dino_stride / s1;
    layers_.push_back(make_conv(s1, s1, 3, mid, s1, 0, rng));
    layers_.push_back(make_conv(3, 3, mid, mid, 1, 1, rng));
    layers_.push_back(make_conv(s2, s2, mid, cfg_.d_dino, s2, 0, rng));
}

Tensor DenseEncoder::forward(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(3) != 3) {
        throw_shape("encoder input must be (b,h,w,3), got " + dims_to_string(images.dims));
    }
    if (images.dim(1) % cfg_.dino_stride != 0 || images.dim(2) % cfg_.dino_stride != 0) {
        throw_shape("input extents must be divisible by " + std::to_string(cfg_.dino_stride) + ", got " +
                    dims_to_string(images.dims));
    }
    Tensor x = images;
    for (const auto& l : layers_) x = gelu(conv2d(x, l.kernel, &l.bias, l.stride, l.pad));
    return x;
}

std::uint64_t DenseEncoder::checksum() const { return layers_checksum(layers_); }

} // namespace nexvitad
