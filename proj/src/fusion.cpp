#include "nexvitad/fusion.hpp"

#include <cmath>

#include "nexvitad/ops.hpp"
#include "nexvitad/rng.hpp"

namespace nexvitad {

std::vector<ParamTensor*> FusionParams::trainable() {
    std::vector<ParamTensor*> out;
    for (auto& a : adapters) {
        out.push_back(&a.w_down);
        out.push_back(&a.b_down);
        out.push_back(&a.w_up);
        out.push_back(&a.b_up);
    }
    for (auto& p : projections) {
        out.push_back(&p.w_proj);
        out.push_back(&p.b_proj);
    }
    return out;
}

FusionParams init_fusion_params(const BackboneConfig& cfg, std::uint64_t seed) {
    FusionParams params;
    Rng rng(mix_seed(seed, 0xf051u));
    for (std::size_t n = 0; n < cfg.hiera_dims.size(); ++n) {
        const int d = cfg.hiera_dims[n];
        const int r = d / 4;
        AdapterParams a;
        a.w_down = ParamTensor(Tensor({d, r}), "adapter" + std::to_string(n) + ".w_down");
        a.b_down = ParamTensor(Tensor({r}), "adapter" + std::to_string(n) + ".b_down");
        a.w_up = ParamTensor(Tensor({r, d}), "adapter" + std::to_string(n) + ".w_up");
        a.b_up = ParamTensor(Tensor({d}), "adapter" + std::to_string(n) + ".b_up");
        for (auto& v : a.w_down.value.data) v = rng.normal(0.0, 0.02);
        for (auto& v : a.w_up.value.data) v = rng.normal(0.0, 0.02);
        params.adapters.push_back(std::move(a));

        ProjectionParams p;
        p.w_proj = ParamTensor(Tensor({cfg.d_dino, d}), "proj" + std::to_string(n) + ".w");
        p.b_proj = ParamTensor(Tensor({d}), "proj" + std::to_string(n) + ".b");
        const real std_dev = 1.0 / std::sqrt(static_cast<real>(cfg.d_dino));
        for (auto& v : p.w_proj.value.data) v = rng.normal(0.0, std_dev);
        params.projections.push_back(std::move(p));
    }
    return params;
}

Tensor adapter_forward(const Tensor& x, const AdapterParams& params, AdapterCache* cache) {
    if (x.dims.back() != params.w_down.value.dim(0)) {
        throw_shape("adapter input " + dims_to_string(x.dims) + " vs w_down " +
                    dims_to_string(params.w_down.value.dims));
    }
    Tensor mid_pre = affine(x, params.w_down.value, params.b_down.value);
    Tensor mid_post = gelu(mid_pre);
    Tensor out = affine(mid_post, params.w_up.value, params.b_up.value);
    out.add_(x); // residual
    if (cache) {
        cache->x = x;
        cache->mid_pre = std::move(mid_pre);
        cache->mid_post = std::move(mid_post);
    }
    return out;
}

void adapter_backward(const AdapterCache& cache, AdapterParams& params, const Tensor& grad_out,
                      Tensor* grad_x) {
    Tensor g_mid_post(cache.mid_post.dims);
    affine_backward(cache.mid_post, params.w_up.value, grad_out, &g_mid_post, &params.w_up.grad,
                    &params.b_up.grad);
    Tensor g_mid_pre(cache.mid_pre.dims);
    gelu_backward(cache.mid_pre, g_mid_post, &g_mid_pre);
    affine_backward(cache.x, params.w_down.value, g_mid_pre, grad_x, &params.w_down.grad,
                    &params.b_down.grad);
    if (grad_x) grad_x->add_(grad_out); // residual path
}

Tensor project_dense(const Tensor& resized, const ProjectionParams& params) {
    return affine(resized, params.w_proj.value, params.b_proj.value);
}

void project_dense_backward(const Tensor& resized, ProjectionParams& params, const Tensor& grad_out) {
    affine_backward(resized, params.w_proj.value, grad_out, nullptr, &params.w_proj.grad,
                    &params.b_proj.grad);
}

Tensor interleave(const Tensor& a, const Tensor& b) {
    require_same_dims(a, b, "interleave lhs", "interleave rhs");
    const int c = a.dims.back();
    std::vector<int> out_dims = a.dims;
    out_dims.back() = 2 * c;
    Tensor out(out_dims);
    const std::size_t rows = a.size() / static_cast<std::size_t>(c);
    for (std::size_t r = 0; r < rows; ++r) {
        const real* pa = a.data.data() + r * c;
        const real* pb = b.data.data() + r * c;
        real* po = out.data.data() + r * 2 * c;
        for (int j = 0; j < c; ++j) {
            po[2 * j] = pa[j];
            po[2 * j + 1] = pb[j];
        }
    }
    return out;
}

std::pair<Tensor, Tensor> deinterleave(const Tensor& fused) {
    const int c2 = fused.dims.back();
    if (c2 % 2 != 0) throw_shape("deinterleave needs an even channel count, got " + dims_to_string(fused.dims));
    const int c = c2 / 2;
    std::vector<int> half_dims = fused.dims;
    half_dims.back() = c;
    Tensor a(half_dims), b(half_dims);
    const std::size_t rows = fused.size() / static_cast<std::size_t>(c2);
    for (std::size_t r = 0; r < rows; ++r) {
        const real* pf = fused.data.data() + r * c2;
        real* pa = a.data.data() + r * c;
        real* pb = b.data.data() + r * c;
        for (int j = 0; j < c; ++j) {
            pa[j] = pf[2 * j];
            pb[j] = pf[2 * j + 1];
        }
    }
    return {std::move(a), std::move(b)};
}

BackboneFeatures backbone_forward(const Encoder& enc, const Tensor& images) {
    BackboneFeatures feats;
    feats.pyramid = enc.hiera.forward(images);
    Tensor dense = enc.dense.forward(images);
    for (const auto& scale : feats.pyramid) {
        feats.dense_resized.push_back(bilinear_resize_nhwc(dense, scale.dim(1), scale.dim(2)));
    }
    return feats;
}

FusedPyramid fuse_features(const BackboneFeatures& feats, const FusionParams& params, EncodeCache* cache) {
    FusedPyramid fused;
    if (cache) {
        cache->adapters.assign(feats.pyramid.size(), {});
        cache->dense_resized.assign(feats.pyramid.size(), {});
    }
    for (std::size_t n = 0; n < feats.pyramid.size(); ++n) {
        Tensor adapted =
            adapter_forward(feats.pyramid[n], params.adapters[n], cache ? &cache->adapters[n] : nullptr);
        Tensor projected = project_dense(feats.dense_resized[n], params.projections[n]);
        if (cache) cache->dense_resized[n] = feats.dense_resized[n];
        fused.scales.push_back(interleave(adapted, projected));
    }
    return fused;
}

FusedPyramid encode(const Encoder& enc, const FusionParams& params, const Tensor& images,
                    EncodeCache* cache) {
    return fuse_features(backbone_forward(enc, images), params, cache);
}

void encode_backward(const EncodeCache& cache, FusionParams& params, const std::vector<Tensor>& grad_scales) {
    for (std::size_t n = 0; n < grad_scales.size(); ++n) {
        auto [g_adapted, g_projected] = deinterleave(grad_scales[n]);
        adapter_backward(cache.adapters[n], params.adapters[n], g_adapted, nullptr);
        project_dense_backward(cache.dense_resized[n], params.projections[n], g_projected);
    }
}

} // namespace nexvitad
