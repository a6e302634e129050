#include "nexvitad/decoder.hpp"

#include <cmath>

namespace nexvitad {

namespace {

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
        throw_shape("concat_channels spatial mismatch: " + dims_to_string(a.dims) + " vs " + dims_to_string(b.dims));
    }
    const int ca = a.dim(3), cb = b.dim(3);
    Tensor out({a.dim(0), a.dim(1), a.dim(2), ca + cb});
    const std::size_t rows = a.size() / static_cast<std::size_t>(ca);
    for (std::size_t r = 0; r < rows; ++r) {
        real* po = out.data.data() + r * (ca + cb);
        const real* pa = a.data.data() + r * ca;
        const real* pb = b.data.data() + r * cb;
        for (int j = 0; j < ca; ++j) po[j] = pa[j];
        for (int j = 0; j < cb; ++j) po[ca + j] = pb[j];
    }
    return out;
}

void split_channels_acc(const Tensor& grad, int ca, Tensor* ga, Tensor* gb) {
    const int cb = grad.dim(3) - ca;
    const std::size_t rows = grad.size() / static_cast<std::size_t>(ca + cb);
    for (std::size_t r = 0; r < rows; ++r) {
        const real* pg = grad.data.data() + r * (ca + cb);
        if (ga) {
            real* pa = ga->data.data() + r * ca;
            for (int j = 0; j < ca; ++j) pa[j] += pg[j];
        }
        if (gb) {
            real* pb = gb->data.data() + r * cb;
            for (int j = 0; j < cb; ++j) pb[j] += pg[ca + j];
        }
    }
}

ConvBlockParams make_conv_block(int c_in, int c_out, const std::string& name, Rng& rng) {
    ConvBlockParams b;
    b.kernel = ParamTensor(Tensor({3, 3, c_in, c_out}), name + ".conv");
    const real std_dev = std::sqrt(2.0 / (9.0 * c_in));
    for (auto& v : b.kernel.value.data) v = rng.normal(0.0, std_dev);
    b.gamma = ParamTensor(Tensor({c_out}, 1.0), name + ".gamma");
    b.beta = ParamTensor(Tensor({c_out}), name + ".beta");
    b.running_mean = Tensor({c_out});
    b.running_var = Tensor({c_out}, 1.0);
    return b;
}

Tensor conv_block_forward(ConvBlockParams& block, const Tensor& x, BnMode mode, bool update_running,
                          ConvBlockCache* cache) {
    Tensor conv_out = conv2d(x, block.kernel.value, nullptr, 1, 1);
    Tensor bn_out = batchnorm2d(conv_out, block.gamma.value, block.beta.value, 1e-5, mode, block.running_mean,
                                block.running_var, 0.1, update_running, cache ? &cache->bn : nullptr);
    Tensor out = relu(bn_out);
    if (cache) {
        cache->x = x;
        cache->pre_relu = std::move(bn_out);
    }
    return out;
}

void conv_block_backward(ConvBlockParams& block, const ConvBlockCache& cache, const Tensor& grad_out,
                         Tensor* grad_x) {
    Tensor g_bn(cache.pre_relu.dims);
    relu_backward(cache.pre_relu, grad_out, &g_bn);
    Tensor g_conv(cache.pre_relu.dims);
    batchnorm2d_backward(cache.bn, block.gamma.value, g_bn, &g_conv, &block.gamma.grad, &block.beta.grad);
    conv2d_backward(cache.x, block.kernel.value, g_conv, 1, 1, grad_x, &block.kernel.grad, nullptr);
}

constexpr real kBnMomentum = 0.1;

} // namespace

std::vector<ParamTensor*> DecoderHead::trainable() {
    std::vector<ParamTensor*> out;
    for (auto& s : stages) {
        out.push_back(&s.up_kernel);
        out.push_back(&s.up_bias);
        out.push_back(&s.block.kernel);
        out.push_back(&s.block.gamma);
        out.push_back(&s.block.beta);
    }
    out.push_back(&final_block.kernel);
    out.push_back(&final_block.gamma);
    out.push_back(&final_block.beta);
    out.push_back(&out_kernel);
    out.push_back(&out_bias);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> DecoderHead::buffers(const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        out.emplace_back(prefix + ".stage" + std::to_string(i) + ".running_mean", &stages[i].block.running_mean);
        out.emplace_back(prefix + ".stage" + std::to_string(i) + ".running_var", &stages[i].block.running_var);
    }
    out.emplace_back(prefix + ".final.running_mean", &final_block.running_mean);
    out.emplace_back(prefix + ".final.running_var", &final_block.running_var);
    return out;
}

std::vector<ParamTensor*> PseudoLabelHead::trainable() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

DecoderHead make_decoder_head(const std::vector<int>& fused_channels, const std::vector<int>& stage_channels,
                              const std::string& name_prefix, Rng& rng) {
    if (fused_channels.size() != 4 || stage_channels.size() != 3) {
        throw_config("decoder head needs 4 fused channel counts and 3 stage channel counts");
    }
    DecoderHead head;
    int coarse_ch = fused_channels[3];
    for (int i = 0; i < 3; ++i) {
        const int out_ch = stage_channels[static_cast<std::size_t>(i)];
        const int skip_ch = fused_channels[static_cast<std::size_t>(2 - i)];
        DecodeStageParams stage;
        const std::string sname = name_prefix + ".stage" + std::to_string(i);
        stage.up_kernel = ParamTensor(Tensor({2, 2, out_ch, coarse_ch}), sname + ".up");
        const real up_std = std::sqrt(2.0 / coarse_ch);
        for (auto& v : stage.up_kernel.value.data) v = rng.normal(0.0, up_std);
        stage.up_bias = ParamTensor(Tensor({out_ch}), sname + ".up_bias");
        stage.block = make_conv_block(out_ch + skip_ch, out_ch, sname, rng);
        head.stages.push_back(std::move(stage));
        coarse_ch = out_ch;
    }
    head.final_block = make_conv_block(coarse_ch, coarse_ch, name_prefix + ".final", rng);
    head.out_kernel = ParamTensor(Tensor({1, 1, coarse_ch, 2}), name_prefix + ".out");
    const real out_std = std::sqrt(1.0 / coarse_ch);
    for (auto& v : head.out_kernel.value.data) v = rng.normal(0.0, out_std);
    head.out_bias = ParamTensor(Tensor({2}), name_prefix + ".out_bias");
    return head;
}

PseudoLabelHead make_pseudo_head(int in_channels, const std::string& name_prefix, Rng& rng) {
    PseudoLabelHead head;
    auto init = [&](ParamTensor& w, ParamTensor& b, int ci, int co, const std::string& name) {
        w = ParamTensor(Tensor({ci, co}), name + ".w");
        const real std_dev = std::sqrt(2.0 / ci);
        for (auto& v : w.value.data) v = rng.normal(0.0, std_dev);
        b = ParamTensor(Tensor({co}), name + ".b");
    };
    init(head.w1, head.b1, in_channels, 64, name_prefix + ".fc1");
    init(head.w2, head.b2, 64, 32, name_prefix + ".fc2");
    init(head.w3, head.b3, 32, 2, name_prefix + ".fc3");
    // confidence-gated self-training needs some pixels above the threshold
    // from the start; a hot final layer avoids the cold-start deadlock
    for (auto& v : head.w3.value.data) v *= 5.0;
    return head;
}

Tensor decode_stage(const Tensor& coarse, const Tensor& skip, DecodeStageParams& stage, BnMode mode,
                    bool update_running, DecodeStageCache* cache) {
    Tensor up = conv_transpose2d(coarse, stage.up_kernel.value, &stage.up_bias.value, 2);
    if (up.dim(1) != skip.dim(1) || up.dim(2) != skip.dim(2)) {
        throw_shape("decode_stage: upsampled " + dims_to_string(up.dims) + " does not match skip " +
                    dims_to_string(skip.dims));
    }
    Tensor cat = concat_channels(up, skip);
    Tensor out = conv_block_forward(stage.block, cat, mode, update_running, cache ? &cache->block : nullptr);
    if (cache) {
        cache->coarse = coarse;
        cache->up = std::move(up);
        cache->concat = std::move(cat);
    }
    return out;
}

void decode_stage_backward(DecodeStageParams& stage, const DecodeStageCache& cache, const Tensor& grad_out,
                           Tensor* grad_coarse, Tensor* grad_skip) {
    Tensor g_cat(cache.concat.dims);
    conv_block_backward(stage.block, cache.block, grad_out, &g_cat);
    Tensor g_up(cache.up.dims);
    split_channels_acc(g_cat, cache.up.dim(3), &g_up, grad_skip);
    conv_transpose2d_backward(cache.coarse, stage.up_kernel.value, g_up, 2, grad_coarse,
                              &stage.up_kernel.grad, &stage.up_bias.grad);
}

Tensor nhwc_to_nchw(const Tensor& x) {
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    Tensor out({b, c, h, w});
    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int ch = 0; ch < c; ++ch) out.at(bi, ch, y, xx) = x.at(bi, y, xx, ch);
    return out;
}

Tensor nchw_to_nhwc(const Tensor& x) {
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({b, h, w, c});
    for (int bi = 0; bi < b; ++bi)
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) out.at(bi, y, xx, ch) = x.at(bi, ch, y, xx);
    return out;
}

namespace {

// (b,h1,w1,2) NHWC logits -> (b,2,H,W) upsampled channel-first logits
Tensor finalize_logits(const Tensor& logits_nhwc, int out_h, int out_w) {
    const int b = logits_nhwc.dim(0);
    Tensor chw = nhwc_to_nchw(logits_nhwc);
    Tensor out({b, 2, out_h, out_w});
    for (int bi = 0; bi < b; ++bi) {
        Tensor one({2, chw.dim(2), chw.dim(3)});
        std::copy(chw.data.begin() + static_cast<std::ptrdiff_t>(bi) * 2 * chw.dim(2) * chw.dim(3),
                  chw.data.begin() + static_cast<std::ptrdiff_t>(bi + 1) * 2 * chw.dim(2) * chw.dim(3),
                  one.data.begin());
        Tensor resized = bilinear_resize(one, out_h, out_w);
        std::copy(resized.data.begin(), resized.data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(bi) * 2 * out_h * out_w);
    }
    return out;
}

// adjoint of finalize_logits: (b,2,H,W) grads -> (b,h1,w1,2) NHWC grads
Tensor finalize_logits_backward(const Tensor& grad_logits, int h1, int w1) {
    const int b = grad_logits.dim(0);
    const int out_h = grad_logits.dim(2), out_w = grad_logits.dim(3);
    Tensor g_chw({b, 2, h1, w1});
    for (int bi = 0; bi < b; ++bi) {
        Tensor one({2, out_h, out_w});
        std::copy(grad_logits.data.begin() + static_cast<std::ptrdiff_t>(bi) * 2 * out_h * out_w,
                  grad_logits.data.begin() + static_cast<std::ptrdiff_t>(bi + 1) * 2 * out_h * out_w,
                  one.data.begin());
        Tensor g_small({2, h1, w1});
        bilinear_resize_backward(one, h1, w1, &g_small);
        std::copy(g_small.data.begin(), g_small.data.end(),
                  g_chw.data.begin() + static_cast<std::ptrdiff_t>(bi) * 2 * h1 * w1);
    }
    return nchw_to_nhwc(g_chw);
}

} // namespace

Tensor head_forward(DecoderHead& head, const FusedPyramid& pyr, int out_h, int out_w, BnMode mode,
                    bool update_running, HeadCache* cache) {
    if (pyr.scales.size() != 4) throw_shape("head_forward needs a 4-scale pyramid");
    if (cache) cache->stages.assign(3, {});
    Tensor x = pyr.scales[3];
    for (int i = 0; i < 3; ++i) {
        x = decode_stage(x, pyr.scales[static_cast<std::size_t>(2 - i)], head.stages[static_cast<std::size_t>(i)],
                         mode, update_running, cache ? &cache->stages[static_cast<std::size_t>(i)] : nullptr);
    }
    Tensor fin = conv_block_forward(head.final_block, x, mode, update_running, cache ? &cache->final_block : nullptr);
    Tensor logits_nhwc = conv2d(fin, head.out_kernel.value, &head.out_bias.value, 1, 0);
    if (cache) {
        cache->final_out = fin;
        cache->logits_nhwc = logits_nhwc;
    }
    return finalize_logits(logits_nhwc, out_h, out_w);
}

void head_backward(DecoderHead& head, const HeadCache& cache, const Tensor& grad_logits,
                   std::vector<Tensor>* grad_scales) {
    const int h1 = cache.logits_nhwc.dim(1), w1 = cache.logits_nhwc.dim(2);
    Tensor g_nhwc = finalize_logits_backward(grad_logits, h1, w1);
    Tensor g_fin(cache.final_out.dims);
    conv2d_backward(cache.final_out, head.out_kernel.value, g_nhwc, 1, 0, &g_fin, &head.out_kernel.grad,
                    &head.out_bias.grad);
    Tensor g_stage(cache.final_block.x.dims);
    conv_block_backward(head.final_block, cache.final_block, g_fin, &g_stage);
    for (int i = 2; i >= 0; --i) {
        const DecodeStageCache& sc = cache.stages[static_cast<std::size_t>(i)];
        Tensor g_coarse(sc.coarse.dims);
        Tensor* g_skip = grad_scales ? &(*grad_scales)[static_cast<std::size_t>(2 - i)] : nullptr;
        decode_stage_backward(head.stages[static_cast<std::size_t>(i)], sc, g_stage, &g_coarse, g_skip);
        g_stage = std::move(g_coarse);
    }
    if (grad_scales) (*grad_scales)[3].add_(g_stage);
}

Tensor pseudo_head_forward(const PseudoLabelHead& head, const Tensor& f4, int out_h, int out_w,
                           PseudoHeadCache* cache) {
    if (f4.dims.back() != head.w1.value.dim(0)) {
        throw_shape("pseudo head input " + dims_to_string(f4.dims) + " vs w1 " +
                    dims_to_string(head.w1.value.dims));
    }
    Tensor a1_pre = affine(f4, head.w1.value, head.b1.value);
    Tensor a1 = relu(a1_pre);
    Tensor a2_pre = affine(a1, head.w2.value, head.b2.value);
    Tensor a2 = relu(a2_pre);
    Tensor logits_nhwc = affine(a2, head.w3.value, head.b3.value);
    if (cache) {
        cache->x = f4;
        cache->a1_pre = std::move(a1_pre);
        cache->a1 = a1;
        cache->a2_pre = std::move(a2_pre);
        cache->a2 = a2;
        cache->logits_nhwc = logits_nhwc;
    }
    return finalize_logits(logits_nhwc, out_h, out_w);
}

void pseudo_head_backward(PseudoLabelHead& head, const PseudoHeadCache& cache, const Tensor& grad_logits,
                          Tensor* grad_f4) {
    Tensor g_nhwc = finalize_logits_backward(grad_logits, cache.logits_nhwc.dim(1), cache.logits_nhwc.dim(2));
    Tensor g_a2(cache.a2.dims);
    affine_backward(cache.a2, head.w3.value, g_nhwc, &g_a2, &head.w3.grad, &head.b3.grad);
    Tensor g_a2_pre(cache.a2_pre.dims);
    relu_backward(cache.a2_pre, g_a2, &g_a2_pre);
    Tensor g_a1(cache.a1.dims);
    affine_backward(cache.a1, head.w2.value, g_a2_pre, &g_a1, &head.w2.grad, &head.b2.grad);
    Tensor g_a1_pre(cache.a1_pre.dims);
    relu_backward(cache.a1_pre, g_a1, &g_a1_pre);
    affine_backward(cache.x, head.w1.value, g_a1_pre, grad_f4, &head.w1.grad, &head.b1.grad);
}

real PseudoLabelMap::valid_fraction() const {
    std::size_t valid = 0;
    for (real v : labels.data) valid += v != kIgnoreLabel ? 1 : 0;
    return labels.size() == 0 ? 0.0 : static_cast<real>(valid) / static_cast<real>(labels.size());
}

PseudoLabelMap make_pseudo_labels(const Tensor& logits_chw, real theta) {
    if (logits_chw.rank() != 3 || logits_chw.dim(0) != 2) {
        throw_shape("make_pseudo_labels expects (2,h,w), got " + dims_to_string(logits_chw.dims));
    }
    Tensor probs = softmax_channel(logits_chw);
    const int h = logits_chw.dim(1), w = logits_chw.dim(2);
    PseudoLabelMap map;
    map.labels = Tensor({h, w}, kIgnoreLabel);
    map.confidence = Tensor({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const real p0 = probs.at(0, y, x);
            const real p1 = probs.at(1, y, x);
            const real best = std::max(p0, p1);
            map.confidence.at(y, x) = best;
            if (best > theta) map.labels.at(y, x) = p1 > p0 ? 1.0 : 0.0;
        }
    }
    return map;
}

std::vector<ParamTensor*> HeadBank::trainable() {
    std::vector<ParamTensor*> out;
    for (auto& h : source_heads) {
        auto t = h.trainable();
        out.insert(out.end(), t.begin(), t.end());
    }
    for (auto& h : target_seg_heads) {
        auto t = h.trainable();
        out.insert(out.end(), t.begin(), t.end());
    }
    for (auto& h : target_pseudo_heads) {
        auto t = h.trainable();
        out.insert(out.end(), t.begin(), t.end());
    }
    return out;
}

HeadBank make_head_bank(const std::vector<int>& source_classes, const std::vector<int>& target_classes,
                        const std::vector<int>& fused_channels, const std::vector<int>& stage_channels,
                        bool shared_source_head, std::uint64_t seed) {
    HeadBank bank;
    bank.shared_source_head = shared_source_head;
    Rng rng(mix_seed(seed, 0x4ead5u));
    if (shared_source_head) {
        bank.source_heads.push_back(make_decoder_head(fused_channels, stage_channels, "head.src_shared", rng));
        for (int c : source_classes) bank.source_route[c] = 0;
    } else {
        for (int c : source_classes) {
            bank.source_route[c] = static_cast<int>(bank.source_heads.size());
            bank.source_heads.push_back(
                make_decoder_head(fused_channels, stage_channels, "head.src" + std::to_string(c), rng));
        }
    }
    for (int c : target_classes) {
        bank.target_route[c] = static_cast<int>(bank.target_seg_heads.size());
        bank.target_seg_heads.push_back(
            make_decoder_head(fused_channels, stage_channels, "head.tgt_seg" + std::to_string(c), rng));
        bank.target_pseudo_heads.push_back(
            make_pseudo_head(fused_channels[3], "head.tgt_pseudo" + std::to_string(c), rng));
    }
    return bank;
}

} // namespace nexvitad
