#include "nexvitad/ops.hpp"

#include <algorithm>
#include <cmath>

namespace nexvitad {

namespace {

constexpr real kInvSqrt2 = 0.7071067811865475244;
constexpr real kInvSqrt2Pi = 0.3989422804014326779;

struct ConvGeom {
    int batch, in_h, in_w, c_in;
    int kh, kw, c_out;
    int out_h, out_w;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& k, int stride, int pad) {
    if (x.rank() != 4) throw_shape("conv2d input must be (b,h,w,c), got " + dims_to_string(x.dims));
    if (k.rank() != 4) throw_shape("conv2d kernel must be (kh,kw,c_in,c_out), got " + dims_to_string(k.dims));
    if (stride < 1) throw_config("conv2d stride must be >= 1");
    if (pad < 0) throw_config("conv2d pad must be >= 0");
    ConvGeom g;
    g.batch = x.dim(0);
    g.in_h = x.dim(1);
    g.in_w = x.dim(2);
    g.c_in = x.dim(3);
    g.kh = k.dim(0);
    g.kw = k.dim(1);
    g.c_out = k.dim(3);
    if (k.dim(2) != g.c_in) {
        throw_shape("conv2d channel mismatch: input " + dims_to_string(x.dims) + " vs kernel " +
                    dims_to_string(k.dims));
    }
    if (g.kh > g.in_h + 2 * pad || g.kw > g.in_w + 2 * pad) {
        throw_shape("conv2d kernel " + dims_to_string(k.dims) + " larger than padded input " +
                    dims_to_string(x.dims));
    }
    g.out_h = (g.in_h + 2 * pad - g.kh) / stride + 1;
    g.out_w = (g.in_w + 2 * pad - g.kw) / stride + 1;
    return g;
}

// Gather the receptive fields of one batch element into rows of
// (out_h*out_w, kh*kw*c_in); out-of-bounds taps are zero.
void im2col(const Tensor& x, int b, const ConvGeom& g, int stride, int pad, real* cols) {
    const int patch = g.kh * g.kw * g.c_in;
    const real* src = x.data.data() + static_cast<std::size_t>(b) * g.in_h * g.in_w * g.c_in;
    std::fill(cols, cols + static_cast<std::size_t>(g.out_h) * g.out_w * patch, 0.0);
    for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
            real* row = cols + (static_cast<std::size_t>(oy) * g.out_w + ox) * patch;
            for (int ky = 0; ky < g.kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= g.in_h) continue;
                for (int kx = 0; kx < g.kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= g.in_w) continue;
                    const real* px = src + (static_cast<std::size_t>(iy) * g.in_w + ix) * g.c_in;
                    real* dst = row + (ky * g.kw + kx) * g.c_in;
                    for (int c = 0; c < g.c_in; ++c) dst[c] = px[c];
                }
            }
        }
    }
}

// Scatter-add column rows back into the (h,w,c) plane of batch element b.
void col2im_acc(const real* cols, int b, const ConvGeom& g, int stride, int pad, Tensor* x) {
    const int patch = g.kh * g.kw * g.c_in;
    real* dst_base = x->data.data() + static_cast<std::size_t>(b) * g.in_h * g.in_w * g.c_in;
    for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
            const real* row = cols + (static_cast<std::size_t>(oy) * g.out_w + ox) * patch;
            for (int ky = 0; ky < g.kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= g.in_h) continue;
                for (int kx = 0; kx < g.kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= g.in_w) continue;
                    real* px = dst_base + (static_cast<std::size_t>(iy) * g.in_w + ix) * g.c_in;
                    const real* srcp = row + (ky * g.kw + kx) * g.c_in;
                    for (int c = 0; c < g.c_in; ++c) px[c] += srcp[c];
                }
            }
        }
    }
}

struct ResizeTap {
    int lo, hi;
    real w_hi; // weight on hi; 1 - w_hi on lo
};

std::vector<ResizeTap> resize_taps(int in_n, int out_n) {
    std::vector<ResizeTap> taps(static_cast<std::size_t>(out_n));
    for (int d = 0; d < out_n; ++d) {
        real src = (out_n > 1) ? static_cast<real>(d) * (in_n - 1) / (out_n - 1) : 0.0;
        int lo = static_cast<int>(std::floor(src));
        if (lo > in_n - 1) lo = in_n - 1;
        int hi = std::min(lo + 1, in_n - 1);
        taps[static_cast<std::size_t>(d)] = {lo, hi, src - lo};
    }
    return taps;
}

void resize_plane(const real* src, int in_w, real* dst, const std::vector<ResizeTap>& ty,
                  const std::vector<ResizeTap>& tx) {
    const int out_h = static_cast<int>(ty.size());
    const int out_w = static_cast<int>(tx.size());
    for (int y = 0; y < out_h; ++y) {
        const ResizeTap& a = ty[static_cast<std::size_t>(y)];
        const real* r0 = src + static_cast<std::size_t>(a.lo) * in_w;
        const real* r1 = src + static_cast<std::size_t>(a.hi) * in_w;
        for (int x = 0; x < out_w; ++x) {
            const ResizeTap& b = tx[static_cast<std::size_t>(x)];
            const real top = r0[b.lo] * (1 - b.w_hi) + r0[b.hi] * b.w_hi;
            const real bot = r1[b.lo] * (1 - b.w_hi) + r1[b.hi] * b.w_hi;
            dst[static_cast<std::size_t>(y) * out_w + x] = top * (1 - a.w_hi) + bot * a.w_hi;
        }
    }
}

void resize_plane_backward(const real* grad_dst, int in_w, real* grad_src,
                           const std::vector<ResizeTap>& ty, const std::vector<ResizeTap>& tx) {
    const int out_h = static_cast<int>(ty.size());
    const int out_w = static_cast<int>(tx.size());
    for (int y = 0; y < out_h; ++y) {
        const ResizeTap& a = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < out_w; ++x) {
            const ResizeTap& b = tx[static_cast<std::size_t>(x)];
            const real g = grad_dst[static_cast<std::size_t>(y) * out_w + x];
            grad_src[static_cast<std::size_t>(a.lo) * in_w + b.lo] += g * (1 - a.w_hi) * (1 - b.w_hi);
            grad_src[static_cast<std::size_t>(a.lo) * in_w + b.hi] += g * (1 - a.w_hi) * b.w_hi;
            grad_src[static_cast<std::size_t>(a.hi) * in_w + b.lo] += g * a.w_hi * (1 - b.w_hi);
            grad_src[static_cast<std::size_t>(a.hi) * in_w + b.hi] += g * a.w_hi * b.w_hi;
        }
    }
}

int reflect_index(int i, int n) {
    // symmetric reflection including the border pixel: -1 -> 0, n -> n-1
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

} // namespace

namespace {

#if defined(__GNUC__)
typedef real v4df __attribute__((vector_size(32), may_alias, aligned(8)));
#define NEXVITAD_SIMD_MM 1
#endif

// generic fallback covering ragged edges (and non-GCC builds)
inline void mm_edge(const real* a, std::size_t a_stride, const real* b, std::size_t b_stride, real* c,
                    std::size_t c_stride, int i0, int i1, int j0, int j1, int k) {
    for (int i = i0; i < i1; ++i) {
        real* crow = c + static_cast<std::size_t>(i) * c_stride;
        for (int p = 0; p < k; ++p) {
            const real av = a[static_cast<std::size_t>(i) * a_stride + p];
            const real* brow = b + static_cast<std::size_t>(p) * b_stride;
            for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
    }
}

#ifdef NEXVITAD_SIMD_MM

// 2x16 register-blocked core: two rows of four 256-bit accumulators stay in
// registers across the whole k sweep; b rows are contiguous vector loads
inline void mm_block_2x16(const real* a0, const real* a1, const real* b, std::size_t b_stride, real* c0,
                          real* c1, int k) {
    v4df acc00{}, acc01{}, acc02{}, acc03{};
    v4df acc10{}, acc11{}, acc12{}, acc13{};
    const real* bb = b;
    for (int p = 0; p < k; ++p) {
        const v4df b0 = *reinterpret_cast<const v4df*>(bb);
        const v4df b1 = *reinterpret_cast<const v4df*>(bb + 4);
        const v4df b2 = *reinterpret_cast<const v4df*>(bb + 8);
        const v4df b3 = *reinterpret_cast<const v4df*>(bb + 12);
        const real s0 = a0[p], s1 = a1[p];
        const v4df av0 = {s0, s0, s0, s0};
        const v4df av1 = {s1, s1, s1, s1};
        acc00 += av0 * b0;
        acc01 += av0 * b1;
        acc02 += av0 * b2;
        acc03 += av0 * b3;
        acc10 += av1 * b0;
        acc11 += av1 * b1;
        acc12 += av1 * b2;
        acc13 += av1 * b3;
        bb += b_stride;
    }
    *reinterpret_cast<v4df*>(c0) += acc00;
    *reinterpret_cast<v4df*>(c0 + 4) += acc01;
    *reinterpret_cast<v4df*>(c0 + 8) += acc02;
    *reinterpret_cast<v4df*>(c0 + 12) += acc03;
    *reinterpret_cast<v4df*>(c1) += acc10;
    *reinterpret_cast<v4df*>(c1 + 4) += acc11;
    *reinterpret_cast<v4df*>(c1 + 8) += acc12;
    *reinterpret_cast<v4df*>(c1 + 12) += acc13;
}

#endif // NEXVITAD_SIMD_MM

void mm_strided_acc(const real* a, std::size_t a_stride, const real* b, real* c, int m, int k, int n) {
#ifdef NEXVITAD_SIMD_MM
    constexpr int MR = 2, NR = 16;
    const int m_main = m - m % MR;
    const int n_main = n - n % NR;
    for (int j = 0; j < n_main; j += NR) {
        for (int i = 0; i < m_main; i += MR) {
            mm_block_2x16(a + static_cast<std::size_t>(i) * a_stride, a + static_cast<std::size_t>(i + 1) * a_stride,
                          b + j, static_cast<std::size_t>(n), c + static_cast<std::size_t>(i) * n + j,
                          c + static_cast<std::size_t>(i + 1) * n + j, k);
        }
    }
    if (n_main < n) mm_edge(a, a_stride, b, n, c, n, 0, m_main, n_main, n, k);
    if (m_main < m) mm_edge(a, a_stride, b, n, c, n, m_main, m, 0, n, k);
#else
    mm_edge(a, a_stride, b, n, c, n, 0, m, 0, n, k);
#endif
}

// aT variant: logical a is (m, k) but stored transposed as (k, m) -- rows of
// the output are reduced over i
void mm_at_strided_acc(const real* a_t, std::size_t a_rows, const real* b, real* c, int m, int k, int n) {
    (void)a_rows;
#ifdef NEXVITAD_SIMD_MM
    constexpr int MR = 2, NR = 16;
    const int k_main = k - k % MR;
    const int n_main = n - n % NR;
    for (int p = 0; p < k_main; p += MR) {
        for (int j = 0; j < n_main; j += NR) {
            v4df acc00{}, acc01{}, acc02{}, acc03{};
            v4df acc10{}, acc11{}, acc12{}, acc13{};
            for (int i = 0; i < m; ++i) {
                const real* arow = a_t + static_cast<std::size_t>(i) * k + p;
                const real* brow = b + static_cast<std::size_t>(i) * n + j;
                const v4df b0 = *reinterpret_cast<const v4df*>(brow);
                const v4df b1 = *reinterpret_cast<const v4df*>(brow + 4);
                const v4df b2 = *reinterpret_cast<const v4df*>(brow + 8);
                const v4df b3 = *reinterpret_cast<const v4df*>(brow + 12);
                const real s0 = arow[0], s1 = arow[1];
                const v4df av0 = {s0, s0, s0, s0};
                const v4df av1 = {s1, s1, s1, s1};
                acc00 += av0 * b0;
                acc01 += av0 * b1;
                acc02 += av0 * b2;
                acc03 += av0 * b3;
                acc10 += av1 * b0;
                acc11 += av1 * b1;
                acc12 += av1 * b2;
                acc13 += av1 * b3;
            }
            real* c0 = c + static_cast<std::size_t>(p) * n + j;
            real* c1 = c0 + n;
            *reinterpret_cast<v4df*>(c0) += acc00;
            *reinterpret_cast<v4df*>(c0 + 4) += acc01;
            *reinterpret_cast<v4df*>(c0 + 8) += acc02;
            *reinterpret_cast<v4df*>(c0 + 12) += acc03;
            *reinterpret_cast<v4df*>(c1) += acc10;
            *reinterpret_cast<v4df*>(c1 + 4) += acc11;
            *reinterpret_cast<v4df*>(c1 + 8) += acc12;
            *reinterpret_cast<v4df*>(c1 + 12) += acc13;
        }
        if (n_main < n) {
            for (int i = 0; i < m; ++i) {
                const real* arow = a_t + static_cast<std::size_t>(i) * k;
                const real* brow = b + static_cast<std::size_t>(i) * n;
                for (int pp = 0; pp < MR; ++pp) {
                    real* crow = c + static_cast<std::size_t>(p + pp) * n;
                    const real av = arow[p + pp];
                    for (int j = n_main; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        }
    }
    const int k_tail = k_main;
#else
    const int k_tail = 0;
#endif
    for (int i = 0; i < m; ++i) {
        const real* arow = a_t + static_cast<std::size_t>(i) * k;
        const real* brow = b + static_cast<std::size_t>(i) * n;
        for (int p = k_tail; p < k; ++p) {
            real* crow = c + static_cast<std::size_t>(p) * n;
            const real av = arow[p];
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace

void matmul_acc(const real* a, const real* b, real* c, int m, int k, int n) {
    mm_strided_acc(a, static_cast<std::size_t>(k), b, c, m, k, n);
}

void matmul_at_b_acc(const real* a, const real* b, real* c, int m, int k, int n) {
    mm_at_strided_acc(a, static_cast<std::size_t>(m), b, c, m, k, n);
}

void matmul_a_bt_acc(const real* a, const real* b, real* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const real* arow = a + static_cast<std::size_t>(i) * n;
        real* crow = c + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const real* brow = b + static_cast<std::size_t>(p) * n;
            real acc = 0.0;
            for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2) throw_shape("affine weight must be rank 2, got " + dims_to_string(w.dims));
    if (b.rank() != 1 || b.dim(0) != w.dim(1)) {
        throw_shape("affine bias " + dims_to_string(b.dims) + " incompatible with weight " + dims_to_string(w.dims));
    }
    const int d_in = w.dim(0);
    const int d_out = w.dim(1);
    if (x.dims.back() != d_in) {
        throw_shape("affine input " + dims_to_string(x.dims) + " vs weight " + dims_to_string(w.dims));
    }
    const int rows = static_cast<int>(x.size()) / d_in;
    std::vector<int> out_dims = x.dims;
    out_dims.back() = d_out;
    Tensor y(out_dims);
    for (int i = 0; i < rows; ++i) {
        real* yrow = y.data.data() + static_cast<std::size_t>(i) * d_out;
        for (int j = 0; j < d_out; ++j) yrow[j] = b.at(j);
    }
    matmul_acc(x.data.data(), w.data.data(), y.data.data(), rows, d_in, d_out);
    return y;
}

void affine_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, Tensor* grad_x,
                     Tensor* grad_w, Tensor* grad_b) {
    const int d_in = w.dim(0);
    const int d_out = w.dim(1);
    const int rows = static_cast<int>(x.size()) / d_in;
    if (grad_x) {
        std::vector<real> w_t(static_cast<std::size_t>(d_in) * d_out);
        for (int i = 0; i < d_in; ++i) {
            for (int j = 0; j < d_out; ++j) {
                w_t[static_cast<std::size_t>(j) * d_in + i] = w.data[static_cast<std::size_t>(i) * d_out + j];
            }
        }
        matmul_acc(grad_out.data.data(), w_t.data(), grad_x->data.data(), rows, d_out, d_in);
    }
    if (grad_w) matmul_at_b_acc(x.data.data(), grad_out.data.data(), grad_w->data.data(), rows, d_in, d_out);
    if (grad_b) {
        for (int i = 0; i < rows; ++i) {
            const real* grow = grad_out.data.data() + static_cast<std::size_t>(i) * d_out;
            for (int j = 0; j < d_out; ++j) grad_b->at(j) += grow[j];
        }
    }
}

Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor* bias, int stride, int pad) {
    const ConvGeom g = conv_geometry(x, k, stride, pad);
    if (bias && (bias->rank() != 1 || bias->dim(0) != g.c_out)) {
        throw_shape("conv2d bias " + dims_to_string(bias->dims) + " vs kernel " + dims_to_string(k.dims));
    }
    Tensor y({g.batch, g.out_h, g.out_w, g.c_out});
    const int patch = g.kh * g.kw * g.c_in;
    const int rows = g.out_h * g.out_w;
    std::vector<real> cols(static_cast<std::size_t>(rows) * patch);
    for (int b = 0; b < g.batch; ++b) {
        im2col(x, b, g, stride, pad, cols.data());
        real* ybase = y.data.data() + static_cast<std::size_t>(b) * rows * g.c_out;
        if (bias) {
            for (int r = 0; r < rows; ++r) {
                for (int c = 0; c < g.c_out; ++c) ybase[static_cast<std::size_t>(r) * g.c_out + c] = bias->at(c);
            }
        }
        matmul_acc(cols.data(), k.data.data(), ybase, rows, patch, g.c_out);
    }
    return y;
}

void conv2d_backward(const Tensor& x, const Tensor& k, const Tensor& grad_out, int stride, int pad,
                     Tensor* grad_x, Tensor* grad_k, Tensor* grad_bias) {
    const ConvGeom g = conv_geometry(x, k, stride, pad);
    const int patch = g.kh * g.kw * g.c_in;
    const int rows = g.out_h * g.out_w;
    std::vector<real> cols(static_cast<std::size_t>(rows) * patch);
    std::vector<real> cols_grad;
    std::vector<real> k_t; // kernel transposed to (c_out, patch) keeps the
                           // grad_x matmul on contiguous rows
    if (grad_x) {
        cols_grad.resize(static_cast<std::size_t>(rows) * patch);
        k_t.resize(static_cast<std::size_t>(patch) * g.c_out);
        for (int p = 0; p < patch; ++p) {
            for (int c = 0; c < g.c_out; ++c) {
                k_t[static_cast<std::size_t>(c) * patch + p] = k.data[static_cast<std::size_t>(p) * g.c_out + c];
            }
        }
    }
    for (int b = 0; b < g.batch; ++b) {
        const real* gbase = grad_out.data.data() + static_cast<std::size_t>(b) * rows * g.c_out;
        if (grad_k) {
            im2col(x, b, g, stride, pad, cols.data());
            matmul_at_b_acc(cols.data(), gbase, grad_k->data.data(), rows, patch, g.c_out);
        }
        if (grad_x) {
            std::fill(cols_grad.begin(), cols_grad.end(), 0.0);
            matmul_acc(gbase, k_t.data(), cols_grad.data(), rows, g.c_out, patch);
            col2im_acc(cols_grad.data(), b, g, stride, pad, grad_x);
        }
        if (grad_bias) {
            for (int r = 0; r < rows; ++r) {
                for (int c = 0; c < g.c_out; ++c) grad_bias->at(c) += gbase[static_cast<std::size_t>(r) * g.c_out + c];
            }
        }
    }
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& k, const Tensor* bias, int stride) {
    if (x.rank() != 4) throw_shape("conv_transpose2d input must be (b,h,w,c), got " + dims_to_string(x.dims));
    if (k.rank() != 4) throw_shape("conv_transpose2d kernel must be (kh,kw,c_in,c_out), got " + dims_to_string(k.dims));
    if (stride < 1) throw_config("conv_transpose2d stride must be >= 1");
    const int batch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
    const int kh = k.dim(0), kw = k.dim(1), c_emit = k.dim(2), c_feed = k.dim(3);
    if (x.dim(3) != c_feed) {
        throw_shape("conv_transpose2d channel mismatch: input " + dims_to_string(x.dims) + " vs kernel " +
                    dims_to_string(k.dims));
    }
    const int out_h = (in_h - 1) * stride + kh;
    const int out_w = (in_w - 1) * stride + kw;
    Tensor y({batch, out_h, out_w, c_emit});
    if (bias) {
        if (bias->rank() != 1 || bias->dim(0) != c_emit) {
            throw_shape("conv_transpose2d bias " + dims_to_string(bias->dims) + " vs kernel " + dims_to_string(k.dims));
        }
        for (int b = 0; b < batch; ++b) {
            real* ybase = y.data.data() + static_cast<std::size_t>(b) * out_h * out_w * c_emit;
            for (int p = 0; p < out_h * out_w; ++p) {
                for (int c = 0; c < c_emit; ++c) ybase[static_cast<std::size_t>(p) * c_emit + c] = bias->at(c);
            }
        }
    }
    // one matmul against the kernel permuted to (c_feed, kh*kw*c_emit),
    // then a scatter of each row's kh x kw patch
    const int taps = kh * kw;
    std::vector<real> k_perm(static_cast<std::size_t>(c_feed) * taps * c_emit);
    for (int t = 0; t < taps; ++t) {
        for (int e = 0; e < c_emit; ++e) {
            const real* src = k.data.data() + (static_cast<std::size_t>(t) * c_emit + e) * c_feed;
            for (int f = 0; f < c_feed; ++f) {
                k_perm[(static_cast<std::size_t>(f) * taps + t) * c_emit + e] = src[f];
            }
        }
    }
    const int rows = in_h * in_w;
    std::vector<real> patches(static_cast<std::size_t>(rows) * taps * c_emit);
    for (int b = 0; b < batch; ++b) {
        std::fill(patches.begin(), patches.end(), 0.0);
        matmul_acc(x.data.data() + static_cast<std::size_t>(b) * rows * c_feed, k_perm.data(), patches.data(),
                   rows, c_feed, taps * c_emit);
        real* ybase = y.data.data() + static_cast<std::size_t>(b) * out_h * out_w * c_emit;
        for (int iy = 0; iy < in_h; ++iy) {
            for (int ix = 0; ix < in_w; ++ix) {
                const real* prow = patches.data() + (static_cast<std::size_t>(iy) * in_w + ix) * taps * c_emit;
                for (int ky = 0; ky < kh; ++ky) {
                    real* orow = ybase + (static_cast<std::size_t>(iy * stride + ky) * out_w + ix * stride) * c_emit;
                    for (int kx = 0; kx < kw; ++kx) {
                        const real* ppix = prow + static_cast<std::size_t>(ky * kw + kx) * c_emit;
                        real* opix = orow + static_cast<std::size_t>(kx) * c_emit;
                        for (int e = 0; e < c_emit; ++e) opix[e] += ppix[e];
                    }
                }
            }
        }
    }
    return y;
}

void conv_transpose2d_backward(const Tensor& x, const Tensor& k, const Tensor& grad_out, int stride,
                               Tensor* grad_x, Tensor* grad_k, Tensor* grad_bias) {
    const int batch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
    const int kh = k.dim(0), kw = k.dim(1), c_emit = k.dim(2), c_feed = k.dim(3);
    const int out_h = (in_h - 1) * stride + kh;
    const int out_w = (in_w - 1) * stride + kw;
    const int taps = kh * kw;
    const int rows = in_h * in_w;
    // gathered (rows, taps*c_emit) output-grad patches recast both grads as
    // matmuls against the kernel's natural (taps*c_emit, c_feed) layout
    std::vector<real> patches(static_cast<std::size_t>(rows) * taps * c_emit);
    for (int b = 0; b < batch; ++b) {
        const real* gbase = grad_out.data.data() + static_cast<std::size_t>(b) * out_h * out_w * c_emit;
        for (int iy = 0; iy < in_h; ++iy) {
            for (int ix = 0; ix < in_w; ++ix) {
                real* prow = patches.data() + (static_cast<std::size_t>(iy) * in_w + ix) * taps * c_emit;
                for (int ky = 0; ky < kh; ++ky) {
                    const real* grow = gbase + (static_cast<std::size_t>(iy * stride + ky) * out_w + ix * stride) * c_emit;
                    for (int kx = 0; kx < kw; ++kx) {
                        const real* gpix = grow + static_cast<std::size_t>(kx) * c_emit;
                        real* ppix = prow + static_cast<std::size_t>(ky * kw + kx) * c_emit;
                        for (int e = 0; e < c_emit; ++e) ppix[e] = gpix[e];
                    }
                }
            }
        }
        if (grad_x) {
            matmul_acc(patches.data(), k.data.data(),
                       grad_x->data.data() + static_cast<std::size_t>(b) * rows * c_feed, rows, taps * c_emit,
                       c_feed);
        }
        if (grad_k) {
            matmul_at_b_acc(patches.data(), x.data.data() + static_cast<std::size_t>(b) * rows * c_feed,
                            grad_k->data.data(), rows, taps * c_emit, c_feed);
        }
        if (grad_bias) {
            for (int p = 0; p < out_h * out_w; ++p) {
                for (int c = 0; c < c_emit; ++c) grad_bias->at(c) += gbase[static_cast<std::size_t>(p) * c_emit + c];
            }
        }
    }
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps, BnMode mode,
                   Tensor& running_mean, Tensor& running_var, real momentum, bool update_running,
                   BatchNormCache* cache) {
    if (x.rank() != 4) throw_shape("batchnorm2d input must be (b,h,w,c), got " + dims_to_string(x.dims));
    const int c = x.dim(3);
    if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
        throw_shape("batchnorm2d gamma/beta length must equal channel count " + std::to_string(c));
    }
    if (eps <= 0.0) throw_config("batchnorm2d eps must be > 0");
    const int rows = static_cast<int>(x.size()) / c;
    Tensor y(x.dims);
    std::vector<real> mean(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
    if (mode == BnMode::Train) {
        for (int r = 0; r < rows; ++r) {
            const real* px = x.data.data() + static_cast<std::size_t>(r) * c;
            for (int j = 0; j < c; ++j) mean[static_cast<std::size_t>(j)] += px[j];
        }
        for (int j = 0; j < c; ++j) mean[static_cast<std::size_t>(j)] /= rows;
        for (int r = 0; r < rows; ++r) {
            const real* px = x.data.data() + static_cast<std::size_t>(r) * c;
            for (int j = 0; j < c; ++j) {
                const real d = px[j] - mean[static_cast<std::size_t>(j)];
                var[static_cast<std::size_t>(j)] += d * d;
            }
        }
        for (int j = 0; j < c; ++j) var[static_cast<std::size_t>(j)] /= rows;
        if (update_running) {
            const real unbias = rows > 1 ? static_cast<real>(rows) / (rows - 1) : 1.0;
            for (int j = 0; j < c; ++j) {
                running_mean.at(j) = (1 - momentum) * running_mean.at(j) + momentum * mean[static_cast<std::size_t>(j)];
                running_var.at(j) =
                    (1 - momentum) * running_var.at(j) + momentum * var[static_cast<std::size_t>(j)] * unbias;
            }
        }
    } else {
        for (int j = 0; j < c; ++j) {
            mean[static_cast<std::size_t>(j)] = running_mean.at(j);
            var[static_cast<std::size_t>(j)] = running_var.at(j);
        }
    }
    std::vector<real> inv_std(static_cast<std::size_t>(c));
    for (int j = 0; j < c; ++j) inv_std[static_cast<std::size_t>(j)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(j)] + eps);
    if (cache) {
        cache->x_hat = Tensor(x.dims);
        cache->inv_std = inv_std;
        cache->rows = rows;
    }
    for (int r = 0; r < rows; ++r) {
        const real* px = x.data.data() + static_cast<std::size_t>(r) * c;
        real* py = y.data.data() + static_cast<std::size_t>(r) * c;
        real* ph = cache ? cache->x_hat.data.data() + static_cast<std::size_t>(r) * c : nullptr;
        for (int j = 0; j < c; ++j) {
            const real xh = (px[j] - mean[static_cast<std::size_t>(j)]) * inv_std[static_cast<std::size_t>(j)];
            if (ph) ph[j] = xh;
            py[j] = gamma.at(j) * xh + beta.at(j);
        }
    }
    return y;
}

void batchnorm2d_backward(const BatchNormCache& cache, const Tensor& gamma, const Tensor& grad_out,
                          Tensor* grad_x, Tensor* grad_gamma, Tensor* grad_beta) {
    const int c = cache.x_hat.dims.back();
    const int rows = cache.rows;
    std::vector<real> sum_g(static_cast<std::size_t>(c), 0.0), sum_gx(static_cast<std::size_t>(c), 0.0);
    for (int r = 0; r < rows; ++r) {
        const real* pg = grad_out.data.data() + static_cast<std::size_t>(r) * c;
        const real* ph = cache.x_hat.data.data() + static_cast<std::size_t>(r) * c;
        for (int j = 0; j < c; ++j) {
            sum_g[static_cast<std::size_t>(j)] += pg[j];
            sum_gx[static_cast<std::size_t>(j)] += pg[j] * ph[j];
        }
    }
    if (grad_gamma) {
        for (int j = 0; j < c; ++j) grad_gamma->at(j) += sum_gx[static_cast<std::size_t>(j)];
    }
    if (grad_beta) {
        for (int j = 0; j < c; ++j) grad_beta->at(j) += sum_g[static_cast<std::size_t>(j)];
    }
    if (grad_x) {
        // dx = gamma*inv_std/n * (n*dy - sum(dy) - x_hat*sum(dy*x_hat))
        for (int r = 0; r < rows; ++r) {
            const real* pg = grad_out.data.data() + static_cast<std::size_t>(r) * c;
            const real* ph = cache.x_hat.data.data() + static_cast<std::size_t>(r) * c;
            real* px = grad_x->data.data() + static_cast<std::size_t>(r) * c;
            for (int j = 0; j < c; ++j) {
                const std::size_t sj = static_cast<std::size_t>(j);
                px[j] += gamma.at(j) * cache.inv_std[sj] / rows *
                         (rows * pg[j] - sum_g[sj] - ph[j] * sum_gx[sj]);
            }
        }
    }
}

real gelu_scalar(real x) { return x * 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }

Tensor gelu(const Tensor& x) {
    Tensor y(x.dims);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = gelu_scalar(x.data[i]);
    return y;
}

void gelu_backward(const Tensor& x, const Tensor& grad_out, Tensor* grad_x) {
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const real v = x.data[i];
        const real cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const real pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        grad_x->data[i] += grad_out.data[i] * (cdf + v * pdf);
    }
}

Tensor relu(const Tensor& x) {
    Tensor y(x.dims);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    return y;
}

void relu_backward(const Tensor& x, const Tensor& grad_out, Tensor* grad_x) {
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        if (x.data[i] > 0.0) grad_x->data[i] += grad_out.data[i];
    }
}

Tensor softmax_channel(const Tensor& logits) {
    if (logits.rank() != 3 && logits.rank() != 4) {
        throw_shape("softmax_channel expects (c,h,w) or (b,c,h,w), got " + dims_to_string(logits.dims));
    }
    const int batch = logits.rank() == 4 ? logits.dim(0) : 1;
    const int c = logits.rank() == 4 ? logits.dim(1) : logits.dim(0);
    const int hw = static_cast<int>(logits.size()) / (batch * c);
    Tensor p(logits.dims);
    for (int b = 0; b < batch; ++b) {
        const real* lb = logits.data.data() + static_cast<std::size_t>(b) * c * hw;
        real* pb = p.data.data() + static_cast<std::size_t>(b) * c * hw;
        for (int i = 0; i < hw; ++i) {
            real mx = lb[i];
            for (int j = 1; j < c; ++j) mx = std::max(mx, lb[static_cast<std::size_t>(j) * hw + i]);
            real z = 0.0;
            for (int j = 0; j < c; ++j) z += std::exp(lb[static_cast<std::size_t>(j) * hw + i] - mx);
            for (int j = 0; j < c; ++j) {
                pb[static_cast<std::size_t>(j) * hw + i] = std::exp(lb[static_cast<std::size_t>(j) * hw + i] - mx) / z;
            }
        }
    }
    return p;
}

void softmax_channel_backward(const Tensor& probs, const Tensor& grad_probs, Tensor* grad_logits) {
    const int batch = probs.rank() == 4 ? probs.dim(0) : 1;
    const int c = probs.rank() == 4 ? probs.dim(1) : probs.dim(0);
    const int hw = static_cast<int>(probs.size()) / (batch * c);
    for (int b = 0; b < batch; ++b) {
        const real* pb = probs.data.data() + static_cast<std::size_t>(b) * c * hw;
        const real* gb = grad_probs.data.data() + static_cast<std::size_t>(b) * c * hw;
        real* ob = grad_logits->data.data() + static_cast<std::size_t>(b) * c * hw;
        for (int i = 0; i < hw; ++i) {
            real dot = 0.0;
            for (int j = 0; j < c; ++j) {
                const std::size_t idx = static_cast<std::size_t>(j) * hw + i;
                dot += gb[idx] * pb[idx];
            }
            for (int j = 0; j < c; ++j) {
                const std::size_t idx = static_cast<std::size_t>(j) * hw + i;
                ob[idx] += pb[idx] * (gb[idx] - dot);
            }
        }
    }
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw_config("bilinear_resize target extents must be >= 1");
    if (x.rank() == 2) {
        const auto ty = resize_taps(x.dim(0), out_h);
        const auto tx = resize_taps(x.dim(1), out_w);
        Tensor y({out_h, out_w});
        resize_plane(x.data.data(), x.dim(1), y.data.data(), ty, tx);
        return y;
    }
    if (x.rank() == 3) {
        const int c = x.dim(0);
        const auto ty = resize_taps(x.dim(1), out_h);
        const auto tx = resize_taps(x.dim(2), out_w);
        Tensor y({c, out_h, out_w});
        for (int j = 0; j < c; ++j) {
            resize_plane(x.data.data() + static_cast<std::size_t>(j) * x.dim(1) * x.dim(2), x.dim(2),
                         y.data.data() + static_cast<std::size_t>(j) * out_h * out_w, ty, tx);
        }
        return y;
    }
    throw_shape("bilinear_resize expects (h,w) or (c,h,w), got " + dims_to_string(x.dims));
}

void bilinear_resize_backward(const Tensor& grad_out, int in_h, int in_w, Tensor* grad_x) {
    if (grad_out.rank() == 2) {
        const auto ty = resize_taps(in_h, grad_out.dim(0));
        const auto tx = resize_taps(in_w, grad_out.dim(1));
        resize_plane_backward(grad_out.data.data(), in_w, grad_x->data.data(), ty, tx);
        return;
    }
    const int c = grad_out.dim(0);
    const auto ty = resize_taps(in_h, grad_out.dim(1));
    const auto tx = resize_taps(in_w, grad_out.dim(2));
    for (int j = 0; j < c; ++j) {
        resize_plane_backward(grad_out.data.data() + static_cast<std::size_t>(j) * grad_out.dim(1) * grad_out.dim(2),
                              in_w, grad_x->data.data() + static_cast<std::size_t>(j) * in_h * in_w, ty, tx);
    }
}

Tensor bilinear_resize_nhwc(const Tensor& x, int out_h, int out_w) {
    if (x.rank() != 4) throw_shape("bilinear_resize_nhwc expects (b,h,w,c), got " + dims_to_string(x.dims));
    const int batch = x.dim(0), in_h = x.dim(1), in_w = x.dim(2), c = x.dim(3);
    const auto ty = resize_taps(in_h, out_h);
    const auto tx = resize_taps(in_w, out_w);
    Tensor y({batch, out_h, out_w, c});
    for (int b = 0; b < batch; ++b) {
        const real* src = x.data.data() + static_cast<std::size_t>(b) * in_h * in_w * c;
        real* dst = y.data.data() + static_cast<std::size_t>(b) * out_h * out_w * c;
        for (int oy = 0; oy < out_h; ++oy) {
            const ResizeTap& a = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const ResizeTap& t = tx[static_cast<std::size_t>(ox)];
                const real* p00 = src + (static_cast<std::size_t>(a.lo) * in_w + t.lo) * c;
                const real* p01 = src + (static_cast<std::size_t>(a.lo) * in_w + t.hi) * c;
                const real* p10 = src + (static_cast<std::size_t>(a.hi) * in_w + t.lo) * c;
                const real* p11 = src + (static_cast<std::size_t>(a.hi) * in_w + t.hi) * c;
                real* out = dst + (static_cast<std::size_t>(oy) * out_w + ox) * c;
                const real w00 = (1 - a.w_hi) * (1 - t.w_hi), w01 = (1 - a.w_hi) * t.w_hi;
                const real w10 = a.w_hi * (1 - t.w_hi), w11 = a.w_hi * t.w_hi;
                for (int j = 0; j < c; ++j) out[j] = w00 * p00[j] + w01 * p01[j] + w10 * p10[j] + w11 * p11[j];
            }
        }
    }
    return y;
}

std::vector<real> gaussian_kernel_1d(real sigma) {
    if (sigma <= 0.0) throw_config("gaussian_blur sigma must be > 0");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<real> kern(static_cast<std::size_t>(2 * radius + 1));
    real sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const real v = std::exp(-0.5 * i * i / (sigma * sigma));
        kern[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : kern) v /= sum;
    return kern;
}

Tensor gaussian_blur(const Tensor& x, real sigma) {
    if (x.rank() != 2) throw_shape("gaussian_blur expects (h,w), got " + dims_to_string(x.dims));
    const auto kern = gaussian_kernel_1d(sigma);
    const int radius = (static_cast<int>(kern.size()) - 1) / 2;
    const int h = x.dim(0), w = x.dim(1);
    Tensor tmp({h, w});
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            real acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
                acc += kern[static_cast<std::size_t>(t + radius)] * x.at(y, reflect_index(xx + t, w));
            }
            tmp.at(y, xx) = acc;
        }
    }
    Tensor out({h, w});
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            real acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
                acc += kern[static_cast<std::size_t>(t + radius)] * tmp.at(reflect_index(y + t, h), xx);
            }
            out.at(y, xx) = acc;
        }
    }
    return out;
}

} // namespace nexvitad
