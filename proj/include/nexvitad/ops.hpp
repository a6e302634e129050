#pragma once

#include <vector>

#include "nexvitad/tensor.hpp"

namespace nexvitad {

// ---------------------------------------------------------------------------
// Dense micro-kernel. All forward ops have hand-written analytic backwards;
// every grad_* output is ACCUMULATED into (callers zero grads up front).
// Feature maps are NHWC (b,h,w,c); logit/score maps are CHW (c,h,w).
// ---------------------------------------------------------------------------

// y[..., j] = sum_i x[..., i] * w[i,j] + b[j].  Leading dims of x are treated
// as flattened rows; w is (d_in, d_out), b is (d_out).
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
void affine_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, Tensor* grad_x,
                     Tensor* grad_w, Tensor* grad_b);

// Cross-correlation (no kernel flip). x (b,h,w,c_in), k (kh,kw,c_in,c_out),
// bias (c_out) optional (pass nullptr). Output spatial extent
// floor((h + 2*pad - kh)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor* bias, int stride, int pad);
void conv2d_backward(const Tensor& x, const Tensor& k, const Tensor& grad_out, int stride, int pad,
                     Tensor* grad_x, Tensor* grad_k, Tensor* grad_bias);

// Adjoint of conv2d (pad 0). Output spatial extent (h-1)*stride + kh.
// The kernel keeps conv2d's (kh,kw,c_in,c_out) layout: x carries c_out
// channels and the result carries c_in, so <conv2d(a,k), b> == <a,
// conv_transpose2d(b,k)> holds with the same kernel. bias has c_in entries.
Tensor conv_transpose2d(const Tensor& x, const Tensor& k, const Tensor* bias, int stride);
void conv_transpose2d_backward(const Tensor& x, const Tensor& k, const Tensor& grad_out, int stride,
                               Tensor* grad_x, Tensor* grad_k, Tensor* grad_bias);

enum class BnMode { Train, Eval };

struct BatchNormCache {
    Tensor x_hat;               // normalized activations, same dims as x
    std::vector<real> inv_std;  // per channel, 1/sqrt(var + eps)
    int rows = 0;               // b*h*w
};

// Per-channel batch normalization over (b,h,w). Train mode uses batch
// statistics and (optionally) updates running stats with the given momentum;
// eval mode uses the running stats. Backward is train-mode only.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps, BnMode mode,
                   Tensor& running_mean, Tensor& running_var, real momentum, bool update_running,
                   BatchNormCache* cache);
void batchnorm2d_backward(const BatchNormCache& cache, const Tensor& gamma, const Tensor& grad_out,
                          Tensor* grad_x, Tensor* grad_gamma, Tensor* grad_beta);

// gelu(x) = x * Phi(x) with Phi the standard normal CDF (erf form).
Tensor gelu(const Tensor& x);
void gelu_backward(const Tensor& x, const Tensor& grad_out, Tensor* grad_x);
real gelu_scalar(real x);

Tensor relu(const Tensor& x);
void relu_backward(const Tensor& x, const Tensor& grad_out, Tensor* grad_x);

// Softmax over the channel axis of a (c,h,w) or (b,c,h,w) logit tensor.
Tensor softmax_channel(const Tensor& logits);
void softmax_channel_backward(const Tensor& probs, const Tensor& grad_probs, Tensor* grad_logits);

// Corner-anchored bilinear interpolation: src = dst*(in-1)/(out-1) when
// out > 1. Rank 2 (h,w) and rank 3 (c,h,w).
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);
void bilinear_resize_backward(const Tensor& grad_out, int in_h, int in_w, Tensor* grad_x);

// Same sampling for NHWC feature maps (b,h,w,c).
Tensor bilinear_resize_nhwc(const Tensor& x, int out_h, int out_w);

// Separable Gaussian with kernel radius ceil(3*sigma), normalized to sum 1,
// reflect padding at the borders. x is (h,w).
Tensor gaussian_blur(const Tensor& x, real sigma);
std::vector<real> gaussian_kernel_1d(real sigma);

// Raw matmul cores shared by the ops above (row-major, accumulating).
void matmul_acc(const real* a, const real* b, real* c, int m, int k, int n);     // c[m,n] += a[m,k] b[k,n]
void matmul_at_b_acc(const real* a, const real* b, real* c, int m, int k, int n); // c[k,n] += a[m,k]^T b[m,n]
void matmul_a_bt_acc(const real* a, const real* b, real* c, int m, int n, int k); // c[m,k] += a[m,n] b[k,n]^T

} // namespace nexvitad
