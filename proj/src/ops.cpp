#include "ldp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ldp/error.hpp"

namespace ldp::ops {

namespace {

// ---------------------------------------------------------------------------
// GEMM kernels. Deterministic accumulation order: C[m][n] accumulates over k
// sequentially; the 4-way split in dot4 is a fixed reassociation.

inline float dot4(const float* __restrict a, const float* __restrict b, int k) {
    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
    int i = 0;
    for (; i + 4 <= k; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    float s = (s0 + s1) + (s2 + s3);
    for (; i < k; ++i) s += a[i] * b[i];
    return s;
}

// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(int M, int K, int N, const float* __restrict A, const float* __restrict B,
             float* __restrict C, bool accumulate) {
    for (int m = 0; m < M; ++m) {
        float* c = C + static_cast<size_t>(m) * N;
        if (!accumulate) std::fill(c, c + N, 0.f);
        const float* a = A + static_cast<size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const float av = a[k];
            if (av == 0.f) continue;
            const float* b = B + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

// C[M,N] (+)= A[M,K] * Bt[N,K]^T
void gemm_nt(int M, int K, int N, const float* __restrict A, const float* __restrict Bt,
             float* __restrict C, bool accumulate) {
    for (int m = 0; m < M; ++m) {
        const float* a = A + static_cast<size_t>(m) * K;
        float* c = C + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const float d = dot4(a, Bt + static_cast<size_t>(n) * K, K);
            c[n] = accumulate ? c[n] + d : d;
        }
    }
}

// C[M,N] (+)= At[K,M]^T * B[K,N]
void gemm_tn(int M, int K, int N, const float* __restrict At, const float* __restrict B,
             float* __restrict C, bool accumulate) {
    if (!accumulate)
        std::fill(C, C + static_cast<size_t>(M) * N, 0.f);
    for (int k = 0; k < K; ++k) {
        const float* a = At + static_cast<size_t>(k) * M;
        const float* b = B + static_cast<size_t>(k) * N;
        for (int m = 0; m < M; ++m) {
            const float av = a[m];
            if (av == 0.f) continue;
            float* c = C + static_cast<size_t>(m) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

bool tracing(std::initializer_list<const Tensor*> ins) {
    if (!GradTape::current()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

Tensor make_output(Shape shape, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    return t;
}

void record(const Tensor& out, std::function<void()> fn) {
    GradTape::current()->record(out.handle(), std::move(fn));
}

void accumulate_scaled(TensorNode& node, const std::vector<float>& g, float s) {
    node.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) node.grad[i] += s * g[i];
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()), " vs ",
            shape_str(b.shape()));
    const bool rg = tracing({&a, &b});
    Tensor out = make_output(a.shape(), rg);
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.mutable_data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    check_finite(out, "add");
    if (rg) {
        auto an = a.handle(), bn = b.handle(), on = out.handle();
        record(out, [an, bn, on] {
            if (an->requires_grad) an->accumulate_grad(on->grad.data(), on->grad.size());
            if (bn->requires_grad) bn->accumulate_grad(on->grad.data(), on->grad.size());
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch ", shape_str(a.shape()), " vs ",
            shape_str(b.shape()));
    const bool rg = tracing({&a, &b});
    Tensor out = make_output(a.shape(), rg);
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.mutable_data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    check_finite(out, "sub");
    if (rg) {
        auto an = a.handle(), bn = b.handle(), on = out.handle();
        record(out, [an, bn, on] {
            if (an->requires_grad) an->accumulate_grad(on->grad.data(), on->grad.size());
            if (bn->requires_grad) accumulate_scaled(*bn, on->grad, -1.f);
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()), " vs ",
            shape_str(b.shape()));
    const bool rg = tracing({&a, &b});
    Tensor out = make_output(a.shape(), rg);
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.mutable_data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    check_finite(out, "mul");
    if (rg) {
        auto an = a.handle(), bn = b.handle(), on = out.handle();
        record(out, [an, bn, on] {
            const auto& g = on->grad;
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->data[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, float s) {
    const bool rg = tracing({&a});
    Tensor out = make_output(a.shape(), rg);
    const float* pa = a.data();
    float* po = out.mutable_data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    check_finite(out, "scale");
    if (rg) {
        auto an = a.handle(), on = out.handle();
        record(out, [an, on, s] {
            if (an->requires_grad) accumulate_scaled(*an, on->grad, s);
        });
    }
    return out;
}

Tensor silu(const Tensor& x) {
    const bool rg = tracing({&x});
    Tensor out = make_output(x.shape(), rg);
    const float* px = x.data();
    float* po = out.mutable_data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const float s = 1.f / (1.f + std::exp(-px[i]));
        po[i] = px[i] * s;
    }
    check_finite(out, "silu");
    if (rg) {
        auto xn = x.handle(), on = out.handle();
        record(out, [xn, on] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const auto& g = on->grad;
            for (size_t i = 0; i < g.size(); ++i) {
                const float v = xn->data[i];
                const float s = 1.f / (1.f + std::exp(-v));
                xn->grad[i] += g[i] * (s * (1.f + v * (1.f - s)));
            }
        });
    }
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    require(x.rank() == 4, "add_channel_bias: x must be NCHW, got ", shape_str(x.shape()));
    require(bias.rank() == 2 && bias.dim(0) == x.dim(0) && bias.dim(1) == x.dim(1),
            "add_channel_bias: bias ", shape_str(bias.shape()), " incompatible with x ",
            shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const bool rg = tracing({&x, &bias});
    Tensor out = make_output(x.shape(), rg);
    const float* px = x.data();
    const float* pb = bias.data();
    float* po = out.mutable_data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float bv = pb[n * C + c];
            const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) po[base + i] = px[base + i] + bv;
        }
    check_finite(out, "add_channel_bias");
    if (rg) {
        auto xn = x.handle(), bn = bias.handle(), on = out.handle();
        record(out, [xn, bn, on, N, C, HW] {
            const auto& g = on->grad;
            if (xn->requires_grad) xn->accumulate_grad(g.data(), g.size());
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
                        float s = 0.f;
                        for (int i = 0; i < HW; ++i) s += g[base + i];
                        bn->grad[n * C + c] += s;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

// cols [Cin*Kh*Kw, Hout*Wout] for one sample.
void im2col(const float* x, int C, int H, int W, int Kh, int Kw, int stride, int pad,
            int Hout, int Wout, float* cols) {
    for (int c = 0; c < C; ++c)
        for (int kh = 0; kh < Kh; ++kh)
            for (int kw = 0; kw < Kw; ++kw) {
                float* row = cols + (static_cast<size_t>(c) * Kh * Kw + kh * Kw + kw) *
                                        (static_cast<size_t>(Hout) * Wout);
                for (int oh = 0; oh < Hout; ++oh) {
                    const int ih = oh * stride + kh - pad;
                    float* dst = row + static_cast<size_t>(oh) * Wout;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + Wout, 0.f);
                        continue;
                    }
                    const float* src = x + (static_cast<size_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < Wout; ++ow) {
                        const int iw = ow * stride + kw - pad;
                        dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.f;
                    }
                }
            }
}

void col2im_add(const float* cols, int C, int H, int W, int Kh, int Kw, int stride, int pad,
                int Hout, int Wout, float* dx) {
    for (int c = 0; c < C; ++c)
        for (int kh = 0; kh < Kh; ++kh)
            for (int kw = 0; kw < Kw; ++kw) {
                const float* row = cols + (static_cast<size_t>(c) * Kh * Kw + kh * Kw + kw) *
                                              (static_cast<size_t>(Hout) * Wout);
                for (int oh = 0; oh < Hout; ++oh) {
                    const int ih = oh * stride + kh - pad;
                    if (ih < 0 || ih >= H) continue;
                    float* dst = dx + (static_cast<size_t>(c) * H + ih) * W;
                    const float* src = row + static_cast<size_t>(oh) * Wout;
                    for (int ow = 0; ow < Wout; ++ow) {
                        const int iw = ow * stride + kw - pad;
                        if (iw >= 0 && iw < W) dst[iw] += src[ow];
                    }
                }
            }
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
    require(input.rank() == 4, "conv2d: input must be NCHW, got ", shape_str(input.shape()));
    require(weight.rank() == 4, "conv2d: weight must be [Cout,Cin,Kh,Kw], got ",
            shape_str(weight.shape()));
    require(stride >= 1 && padding >= 0, "conv2d: invalid stride ", stride, " / padding ",
            padding);
    const int N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Cout = weight.dim(0), Kh = weight.dim(2), Kw = weight.dim(3);
    require(weight.dim(1) == Cin, "conv2d: input channels ", Cin, " != weight Cin ",
            weight.dim(1), " (input ", shape_str(input.shape()), ", weight ",
            shape_str(weight.shape()), ")");
    require(bias.rank() == 1 && bias.dim(0) == Cout, "conv2d: bias must be [", Cout,
            "], got ", shape_str(bias.shape()));
    const int Hout = (H + 2 * padding - Kh) / stride + 1;
    const int Wout = (W + 2 * padding - Kw) / stride + 1;
    require(H + 2 * padding >= Kh && W + 2 * padding >= Kw && Hout >= 1 && Wout >= 1,
            "conv2d: kernel ", Kh, "x", Kw, " too large for input ", shape_str(input.shape()),
            " with padding ", padding);

    const bool rg = tracing({&input, &weight, &bias});
    Tensor out = make_output({N, Cout, Hout, Wout}, rg);
    const int ck = Cin * Kh * Kw;
    const int hw = Hout * Wout;
    std::vector<float> cols(static_cast<size_t>(ck) * hw);
    const float* px = input.data();
    float* po = out.mutable_data();
    const float* pw = weight.data();
    const float* pb = bias.data();
    for (int n = 0; n < N; ++n) {
        im2col(px + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, Kh, Kw, stride, padding,
               Hout, Wout, cols.data());
        float* on = po + static_cast<int64_t>(n) * Cout * hw;
        gemm_nn(Cout, ck, hw, pw, cols.data(), on, false);
        for (int c = 0; c < Cout; ++c) {
            const float bv = pb[c];
            float* dst = on + static_cast<size_t>(c) * hw;
            for (int i = 0; i < hw; ++i) dst[i] += bv;
        }
    }
    check_finite(out, "conv2d");

    if (rg) {
        auto xn = input.handle(), wn = weight.handle(), bn = bias.handle(), on = out.handle();
        record(out, [xn, wn, bn, on, N, Cin, H, W, Cout, Kh, Kw, stride, padding, Hout,
                     Wout] {
            const int ck = Cin * Kh * Kw;
            const int hw = Hout * Wout;
            std::vector<float> cols(static_cast<size_t>(ck) * hw);
            std::vector<float> dcols;
            const auto& g = on->grad;
            if (xn->requires_grad) {
                xn->ensure_grad();
                dcols.resize(cols.size());
            }
            if (wn->requires_grad) wn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* gn = g.data() + static_cast<int64_t>(n) * Cout * hw;
                if (wn->requires_grad || xn->requires_grad)
                    im2col(xn->data.data() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W,
                           Kh, Kw, stride, padding, Hout, Wout, cols.data());
                if (wn->requires_grad)
                    gemm_nt(Cout, hw, ck, gn, cols.data(), wn->grad.data(), true);
                if (bn->requires_grad)
                    for (int c = 0; c < Cout; ++c) {
                        float s = 0.f;
                        const float* row = gn + static_cast<size_t>(c) * hw;
                        for (int i = 0; i < hw; ++i) s += row[i];
                        bn->grad[c] += s;
                    }
                if (xn->requires_grad) {
                    gemm_tn(ck, Cout, hw, wn->data.data(), gn, dcols.data(), false);
                    col2im_add(dcols.data(), Cin, H, W, Kh, Kw, stride, padding, Hout, Wout,
                               xn->grad.data() + static_cast<int64_t>(n) * Cin * H * W);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling / resampling

Tensor avg_pool2d(const Tensor& input, int factor) {
    require(input.rank() == 4, "avg_pool2d: input must be NCHW, got ",
            shape_str(input.shape()));
    require(factor >= 1, "avg_pool2d: factor must be >= 1, got ", factor);
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    require(H % factor == 0 && W % factor == 0, "avg_pool2d: spatial dims ", H, "x", W,
            " not divisible by factor ", factor);
    const int Ho = H / factor, Wo = W / factor;
    const bool rg = tracing({&input});
    Tensor out = make_output({N, C, Ho, Wo}, rg);
    const float* px = input.data();
    float* po = out.mutable_data();
    const float inv = 1.f / (static_cast<float>(factor) * factor);
    for (int nc = 0; nc < N * C; ++nc) {
        const float* xp = px + static_cast<int64_t>(nc) * H * W;
        float* op = po + static_cast<int64_t>(nc) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh)
            for (int ow = 0; ow < Wo; ++ow) {
                float s = 0.f;
                for (int dh = 0; dh < factor; ++dh)
                    for (int dw = 0; dw < factor; ++dw)
                        s += xp[(oh * factor + dh) * W + ow * factor + dw];
                op[oh * Wo + ow] = s * inv;
            }
    }
    check_finite(out, "avg_pool2d");
    if (rg) {
        auto xnode = input.handle(), on = out.handle();
        record(out, [xnode, on, N, C, H, W, Ho, Wo, factor, inv] {
            if (!xnode->requires_grad) return;
            xnode->ensure_grad();
            const auto& g = on->grad;
            for (int nc = 0; nc < N * C; ++nc) {
                float* dx = xnode->grad.data() + static_cast<int64_t>(nc) * H * W;
                const float* gp = g.data() + static_cast<int64_t>(nc) * Ho * Wo;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        const float gv = gp[oh * Wo + ow] * inv;
                        for (int dh = 0; dh < factor; ++dh)
                            for (int dw = 0; dw < factor; ++dw)
                                dx[(oh * factor + dh) * W + ow * factor + dw] += gv;
                    }
            }
        });
    }
    return out;
}

Tensor upsample_nearest(const Tensor& input, int factor) {
    require(input.rank() == 4, "upsample_nearest: input must be NCHW, got ",
            shape_str(input.shape()));
    require(factor >= 1, "upsample_nearest: factor must be >= 1, got ", factor);
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Ho = H * factor, Wo = W * factor;
    const bool rg = tracing({&input});
    Tensor out = make_output({N, C, Ho, Wo}, rg);
    const float* px = input.data();
    float* po = out.mutable_data();
    for (int nc = 0; nc < N * C; ++nc) {
        const float* xp = px + static_cast<int64_t>(nc) * H * W;
        float* op = po + static_cast<int64_t>(nc) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
            const float* src = xp + (oh / factor) * W;
            float* dst = op + static_cast<int64_t>(oh) * Wo;
            for (int ow = 0; ow < Wo; ++ow) dst[ow] = src[ow / factor];
        }
    }
    check_finite(out, "upsample_nearest");
    if (rg) {
        auto xnode = input.handle(), on = out.handle();
        record(out, [xnode, on, N, C, H, W, Ho, Wo, factor] {
            if (!xnode->requires_grad) return;
            xnode->ensure_grad();
            const auto& g = on->grad;
            for (int nc = 0; nc < N * C; ++nc) {
                float* dx = xnode->grad.data() + static_cast<int64_t>(nc) * H * W;
                const float* gp = g.data() + static_cast<int64_t>(nc) * Ho * Wo;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow)
                        dx[(oh / factor) * W + ow / factor] +=
                            gp[static_cast<int64_t>(oh) * Wo + ow];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  float eps) {
    require(x.rank() == 4, "group_norm: input must be NCHW, got ", shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(groups >= 1 && C % groups == 0, "group_norm: channels ", C,
            " not divisible by groups ", groups);
    require(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 && beta.dim(0) == C,
            "group_norm: affine params must be [", C, "], got gamma ",
            shape_str(gamma.shape()), " beta ", shape_str(beta.shape()));
    const int cpg = C / groups;
    const int64_t gsize = static_cast<int64_t>(cpg) * H * W;
    const bool rg = tracing({&x, &gamma, &beta});
    Tensor out = make_output(x.shape(), rg);

    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    float* po = out.mutable_data();
    std::vector<float> means(static_cast<size_t>(N) * groups);
    std::vector<float> invstds(static_cast<size_t>(N) * groups);

    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const float* xp = px + (static_cast<int64_t>(n) * C + g * cpg) * H * W;
            double sum = 0.0, sq = 0.0;
            for (int64_t i = 0; i < gsize; ++i) {
                sum += xp[i];
                sq += static_cast<double>(xp[i]) * xp[i];
            }
            const double mean = sum / static_cast<double>(gsize);
            const double var = sq / static_cast<double>(gsize) - mean * mean;
            const float m = static_cast<float>(mean);
            const float inv = static_cast<float>(1.0 / std::sqrt(std::max(var, 0.0) + eps));
            means[n * groups + g] = m;
            invstds[n * groups + g] = inv;
            float* op = po + (static_cast<int64_t>(n) * C + g * cpg) * H * W;
            for (int c = 0; c < cpg; ++c) {
                const float gc = pg[g * cpg + c];
                const float bc = pb[g * cpg + c];
                const float* xc = xp + static_cast<int64_t>(c) * H * W;
                float* oc = op + static_cast<int64_t>(c) * H * W;
                for (int i = 0; i < H * W; ++i) oc[i] = (xc[i] - m) * inv * gc + bc;
            }
        }
    check_finite(out, "group_norm");

    if (rg) {
        auto xn = x.handle(), gn = gamma.handle(), bn = beta.handle(), on = out.handle();
        record(out, [xn, gn, bn, on, N, C, H, W, groups, cpg, gsize, means, invstds] {
            const auto& g = on->grad;
            const int hw = H * W;
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int gi = 0; gi < groups; ++gi) {
                    const int64_t base = (static_cast<int64_t>(n) * C + gi * cpg) * hw;
                    const float mean = means[n * groups + gi];
                    const float inv = invstds[n * groups + gi];
                    // dL/dgamma, dL/dbeta and the two per-group reductions.
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = 0; c < cpg; ++c) {
                        const float gc = gn->data[gi * cpg + c];
                        double dg = 0.0, db = 0.0;
                        for (int i = 0; i < hw; ++i) {
                            const int64_t idx = base + static_cast<int64_t>(c) * hw + i;
                            const float xhat = (xn->data[idx] - mean) * inv;
                            const float gv = g[idx];
                            dg += static_cast<double>(gv) * xhat;
                            db += gv;
                            const float dxhat = gv * gc;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += static_cast<double>(dxhat) * xhat;
                        }
                        if (gn->requires_grad) gn->grad[gi * cpg + c] += static_cast<float>(dg);
                        if (bn->requires_grad) bn->grad[gi * cpg + c] += static_cast<float>(db);
                    }
                    if (xn->requires_grad) {
                        const float mean_dxhat =
                            static_cast<float>(sum_dxhat / static_cast<double>(gsize));
                        const float mean_dxhat_xhat =
                            static_cast<float>(sum_dxhat_xhat / static_cast<double>(gsize));
                        for (int c = 0; c < cpg; ++c) {
                            const float gc = gn->data[gi * cpg + c];
                            for (int i = 0; i < hw; ++i) {
                                const int64_t idx = base + static_cast<int64_t>(c) * hw + i;
                                const float xhat = (xn->data[idx] - mean) * inv;
                                const float dxhat = g[idx] * gc;
                                xn->grad[idx] +=
                                    inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear / matmul family

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require(weight.rank() == 2, "linear: weight must be [out,in], got ",
            shape_str(weight.shape()));
    const int out_f = weight.dim(0), in_f = weight.dim(1);
    require(bias.rank() == 1 && bias.dim(0) == out_f, "linear: bias must be [", out_f,
            "], got ", shape_str(bias.shape()));
    const int r = x.rank();
    require(r >= 2 && r <= 4, "linear: input rank must be 2..4, got ", shape_str(x.shape()));

    const bool rg = tracing({&x, &weight, &bias});
    Tensor out;
    if (r == 4) {
        // Pointwise over channels: out[n] = W * x[n], x[n] viewed as [C, HW].
        const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
        require(C == in_f, "linear: channel dim ", C, " != weight in ", in_f, " (input ",
                shape_str(x.shape()), ")");
        out = make_output({N, out_f, x.dim(2), x.dim(3)}, rg);
        const float* px = x.data();
        float* po = out.mutable_data();
        for (int n = 0; n < N; ++n) {
            float* on = po + static_cast<int64_t>(n) * out_f * HW;
            gemm_nn(out_f, in_f, HW, weight.data(), px + static_cast<int64_t>(n) * C * HW, on,
                    false);
            for (int c = 0; c < out_f; ++c) {
                const float bv = bias.data()[c];
                float* dst = on + static_cast<size_t>(c) * HW;
                for (int i = 0; i < HW; ++i) dst[i] += bv;
            }
        }
    } else {
        const int64_t rows = x.numel() / x.dim(r - 1);
        require(x.dim(r - 1) == in_f, "linear: feature dim ", x.dim(r - 1), " != weight in ",
                in_f, " (input ", shape_str(x.shape()), ")");
        Shape os = x.shape();
        os[r - 1] = out_f;
        out = make_output(os, rg);
        gemm_nt(static_cast<int>(rows), in_f, out_f, x.data(), weight.data(),
                out.mutable_data(), false);
        float* po = out.mutable_data();
        for (int64_t i = 0; i < rows; ++i) {
            float* dst = po + i * out_f;
            for (int c = 0; c < out_f; ++c) dst[c] += bias.data()[c];
        }
    }
    check_finite(out, "linear");

    if (rg) {
        auto xn = x.handle(), wn = weight.handle(), bn = bias.handle(), on = out.handle();
        record(out, [xn, wn, bn, on, r, in_f, out_f] {
            const auto& g = on->grad;
            if (r == 4) {
                const int N = xn->shape[0];
                const int HW = xn->shape[2] * xn->shape[3];
                if (xn->requires_grad) xn->ensure_grad();
                if (wn->requires_grad) wn->ensure_grad();
                if (bn->requires_grad) bn->ensure_grad();
                for (int n = 0; n < N; ++n) {
                    const float* gn = g.data() + static_cast<int64_t>(n) * out_f * HW;
                    const float* xp = xn->data.data() + static_cast<int64_t>(n) * in_f * HW;
                    if (wn->requires_grad)
                        gemm_nt(out_f, HW, in_f, gn, xp, wn->grad.data(), true);
                    if (xn->requires_grad)
                        gemm_tn(in_f, out_f, HW, wn->data.data(), gn,
                                xn->grad.data() + static_cast<int64_t>(n) * in_f * HW, true);
                    if (bn->requires_grad)
                        for (int c = 0; c < out_f; ++c) {
                            float s = 0.f;
                            const float* row = gn + static_cast<size_t>(c) * HW;
                            for (int i = 0; i < HW; ++i) s += row[i];
                            bn->grad[c] += s;
                        }
                }
            } else {
                const int64_t rows = static_cast<int64_t>(g.size()) / out_f;
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    gemm_nn(static_cast<int>(rows), out_f, in_f, g.data(), wn->data.data(),
                            xn->grad.data(), true);
                }
                if (wn->requires_grad) {
                    wn->ensure_grad();
                    gemm_tn(out_f, static_cast<int>(rows), in_f, g.data(), xn->data.data(),
                            wn->grad.data(), true);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int64_t i = 0; i < rows; ++i)
                        for (int c = 0; c < out_f; ++c) bn->grad[c] += g[i * out_f + c];
                }
            }
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    const int r = x.rank();
    const int L = x.dim(r - 1);
    const int64_t rows = x.numel() / L;
    const bool rg = tracing({&x});
    Tensor out = make_output(x.shape(), rg);
    const float* px = x.data();
    float* po = out.mutable_data();
    for (int64_t i = 0; i < rows; ++i) {
        const float* xr = px + i * L;
        float* orow = po + i * L;
        float mx = xr[0];
        for (int j = 1; j < L; ++j) mx = std::max(mx, xr[j]);
        float sum = 0.f;
        for (int j = 0; j < L; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            sum += orow[j];
        }
        const float inv = 1.f / sum;
        for (int j = 0; j < L; ++j) orow[j] *= inv;
    }
    check_finite(out, "softmax");
    if (rg) {
        auto xn = x.handle(), on = out.handle();
        record(out, [xn, on, L] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const auto& g = on->grad;
            const int64_t rows = static_cast<int64_t>(g.size()) / L;
            for (int64_t i = 0; i < rows; ++i) {
                const float* y = on->data.data() + i * L;
                const float* gr = g.data() + i * L;
                float dot = 0.f;
                for (int j = 0; j < L; ++j) dot += gr[j] * y[j];
                float* dx = xn->grad.data() + i * L;
                for (int j = 0; j < L; ++j) dx[j] += y[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
            "bmm: incompatible shapes ", shape_str(a.shape()), " x ", shape_str(b.shape()));
    const int N = a.dim(0), T = a.dim(1), K = a.dim(2), S = b.dim(2);
    const bool rg = tracing({&a, &b});
    Tensor out = make_output({N, T, S}, rg);
    for (int n = 0; n < N; ++n)
        gemm_nn(T, K, S, a.data() + static_cast<int64_t>(n) * T * K,
                b.data() + static_cast<int64_t>(n) * K * S,
                out.mutable_data() + static_cast<int64_t>(n) * T * S, false);
    check_finite(out, "bmm");
    if (rg) {
        auto an = a.handle(), bn = b.handle(), on = out.handle();
        record(out, [an, bn, on, N, T, K, S] {
            const auto& g = on->grad;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* gn = g.data() + static_cast<int64_t>(n) * T * S;
                if (an->requires_grad)
                    gemm_nt(T, S, K, gn, bn->data.data() + static_cast<int64_t>(n) * K * S,
                            an->grad.data() + static_cast<int64_t>(n) * T * K, true);
                if (bn->requires_grad)
                    gemm_tn(K, T, S, an->data.data() + static_cast<int64_t>(n) * T * K, gn,
                            bn->grad.data() + static_cast<int64_t>(n) * K * S, true);
            }
        });
    }
    return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
            "bmm_nt: incompatible shapes ", shape_str(a.shape()), " x ",
            shape_str(b.shape()));
    const int N = a.dim(0), T = a.dim(1), K = a.dim(2), S = b.dim(1);
    const bool rg = tracing({&a, &b});
    Tensor out = make_output({N, T, S}, rg);
    for (int n = 0; n < N; ++n)
        gemm_nt(T, K, S, a.data() + static_cast<int64_t>(n) * T * K,
                b.data() + static_cast<int64_t>(n) * S * K,
                out.mutable_data() + static_cast<int64_t>(n) * T * S, false);
    check_finite(out, "bmm_nt");
    if (rg) {
        auto an = a.handle(), bn = b.handle(), on = out.handle();
        record(out, [an, bn, on, N, T, K, S] {
            const auto& g = on->grad;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float* gn = g.data() + static_cast<int64_t>(n) * T * S;
                if (an->requires_grad)
                    gemm_nn(T, S, K, gn, bn->data.data() + static_cast<int64_t>(n) * S * K,
                            an->grad.data() + static_cast<int64_t>(n) * T * K, true);
                if (bn->requires_grad)
                    gemm_tn(S, T, K, gn, an->data.data() + static_cast<int64_t>(n) * T * K,
                            bn->grad.data() + static_cast<int64_t>(n) * S * K, true);
            }
        });
    }
    return out;
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3,
            "attention: q/k/v must be [N,T,C], got ", shape_str(q.shape()), " / ",
            shape_str(k.shape()), " / ", shape_str(v.shape()));
    require(q.dim(2) == k.dim(2), "attention: q inner dim ", q.dim(2), " != k inner dim ",
            k.dim(2));
    require(k.dim(1) == v.dim(1) && k.dim(0) == v.dim(0) && q.dim(0) == k.dim(0),
            "attention: k/v shapes incompatible: ", shape_str(k.shape()), " vs ",
            shape_str(v.shape()));
    const float sc = 1.f / std::sqrt(static_cast<float>(q.dim(2)));
    Tensor scores = scale(bmm_nt(q, k), sc);
    Tensor attn = softmax_lastdim(scores);
    return bmm(attn, v);
}

// ---------------------------------------------------------------------------
// Layout ops

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                a.dim(3) == b.dim(3),
            "concat_channels: incompatible shapes ", shape_str(a.shape()), " vs ",
            shape_str(b.shape()));
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    const bool rg = tracing({&a, &b});
    Tensor out = make_output({N, Ca + Cb, a.dim(2), a.dim(3)}, rg);
    float* po = out.mutable_data();
    for (int n = 0; n < N; ++n) {
        std::memcpy(po + static_cast<int64_t>(n) * (Ca + Cb) * HW,
                    a.data() + static_cast<int64_t>(n) * Ca * HW,
                    sizeof(float) * static_cast<size_t>(Ca) * HW);
        std::memcpy(po + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * HW,
                    b.data() + static_cast<int64_t>(n) * Cb * HW,
                    sizeof(float) * static_cast<size_t>(Cb) * HW);
    }
    if (rg) {
        auto an = a.handle(), bn = b.handle(), on = out.handle();
        record(out, [an, bn, on, N, Ca, Cb, HW] {
            const auto& g = on->grad;
            if (an->requires_grad) {
                an->ensure_grad();
                for (int n = 0; n < N; ++n) {
                    const float* gp = g.data() + static_cast<int64_t>(n) * (Ca + Cb) * HW;
                    float* dst = an->grad.data() + static_cast<int64_t>(n) * Ca * HW;
                    for (int64_t i = 0; i < static_cast<int64_t>(Ca) * HW; ++i) dst[i] += gp[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int n = 0; n < N; ++n) {
                    const float* gp =
                        g.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * HW;
                    float* dst = bn->grad.data() + static_cast<int64_t>(n) * Cb * HW;
                    for (int64_t i = 0; i < static_cast<int64_t>(Cb) * HW; ++i) dst[i] += gp[i];
                }
            }
        });
    }
    return out;
}

Tensor to_tokens(const Tensor& x) {
    require(x.rank() == 4, "to_tokens: input must be NCHW, got ", shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const bool rg = tracing({&x});
    Tensor out = make_output({N, HW, C}, rg);
    const float* px = x.data();
    float* po = out.mutable_data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* src = px + (static_cast<int64_t>(n) * C + c) * HW;
            float* dst = po + static_cast<int64_t>(n) * HW * C + c;
            for (int i = 0; i < HW; ++i) dst[static_cast<int64_t>(i) * C] = src[i];
        }
    if (rg) {
        auto xn = x.handle(), on = out.handle();
        record(out, [xn, on, N, C, HW] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const auto& g = on->grad;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    float* dst = xn->grad.data() + (static_cast<int64_t>(n) * C + c) * HW;
                    const float* src = g.data() + static_cast<int64_t>(n) * HW * C + c;
                    for (int i = 0; i < HW; ++i) dst[i] += src[static_cast<int64_t>(i) * C];
                }
        });
    }
    return out;
}

Tensor from_tokens(const Tensor& x, int h, int w) {
    require(x.rank() == 3, "from_tokens: input must be [N,T,C], got ", shape_str(x.shape()));
    require(x.dim(1) == h * w, "from_tokens: token count ", x.dim(1), " != ", h, "*", w);
    const int N = x.dim(0), C = x.dim(2), HW = h * w;
    const bool rg = tracing({&x});
    Tensor out = make_output({N, C, h, w}, rg);
    const float* px = x.data();
    float* po = out.mutable_data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float* dst = po + (static_cast<int64_t>(n) * C + c) * HW;
            const float* src = px + static_cast<int64_t>(n) * HW * C + c;
            for (int i = 0; i < HW; ++i) dst[i] = src[static_cast<int64_t>(i) * C];
        }
    if (rg) {
        auto xn = x.handle(), on = out.handle();
        record(out, [xn, on, N, C, HW] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const auto& g = on->grad;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const float* src = g.data() + (static_cast<int64_t>(n) * C + c) * HW;
                    float* dst = xn->grad.data() + static_cast<int64_t>(n) * HW * C + c;
                    for (int i = 0; i < HW; ++i) dst[static_cast<int64_t>(i) * C] += src[i];
                }
        });
    }
    return out;
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    require(table.rank() == 3, "embed_rows: table must be [V,S,D], got ",
            shape_str(table.shape()));
    const int V = table.dim(0), S = table.dim(1), D = table.dim(2);
    for (int id : ids)
        require(id >= 0 && id < V, "embed_rows: id ", id, " out of range [0,", V, ")");
    const int N = static_cast<int>(ids.size());
    require(N >= 1, "embed_rows: empty id list");
    const bool rg = tracing({&table});
    Tensor out = make_output({N, S, D}, rg);
    float* po = out.mutable_data();
    for (int n = 0; n < N; ++n)
        std::memcpy(po + static_cast<int64_t>(n) * S * D,
                    table.data() + static_cast<int64_t>(ids[n]) * S * D,
                    sizeof(float) * static_cast<size_t>(S) * D);
    check_finite(out, "embed_rows");
    if (rg) {
        auto tn = table.handle(), on = out.handle();
        record(out, [tn, on, ids, S, D] {
            if (!tn->requires_grad) return;
            tn->ensure_grad();
            const auto& g = on->grad;
            for (size_t n = 0; n < ids.size(); ++n) {
                float* dst = tn->grad.data() + static_cast<int64_t>(ids[n]) * S * D;
                const float* src = g.data() + static_cast<int64_t>(n) * S * D;
                for (int i = 0; i < S * D; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum_all(const Tensor& x) {
    const bool rg = tracing({&x});
    Tensor out = make_output({1}, rg);
    const float* px = x.data();
    float s = 0.f;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) s += px[i];
    out.mutable_data()[0] = s;
    check_finite(out, "sum_all");
    if (rg) {
        auto xn = x.handle(), on = out.handle();
        record(out, [xn, on] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const float g = on->grad[0];
            for (auto& v : xn->grad) v += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    Tensor s = sum_all(x);
    return scale(s, 1.f / static_cast<float>(x.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mse: shape mismatch ", shape_str(a.shape()), " vs ",
            shape_str(b.shape()));
    const bool rg = tracing({&a, &b});
    Tensor out = make_output({1}, rg);
    const float* pa = a.data();
    const float* pb = b.data();
    const int64_t n = a.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pa[i]) - pb[i];
        s += d * d;
    }
    out.mutable_data()[0] = static_cast<float>(s / static_cast<double>(n));
    check_finite(out, "mse");
    if (rg) {
        auto an = a.handle(), bn = b.handle(), on = out.handle();
        record(out, [an, bn, on, n] {
            const float g = on->grad[0] * 2.f / static_cast<float>(n);
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const float d = an->data[i] - bn->data[i];
                if (an->requires_grad) an->grad[i] += g * d;
                if (bn->requires_grad) bn->grad[i] -= g * d;
            }
        });
    }
    return out;
}

} // namespace ldp::ops
