#include "mpseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mpseg::kernels {

namespace {

template <typename T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv2dSpec& spec) {
    require_rank(x, 4, "conv2d input");
    require_rank(w, 4, "conv2d weight");
    const int64_t cin = x.shape[1], cout = w.shape[0];
    if (spec.groups < 1 || cin % spec.groups != 0)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(cin) + " not divisible by groups " +
                                    std::to_string(spec.groups));
    if (cout % spec.groups != 0)
        throw std::invalid_argument("conv2d: output channels " + std::to_string(cout) + " not divisible by groups " +
                                    std::to_string(spec.groups));
    if (w.shape[1] != cin / spec.groups)
        throw std::invalid_argument("conv2d: weight dim 1 is " + std::to_string(w.shape[1]) + ", expected Cin/groups = " +
                                    std::to_string(cin / spec.groups));
    if (b.numel() != 0 && b.shape != std::vector<int64_t>{cout})
        throw std::invalid_argument("conv2d: bias shape " + shape_str(b.shape) + ", expected [" + std::to_string(cout) + "]");
    if (spec.stride < 1 || spec.pad < 0) throw std::invalid_argument("conv2d: stride must be >=1 and padding >=0");
    const int64_t oh = conv_out_extent(x.shape[2], w.shape[2], spec.stride, spec.pad);
    const int64_t ow = conv_out_extent(x.shape[3], w.shape[3], spec.stride, spec.pad);
    if (oh <= 0 || ow <= 0)
        throw std::invalid_argument("conv2d: kernel " + std::to_string(w.shape[2]) + "x" + std::to_string(w.shape[3]) +
                                    " does not fit input " + shape_str(x.shape) + " with padding " +
                                    std::to_string(spec.pad));
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv2dSpec& spec) {
    check_conv_args(x, w, b, spec);
    const int64_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Cout = w.shape[0], Cg = w.shape[1], KH = w.shape[2], KW = w.shape[3];
    const int64_t OH = conv_out_extent(H, KH, spec.stride, spec.pad);
    const int64_t OW = conv_out_extent(W, KW, spec.stride, spec.pad);
    const int64_t cout_per_g = Cout / spec.groups;
    Tensor<T> y({N, Cout, OH, OW});
    const T* xp = x.data.data();
    const T* wp = w.data.data();
    const T* bp = b.numel() ? b.data.data() : nullptr;
    T* yp = y.data.data();

    // One pass over the output plane per kernel tap: the inner row loop is
    // contiguous and branch-free, and every output pixel still accumulates
    // its terms in ascending (cg, kh, kw) order after the bias.
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Cout; ++co) {
            const int64_t g = co / cout_per_g;
            const int64_t ci0 = g * Cg;
            const T bias = bp ? bp[co] : T{0};
            T* yc = yp + ((n * Cout + co) * OH) * OW;
            for (int64_t i = 0; i < OH * OW; ++i) yc[i] = bias;
            for (int64_t cg = 0; cg < Cg; ++cg) {
                const T* xc = xp + ((n * Cin + ci0 + cg) * H) * W;
                const T* wc = wp + ((co * Cg + cg) * KH) * KW;
                for (int64_t kh = 0; kh < KH; ++kh) {
                    const int64_t dh = kh - spec.pad;
                    // valid oh: 0 <= oh*stride + dh < H
                    const int64_t oh_lo = dh < 0 ? (-dh + spec.stride - 1) / spec.stride : 0;
                    const int64_t oh_hi = std::min(OH, dh < H ? (H - 1 - dh) / spec.stride + 1 : 0);
                    for (int64_t kw = 0; kw < KW; ++kw) {
                        const T wv = wc[kh * KW + kw];
                        const int64_t dw = kw - spec.pad;
                        const int64_t ow_lo = dw < 0 ? (-dw + spec.stride - 1) / spec.stride : 0;
                        const int64_t ow_hi = std::min(OW, dw < W ? (W - 1 - dw) / spec.stride + 1 : 0);
                        for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const T* xrow = xc + (oh * spec.stride + dh) * W;
                            T* yrow = yc + oh * OW;
                            if (spec.stride == 1) {
                                for (int64_t ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow + dw];
                            } else {
                                for (int64_t ow = ow_lo; ow < ow_hi; ++ow)
                                    yrow[ow] += wv * xrow[ow * spec.stride + dw];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w, const std::vector<int64_t>& x_shape,
                                const Conv2dSpec& spec) {
    const int64_t N = x_shape[0], Cin = x_shape[1], H = x_shape[2], W = x_shape[3];
    const int64_t Cout = w.shape[0], Cg = w.shape[1], KH = w.shape[2], KW = w.shape[3];
    const int64_t OH = dy.shape[2], OW = dy.shape[3];
    const int64_t cout_per_g = Cout / spec.groups;
    Tensor<T> dx(x_shape);
    const T* dyp = dy.data.data();
    const T* wp = w.data.data();
    T* dxp = dx.data.data();

    // Scatter within one (n, ci) plane at a time: planes are disjoint, so the
    // parallel loop stays race-free and deterministic.
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t ci = 0; ci < Cin; ++ci) {
            const int64_t g = ci / Cg;
            const int64_t cg = ci - g * Cg;
            T* dplane = dxp + ((n * Cin + ci) * H) * W;
            for (int64_t co = g * cout_per_g; co < (g + 1) * cout_per_g; ++co) {
                const T* wc = wp + ((co * Cg + cg) * KH) * KW;
                const T* dyc = dyp + ((n * Cout + co) * OH) * OW;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t ih0 = oh * spec.stride - spec.pad;
                    const int64_t kh_lo = std::max<int64_t>(0, -ih0);
                    const int64_t kh_hi = std::min(KH, H - ih0);
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        const int64_t iw0 = ow * spec.stride - spec.pad;
                        const T g_out = dyc[oh * OW + ow];
                        if (g_out == T{0}) continue;
                        const int64_t kw_lo = std::max<int64_t>(0, -iw0);
                        const int64_t kw_hi = std::min(KW, W - iw0);
                        for (int64_t kh = kh_lo; kh < kh_hi; ++kh) {
                            T* drow = dplane + (ih0 + kh) * W;
                            const T* wrow = wc + kh * KW;
                            for (int64_t kw = kw_lo; kw < kw_hi; ++kw) drow[iw0 + kw] += wrow[kw] * g_out;
                        }
                    }
                }
            }
        }
    }
    return dx;
}

template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, const std::vector<int64_t>& w_shape,
                                 const Conv2dSpec& spec) {
    const int64_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Cout = w_shape[0], Cg = w_shape[1], KH = w_shape[2], KW = w_shape[3];
    const int64_t OH = dy.shape[2], OW = dy.shape[3];
    const int64_t cout_per_g = Cout / spec.groups;
    Tensor<T> dw(w_shape);
    const T* dyp = dy.data.data();
    const T* xp = x.data.data();
    T* dwp = dw.data.data();

    // Gather form: each weight element owns its own reduction.
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t co = 0; co < Cout; ++co) {
        for (int64_t cg = 0; cg < Cg; ++cg) {
            const int64_t ci = (co / cout_per_g) * Cg + cg;
            for (int64_t kh = 0; kh < KH; ++kh) {
                for (int64_t kw = 0; kw < KW; ++kw) {
                    T acc{0};
                    for (int64_t n = 0; n < N; ++n) {
                        const T* xc = xp + ((n * Cin + ci) * H) * W;
                        const T* dyc = dyp + ((n * Cout + co) * OH) * OW;
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            const int64_t ih = oh * spec.stride - spec.pad + kh;
                            if (ih < 0 || ih >= H) continue;
                            // valid ow range: 0 <= ow*stride - pad + kw < W
                            int64_t ow_lo = 0;
                            const int64_t off = kw - spec.pad;
                            if (off < 0) ow_lo = (-off + spec.stride - 1) / spec.stride;
                            int64_t ow_hi = OW;
                            if (off + (OW - 1) * spec.stride >= W) ow_hi = (W - off + spec.stride - 1) / spec.stride;
                            const T* xrow = xc + ih * W;
                            const T* dyrow = dyc + oh * OW;
                            for (int64_t ow = ow_lo; ow < ow_hi; ++ow) acc += xrow[ow * spec.stride + off] * dyrow[ow];
                        }
                    }
                    dwp[((co * Cg + cg) * KH + kh) * KW + kw] = acc;
                }
            }
        }
    }
    return dw;
}

template <typename T>
Tensor<T> conv2d_backward_bias(const Tensor<T>& dy) {
    const int64_t N = dy.shape[0], C = dy.shape[1], HW = dy.shape[2] * dy.shape[3];
    Tensor<T> db({C});
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        T acc{0};
        for (int64_t n = 0; n < N; ++n) {
            const T* p = dy.data.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) acc += p[i];
        }
        db.data[static_cast<size_t>(c)] = acc;
    }
    return db;
}

template <typename T>
Tensor<T> lc_conv_forward(const Tensor<T>& x, const Tensor<T>& conf, const Tensor<T>& w, const Tensor<T>& b,
                          Tensor<T>* conf_window_sum_out) {
    require_rank(x, 4, "lc_conv input");
    const int64_t N = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    require_shape(conf, {N, 1, H, W}, "lc_conv confidence");
    const int64_t Dout = w.shape[0];
    require_shape(w, {Dout, D, 3, 3}, "lc_conv weight");
    require_shape(b, {Dout}, "lc_conv bias");

    Tensor<T> msum({N, 1, H, W});
    const T* mp = conf.data.data();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        const T* m = mp + n * H * W;
        T* s = msum.data.data() + n * H * W;
        for (int64_t oh = 0; oh < H; ++oh) {
            for (int64_t ow = 0; ow < W; ++ow) {
                T acc{0};
                for (int64_t kh = -1; kh <= 1; ++kh) {
                    const int64_t ih = oh + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int64_t kw = -1; kw <= 1; ++kw) {
                        const int64_t iw = ow + kw;
                        if (iw < 0 || iw >= W) continue;
                        acc += m[ih * W + iw];
                    }
                }
                s[oh * W + ow] = acc;
            }
        }
    }

    Tensor<T> y({N, Dout, H, W});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t dout = 0; dout < Dout; ++dout) {
            const T* m = mp + n * H * W;
            const T* s = msum.data.data() + n * H * W;
            const T bias = b.data[static_cast<size_t>(dout)];
            T* yc = y.data.data() + ((n * Dout + dout) * H) * W;
            // numerator accumulated tap by tap, in ascending (di, kh, kw)
            // order per pixel, then normalized by the window confidence sum
            std::vector<T> num(static_cast<size_t>(H * W), T{0});
            for (int64_t di = 0; di < D; ++di) {
                const T* xc = x.data.data() + ((n * D + di) * H) * W;
                const T* wc = w.data.data() + ((dout * D + di) * 3) * 3;
                for (int64_t kh = -1; kh <= 1; ++kh) {
                    const int64_t oh_lo = kh < 0 ? 1 : 0;
                    const int64_t oh_hi = kh > 0 ? H - 1 : H;
                    for (int64_t kw = -1; kw <= 1; ++kw) {
                        const T wv = wc[(kh + 1) * 3 + (kw + 1)];
                        const int64_t ow_lo = kw < 0 ? 1 : 0;
                        const int64_t ow_hi = kw > 0 ? W - 1 : W;
                        for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const T* xrow = xc + (oh + kh) * W;
                            const T* mrow = m + (oh + kh) * W;
                            T* nrow = num.data() + oh * W;
                            for (int64_t ow = ow_lo; ow < ow_hi; ++ow)
                                nrow[ow] += wv * xrow[ow + kw] * mrow[ow + kw];
                        }
                    }
                }
            }
            for (int64_t i = 0; i < H * W; ++i)
                yc[i] = static_cast<double>(s[i]) <= lc_degenerate_eps ? bias : num[static_cast<size_t>(i)] / s[i] + bias;
        }
    }
    if (conf_window_sum_out) *conf_window_sum_out = std::move(msum);
    return y;
}

template <typename T>
Tensor<T> lc_conv_backward_input(const Tensor<T>& dy, const Tensor<T>& conf, const Tensor<T>& conf_window_sum,
                                 const Tensor<T>& w) {
    const int64_t N = dy.shape[0], Dout = dy.shape[1], H = dy.shape[2], W = dy.shape[3];
    const int64_t D = w.shape[1];
    Tensor<T> dx({N, D, H, W});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t di = 0; di < D; ++di) {
            const T* m = conf.data.data() + n * H * W;
            const T* s = conf_window_sum.data.data() + n * H * W;
            T* dplane = dx.data.data() + ((n * D + di) * H) * W;
            for (int64_t dout = 0; dout < Dout; ++dout) {
                const T* wc = w.data.data() + ((dout * D + di) * 3) * 3;
                const T* dyc = dy.data.data() + ((n * Dout + dout) * H) * W;
                for (int64_t oh = 0; oh < H; ++oh) {
                    for (int64_t ow = 0; ow < W; ++ow) {
                        const T wsum = s[oh * W + ow];
                        if (static_cast<double>(wsum) <= lc_degenerate_eps) continue;
                        const T g_out = dyc[oh * W + ow] / wsum;
                        if (g_out == T{0}) continue;
                        for (int64_t kh = -1; kh <= 1; ++kh) {
                            const int64_t ih = oh + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int64_t kw = -1; kw <= 1; ++kw) {
                                const int64_t iw = ow + kw;
                                if (iw < 0 || iw >= W) continue;
                                dplane[ih * W + iw] += wc[(kh + 1) * 3 + (kw + 1)] * m[ih * W + iw] * g_out;
                            }
                        }
                    }
                }
            }
        }
    }
    return dx;
}

template <typename T>
Tensor<T> lc_conv_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& conf,
                                  const Tensor<T>& conf_window_sum, const std::vector<int64_t>& w_shape) {
    const int64_t N = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Dout = w_shape[0];
    Tensor<T> dw(w_shape);
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t dout = 0; dout < Dout; ++dout) {
        for (int64_t di = 0; di < D; ++di) {
            for (int64_t kh = -1; kh <= 1; ++kh) {
                for (int64_t kw = -1; kw <= 1; ++kw) {
                    T acc{0};
                    for (int64_t n = 0; n < N; ++n) {
                        const T* m = conf.data.data() + n * H * W;
                        const T* s = conf_window_sum.data.data() + n * H * W;
                        const T* xc = x.data.data() + ((n * D + di) * H) * W;
                        const T* dyc = dy.data.data() + ((n * Dout + dout) * H) * W;
                        for (int64_t oh = 0; oh < H; ++oh) {
                            const int64_t ih = oh + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int64_t ow = 0; ow < W; ++ow) {
                                const int64_t iw = ow + kw;
                                if (iw < 0 || iw >= W) continue;
                                const T wsum = s[oh * W + ow];
                                if (static_cast<double>(wsum) <= lc_degenerate_eps) continue;
                                acc += dyc[oh * W + ow] / wsum * xc[ih * W + iw] * m[ih * W + iw];
                            }
                        }
                    }
                    dw.data[static_cast<size_t>(((dout * D + di) * 3 + kh + 1) * 3 + kw + 1)] = acc;
                }
            }
        }
    }
    return dw;
}

template <typename T>
Tensor<T> channel_stats_forward(const Tensor<T>& x, std::vector<int32_t>* argmax_out) {
    require_rank(x, 4, "channel_stats input");
    const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor<T> y({N, 2, H, W});
    if (argmax_out) argmax_out->assign(static_cast<size_t>(N * H * W), 0);
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t h = 0; h < H; ++h) {
            for (int64_t w = 0; w < W; ++w) {
                T sum{0};
                T best = x.at4(n, 0, h, w);
                int32_t best_c = 0;
                for (int64_t c = 0; c < C; ++c) {
                    const T v = x.at4(n, c, h, w);
                    sum += v;
                    if (v > best) {
                        best = v;
                        best_c = static_cast<int32_t>(c);
                    }
                }
                y.at4(n, 0, h, w) = sum / static_cast<T>(C);
                y.at4(n, 1, h, w) = best;
                if (argmax_out) (*argmax_out)[static_cast<size_t>((n * H + h) * W + w)] = best_c;
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> channel_stats_backward(const Tensor<T>& dy, const std::vector<int32_t>& argmax,
                                 const std::vector<int64_t>& x_shape) {
    const int64_t N = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
    Tensor<T> dx(x_shape);
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t h = 0; h < H; ++h) {
            for (int64_t w = 0; w < W; ++w) {
                const T gmean = dy.at4(n, 0, h, w) / static_cast<T>(C);
                for (int64_t c = 0; c < C; ++c) dx.at4(n, c, h, w) = gmean;
                const int32_t bc = argmax[static_cast<size_t>((n * H + h) * W + w)];
                dx.at4(n, bc, h, w) += dy.at4(n, 1, h, w);
            }
        }
    }
    return dx;
}

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
    require_rank(x, 4, "global_avg_pool input");
    const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    Tensor<T> y({N, C, 1, 1});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const T* p = x.data.data() + (n * C + c) * HW;
            T acc{0};
            for (int64_t i = 0; i < HW; ++i) acc += p[i];
            y.data[static_cast<size_t>(n * C + c)] = acc / static_cast<T>(HW);
        }
    }
    return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const std::vector<int64_t>& x_shape) {
    const int64_t N = x_shape[0], C = x_shape[1], HW = x_shape[2] * x_shape[3];
    Tensor<T> dx(x_shape);
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const T g = dy.data[static_cast<size_t>(n * C + c)] / static_cast<T>(HW);
            T* p = dx.data.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) p[i] = g;
        }
    }
    return dx;
}

namespace {

// Source pixel mapping for half-pixel-center interpolation.
inline void bilinear_axis(int64_t out_i, int64_t in_extent, double ratio, int64_t& i0, int64_t& i1, double& f) {
    double src = (static_cast<double>(out_i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    const double hi = static_cast<double>(in_extent - 1);
    if (src > hi) src = hi;
    i0 = static_cast<int64_t>(src);
    if (i0 > in_extent - 1) i0 = in_extent - 1;
    i1 = std::min(i0 + 1, in_extent - 1);
    f = src - static_cast<double>(i0);
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample_forward(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
    require_rank(x, 4, "bilinear_upsample input");
    const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (out_h < H || out_w < W)
        throw std::invalid_argument("bilinear_upsample: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                    " smaller than input " + std::to_string(H) + "x" + std::to_string(W));
    const double rh = static_cast<double>(H) / static_cast<double>(out_h);
    const double rw = static_cast<double>(W) / static_cast<double>(out_w);
    Tensor<T> y({N, C, out_h, out_w});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const T* p = x.data.data() + (n * C + c) * H * W;
            T* q = y.data.data() + (n * C + c) * out_h * out_w;
            for (int64_t oh = 0; oh < out_h; ++oh) {
                int64_t h0, h1;
                double fh;
                bilinear_axis(oh, H, rh, h0, h1, fh);
                for (int64_t ow = 0; ow < out_w; ++ow) {
                    int64_t w0, w1;
                    double fw;
                    bilinear_axis(ow, W, rw, w0, w1, fw);
                    const double v00 = static_cast<double>(p[h0 * W + w0]);
                    const double v01 = static_cast<double>(p[h0 * W + w1]);
                    const double v10 = static_cast<double>(p[h1 * W + w0]);
                    const double v11 = static_cast<double>(p[h1 * W + w1]);
                    q[oh * out_w + ow] = static_cast<T>((1 - fh) * ((1 - fw) * v00 + fw * v01) +
                                                        fh * ((1 - fw) * v10 + fw * v11));
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& dy, const std::vector<int64_t>& x_shape) {
    const int64_t N = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
    const int64_t OH = dy.shape[2], OW = dy.shape[3];
    const double rh = static_cast<double>(H) / static_cast<double>(OH);
    const double rw = static_cast<double>(W) / static_cast<double>(OW);
    Tensor<T> dx(x_shape);
    // Scatter per (n,c) plane; planes are disjoint across parallel iterations.
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const T* q = dy.data.data() + (n * C + c) * OH * OW;
            T* p = dx.data.data() + (n * C + c) * H * W;
            for (int64_t oh = 0; oh < OH; ++oh) {
                int64_t h0, h1;
                double fh;
                bilinear_axis(oh, H, rh, h0, h1, fh);
                for (int64_t ow = 0; ow < OW; ++ow) {
                    int64_t w0, w1;
                    double fw;
                    bilinear_axis(ow, W, rw, w0, w1, fw);
                    const double g = static_cast<double>(q[oh * OW + ow]);
                    p[h0 * W + w0] += static_cast<T>((1 - fh) * (1 - fw) * g);
                    p[h0 * W + w1] += static_cast<T>((1 - fh) * fw * g);
                    p[h1 * W + w0] += static_cast<T>(fh * (1 - fw) * g);
                    p[h1 * W + w1] += static_cast<T>(fh * fw * g);
                }
            }
        }
    }
    return dx;
}

namespace {

inline void softmax_extents(const std::vector<int64_t>& shape, int axis, int64_t& outer, int64_t& k, int64_t& inner) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    k = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x, int axis) {
    int64_t outer, K, inner;
    softmax_extents(x.shape, axis, outer, K, inner);
    Tensor<T> y(x.shape);
#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const T* p = x.data.data() + o * K * inner + i;
            T* q = y.data.data() + o * K * inner + i;
            T m = p[0];
            for (int64_t j = 1; j < K; ++j) m = std::max(m, p[j * inner]);
            T sum{0};
            for (int64_t j = 0; j < K; ++j) {
                const T e = std::exp(p[j * inner] - m);
                q[j * inner] = e;
                sum += e;
            }
            for (int64_t j = 0; j < K; ++j) q[j * inner] /= sum;
        }
    }
    return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& dy, const Tensor<T>& y, int axis) {
    int64_t outer, K, inner;
    softmax_extents(y.shape, axis, outer, K, inner);
    Tensor<T> dx(y.shape);
#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const T* g = dy.data.data() + o * K * inner + i;
            const T* q = y.data.data() + o * K * inner + i;
            T* d = dx.data.data() + o * K * inner + i;
            T dot{0};
            for (int64_t j = 0; j < K; ++j) dot += g[j * inner] * q[j * inner];
            for (int64_t j = 0; j < K; ++j) d[j * inner] = q[j * inner] * (g[j * inner] - dot);
        }
    }
    return dx;
}

template <typename T>
T cross_entropy_forward(const Tensor<T>& pred, const Tensor<uint8_t>& target) {
    require_rank(pred, 4, "cross_entropy pred");
    const int64_t N = pred.shape[0], C = pred.shape[1], H = pred.shape[2], W = pred.shape[3];
    if (C != 2) throw std::invalid_argument("cross_entropy: pred must have 2 channels, got " + std::to_string(C));
    require_shape(target, {N, H, W}, "cross_entropy target");
    for (uint8_t t : target.data)
        if (t > 1) throw std::invalid_argument("cross_entropy: label " + std::to_string(int(t)) + " outside {0,1}");

    // Row partials merged in fixed order keep the reduction thread-count
    // independent.
    std::vector<double> row_sum(static_cast<size_t>(N * H), 0.0);
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < N * H; ++r) {
        const int64_t n = r / H, h = r % H;
        double acc = 0.0;
        for (int64_t w = 0; w < W; ++w) {
            const uint8_t t = target.data[static_cast<size_t>((n * H + h) * W + w)];
            double p = static_cast<double>(pred.at4(n, t, h, w));
            if (p < ce_prob_floor) p = ce_prob_floor;
            acc -= std::log(p);
        }
        row_sum[static_cast<size_t>(r)] = acc;
    }
    double total = 0.0;
    for (double v : row_sum) total += v;
    return static_cast<T>(total / static_cast<double>(N * H * W));
}

template <typename T>
Tensor<T> cross_entropy_backward(T dloss, const Tensor<T>& pred, const Tensor<uint8_t>& target) {
    const int64_t N = pred.shape[0], H = pred.shape[2], W = pred.shape[3];
    Tensor<T> dp(pred.shape);
    const T inv_count = dloss / static_cast<T>(N * H * W);
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < N * H; ++r) {
        const int64_t n = r / H, h = r % H;
        for (int64_t w = 0; w < W; ++w) {
            const uint8_t t = target.data[static_cast<size_t>((n * H + h) * W + w)];
            const T p = pred.at4(n, t, h, w);
            if (static_cast<double>(p) > ce_prob_floor) dp.at4(n, t, h, w) = -inv_count / p;
        }
    }
    return dp;
}

template <typename T>
Tensor<T> max_filter3x3(const Tensor<T>& x) {
    require_rank(x, 4, "max_filter3x3 input");
    const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor<T> y(x.shape);
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const T* p = x.data.data() + (n * C + c) * H * W;
            T* q = y.data.data() + (n * C + c) * H * W;
            for (int64_t h = 0; h < H; ++h) {
                for (int64_t w = 0; w < W; ++w) {
                    T best{0};  // zero padding participates in the max
                    for (int64_t kh = -1; kh <= 1; ++kh) {
                        const int64_t ih = h + kh;
                        if (ih < 0 || ih >= H) continue;
                        for (int64_t kw = -1; kw <= 1; ++kw) {
                            const int64_t iw = w + kw;
                            if (iw < 0 || iw >= W) continue;
                            best = std::max(best, p[ih * W + iw]);
                        }
                    }
                    q[h * W + w] = best;
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y.data[static_cast<size_t>(i)] = std::max(x.data[static_cast<size_t>(i)], T{0});
    return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& dy, const Tensor<T>& x) {
    Tensor<T> dx(x.shape);
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i)
        dx.data[static_cast<size_t>(i)] =
            x.data[static_cast<size_t>(i)] > T{0} ? dy.data[static_cast<size_t>(i)] : T{0};
    return dx;
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const T v = x.data[static_cast<size_t>(i)];
        if (v >= T{0}) {
            const T e = std::exp(-v);
            y.data[static_cast<size_t>(i)] = T{1} / (T{1} + e);
        } else {
            const T e = std::exp(v);
            y.data[static_cast<size_t>(i)] = e / (T{1} + e);
        }
    }
    return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& dy, const Tensor<T>& y) {
    Tensor<T> dx(y.shape);
    const int64_t n = y.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const T s = y.data[static_cast<size_t>(i)];
        dx.data[static_cast<size_t>(i)] = dy.data[static_cast<size_t>(i)] * s * (T{1} - s);
    }
    return dx;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> y(a.shape);
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i)
        y.data[static_cast<size_t>(i)] = a.data[static_cast<size_t>(i)] + b.data[static_cast<size_t>(i)];
    return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> y(a.shape);
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i)
        y.data[static_cast<size_t>(i)] = a.data[static_cast<size_t>(i)] - b.data[static_cast<size_t>(i)];
    return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> y(a.shape);
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i)
        y.data[static_cast<size_t>(i)] = a.data[static_cast<size_t>(i)] * b.data[static_cast<size_t>(i)];
    return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> y(a.shape);
    const int64_t n = a.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y.data[static_cast<size_t>(i)] = a.data[static_cast<size_t>(i)] * s;
    return y;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const int64_t N = xs[0]->shape[0], H = xs[0]->shape[2], W = xs[0]->shape[3];
    int64_t C = 0;
    for (const auto* t : xs) {
        require_rank(*t, 4, "concat_channels input");
        if (t->shape[0] != N || t->shape[2] != H || t->shape[3] != W)
            throw std::invalid_argument("concat_channels: input " + shape_str(t->shape) +
                                        " incompatible with first input " + shape_str(xs[0]->shape));
        C += t->shape[1];
    }
    Tensor<T> y({N, C, H, W});
    int64_t c_off = 0;
    for (const auto* t : xs) {
        const int64_t Ci = t->shape[1];
#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t c = 0; c < Ci; ++c) {
                const T* src = t->data.data() + (n * Ci + c) * H * W;
                T* dst = y.data.data() + (n * C + c_off + c) * H * W;
                std::copy(src, src + H * W, dst);
            }
        }
        c_off += Ci;
    }
    return y;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1) {
    require_rank(x, 4, "slice_channels input");
    const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                    ") invalid for C=" + std::to_string(C));
    Tensor<T> y({N, c1 - c0, H, W});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < c1 - c0; ++c) {
            const T* src = x.data.data() + (n * C + c0 + c) * H * W;
            T* dst = y.data.data() + (n * (c1 - c0) + c) * H * W;
            std::copy(src, src + H * W, dst);
        }
    }
    return y;
}

template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, T lr) {
    if (!param.same_shape(grad))
        throw std::invalid_argument("sgd_step: shape mismatch " + shape_str(param.shape) + " vs " +
                                    shape_str(grad.shape));
    const int64_t n = param.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) param.data[static_cast<size_t>(i)] -= lr * grad.data[static_cast<size_t>(i)];
}

#define MPSEG_INSTANTIATE_KERNELS(T)                                                                                  \
    template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dSpec&);   \
    template Tensor<T> conv2d_backward_input<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<int64_t>&,     \
                                                const Conv2dSpec&);                                                  \
    template Tensor<T> conv2d_backward_weight<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<int64_t>&,    \
                                                 const Conv2dSpec&);                                                 \
    template Tensor<T> conv2d_backward_bias<T>(const Tensor<T>&);                                                    \
    template Tensor<T> lc_conv_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                          Tensor<T>*);                                                               \
    template Tensor<T> lc_conv_backward_input<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                                 const Tensor<T>&);                                                  \
    template Tensor<T> lc_conv_backward_weight<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                                  const Tensor<T>&, const std::vector<int64_t>&);                    \
    template Tensor<T> channel_stats_forward<T>(const Tensor<T>&, std::vector<int32_t>*);                            \
    template Tensor<T> channel_stats_backward<T>(const Tensor<T>&, const std::vector<int32_t>&,                      \
                                                 const std::vector<int64_t>&);                                       \
    template Tensor<T> global_avg_pool_forward<T>(const Tensor<T>&);                                                 \
    template Tensor<T> global_avg_pool_backward<T>(const Tensor<T>&, const std::vector<int64_t>&);                   \
    template Tensor<T> bilinear_upsample_forward<T>(const Tensor<T>&, int64_t, int64_t);                             \
    template Tensor<T> bilinear_upsample_backward<T>(const Tensor<T>&, const std::vector<int64_t>&);                 \
    template Tensor<T> softmax_forward<T>(const Tensor<T>&, int);                                                    \
    template Tensor<T> softmax_backward<T>(const Tensor<T>&, const Tensor<T>&, int);                                 \
    template T cross_entropy_forward<T>(const Tensor<T>&, const Tensor<uint8_t>&);                                   \
    template Tensor<T> cross_entropy_backward<T>(T, const Tensor<T>&, const Tensor<uint8_t>&);                       \
    template Tensor<T> max_filter3x3<T>(const Tensor<T>&);                                                           \
    template Tensor<T> relu_forward<T>(const Tensor<T>&);                                                            \
    template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> sigmoid_forward<T>(const Tensor<T>&);                                                         \
    template Tensor<T> sigmoid_backward<T>(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                   \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                                   \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                   \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                                                \
    template Tensor<T> concat_channels<T>(const std::vector<const Tensor<T>*>&);                                     \
    template Tensor<T> slice_channels<T>(const Tensor<T>&, int64_t, int64_t);                                        \
    template void sgd_step<T>(Tensor<T>&, const Tensor<T>&, T);

MPSEG_INSTANTIATE_KERNELS(float)
MPSEG_INSTANTIATE_KERNELS(double)

#undef MPSEG_INSTANTIATE_KERNELS

}  // namespace mpseg::kernels
