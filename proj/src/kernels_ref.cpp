#include "mpseg/kernels_ref.hpp"

#include <algorithm>
#include <cmath>

namespace mpseg::kernels::ref {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv2dSpec& spec) {
    const int64_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Cout = w.shape[0], Cg = w.shape[1], KH = w.shape[2], KW = w.shape[3];
    const int64_t OH = conv_out_extent(H, KH, spec.stride, spec.pad);
    const int64_t OW = conv_out_extent(W, KW, spec.stride, spec.pad);
    const int64_t cout_per_g = Cout / spec.groups;
    Tensor<T> y({N, Cout, OH, OW});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    T acc = b.numel() ? b.data[static_cast<size_t>(co)] : T{0};
                    for (int64_t cg = 0; cg < Cg; ++cg) {
                        const int64_t ci = (co / cout_per_g) * Cg + cg;
                        for (int64_t kh = 0; kh < KH; ++kh)
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                const int64_t ih = oh * spec.stride - spec.pad + kh;
                                const int64_t iw = ow * spec.stride - spec.pad + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at4(n, ci, ih, iw) * w.at4(co, cg, kh, kw);
                            }
                    }
                    y.at4(n, co, oh, ow) = acc;
                }
    return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& w, const Conv2dSpec& spec,
                     Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db) {
    const int64_t N = x.shape[0], H = x.shape[2], W = x.shape[3];
    const int64_t Cout = w.shape[0], Cg = w.shape[1], KH = w.shape[2], KW = w.shape[3];
    const int64_t OH = dy.shape[2], OW = dy.shape[3];
    const int64_t cout_per_g = Cout / spec.groups;
    dx = Tensor<T>(x.shape);
    dw = Tensor<T>(w.shape);
    db = Tensor<T>({Cout});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    const T g = dy.at4(n, co, oh, ow);
                    db.data[static_cast<size_t>(co)] += g;
                    for (int64_t cg = 0; cg < Cg; ++cg) {
                        const int64_t ci = (co / cout_per_g) * Cg + cg;
                        for (int64_t kh = 0; kh < KH; ++kh)
                            for (int64_t kw = 0; kw < KW; ++kw) {
                                const int64_t ih = oh * spec.stride - spec.pad + kh;
                                const int64_t iw = ow * spec.stride - spec.pad + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                dx.at4(n, ci, ih, iw) += w.at4(co, cg, kh, kw) * g;
                                dw.at4(co, cg, kh, kw) += x.at4(n, ci, ih, iw) * g;
                            }
                    }
                }
}

template <typename T>
Tensor<T> lc_conv_forward(const Tensor<T>& x, const Tensor<T>& conf, const Tensor<T>& w, const Tensor<T>& b) {
    const int64_t N = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Dout = w.shape[0];
    Tensor<T> y({N, Dout, H, W});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t dout = 0; dout < Dout; ++dout)
            for (int64_t oh = 0; oh < H; ++oh)
                for (int64_t ow = 0; ow < W; ++ow) {
                    T msum{0};
                    for (int64_t kh = -1; kh <= 1; ++kh)
                        for (int64_t kw = -1; kw <= 1; ++kw) {
                            const int64_t ih = oh + kh, iw = ow + kw;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            msum += conf.at4(n, 0, ih, iw);
                        }
                    if (static_cast<double>(msum) <= lc_degenerate_eps) {
                        y.at4(n, dout, oh, ow) = b.data[static_cast<size_t>(dout)];
                        continue;
                    }
                    T acc{0};
                    for (int64_t di = 0; di < D; ++di)
                        for (int64_t kh = -1; kh <= 1; ++kh)
                            for (int64_t kw = -1; kw <= 1; ++kw) {
                                const int64_t ih = oh + kh, iw = ow + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += w.at4(dout, di, kh + 1, kw + 1) * x.at4(n, di, ih, iw) * conf.at4(n, 0, ih, iw);
                            }
                    y.at4(n, dout, oh, ow) = acc / msum + b.data[static_cast<size_t>(dout)];
                }
    return y;
}

template <typename T>
void lc_conv_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& conf, const Tensor<T>& w,
                      Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db) {
    const int64_t N = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Dout = w.shape[0];
    dx = Tensor<T>(x.shape);
    dw = Tensor<T>(w.shape);
    db = Tensor<T>({Dout});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t dout = 0; dout < Dout; ++dout)
            for (int64_t oh = 0; oh < H; ++oh)
                for (int64_t ow = 0; ow < W; ++ow) {
                    const T g = dy.at4(n, dout, oh, ow);
                    db.data[static_cast<size_t>(dout)] += g;
                    T msum{0};
                    for (int64_t kh = -1; kh <= 1; ++kh)
                        for (int64_t kw = -1; kw <= 1; ++kw) {
                            const int64_t ih = oh + kh, iw = ow + kw;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            msum += conf.at4(n, 0, ih, iw);
                        }
                    if (static_cast<double>(msum) <= lc_degenerate_eps) continue;
                    for (int64_t di = 0; di < D; ++di)
                        for (int64_t kh = -1; kh <= 1; ++kh)
                            for (int64_t kw = -1; kw <= 1; ++kw) {
                                const int64_t ih = oh + kh, iw = ow + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                const T mx = conf.at4(n, 0, ih, iw);
                                dx.at4(n, di, ih, iw) += w.at4(dout, di, kh + 1, kw + 1) * mx * g / msum;
                                dw.at4(dout, di, kh + 1, kw + 1) += x.at4(n, di, ih, iw) * mx * g / msum;
                            }
                }
}

template <typename T>
Tensor<T> bilinear_upsample_forward(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
    const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor<T> y({N, C, out_h, out_w});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t oh = 0; oh < out_h; ++oh)
                for (int64_t ow = 0; ow < out_w; ++ow) {
                    double sh = (static_cast<double>(oh) + 0.5) * static_cast<double>(H) / static_cast<double>(out_h) - 0.5;
                    double sw = (static_cast<double>(ow) + 0.5) * static_cast<double>(W) / static_cast<double>(out_w) - 0.5;
                    sh = std::clamp(sh, 0.0, static_cast<double>(H - 1));
                    sw = std::clamp(sw, 0.0, static_cast<double>(W - 1));
                    const int64_t h0 = static_cast<int64_t>(sh), w0 = static_cast<int64_t>(sw);
                    const int64_t h1 = std::min(h0 + 1, H - 1), w1 = std::min(w0 + 1, W - 1);
                    const double fh = sh - static_cast<double>(h0), fw = sw - static_cast<double>(w0);
                    y.at4(n, c, oh, ow) = static_cast<T>(
                        (1 - fh) * ((1 - fw) * x.at4(n, c, h0, w0) + fw * x.at4(n, c, h0, w1)) +
                        fh * ((1 - fw) * x.at4(n, c, h1, w0) + fw * x.at4(n, c, h1, w1)));
                }
    return y;
}

template <typename T>
Tensor<T> max_filter3x3(const Tensor<T>& x) {
    const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor<T> y(x.shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) {
                    T best{0};
                    for (int64_t kh = -1; kh <= 1; ++kh)
                        for (int64_t kw = -1; kw <= 1; ++kw) {
                            const int64_t ih = h + kh, iw = w + kw;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            best = std::max(best, x.at4(n, c, ih, iw));
                        }
                    y.at4(n, c, h, w) = best;
                }
    return y;
}

template <typename T>
Tensor<T> channel_stats_forward(const Tensor<T>& x) {
    const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    Tensor<T> y({N, 2, H, W});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                T sum{0}, best = x.at4(n, 0, h, w);
                for (int64_t c = 0; c < C; ++c) {
                    sum += x.at4(n, c, h, w);
                    best = std::max(best, x.at4(n, c, h, w));
                }
                y.at4(n, 0, h, w) = sum / static_cast<T>(C);
                y.at4(n, 1, h, w) = best;
            }
    return y;
}

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x, int axis) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];
    const int64_t K = x.shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < x.shape.size(); ++i) inner *= x.shape[i];
    Tensor<T> y(x.shape);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T m = x.data[static_cast<size_t>(o * K * inner + i)];
            for (int64_t j = 1; j < K; ++j)
                m = std::max(m, x.data[static_cast<size_t>(o * K * inner + j * inner + i)]);
            T sum{0};
            for (int64_t j = 0; j < K; ++j) {
                const T e = std::exp(x.data[static_cast<size_t>(o * K * inner + j * inner + i)] - m);
                y.data[static_cast<size_t>(o * K * inner + j * inner + i)] = e;
                sum += e;
            }
            for (int64_t j = 0; j < K; ++j) y.data[static_cast<size_t>(o * K * inner + j * inner + i)] /= sum;
        }
    return y;
}

template <typename T>
T cross_entropy_forward(const Tensor<T>& pred, const Tensor<uint8_t>& target) {
    const int64_t N = pred.shape[0], H = pred.shape[2], W = pred.shape[3];
    double total = 0.0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                const uint8_t t = target.data[static_cast<size_t>((n * H + h) * W + w)];
                total -= std::log(std::max(static_cast<double>(pred.at4(n, t, h, w)), ce_prob_floor));
            }
    return static_cast<T>(total / static_cast<double>(N * H * W));
}

#define MPSEG_INSTANTIATE_REF(T)                                                                                   \
    template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dSpec&); \
    template void conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dSpec&,      \
                                     Tensor<T>&, Tensor<T>&, Tensor<T>&);                                          \
    template Tensor<T> lc_conv_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
    template void lc_conv_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                      Tensor<T>&, Tensor<T>&, Tensor<T>&);                                         \
    template Tensor<T> bilinear_upsample_forward<T>(const Tensor<T>&, int64_t, int64_t);                           \
    template Tensor<T> max_filter3x3<T>(const Tensor<T>&);                                                         \
    template Tensor<T> channel_stats_forward<T>(const Tensor<T>&);                                                 \
    template Tensor<T> softmax_forward<T>(const Tensor<T>&, int);                                                  \
    template T cross_entropy_forward<T>(const Tensor<T>&, const Tensor<uint8_t>&);

MPSEG_INSTANTIATE_REF(float)
MPSEG_INSTANTIATE_REF(double)

#undef MPSEG_INSTANTIATE_REF

}  // namespace mpseg::kernels::ref
