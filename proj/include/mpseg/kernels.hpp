#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mpseg/tensor.hpp"

namespace mpseg {

struct Conv2dSpec {
    int64_t stride = 1;
    int64_t pad = 0;
    int64_t groups = 1;
};

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

/// OpenMP-parallel kernels. Every parallel loop assigns disjoint output
/// elements and each element is reduced in a fixed serial order, so results
/// are bit-identical regardless of thread count. A naive serial mirror of
/// each kernel lives in kernels_ref.hpp for cross-checking and benchmarks.
namespace kernels {

// Cross-correlation with zero padding; w is [Cout, Cin/groups, kh, kw],
// bias may be empty. Output H' = (H + 2p - kh)/stride + 1.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv2dSpec& spec);

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w, const std::vector<int64_t>& x_shape,
                                const Conv2dSpec& spec);

template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, const std::vector<int64_t>& w_shape,
                                 const Conv2dSpec& spec);

template <typename T>
Tensor<T> conv2d_backward_bias(const Tensor<T>& dy);

// Confidence-weighted 3x3 convolution, padding 1: each window is masked by
// the confidence map and normalized by the window's confidence sum. Windows
// whose confidence sum is <= degenerate_eps output the bias alone.
inline constexpr double lc_degenerate_eps = 1e-8;

template <typename T>
Tensor<T> lc_conv_forward(const Tensor<T>& x, const Tensor<T>& conf, const Tensor<T>& w, const Tensor<T>& b,
                          Tensor<T>* conf_window_sum_out);

template <typename T>
Tensor<T> lc_conv_backward_input(const Tensor<T>& dy, const Tensor<T>& conf, const Tensor<T>& conf_window_sum,
                                 const Tensor<T>& w);

template <typename T>
Tensor<T> lc_conv_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& conf,
                                  const Tensor<T>& conf_window_sum, const std::vector<int64_t>& w_shape);

// Per-pixel mean and max over channels: y[:,0] = mean, y[:,1] = max.
// argmax_out (flat channel index per (n,h,w)) is saved for the backward pass.
template <typename T>
Tensor<T> channel_stats_forward(const Tensor<T>& x, std::vector<int32_t>* argmax_out);

template <typename T>
Tensor<T> channel_stats_backward(const Tensor<T>& dy, const std::vector<int32_t>& argmax,
                                 const std::vector<int64_t>& x_shape);

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const std::vector<int64_t>& x_shape);

// Half-pixel-center (align-corners-off) bilinear interpolation.
template <typename T>
Tensor<T> bilinear_upsample_forward(const Tensor<T>& x, int64_t out_h, int64_t out_w);

template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& dy, const std::vector<int64_t>& x_shape);

// Softmax along the given axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& dy, const Tensor<T>& y, int axis);

// Mean over all pixels of -log(p at target class); probabilities clamped
// at prob_floor before the log. pred is [N,2,H,W] of probabilities, target
// is [N,H,W] with labels in {0,1}.
inline constexpr double ce_prob_floor = 1e-12;

template <typename T>
T cross_entropy_forward(const Tensor<T>& pred, const Tensor<uint8_t>& target);

template <typename T>
Tensor<T> cross_entropy_backward(T dloss, const Tensor<T>& pred, const Tensor<uint8_t>& target);

// 3x3 sliding-window maximum, stride 1, zero padding.
template <typename T>
Tensor<T> max_filter3x3(const Tensor<T>& x);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& dy, const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& dy, const Tensor<T>& y);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1);

// p <- p - lr * g, elementwise.
template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, T lr);

}  // namespace kernels
}  // namespace mpseg
