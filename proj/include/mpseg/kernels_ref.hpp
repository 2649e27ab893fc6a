#pragma once

#include "mpseg/kernels.hpp"

namespace mpseg::kernels {

/// Single-threaded textbook implementations of the heavy kernels, kept as an
/// independent cross-check for the OpenMP versions and as the baseline for
/// the kernel benchmark. Backward passes use the scatter formulation (loop
/// over outputs, accumulate into inputs) rather than the gather form above.
namespace ref {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv2dSpec& spec);

template <typename T>
void conv2d_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& w, const Conv2dSpec& spec,
                     Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db);

template <typename T>
Tensor<T> lc_conv_forward(const Tensor<T>& x, const Tensor<T>& conf, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
void lc_conv_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& conf, const Tensor<T>& w,
                      Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db);

template <typename T>
Tensor<T> bilinear_upsample_forward(const Tensor<T>& x, int64_t out_h, int64_t out_w);

template <typename T>
Tensor<T> max_filter3x3(const Tensor<T>& x);

template <typename T>
Tensor<T> channel_stats_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x, int axis);

template <typename T>
T cross_entropy_forward(const Tensor<T>& pred, const Tensor<uint8_t>& target);

}  // namespace ref
}  // namespace mpseg::kernels
