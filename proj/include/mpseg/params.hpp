#pragma once

#include <cmath>

#include "mpseg/rng.hpp"
#include "mpseg/tensor.hpp"

namespace mpseg {

/// Kaiming-style fan-in scaled uniform init for conv weights
/// ([Cout, Cin/groups, kh, kw]); biases are zero-initialized separately.
template <typename T>
Tensor<T> kaiming_conv_init(std::vector<int64_t> w_shape, Rng& rng) {
    const int64_t fan_in = w_shape[1] * w_shape[2] * w_shape[3];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor<T> w(std::move(w_shape));
    rng.fill_uniform(w, -bound, bound);
    return w;
}

}  // namespace mpseg
