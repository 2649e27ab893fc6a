#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpseg {

inline int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got " + std::to_string(d));
        n *= d;
    }
    return n;
}

/// Dense row-major N-d array over float or double. The shape product always
/// equals the number of stored values.
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int64_t> s, T fill = T{})
        : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), fill) {}

    Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape product " + std::to_string(numel_of(shape)));
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s), T{0}); }
    static Tensor full(std::vector<int64_t> s, T v) { return Tensor(std::move(s), v); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    int64_t dim(int i) const {
        if (i < 0 || i >= rank()) throw std::out_of_range("tensor dim index " + std::to_string(i));
        return shape[static_cast<size_t>(i)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // Flat accessors for the common 4-d (N,C,H,W) layout.
    T& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    T at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }

    T scalar() const {
        if (numel() != 1) throw std::logic_error("scalar() on tensor of size " + std::to_string(numel()));
        return data[0];
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int64_t>& want, const char* what) {
    if (t.shape != want)
        throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(want) + ", got " +
                                    shape_str(t.shape));
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                                    shape_str(t.shape));
}

}  // namespace mpseg
