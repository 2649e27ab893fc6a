#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mpseg/kernels.hpp"
#include "mpseg/tensor.hpp"

namespace mpseg {

/// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff over a static tape built per forward pass. Nodes are
/// appended in forward order; backward() walks them in reverse. Tensors on
/// the tape are never mutated in place, and each op saves whatever forward
/// context its gradient needs (argmax indices, confidence window sums, ...).
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var input(Tensor<T> value, bool needs_grad = false);

    Var conv2d(Var x, Var w, Var b, Conv2dSpec spec);
    /// Confidence acts as a constant mask: no gradient flows into it.
    Var lc_conv(Var x, Var w, Var b, Tensor<T> confidence);
    Var relu(Var x);
    Var sigmoid(Var x);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, T s);
    Var channel_stats(Var x);
    Var global_avg_pool(Var x);
    Var bilinear_upsample(Var x, int64_t out_h, int64_t out_w);
    Var softmax(Var x, int axis);
    Var cross_entropy(Var probs, Tensor<uint8_t> target);
    Var concat_channels(const std::vector<Var>& xs);
    Var slice_channels(Var x, int64_t c0, int64_t c1);
    /// Scalar dot product against fixed weights; reduces any tensor to a
    /// scalar with a distinct gradient per element.
    Var weighted_sum(Var x, Tensor<T> weights);

    const Tensor<T>& value(Var v) const { return node(v).value; }
    const Tensor<T>& grad(Var v) const;
    bool needs_grad(Var v) const { return node(v).needs_grad; }
    size_t size() const { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node
    /// that requires them. loss must be scalar.
    void backward(Var loss);

    /// Throws if any stored value (or gradient, after backward) is non-finite.
    void check_finite(const char* where) const;

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // empty until backward touches it
        bool needs_grad = false;
        std::function<void(Tape&, const Tensor<T>&)> backprop;  // (tape, self grad)
    };

    Node& node(Var v) {
        if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size())) throw std::logic_error("invalid tape var");
        return nodes_[static_cast<size_t>(v.id)];
    }
    const Node& node(Var v) const {
        if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size())) throw std::logic_error("invalid tape var");
        return nodes_[static_cast<size_t>(v.id)];
    }

    Var push(Tensor<T> value, bool needs_grad, std::function<void(Tape&, const Tensor<T>&)> backprop);
    void accum(Var v, Tensor<T>&& g);

    std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mpseg
