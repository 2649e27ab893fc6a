#include "mpseg/tape.hpp"

#include <memory>
#include <stdexcept>
#include <utility>

namespace mpseg {

namespace k = kernels;

template <typename T>
Var Tape<T>::push(Tensor<T> value, bool needs_grad, std::function<void(Tape&, const Tensor<T>&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size()) - 1};
}

template <typename T>
void Tape<T>::accum(Var v, Tensor<T>&& g) {
    Node& n = node(v);
    if (!n.needs_grad) return;
    if (n.grad.numel() == 0) {
        n.grad = std::move(g);
    } else {
        const int64_t count = n.grad.numel();
        for (int64_t i = 0; i < count; ++i) n.grad.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
    }
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var v) const {
    const Node& n = node(v);
    if (!n.needs_grad) throw std::logic_error("grad() on a node that does not require gradients");
    return n.grad;
}

template <typename T>
void Tape<T>::backward(Var loss) {
    Node& out = node(loss);
    if (out.value.numel() != 1) throw std::logic_error("backward() requires a scalar loss");
    if (!out.needs_grad) throw std::logic_error("backward() on a loss with no gradient path");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    out.grad = Tensor<T>({1}, T{1});
    for (int32_t id = static_cast<int32_t>(nodes_.size()) - 1; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad || !n.backprop) continue;
        if (n.grad.numel() == 0) continue;  // no path from the loss
        n.backprop(*this, n.grad);
    }
}

template <typename T>
void Tape<T>::check_finite(const char* where) const {
    for (const auto& n : nodes_) {
        if (!n.value.all_finite())
            throw std::runtime_error(std::string("non-finite value on tape during ") + where);
        if (n.grad.numel() != 0 && !n.grad.all_finite())
            throw std::runtime_error(std::string("non-finite gradient on tape during ") + where);
    }
}

template <typename T>
Var Tape<T>::input(Tensor<T> value, bool needs_grad) {
    return push(std::move(value), needs_grad, nullptr);
}

template <typename T>
Var Tape<T>::conv2d(Var x, Var w, Var b, Conv2dSpec spec) {
    Tensor<T> y = k::conv2d_forward(value(x), value(w), value(b), spec);
    const bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
    return push(std::move(y), ng, [x, w, b, spec](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) t.accum(x, k::conv2d_backward_input(g, t.value(w), t.value(x).shape, spec));
        if (t.needs_grad(w)) t.accum(w, k::conv2d_backward_weight(g, t.value(x), t.value(w).shape, spec));
        if (t.needs_grad(b) && t.value(b).numel()) t.accum(b, k::conv2d_backward_bias(g));
    });
}

template <typename T>
Var Tape<T>::lc_conv(Var x, Var w, Var b, Tensor<T> confidence) {
    Tensor<T> window_sum;
    Tensor<T> y = k::lc_conv_forward(value(x), confidence, value(w), value(b), &window_sum);
    const bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
    auto conf = std::make_shared<Tensor<T>>(std::move(confidence));
    auto msum = std::make_shared<Tensor<T>>(std::move(window_sum));
    return push(std::move(y), ng, [x, w, b, conf, msum](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) t.accum(x, k::lc_conv_backward_input(g, *conf, *msum, t.value(w)));
        if (t.needs_grad(w)) t.accum(w, k::lc_conv_backward_weight(g, t.value(x), *conf, *msum, t.value(w).shape));
        if (t.needs_grad(b)) t.accum(b, k::conv2d_backward_bias(g));
    });
}

template <typename T>
Var Tape<T>::relu(Var x) {
    return push(k::relu_forward(value(x)), needs_grad(x), [x](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) t.accum(x, k::relu_backward(g, t.value(x)));
    });
}

template <typename T>
Var Tape<T>::sigmoid(Var x) {
    Var out = push(k::sigmoid_forward(value(x)), needs_grad(x), nullptr);
    node(out).backprop = [x, out](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) t.accum(x, k::sigmoid_backward(g, t.value(out)));
    };
    return out;
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
    return push(k::add(value(a), value(b)), needs_grad(a) || needs_grad(b), [a, b](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(a)) t.accum(a, Tensor<T>(g));
        if (t.needs_grad(b)) t.accum(b, Tensor<T>(g));
    });
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
    return push(k::sub(value(a), value(b)), needs_grad(a) || needs_grad(b), [a, b](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(a)) t.accum(a, Tensor<T>(g));
        if (t.needs_grad(b)) t.accum(b, k::scale(g, T{-1}));
    });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
    return push(k::mul(value(a), value(b)), needs_grad(a) || needs_grad(b), [a, b](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(a)) t.accum(a, k::mul(g, t.value(b)));
        if (t.needs_grad(b)) t.accum(b, k::mul(g, t.value(a)));
    });
}

template <typename T>
Var Tape<T>::scale(Var a, T s) {
    return push(k::scale(value(a), s), needs_grad(a), [a, s](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(a)) t.accum(a, k::scale(g, s));
    });
}

template <typename T>
Var Tape<T>::channel_stats(Var x) {
    auto argmax = std::make_shared<std::vector<int32_t>>();
    Tensor<T> y = k::channel_stats_forward(value(x), argmax.get());
    return push(std::move(y), needs_grad(x), [x, argmax](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) t.accum(x, k::channel_stats_backward(g, *argmax, t.value(x).shape));
    });
}

template <typename T>
Var Tape<T>::global_avg_pool(Var x) {
    return push(k::global_avg_pool_forward(value(x)), needs_grad(x), [x](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) t.accum(x, k::global_avg_pool_backward(g, t.value(x).shape));
    });
}

template <typename T>
Var Tape<T>::bilinear_upsample(Var x, int64_t out_h, int64_t out_w) {
    return push(k::bilinear_upsample_forward(value(x), out_h, out_w), needs_grad(x),
                [x](Tape& t, const Tensor<T>& g) {
                    if (t.needs_grad(x)) t.accum(x, k::bilinear_upsample_backward(g, t.value(x).shape));
                });
}

template <typename T>
Var Tape<T>::softmax(Var x, int axis) {
    Var out = push(k::softmax_forward(value(x), axis), needs_grad(x), nullptr);
    node(out).backprop = [x, out, axis](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) t.accum(x, k::softmax_backward(g, t.value(out), axis));
    };
    return out;
}

template <typename T>
Var Tape<T>::cross_entropy(Var probs, Tensor<uint8_t> target) {
    auto labels = std::make_shared<Tensor<uint8_t>>(std::move(target));
    Tensor<T> loss({1}, k::cross_entropy_forward(value(probs), *labels));
    return push(std::move(loss), needs_grad(probs), [probs, labels](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(probs)) t.accum(probs, k::cross_entropy_backward(g.data[0], t.value(probs), *labels));
    });
}

template <typename T>
Var Tape<T>::concat_channels(const std::vector<Var>& xs) {
    std::vector<const Tensor<T>*> ptrs;
    bool ng = false;
    for (Var v : xs) {
        ptrs.push_back(&value(v));
        ng = ng || needs_grad(v);
    }
    return push(k::concat_channels(ptrs), ng, [xs](Tape& t, const Tensor<T>& g) {
        int64_t c = 0;
        for (Var v : xs) {
            const int64_t ci = t.value(v).shape[1];
            if (t.needs_grad(v)) t.accum(v, k::slice_channels(g, c, c + ci));
            c += ci;
        }
    });
}

template <typename T>
Var Tape<T>::slice_channels(Var x, int64_t c0, int64_t c1) {
    return push(k::slice_channels(value(x), c0, c1), needs_grad(x), [x, c0, c1](Tape& t, const Tensor<T>& g) {
        if (!t.needs_grad(x)) return;
        const auto& xs = t.value(x).shape;
        Tensor<T> dx(xs);
        const int64_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = c0; c < c1; ++c) {
                const T* src = g.data.data() + (n * (c1 - c0) + (c - c0)) * HW;
                T* dst = dx.data.data() + (n * C + c) * HW;
                std::copy(src, src + HW, dst);
            }
        t.accum(x, std::move(dx));
    });
}

template <typename T>
Var Tape<T>::weighted_sum(Var x, Tensor<T> weights) {
    const Tensor<T>& xv = value(x);
    if (!xv.same_shape(weights))
        throw std::invalid_argument("weighted_sum: shape mismatch " + shape_str(xv.shape) + " vs " +
                                    shape_str(weights.shape));
    double acc = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i)
        acc += static_cast<double>(xv.data[static_cast<size_t>(i)]) *
               static_cast<double>(weights.data[static_cast<size_t>(i)]);
    auto wts = std::make_shared<Tensor<T>>(std::move(weights));
    return push(Tensor<T>({1}, static_cast<T>(acc)), needs_grad(x), [x, wts](Tape& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) t.accum(x, k::scale(*wts, g.data[0]));
    });
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mpseg
