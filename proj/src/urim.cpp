#include "mpseg/urim.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mpseg {

template <typename T>
UrimParams<T> UrimParams<T>::init(int64_t width, Rng& rng) {
    UrimParams<T> p;
    p.width = width;
    for (int i = 0; i < 4; ++i) {
        p.lc_w[static_cast<size_t>(i)] = kaiming_conv_init<T>({width, width, 3, 3}, rng);
        p.lc_b[static_cast<size_t>(i)] = Tensor<T>({width});
    }
    p.fuse_w = kaiming_conv_init<T>({2, 2 * width, 1, 1}, rng);
    p.fuse_b = Tensor<T>({2});
    return p;
}

template <typename T>
UrimVars urim_lift(Tape<T>& tape, const UrimParams<T>& p, bool needs_grad) {
    UrimVars v;
    for (size_t i = 0; i < 4; ++i) {
        v.lc_w[i] = tape.input(p.lc_w[i], needs_grad);
        v.lc_b[i] = tape.input(p.lc_b[i], needs_grad);
    }
    v.fuse_w = tape.input(p.fuse_w, needs_grad);
    v.fuse_b = tape.input(p.fuse_b, needs_grad);
    return v;
}

template <typename T>
Tensor<T> confidence_map(const Tensor<T>& probs) {
    require_rank(probs, 4, "confidence_map input");
    if (probs.shape[1] != 2)
        throw std::invalid_argument("confidence_map: expected 2 channels, got " + std::to_string(probs.shape[1]));
    const int64_t N = probs.shape[0], H = probs.shape[2], W = probs.shape[3];
    Tensor<T> m({N, 1, H, W});
    // Largest value below 1: the true map saturates against 1.0 in floating
    // point for very confident pixels, and the type promises [0,1).
    const T below_one = std::nextafter(T{1}, T{0});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                const T p0 = probs.at4(n, 0, h, w);
                const T p1 = probs.at4(n, 1, h, w);
                if (p0 < T{0} || p1 < T{0} || std::fabs(static_cast<double>(p0 + p1) - 1.0) > 1e-6)
                    throw std::invalid_argument("confidence_map: probabilities not normalized at pixel (" +
                                                std::to_string(n) + "," + std::to_string(h) + "," +
                                                std::to_string(w) + ")");
                const T smax = std::max(p0, p1);
                const T smin = std::max(std::min(p0, p1), static_cast<T>(1e-12));
                T v = T{1} - std::exp(T{1} - smax / smin);
                if (v > below_one) v = below_one;
                m.at4(n, 0, h, w) = v;
            }
    return m;
}

template <typename T>
Tensor<T> update_confidence(const Tensor<T>& conf) {
    return kernels::max_filter3x3(conf);
}

template <typename T>
UrimResult<T> urim_refine(Tape<T>& tape, Var decision_features, Var s_init, const UrimVars& vars) {
    const auto& dshape = tape.value(decision_features).shape;
    const int64_t D = dshape[1];
    if (tape.value(vars.lc_w[0]).shape[1] != D)
        throw std::invalid_argument("urim_refine: decision width " + std::to_string(D) +
                                    " does not match LC-Conv weights " +
                                    shape_str(tape.value(vars.lc_w[0]).shape));

    UrimResult<T> res;
    Tensor<T> conf = confidence_map(tape.value(s_init));
    res.confidence_trace.push_back(conf);
    Var x = decision_features;
    for (size_t i = 0; i < 4; ++i) {
        x = tape.relu(tape.lc_conv(x, vars.lc_w[i], vars.lc_b[i], conf));
        conf = update_confidence(conf);
        res.confidence_trace.push_back(conf);
    }
    Var merged = tape.concat_channels({x, decision_features});
    Var logits = tape.conv2d(merged, vars.fuse_w, vars.fuse_b, {1, 0, 1});
    res.s_final = tape.softmax(logits, 1);
    return res;
}

#define MPSEG_INSTANTIATE_URIM(T)                                              \
    template struct UrimParams<T>;                                             \
    template UrimVars urim_lift<T>(Tape<T>&, const UrimParams<T>&, bool);      \
    template Tensor<T> confidence_map<T>(const Tensor<T>&);                    \
    template Tensor<T> update_confidence<T>(const Tensor<T>&);                 \
    template UrimResult<T> urim_refine<T>(Tape<T>&, Var, Var, const UrimVars&);

MPSEG_INSTANTIATE_URIM(float)
MPSEG_INSTANTIATE_URIM(double)

#undef MPSEG_INSTANTIATE_URIM

}  // namespace mpseg
