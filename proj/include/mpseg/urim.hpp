#pragma once

#include <array>
#include <vector>

#include "mpseg/params.hpp"
#include "mpseg/tape.hpp"

namespace mpseg {

/// Uncertain-region inpainting head: a per-pixel confidence map derived from
/// the initial probabilities drives four confidence-weighted convolutions,
/// with the confidence propagated outward by a 3x3 max filter between layers.
template <typename T>
struct UrimParams {
    int64_t width = 0;  // D, decision-feature channels
    std::array<Tensor<T>, 4> lc_w;  // each [D,D,3,3]
    std::array<Tensor<T>, 4> lc_b;  // each [D]
    Tensor<T> fuse_w, fuse_b;       // [2,2D,1,1], [2]

    static UrimParams init(int64_t width, Rng& rng);
};

struct UrimVars {
    std::array<Var, 4> lc_w, lc_b;
    Var fuse_w, fuse_b;
};

template <typename T>
UrimVars urim_lift(Tape<T>& tape, const UrimParams<T>& p, bool needs_grad);

/// M_conf = 1 - exp(1 - S^max/S^min) per pixel, with S^min clamped at 1e-12
/// and the result clamped to the largest representable value below 1 so the
/// map stays in [0,1). Throws if the two channels do not sum to 1 within
/// 1e-6 or are negative. probs is [N,2,H,W]; the result is [N,1,H,W].
template <typename T>
Tensor<T> confidence_map(const Tensor<T>& probs);

/// 3x3 sliding-window maximum with zero padding.
template <typename T>
Tensor<T> update_confidence(const Tensor<T>& conf);

template <typename T>
struct UrimResult {
    Var s_final;
    std::vector<Tensor<T>> confidence_trace;  // m0..m4
};

/// Four rounds of x <- relu(lc_conv(x, m_i)) with m_{i+1} = max-filter(m_i),
/// then a 1x1 conv over [refined, original] features and a softmax. The
/// confidence map is treated as a constant: no gradient flows into s_init.
template <typename T>
UrimResult<T> urim_refine(Tape<T>& tape, Var decision_features, Var s_init, const UrimVars& vars);

}  // namespace mpseg
