#pragma once

#include <utility>

#include "mpseg/params.hpp"
#include "mpseg/tape.hpp"

namespace mpseg {

/// Spatial aggregation block: pools the two phase features into a 4-channel
/// descriptor, runs a shared conv pyramid (3x3 and 5x5 local branches, GAP +
/// 7x7 global branch) over it, and fuses the branches with a 3x3 conv into
/// 2C channels that split into the two phases' initial response maps.
template <typename T>
struct SamParams {
    int64_t channels = 0;  // C, the phase feature width at this stage
    Tensor<T> conv3_w, conv3_b;  // [C,4,3,3]
    Tensor<T> conv5_w, conv5_b;  // [C,4,5,5]
    Tensor<T> conv7_w, conv7_b;  // [C,4,7,7], applied after GAP
    Tensor<T> fuse_w, fuse_b;    // [2C,3C,3,3]

    static SamParams init(int64_t channels, Rng& rng);
};

/// Tape handles for one SAM block's parameters.
struct SamVars {
    Var conv3_w, conv3_b, conv5_w, conv5_b, conv7_w, conv7_b, fuse_w, fuse_b;
};

template <typename T>
SamVars sam_lift(Tape<T>& tape, const SamParams<T>& p, bool needs_grad);

/// Channel-pooled descriptors of both phases: [pv-avg, pv-max, art-avg, art-max].
template <typename T>
Var extract_descriptors(Tape<T>& tape, Var f_pv, Var f_art);

/// Initial (pre-normalization) response maps, C channels per phase.
template <typename T>
std::pair<Var, Var> pyramid_responses(Tape<T>& tape, Var desc, const SamVars& vars, int64_t channels);

/// Pairwise softmax across the two phases; the maps sum to 1 elementwise.
template <typename T>
std::pair<Var, Var> normalize_responses(Tape<T>& tape, Var w0_pv, Var w0_art);

/// F_Aggr = w_pv * f_pv + w_art * f_art.
template <typename T>
Var aggregate(Tape<T>& tape, Var f_pv, Var f_art, Var w_pv, Var w_art);

/// Modulated per-stream features, (f + f_aggr) / 2 each.
template <typename T>
std::pair<Var, Var> modulate_streams(Tape<T>& tape, Var f_pv, Var f_art, Var f_aggr);

struct SamOutputs {
    Var w_pv, w_art;
    Var aggregated;
    Var mod_pv, mod_art;
};

template <typename T>
SamOutputs sam_forward(Tape<T>& tape, Var f_pv, Var f_art, const SamVars& vars, int64_t channels);

}  // namespace mpseg
