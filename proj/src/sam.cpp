#include "mpseg/sam.hpp"

namespace mpseg {

template <typename T>
SamParams<T> SamParams<T>::init(int64_t channels, Rng& rng) {
    SamParams<T> p;
    p.channels = channels;
    p.conv3_w = kaiming_conv_init<T>({channels, 4, 3, 3}, rng);
    p.conv3_b = Tensor<T>({channels});
    p.conv5_w = kaiming_conv_init<T>({channels, 4, 5, 5}, rng);
    p.conv5_b = Tensor<T>({channels});
    p.conv7_w = kaiming_conv_init<T>({channels, 4, 7, 7}, rng);
    p.conv7_b = Tensor<T>({channels});
    p.fuse_w = kaiming_conv_init<T>({2 * channels, 3 * channels, 3, 3}, rng);
    p.fuse_b = Tensor<T>({2 * channels});
    return p;
}

template <typename T>
SamVars sam_lift(Tape<T>& tape, const SamParams<T>& p, bool needs_grad) {
    SamVars v;
    v.conv3_w = tape.input(p.conv3_w, needs_grad);
    v.conv3_b = tape.input(p.conv3_b, needs_grad);
    v.conv5_w = tape.input(p.conv5_w, needs_grad);
    v.conv5_b = tape.input(p.conv5_b, needs_grad);
    v.conv7_w = tape.input(p.conv7_w, needs_grad);
    v.conv7_b = tape.input(p.conv7_b, needs_grad);
    v.fuse_w = tape.input(p.fuse_w, needs_grad);
    v.fuse_b = tape.input(p.fuse_b, needs_grad);
    return v;
}

template <typename T>
Var extract_descriptors(Tape<T>& tape, Var f_pv, Var f_art) {
    if (tape.value(f_pv).shape != tape.value(f_art).shape)
        throw std::invalid_argument("extract_descriptors: phase shapes differ, " +
                                    shape_str(tape.value(f_pv).shape) + " vs " + shape_str(tape.value(f_art).shape));
    Var d_pv = tape.channel_stats(f_pv);
    Var d_art = tape.channel_stats(f_art);
    return tape.concat_channels({d_pv, d_art});
}

template <typename T>
std::pair<Var, Var> pyramid_responses(Tape<T>& tape, Var desc, const SamVars& vars, int64_t channels) {
    const auto& ds = tape.value(desc).shape;
    const int64_t H = ds[2], W = ds[3];
    Var local3 = tape.conv2d(desc, vars.conv3_w, vars.conv3_b, {1, 1, 1});
    Var local5 = tape.conv2d(desc, vars.conv5_w, vars.conv5_b, {1, 2, 1});
    Var pooled = tape.global_avg_pool(desc);
    Var global7 = tape.conv2d(pooled, vars.conv7_w, vars.conv7_b, {1, 3, 1});
    Var global_up = tape.bilinear_upsample(global7, H, W);
    Var merged = tape.concat_channels({local3, local5, global_up});
    Var fused = tape.conv2d(merged, vars.fuse_w, vars.fuse_b, {1, 1, 1});
    Var w0_pv = tape.slice_channels(fused, 0, channels);
    Var w0_art = tape.slice_channels(fused, channels, 2 * channels);
    return {w0_pv, w0_art};
}

template <typename T>
std::pair<Var, Var> normalize_responses(Tape<T>& tape, Var w0_pv, Var w0_art) {
    // Two-way softmax reduces to sigmoids of the logit difference.
    Var diff = tape.sub(w0_pv, w0_art);
    Var w_pv = tape.sigmoid(diff);
    Var w_art = tape.sigmoid(tape.scale(diff, T{-1}));
    return {w_pv, w_art};
}

template <typename T>
Var aggregate(Tape<T>& tape, Var f_pv, Var f_art, Var w_pv, Var w_art) {
    return tape.add(tape.mul(w_pv, f_pv), tape.mul(w_art, f_art));
}

template <typename T>
std::pair<Var, Var> modulate_streams(Tape<T>& tape, Var f_pv, Var f_art, Var f_aggr) {
    Var mod_pv = tape.scale(tape.add(f_pv, f_aggr), T{0.5});
    Var mod_art = tape.scale(tape.add(f_art, f_aggr), T{0.5});
    return {mod_pv, mod_art};
}

template <typename T>
SamOutputs sam_forward(Tape<T>& tape, Var f_pv, Var f_art, const SamVars& vars, int64_t channels) {
    Var desc = extract_descriptors(tape, f_pv, f_art);
    auto [w0_pv, w0_art] = pyramid_responses(tape, desc, vars, channels);
    auto [w_pv, w_art] = normalize_responses(tape, w0_pv, w0_art);
    SamOutputs out;
    out.w_pv = w_pv;
    out.w_art = w_art;
    out.aggregated = aggregate(tape, f_pv, f_art, w_pv, w_art);
    auto [mod_pv, mod_art] = modulate_streams(tape, f_pv, f_art, out.aggregated);
    out.mod_pv = mod_pv;
    out.mod_art = mod_art;
    return out;
}

#define MPSEG_INSTANTIATE_SAM(T)                                                                         \
    template struct SamParams<T>;                                                                        \
    template SamVars sam_lift<T>(Tape<T>&, const SamParams<T>&, bool);                                   \
    template Var extract_descriptors<T>(Tape<T>&, Var, Var);                                             \
    template std::pair<Var, Var> pyramid_responses<T>(Tape<T>&, Var, const SamVars&, int64_t);           \
    template std::pair<Var, Var> normalize_responses<T>(Tape<T>&, Var, Var);                             \
    template Var aggregate<T>(Tape<T>&, Var, Var, Var, Var);                                             \
    template std::pair<Var, Var> modulate_streams<T>(Tape<T>&, Var, Var, Var);                           \
    template SamOutputs sam_forward<T>(Tape<T>&, Var, Var, const SamVars&, int64_t);

MPSEG_INSTANTIATE_SAM(float)
MPSEG_INSTANTIATE_SAM(double)

#undef MPSEG_INSTANTIATE_SAM

}  // namespace mpseg
