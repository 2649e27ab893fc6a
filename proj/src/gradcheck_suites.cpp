#include <cmath>

#include "mpseg/gradcheck.hpp"
#include "mpseg/net.hpp"
#include "mpseg/rng.hpp"
#include "mpseg/sam.hpp"
#include "mpseg/urim.hpp"

namespace mpseg {

namespace {

Tensor<double> rand_tensor(Rng& rng, std::vector<int64_t> shape, double lo, double hi) {
    Tensor<double> t(std::move(shape));
    rng.fill_uniform(t, lo, hi);
    return t;
}

// Uniform magnitude in [lo, hi] with random sign, keeping ReLU-style kinks
// at a safe distance from the finite-difference step.
Tensor<double> rand_signed(Rng& rng, std::vector<int64_t> shape, double lo, double hi) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
    return t;
}

// Ensures the per-pixel channel maximum is isolated by at least min_gap so
// the max branch of channel_stats keeps a stable argmax under perturbation.
void separate_channel_max(Tensor<double>& t, double min_gap) {
    const int64_t N = t.shape[0], C = t.shape[1], H = t.shape[2], W = t.shape[3];
    for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                int64_t best = 0;
                for (int64_t c = 1; c < C; ++c)
                    if (t.at4(n, c, h, w) > t.at4(n, best, h, w)) best = c;
                double second = -1e300;
                for (int64_t c = 0; c < C; ++c)
                    if (c != best) second = std::max(second, t.at4(n, c, h, w));
                if (C > 1 && t.at4(n, best, h, w) - second < min_gap) t.at4(n, best, h, w) = second + min_gap;
            }
}

Tensor<double> rand_weights(Rng& rng, const std::vector<int64_t>& shape) { return rand_tensor(rng, shape, -1.0, 1.0); }

GradCheckReport check_conv2d(uint64_t seed, const std::string& tag, std::vector<int64_t> x_shape,
                             std::vector<int64_t> w_shape, Conv2dSpec spec) {
    Rng rng(seed);
    auto x = rand_tensor(rng, x_shape, -1.0, 1.0);
    auto w = rand_tensor(rng, w_shape, -1.0, 1.0);
    auto b = rand_tensor(rng, {w_shape[0]}, -0.5, 0.5);
    const int64_t oh = conv_out_extent(x_shape[2], w_shape[2], spec.stride, spec.pad);
    const int64_t ow = conv_out_extent(x_shape[3], w_shape[3], spec.stride, spec.pad);
    auto ws = rand_weights(rng, {x_shape[0], w_shape[0], oh, ow});
    return finite_diff_check(
        "core.conv2d." + tag + ".seed" + std::to_string(seed),
        [spec, ws](Tape<double>& t, const std::vector<Var>& v) {
            return t.weighted_sum(t.conv2d(v[0], v[1], v[2], spec), ws);
        },
        {x, w, b});
}

GradCheckReport check_lc_conv(uint64_t seed) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {1, 3, 6, 6}, -1.0, 1.0);
    auto conf = rand_tensor(rng, {1, 1, 6, 6}, 0.05, 0.95);
    // Fully masked corner exercises the degenerate-window path.
    conf.at4(0, 0, 0, 0) = 0.0;
    conf.at4(0, 0, 0, 1) = 0.0;
    conf.at4(0, 0, 1, 0) = 0.0;
    conf.at4(0, 0, 1, 1) = 0.0;
    auto w = rand_tensor(rng, {3, 3, 3, 3}, -1.0, 1.0);
    auto b = rand_tensor(rng, {3}, -0.5, 0.5);
    auto ws = rand_weights(rng, {1, 3, 6, 6});
    return finite_diff_check(
        "core.lc_conv.seed" + std::to_string(seed),
        [conf, ws](Tape<double>& t, const std::vector<Var>& v) {
            return t.weighted_sum(t.lc_conv(v[0], v[1], v[2], conf), ws);
        },
        {x, w, b});
}

GradCheckReport check_channel_stats(uint64_t seed) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 5, 4, 4}, -1.0, 1.0);
    separate_channel_max(x, 1e-3);
    auto ws = rand_weights(rng, {2, 2, 4, 4});
    return finite_diff_check(
        "core.channel_stats.seed" + std::to_string(seed),
        [ws](Tape<double>& t, const std::vector<Var>& v) { return t.weighted_sum(t.channel_stats(v[0]), ws); }, {x});
}

GradCheckReport check_gap(uint64_t seed) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 3, 4, 5}, -1.0, 1.0);
    auto ws = rand_weights(rng, {2, 3, 1, 1});
    return finite_diff_check(
        "core.global_avg_pool.seed" + std::to_string(seed),
        [ws](Tape<double>& t, const std::vector<Var>& v) { return t.weighted_sum(t.global_avg_pool(v[0]), ws); }, {x});
}

GradCheckReport check_bilinear(uint64_t seed) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {1, 3, 4, 4}, -1.0, 1.0);
    auto ws = rand_weights(rng, {1, 3, 7, 9});
    return finite_diff_check(
        "core.bilinear_upsample.seed" + std::to_string(seed),
        [ws](Tape<double>& t, const std::vector<Var>& v) { return t.weighted_sum(t.bilinear_upsample(v[0], 7, 9), ws); },
        {x});
}

GradCheckReport check_softmax(uint64_t seed) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 3, 3, 4}, -2.0, 2.0);
    auto ws = rand_weights(rng, {2, 3, 3, 4});
    return finite_diff_check(
        "core.softmax.seed" + std::to_string(seed),
        [ws](Tape<double>& t, const std::vector<Var>& v) { return t.weighted_sum(t.softmax(v[0], 1), ws); }, {x});
}

GradCheckReport check_cross_entropy(uint64_t seed) {
    Rng rng(seed);
    auto logits = rand_tensor(rng, {1, 2, 4, 4}, -1.5, 1.5);
    auto probs = kernels::softmax_forward(logits, 1);
    Tensor<uint8_t> target({1, 4, 4});
    for (auto& v : target.data) v = rng.uniform() < 0.5 ? 0 : 1;
    return finite_diff_check(
        "core.cross_entropy.seed" + std::to_string(seed),
        [target](Tape<double>& t, const std::vector<Var>& v) { return t.cross_entropy(v[0], target); }, {probs});
}

GradCheckReport check_softmax_ce(uint64_t seed) {
    Rng rng(seed);
    auto logits = rand_tensor(rng, {2, 2, 4, 4}, -2.0, 2.0);
    Tensor<uint8_t> target({2, 4, 4});
    for (auto& v : target.data) v = rng.uniform() < 0.5 ? 0 : 1;
    return finite_diff_check(
        "core.softmax_cross_entropy.seed" + std::to_string(seed),
        [target](Tape<double>& t, const std::vector<Var>& v) { return t.cross_entropy(t.softmax(v[0], 1), target); },
        {logits});
}

GradCheckReport check_relu(uint64_t seed) {
    Rng rng(seed);
    auto x = rand_signed(rng, {2, 3, 4, 4}, 0.1, 1.0);
    auto ws = rand_weights(rng, {2, 3, 4, 4});
    return finite_diff_check(
        "core.relu.seed" + std::to_string(seed),
        [ws](Tape<double>& t, const std::vector<Var>& v) { return t.weighted_sum(t.relu(v[0]), ws); }, {x});
}

GradCheckReport check_sigmoid(uint64_t seed) {
    Rng rng(seed);
    auto x = rand_tensor(rng, {2, 2, 3, 3}, -3.0, 3.0);
    auto ws = rand_weights(rng, {2, 2, 3, 3});
    return finite_diff_check(
        "core.sigmoid.seed" + std::to_string(seed),
        [ws](Tape<double>& t, const std::vector<Var>& v) { return t.weighted_sum(t.sigmoid(v[0]), ws); }, {x});
}

GradCheckReport check_elementwise(uint64_t seed) {
    Rng rng(seed);
    auto a = rand_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0);
    auto b = rand_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0);
    auto ws = rand_weights(rng, {2, 2, 3, 3});
    return finite_diff_check(
        "core.elementwise.seed" + std::to_string(seed),
        [ws](Tape<double>& t, const std::vector<Var>& v) {
            Var m = t.mul(t.add(v[0], v[1]), t.sub(v[0], t.scale(v[1], 0.7)));
            return t.weighted_sum(m, ws);
        },
        {a, b});
}

GradCheckReport check_concat_slice(uint64_t seed) {
    Rng rng(seed);
    auto a = rand_tensor(rng, {1, 2, 3, 3}, -1.0, 1.0);
    auto b = rand_tensor(rng, {1, 3, 3, 3}, -1.0, 1.0);
    auto ws = rand_weights(rng, {1, 3, 3, 3});
    return finite_diff_check(
        "core.concat_slice.seed" + std::to_string(seed),
        [ws](Tape<double>& t, const std::vector<Var>& v) {
            return t.weighted_sum(t.slice_channels(t.concat_channels({v[0], v[1]}), 1, 4), ws);
        },
        {a, b});
}

GradCheckReport check_sam_block(uint64_t seed) {
    Rng rng(seed);
    const int64_t C = 4;
    auto f_pv = rand_tensor(rng, {1, C, 6, 6}, -1.0, 1.0);
    auto f_art = rand_tensor(rng, {1, C, 6, 6}, -1.0, 1.0);
    separate_channel_max(f_pv, 1e-3);
    separate_channel_max(f_art, 1e-3);
    Rng prng(seed ^ 0x5a5a5a5a);
    SamParams<double> params = SamParams<double>::init(C, prng);
    auto ws = rand_weights(rng, {1, C, 6, 6});
    return finite_diff_check(
        "sam.block.seed" + std::to_string(seed),
        [ws, C](Tape<double>& t, const std::vector<Var>& v) {
            SamVars sv{v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]};
            SamOutputs out = sam_forward(t, v[0], v[1], sv, C);
            return t.weighted_sum(out.aggregated, ws);
        },
        {f_pv, f_art, params.conv3_w, params.conv3_b, params.conv5_w, params.conv5_b, params.conv7_w, params.conv7_b,
         params.fuse_w, params.fuse_b});
}

GradCheckReport check_urim_block(uint64_t seed) {
    Rng rng(seed);
    const int64_t D = 4;
    auto decision = rand_tensor(rng, {1, D, 6, 6}, -1.0, 1.0);
    auto logits = rand_tensor(rng, {1, 2, 6, 6}, -2.0, 2.0);
    auto s_init = kernels::softmax_forward(logits, 1);
    Rng prng(seed ^ 0xa5a5a5a5);
    UrimParams<double> params = UrimParams<double>::init(D, prng);
    // Check at generic bias points: with zero biases, windows whose features
    // are all zero put the following ReLU kink exactly at the perturbation
    // point, which central differences cannot handle.
    for (auto& b : params.lc_b) prng.fill_uniform(b, -0.3, 0.3);
    prng.fill_uniform(params.fuse_b, -0.3, 0.3);
    auto ws = rand_weights(rng, {1, 2, 6, 6});
    std::vector<Tensor<double>> inputs{decision};
    for (int i = 0; i < 4; ++i) {
        inputs.push_back(params.lc_w[static_cast<size_t>(i)]);
        inputs.push_back(params.lc_b[static_cast<size_t>(i)]);
    }
    inputs.push_back(params.fuse_w);
    inputs.push_back(params.fuse_b);
    return finite_diff_check(
        "urim.block.seed" + std::to_string(seed),
        [ws, s_init](Tape<double>& t, const std::vector<Var>& v) {
            Var s = t.input(s_init, false);
            UrimVars uv;
            for (size_t i = 0; i < 4; ++i) {
                uv.lc_w[i] = v[1 + 2 * i];
                uv.lc_b[i] = v[2 + 2 * i];
            }
            uv.fuse_w = v[9];
            uv.fuse_b = v[10];
            UrimResult<double> r = urim_refine(t, v[0], s, uv);
            return t.weighted_sum(r.s_final, ws);
        },
        inputs);
}

GradCheckReport check_net_end_to_end(uint64_t seed, bool urim) {
    NetworkConfig cfg;
    cfg.widths = {2, 2, 4, 4, 4};
    cfg.groups = 2;
    cfg.fusion = FusionMode::Sam;
    cfg.urim = urim;
    cfg.decision_width = 4;
    Network<double> net(cfg, seed);

    Rng rng(seed ^ 0x77);
    // Generic bias points, for the same reason as in the urim check.
    for (size_t i = 0; i < net.param_count(); ++i) {
        const auto& name = net.param_name(i);
        if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0)
            rng.fill_uniform(net.param(i), -0.2, 0.2);
    }
    auto pv = rand_tensor(rng, {1, 3, 16, 16}, 0.0, 1.0);
    auto art = rand_tensor(rng, {1, 3, 16, 16}, 0.0, 1.0);
    Tensor<uint8_t> target({1, 16, 16});
    for (auto& v : target.data) v = rng.uniform() < 0.3 ? 1 : 0;

    std::vector<Tensor<double>> inputs;
    for (size_t i = 0; i < net.param_count(); ++i) inputs.push_back(net.param(i));
    return finite_diff_check(
        std::string("net.end_to_end.") + (urim ? "sam_urim" : "sam") + ".seed" + std::to_string(seed),
        [&net, pv, art, target](Tape<double>& t, const std::vector<Var>& v) {
            net.set_lifted(v);
            auto fw = net.forward_lifted(t, pv, art);
            return net.total_loss(t, fw, target);
        },
        inputs);
}

}  // namespace

std::vector<GradCheckReport> gradcheck_core() {
    std::vector<GradCheckReport> out;
    for (uint64_t seed : {11u, 12u, 13u}) {
        out.push_back(check_conv2d(seed, "plain", {1, 2, 5, 5}, {3, 2, 3, 3}, {1, 1, 1}));
        out.push_back(check_conv2d(seed, "strided", {2, 4, 8, 8}, {4, 2, 3, 3}, {2, 1, 2}));
        out.push_back(check_conv2d(seed, "pointwise", {1, 3, 4, 4}, {2, 3, 1, 1}, {1, 0, 1}));
        out.push_back(check_lc_conv(seed));
        out.push_back(check_channel_stats(seed));
        out.push_back(check_gap(seed));
        out.push_back(check_bilinear(seed));
        out.push_back(check_softmax(seed));
        out.push_back(check_cross_entropy(seed));
        out.push_back(check_softmax_ce(seed));
        out.push_back(check_relu(seed));
        out.push_back(check_sigmoid(seed));
        out.push_back(check_elementwise(seed));
        out.push_back(check_concat_slice(seed));
    }
    return out;
}

std::vector<GradCheckReport> gradcheck_sam() {
    std::vector<GradCheckReport> out;
    for (uint64_t seed : {21u, 22u, 23u}) out.push_back(check_sam_block(seed));
    return out;
}

std::vector<GradCheckReport> gradcheck_urim() {
    std::vector<GradCheckReport> out;
    for (uint64_t seed : {31u, 33u, 35u}) out.push_back(check_urim_block(seed));
    return out;
}

std::vector<GradCheckReport> gradcheck_net() {
    std::vector<GradCheckReport> out;
    for (uint64_t seed : {41u, 42u, 43u, 44u, 45u, 46u, 47u, 48u}) out.push_back(check_net_end_to_end(seed, true));
    out.push_back(check_net_end_to_end(49, false));
    return out;
}

std::vector<GradCheckReport> run_gradcheck(const std::string& module) {
    std::vector<GradCheckReport> out;
    auto append = [&](std::vector<GradCheckReport> r) {
        for (auto& x : r) out.push_back(std::move(x));
    };
    if (module == "all" || module == "core") append(gradcheck_core());
    if (module == "all" || module == "sam") append(gradcheck_sam());
    if (module == "all" || module == "urim") append(gradcheck_urim());
    if (module == "all" || module == "net") append(gradcheck_net());
    if (out.empty()) throw std::invalid_argument("unknown gradcheck module '" + module + "' (all|core|sam|urim|net)");
    return out;
}

}  // namespace mpseg
