#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "golden_io.hpp"
#include "mpseg/gradcheck.hpp"
#include "mpseg/kernels.hpp"
#include "mpseg/urim.hpp"

using namespace mpseg;

namespace {

Tensor<double> probs_pair(double p0) {
    return Tensor<double>({1, 2, 1, 1}, std::vector<double>{p0, 1.0 - p0});
}

Tensor<double> rand_t(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    rng.fill_uniform(t, lo, hi);
    return t;
}

}  // namespace

TEST_CASE("confidence_map worked examples") {
    CHECK(confidence_map(probs_pair(0.5)).data[0] == 0.0);  // S^max == S^min
    CHECK(confidence_map(probs_pair(0.9)).data[0] == doctest::Approx(1.0 - std::exp(-8.0)).epsilon(1e-12));
    CHECK(confidence_map(probs_pair(2.0 / 3.0)).data[0] == doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("confidence_map rejects unnormalized probabilities") {
    Tensor<double> bad({1, 2, 1, 1}, std::vector<double>{0.6, 0.6});
    CHECK_THROWS_WITH_AS(confidence_map(bad), doctest::Contains("not normalized"), std::invalid_argument);
    Tensor<double> neg({1, 2, 1, 1}, std::vector<double>{-0.1, 1.1});
    CHECK_THROWS_AS(confidence_map(neg), std::invalid_argument);
}

TEST_CASE("confidence_map range and monotonicity over the grid") {
    // The exact map is strictly increasing in S^max, but in float64 it
    // saturates against 1: for S^max >= 0.974 every true value lies within
    // one ulp of 1.0, so successive grid points collapse onto
    // nextafter(1,0). Strictness is checkable below that point; at and
    // beyond it only non-decrease and the [0,1) bound are representable.
    const double below_one = std::nextafter(1.0, 0.0);
    double prev = -1.0;
    for (int k = 0; k <= 499; ++k) {
        const double p = 0.5 + 1e-3 * k;
        const double m = confidence_map(probs_pair(p)).data[0];
        CHECK(m >= 0.0);
        CHECK(m < 1.0);
        if (p < 0.974) {
            CHECK(m > prev);
        } else {
            CHECK(m >= prev);
            CHECK(m == below_one);
        }
        if (k == 0) CHECK(m == 0.0);
        prev = m;
    }
}

TEST_CASE("lc_conv uniform confidence invariance") {
    Rng rng(41);
    auto x = rand_t(rng, {1, 2, 5, 5});
    auto w = rand_t(rng, {2, 2, 3, 3});
    auto b = rand_t(rng, {2}, -0.3, 0.3);
    Tensor<double> base;
    bool first = true;
    for (double c : {0.1, 1.0, 10.0}) {
        Tensor<double> conf({1, 1, 5, 5}, c);
        auto y = kernels::lc_conv_forward<double>(x, conf, w, b, nullptr);
        if (first) {
            base = y;
            first = false;
        } else {
            for (int64_t i = 0; i < y.numel(); ++i)
                CHECK(std::fabs(y.data[static_cast<size_t>(i)] - base.data[static_cast<size_t>(i)]) <= 1e-6);
        }
    }
    // interior pixels equal plain conv / 9 + bias
    Tensor<double> conf1({1, 1, 5, 5}, 1.0);
    auto y = kernels::lc_conv_forward<double>(x, conf1, w, b, nullptr);
    Tensor<double> no_bias({2}, 0.0);
    auto plain = kernels::conv2d_forward(x, w, no_bias, {1, 1, 1});
    for (int64_t d = 0; d < 2; ++d)
        for (int64_t h = 1; h < 4; ++h)
            for (int64_t wI = 1; wI < 4; ++wI)
                CHECK(y.at4(0, d, h, wI) ==
                      doctest::Approx(plain.at4(0, d, h, wI) / 9.0 + b.data[static_cast<size_t>(d)]).epsilon(1e-12));
}

TEST_CASE("lc_conv single confident center and degenerate window") {
    // X all ones, confidence 1 only at the center, W all ones, b = 0:
    // the center output is exactly 1.
    Tensor<double> x({1, 1, 3, 3}, 1.0);
    Tensor<double> conf({1, 1, 3, 3}, 0.0);
    conf.at4(0, 0, 1, 1) = 1.0;
    Tensor<double> w({1, 1, 3, 3}, 1.0);
    Tensor<double> b({1}, 0.0);
    auto y = kernels::lc_conv_forward<double>(x, conf, w, b, nullptr);
    CHECK(y.at4(0, 0, 1, 1) == doctest::Approx(1.0));

    // all-zero confidence: every window is degenerate, output is the bias
    Tensor<double> zero_conf({1, 1, 3, 3}, 0.0);
    Tensor<double> b3({1}, 0.3);
    auto yb = kernels::lc_conv_forward<double>(x, zero_conf, w, b3, nullptr);
    for (double v : yb.data) CHECK(v == doctest::Approx(0.3));
}

TEST_CASE("update_confidence properties") {
    Rng rng(43);
    Tensor<double> m({1, 1, 6, 6});
    rng.fill_uniform(m, 0.0, 0.99);
    auto up = update_confidence(m);
    // monotone: m <= update(m) pointwise, and output stays in [0,1)
    for (int64_t i = 0; i < m.numel(); ++i) {
        CHECK(up.data[static_cast<size_t>(i)] >= m.data[static_cast<size_t>(i)]);
        CHECK(up.data[static_cast<size_t>(i)] < 1.0);
    }
    // idempotent on constant maps
    Tensor<double> c({1, 1, 4, 4}, 0.42);
    auto uc = update_confidence(c);
    for (double v : uc.data) CHECK(v == 0.42);
    auto ucc = update_confidence(uc);
    for (int64_t i = 0; i < uc.numel(); ++i) CHECK(ucc.data[static_cast<size_t>(i)] == uc.data[static_cast<size_t>(i)]);
}

TEST_CASE("urim_refine saturated confidence and output normalization") {
    Rng rng(47);
    const int64_t D = 8;
    UrimParams<double> params = UrimParams<double>::init(D, rng);
    Tape<double> tape;
    UrimVars vars = urim_lift(tape, params, false);

    auto decision = rand_t(rng, {1, D, 8, 8});
    Tensor<double> s_init({1, 2, 8, 8});
    for (int64_t h = 0; h < 8; ++h)
        for (int64_t w = 0; w < 8; ++w) {
            s_init.at4(0, 0, h, w) = 1.0 - 1e-6;
            s_init.at4(0, 1, h, w) = 1e-6;
        }
    Var dv = tape.input(decision, false);
    Var sv = tape.input(s_init, false);
    auto res = urim_refine(tape, dv, sv, vars);

    // m0 is (numerically) 1 everywhere for saturated inputs
    for (double v : res.confidence_trace[0].data) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));

    // s_final rows sum to 1
    const auto& sf = tape.value(res.s_final);
    for (int64_t h = 0; h < 8; ++h)
        for (int64_t w = 0; w < 8; ++w) CHECK(sf.at4(0, 0, h, w) + sf.at4(0, 1, h, w) == doctest::Approx(1.0));

    // trace is pointwise non-decreasing across the four rounds
    REQUIRE(res.confidence_trace.size() == 5);
    for (size_t r = 1; r < 5; ++r)
        for (int64_t i = 0; i < res.confidence_trace[r].numel(); ++i)
            CHECK(res.confidence_trace[r].data[static_cast<size_t>(i)] >=
                  res.confidence_trace[r - 1].data[static_cast<size_t>(i)]);
}

TEST_CASE("urim_refine golden regression, seed 7, 1x8x16x16") {
    Rng rng(7);
    const int64_t D = 8;
    UrimParams<double> params = UrimParams<double>::init(D, rng);
    auto decision = rand_t(rng, {1, D, 16, 16});
    auto logits = rand_t(rng, {1, 2, 16, 16}, -2.0, 2.0);
    auto s_init = kernels::softmax_forward(logits, 1);

    Tape<double> tape;
    UrimVars vars = urim_lift(tape, params, false);
    auto res = urim_refine(tape, tape.input(decision, false), tape.input(s_init, false), vars);
    check_golden("urim_refine_seed7_sfinal.f64raw", tape.value(res.s_final));
    check_golden("urim_refine_seed7_m4.f64raw", res.confidence_trace[4]);
}

TEST_CASE("urim width mismatch is rejected") {
    Rng rng(51);
    UrimParams<double> params = UrimParams<double>::init(4, rng);
    Tape<double> tape;
    UrimVars vars = urim_lift(tape, params, false);
    auto decision = rand_t(rng, {1, 6, 4, 4});
    auto s_init = kernels::softmax_forward(rand_t(rng, {1, 2, 4, 4}), 1);
    CHECK_THROWS_AS(urim_refine(tape, tape.input(decision, false), tape.input(s_init, false), vars),
                    std::invalid_argument);
}

TEST_CASE("urim gradcheck suite passes at 1e-4") {
    for (const auto& r : gradcheck_urim()) {
        INFO(r.name, " max_rel_err=", r.max_rel_err);
        CHECK(r.pass);
    }
}
