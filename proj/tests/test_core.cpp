#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mpseg/kernels.hpp"
#include "mpseg/kernels_ref.hpp"
#include "mpseg/rng.hpp"

using namespace mpseg;
namespace k = mpseg::kernels;

namespace {

Tensor<double> rand_t(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    rng.fill_uniform(t, lo, hi);
    return t;
}

void check_close(const Tensor<double>& a, const Tensor<double>& b, double tol) {
    REQUIRE(a.shape == b.shape);
    for (int64_t i = 0; i < a.numel(); ++i)
        CHECK(a.data[static_cast<size_t>(i)] == doctest::Approx(b.data[static_cast<size_t>(i)]).epsilon(tol));
}

}  // namespace

TEST_CASE("tensor shape and data invariants") {
    Tensor<double> t({2, 3}, 1.5);
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(Tensor<double>({2, 0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5, 0.0)), std::invalid_argument);
    CHECK(t.all_finite());
    t.data[3] = std::nan("");
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("rng determinism and stream independence") {
    Rng a(1234), b(1234), c(99);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    bool differs = false;
    Rng a2(1234);
    for (int i = 0; i < 10; ++i) differs = differs || (a2.next_u64() != c.next_u64());
    CHECK(differs);

    Rng u(7);
    for (int i = 0; i < 1000; ++i) {
        const double v = u.uniform();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("conv2d worked examples") {
    // 3x3 ones * 3x3 ones kernel, no padding -> 9
    Tensor<double> ones({1, 1, 3, 3}, 1.0);
    Tensor<double> kernel({1, 1, 3, 3}, 1.0);
    Tensor<double> bias({1}, 0.0);
    auto y = k::conv2d_forward(ones, kernel, bias, {1, 0, 1});
    CHECK(y.shape == std::vector<int64_t>{1, 1, 1, 1});
    CHECK(y.data[0] == doctest::Approx(9.0));

    // identity kernel with padding 1 reproduces the input
    Rng rng(3);
    auto x = rand_t(rng, {1, 1, 4, 5});
    Tensor<double> id({1, 1, 3, 3}, 0.0);
    id.at4(0, 0, 1, 1) = 1.0;
    auto same = k::conv2d_forward(x, id, bias, {1, 1, 1});
    check_close(same, x, 1e-15);

    // hand-windowed dot products
    Tensor<double> m({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor<double> diag({1, 1, 2, 2}, std::vector<double>{1, 0, 0, 1});
    auto d = k::conv2d_forward(m, diag, bias, {1, 0, 1});
    CHECK(d.shape == std::vector<int64_t>{1, 1, 2, 2});
    CHECK(d.data[0] == doctest::Approx(6.0));
    CHECK(d.data[1] == doctest::Approx(8.0));
    CHECK(d.data[2] == doctest::Approx(12.0));
    CHECK(d.data[3] == doctest::Approx(14.0));
}

TEST_CASE("conv2d shape errors name the offending dimension") {
    Tensor<double> x({1, 3, 4, 4});
    Tensor<double> w({2, 2, 3, 3});
    Tensor<double> b({2});
    CHECK_THROWS_WITH_AS(k::conv2d_forward(x, w, b, {1, 1, 1}), doctest::Contains("Cin/groups"),
                         std::invalid_argument);
    Tensor<double> w9({2, 3, 9, 9});
    CHECK_THROWS_WITH_AS(k::conv2d_forward(x, w9, b, {1, 0, 1}), doctest::Contains("does not fit"),
                         std::invalid_argument);
    CHECK_THROWS_AS(k::conv2d_forward(x, w, b, {1, 1, 2}), std::invalid_argument);  // 3 % 2 != 0
}

TEST_CASE("conv2d dense equals depthwise with block-diagonal kernel") {
    Rng rng(11);
    const int64_t C = 3;
    auto x = rand_t(rng, {2, C, 5, 5});
    auto w_dw = rand_t(rng, {C, 1, 3, 3});  // groups = Cin, Cout = Cin
    Tensor<double> b({C}, 0.0);
    auto y_grouped = k::conv2d_forward(x, w_dw, b, {1, 1, C});

    Tensor<double> w_dense({C, C, 3, 3}, 0.0);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t kh = 0; kh < 3; ++kh)
            for (int64_t kw = 0; kw < 3; ++kw) w_dense.at4(c, c, kh, kw) = w_dw.at4(c, 0, kh, kw);
    auto y_dense = k::conv2d_forward(x, w_dense, b, {1, 1, 1});
    REQUIRE(y_grouped.shape == y_dense.shape);
    for (int64_t i = 0; i < y_grouped.numel(); ++i)
        CHECK(y_grouped.data[static_cast<size_t>(i)] == y_dense.data[static_cast<size_t>(i)]);
}

TEST_CASE("channel_stats worked examples") {
    Tensor<double> x({1, 3, 1, 1}, std::vector<double>{1, 2, 6});
    auto y = k::channel_stats_forward(x, nullptr);
    CHECK(y.at4(0, 0, 0, 0) == doctest::Approx(3.0));
    CHECK(y.at4(0, 1, 0, 0) == doctest::Approx(6.0));

    Tensor<double> single({1, 1, 2, 2}, std::vector<double>{1, -2, 3, 4});
    auto ys = k::channel_stats_forward(single, nullptr);
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(ys.data[static_cast<size_t>(i)] == single.data[static_cast<size_t>(i)]);
        CHECK(ys.data[static_cast<size_t>(4 + i)] == single.data[static_cast<size_t>(i)]);
    }

    Tensor<double> pm({1, 2, 1, 1}, std::vector<double>{-1, 1});
    auto yp = k::channel_stats_forward(pm, nullptr);
    CHECK(yp.at4(0, 0, 0, 0) == doctest::Approx(0.0));
    CHECK(yp.at4(0, 1, 0, 0) == doctest::Approx(1.0));
}

TEST_CASE("global_avg_pool worked examples") {
    Tensor<double> c({1, 1, 2, 2}, 5.0);
    CHECK(k::global_avg_pool_forward(c).data[0] == doctest::Approx(5.0));
    Tensor<double> m({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 6});
    CHECK(k::global_avg_pool_forward(m).data[0] == doctest::Approx(3.0));
    Tensor<double> z({1, 2, 3, 3}, 0.0);
    auto y = k::global_avg_pool_forward(z);
    CHECK(y.data[0] == 0.0);
    CHECK(y.data[1] == 0.0);
}

TEST_CASE("bilinear_upsample worked examples") {
    // constant maps stay constant at any size
    Tensor<double> c({1, 2, 2, 2}, 4.5);
    auto yc = k::bilinear_upsample_forward(c, 5, 7);
    for (double v : yc.data) CHECK(v == doctest::Approx(4.5));

    // hand evaluation of the half-pixel formula on a 1x2 row
    Tensor<double> row({1, 1, 1, 2}, std::vector<double>{1, 3});
    auto yr = k::bilinear_upsample_forward(row, 1, 4);
    CHECK(yr.data[0] == doctest::Approx(1.0));
    CHECK(yr.data[1] == doctest::Approx(1.5));
    CHECK(yr.data[2] == doctest::Approx(2.5));
    CHECK(yr.data[3] == doctest::Approx(3.0));

    // same size is the identity
    Rng rng(5);
    auto x = rand_t(rng, {1, 3, 4, 4});
    check_close(k::bilinear_upsample_forward(x, 4, 4), x, 1e-15);
}

TEST_CASE("bilinear_upsample preserves min/max bounds") {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = rand_t(rng, {1, 2, 3, 5}, -3.0, 3.0);
        auto y = k::bilinear_upsample_forward(x, 9, 11);
        double lo = 1e300, hi = -1e300;
        for (double v : x.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (double v : y.data) {
            CHECK(v >= lo - 1e-12);
            CHECK(v <= hi + 1e-12);
        }
    }
}

TEST_CASE("softmax worked examples") {
    Tensor<double> eq({1, 4, 1, 1}, 0.7);
    auto ye = k::softmax_forward(eq, 1);
    for (double v : ye.data) CHECK(v == doctest::Approx(0.25));

    Tensor<double> two({1, 2, 1, 1}, std::vector<double>{0.0, std::log(3.0)});
    auto yt = k::softmax_forward(two, 1);
    CHECK(yt.data[0] == doctest::Approx(0.25));
    CHECK(yt.data[1] == doctest::Approx(0.75));

    // shift invariance
    Rng rng(9);
    auto x = rand_t(rng, {2, 3, 2, 2});
    auto shifted = x;
    for (auto& v : shifted.data) v += 123.25;
    check_close(k::softmax_forward(x, 1), k::softmax_forward(shifted, 1), 1e-12);
}

TEST_CASE("softmax sums to one along its axis") {
    Rng rng(23);
    auto x = rand_t(rng, {2, 5, 3, 3}, -30.0, 30.0);
    for (int axis : {0, 1, 2, 3}) {
        auto y = k::softmax_forward(x, axis);
        const auto& s = x.shape;
        for (int64_t n = 0; n < s[0]; ++n)
            for (int64_t c = 0; c < s[1]; ++c)
                for (int64_t h = 0; h < s[2]; ++h)
                    for (int64_t w = 0; w < s[3]; ++w) {
                        if ((axis == 0 && n != 0) || (axis == 1 && c != 0) || (axis == 2 && h != 0) ||
                            (axis == 3 && w != 0))
                            continue;
                        double sum = 0;
                        for (int64_t j = 0; j < s[static_cast<size_t>(axis)]; ++j) {
                            int64_t idx[4] = {n, c, h, w};
                            idx[axis] = j;
                            sum += y.at4(idx[0], idx[1], idx[2], idx[3]);
                        }
                        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
                    }
    }
}

TEST_CASE("cross_entropy worked examples") {
    // perfect prediction -> 0
    Tensor<double> perfect({1, 2, 2, 2}, 0.0);
    Tensor<uint8_t> target({1, 2, 2});
    for (int64_t h = 0; h < 2; ++h)
        for (int64_t w = 0; w < 2; ++w) {
            const uint8_t t = static_cast<uint8_t>((h + w) % 2);
            target.data[static_cast<size_t>(h * 2 + w)] = t;
            perfect.at4(0, t, h, w) = 1.0;
        }
    CHECK(k::cross_entropy_forward(perfect, target) == doctest::Approx(0.0).epsilon(1e-9));

    // uniform -> ln 2
    Tensor<double> uniform({1, 2, 2, 2}, 0.5);
    CHECK(k::cross_entropy_forward(uniform, target) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // single pixel at 0.25 -> -ln 0.25
    Tensor<double> quarter({1, 2, 1, 1}, std::vector<double>{0.25, 0.75});
    Tensor<uint8_t> t0({1, 1, 1}, std::vector<uint8_t>{0});
    CHECK(k::cross_entropy_forward(quarter, t0) == doctest::Approx(-std::log(0.25)).epsilon(1e-12));

    // labels outside {0,1} rejected
    Tensor<uint8_t> bad({1, 1, 1}, std::vector<uint8_t>{2});
    CHECK_THROWS_AS(k::cross_entropy_forward(quarter, bad), std::invalid_argument);
}

TEST_CASE("sgd_step worked examples") {
    Tensor<double> p({1}, 1.0);
    Tensor<double> g({1}, 2.0);
    k::sgd_step(p, g, 0.1);
    CHECK(p.data[0] == doctest::Approx(0.8));

    Tensor<double> zero_g({1}, 0.0);
    k::sgd_step(p, zero_g, 0.5);
    CHECK(p.data[0] == doctest::Approx(0.8));

    // two successive unit steps from p=0 with g=1, lr=1 land at -2
    Tensor<double> q({1}, 0.0);
    Tensor<double> one({1}, 1.0);
    k::sgd_step(q, one, 1.0);
    k::sgd_step(q, one, 1.0);
    CHECK(q.data[0] == doctest::Approx(-2.0));

    Tensor<double> wrong({2}, 0.0);
    CHECK_THROWS_AS(k::sgd_step(q, wrong, 1.0), std::invalid_argument);
}

TEST_CASE("max_filter3x3 semantics") {
    Tensor<double> x({1, 1, 5, 5}, 0.0);
    x.at4(0, 0, 2, 2) = 1.0;
    auto y = k::max_filter3x3(x);
    for (int64_t h = 0; h < 5; ++h)
        for (int64_t w = 0; w < 5; ++w) {
            const bool in_block = std::abs(h - 2) <= 1 && std::abs(w - 2) <= 1;
            CHECK(y.at4(0, 0, h, w) == (in_block ? 1.0 : 0.0));
        }

    Tensor<double> c({1, 1, 3, 4}, 0.37);
    auto yc = k::max_filter3x3(c);
    for (double v : yc.data) CHECK(v == doctest::Approx(0.37));

    Tensor<double> z({1, 1, 3, 3}, 0.0);
    auto yz = k::max_filter3x3(z);
    for (double v : yz.data) CHECK(v == 0.0);
}

TEST_CASE("parallel kernels match the serial reference") {
    Rng rng(31);
    SUBCASE("conv2d forward and backward") {
        for (auto spec : {Conv2dSpec{1, 1, 1}, Conv2dSpec{2, 1, 1}, Conv2dSpec{1, 2, 2}}) {
            auto x = rand_t(rng, {2, 4, 7, 6});
            auto w = rand_t(rng, {4, 4 / spec.groups, 3, 3});
            auto b = rand_t(rng, {4});
            auto y_par = k::conv2d_forward(x, w, b, spec);
            auto y_ref = k::ref::conv2d_forward(x, w, b, spec);
            REQUIRE(y_par.shape == y_ref.shape);
            for (int64_t i = 0; i < y_par.numel(); ++i)
                CHECK(y_par.data[static_cast<size_t>(i)] == y_ref.data[static_cast<size_t>(i)]);

            auto dy = rand_t(rng, y_par.shape);
            auto dx = k::conv2d_backward_input(dy, w, x.shape, spec);
            auto dw = k::conv2d_backward_weight(dy, x, w.shape, spec);
            auto db = k::conv2d_backward_bias(dy);
            Tensor<double> dx_r, dw_r, db_r;
            k::ref::conv2d_backward(dy, x, w, spec, dx_r, dw_r, db_r);
            check_close(dx, dx_r, 1e-12);
            check_close(dw, dw_r, 1e-12);
            check_close(db, db_r, 1e-12);
        }
    }
    SUBCASE("lc_conv forward and backward") {
        auto x = rand_t(rng, {2, 3, 6, 5});
        auto conf = rand_t(rng, {2, 1, 6, 5}, 0.0, 1.0);
        conf.at4(0, 0, 0, 0) = 0.0;
        auto w = rand_t(rng, {3, 3, 3, 3});
        auto b = rand_t(rng, {3});
        Tensor<double> msum;
        auto y_par = k::lc_conv_forward(x, conf, w, b, &msum);
        auto y_ref = k::ref::lc_conv_forward(x, conf, w, b);
        check_close(y_par, y_ref, 1e-12);

        auto dy = rand_t(rng, y_par.shape);
        auto dx = k::lc_conv_backward_input(dy, conf, msum, w);
        auto dw = k::lc_conv_backward_weight(dy, x, conf, msum, w.shape);
        auto db = k::conv2d_backward_bias(dy);
        Tensor<double> dx_r, dw_r, db_r;
        k::ref::lc_conv_backward(dy, x, conf, w, dx_r, dw_r, db_r);
        check_close(dx, dx_r, 1e-12);
        check_close(dw, dw_r, 1e-12);
        check_close(db, db_r, 1e-12);
    }
    SUBCASE("pointwise and pooling kernels") {
        auto x = rand_t(rng, {2, 4, 5, 6});
        check_close(k::bilinear_upsample_forward(x, 9, 8), k::ref::bilinear_upsample_forward(x, 9, 8), 1e-15);
        check_close(k::max_filter3x3(x), k::ref::max_filter3x3(x), 1e-15);
        check_close(k::channel_stats_forward(x, nullptr), k::ref::channel_stats_forward(x), 1e-15);
        check_close(k::softmax_forward(x, 1), k::ref::softmax_forward(x, 1), 1e-15);

        auto logits = rand_t(rng, {2, 2, 5, 6});
        auto probs = k::softmax_forward(logits, 1);
        Tensor<uint8_t> target({2, 5, 6});
        for (auto& v : target.data) v = rng.uniform() < 0.5 ? 0 : 1;
        CHECK(k::cross_entropy_forward(probs, target) ==
              doctest::Approx(k::ref::cross_entropy_forward(probs, target)).epsilon(1e-12));
    }
}
