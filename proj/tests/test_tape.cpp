#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mpseg/gradcheck.hpp"
#include "mpseg/rng.hpp"
#include "mpseg/tape.hpp"

using namespace mpseg;

TEST_CASE("tape backward on a simple chain") {
    // f(w) = w^2 at w = 3 via mul: analytic gradient 6
    Tape<double> tape;
    Var w = tape.input(Tensor<double>({1}, 3.0), true);
    Var f = tape.mul(w, w);
    tape.backward(f);
    CHECK(tape.grad(w).data[0] == doctest::Approx(6.0));
}

TEST_CASE("tape rejects non-scalar backward and foreign handles") {
    Tape<double> tape;
    Var x = tape.input(Tensor<double>({2, 2, 2, 2}, 1.0), true);
    CHECK_THROWS_AS(tape.backward(x), std::logic_error);
    CHECK_THROWS_AS(tape.value(Var{}), std::logic_error);
}

TEST_CASE("gradients accumulate across reuse of a node") {
    Tape<double> tape;
    Var x = tape.input(Tensor<double>({1}, 2.0), true);
    Var y = tape.add(tape.mul(x, x), x);  // x^2 + x, gradient 2x + 1 = 5
    tape.backward(y);
    CHECK(tape.grad(x).data[0] == doctest::Approx(5.0));
}

TEST_CASE("finite_diff_check catches a broken gradient") {
    // Hide half the dependency from the tape: forward computes x*x but the
    // second factor enters as a frozen constant, so the analytic gradient is
    // x while the numeric one is 2x.
    auto build_bad = [](Tape<double>& t, const std::vector<Var>& v) {
        Tensor<double> frozen = t.value(v[0]);
        return t.weighted_sum(v[0], frozen);
    };
    auto report = finite_diff_check("sabotaged", build_bad, {Tensor<double>({1}, 0.7)}, 1e-5, 1e-4);
    CHECK_FALSE(report.pass);
}

TEST_CASE("finite_diff_check basic quadratic") {
    auto build = [](Tape<double>& t, const std::vector<Var>& v) { return t.mul(v[0], v[0]); };
    auto report = finite_diff_check("square", build, {Tensor<double>({1}, 3.0)}, 1e-5, 1e-8);
    CHECK(report.pass);
    CHECK(report.max_rel_err <= 1e-8);
}

TEST_CASE("gradcheck core suite passes at 1e-4") {
    for (const auto& r : gradcheck_core()) {
        INFO(r.name, " max_rel_err=", r.max_rel_err);
        CHECK(r.pass);
    }
}

TEST_CASE("tape values stay finite through forward and backward") {
    Rng rng(77);
    Tape<double> tape;
    Tensor<double> x({1, 2, 8, 8});
    rng.fill_uniform(x, -1.0, 1.0);
    Var v = tape.input(x, true);
    Tensor<double> w({4, 2, 3, 3});
    rng.fill_uniform(w, -0.5, 0.5);
    Var wv = tape.input(w, true);
    Var y = tape.relu(tape.conv2d(v, wv, tape.input(Tensor<double>({4}), true), {1, 1, 1}));
    Tensor<double> ws({1, 4, 8, 8});
    rng.fill_uniform(ws, -1.0, 1.0);
    Var loss = tape.weighted_sum(y, ws);
    tape.backward(loss);
    tape.check_finite("test");
}
