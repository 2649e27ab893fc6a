#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mpseg/tape.hpp"

namespace mpseg {

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

/// Builds a scalar loss on the tape from the leaf vars the harness created
/// (one per checked input tensor, in order).
using BuildScalarFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

/// Central-difference gradient check in 64-bit: compares the tape's analytic
/// gradients against (f(x+eps) - f(x-eps)) / 2 eps, with relative error
/// |a - n| / max(1e-8, |a| + |n|). Throws on non-finite values. By default
/// every element of every input is perturbed; max_elements_per_input > 0
/// checks a seeded random subset per input instead (for large networks).
GradCheckReport finite_diff_check(const std::string& name, const BuildScalarFn& build,
                                  std::vector<Tensor<double>> inputs, double epsilon = 1e-5,
                                  double tolerance = 1e-4, int64_t max_elements_per_input = 0,
                                  uint64_t sample_seed = 0xfd);

/// Per-module check suites with pinned seeds (>= 3 per operator).
std::vector<GradCheckReport> gradcheck_core();
std::vector<GradCheckReport> gradcheck_sam();
std::vector<GradCheckReport> gradcheck_urim();
std::vector<GradCheckReport> gradcheck_net();

/// module is one of all|core|sam|urim|net.
std::vector<GradCheckReport> run_gradcheck(const std::string& module);

}  // namespace mpseg
