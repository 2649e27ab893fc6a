#include "mpseg/gradcheck.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mpseg/rng.hpp"

namespace mpseg {

GradCheckReport finite_diff_check(const std::string& name, const BuildScalarFn& build,
                                  std::vector<Tensor<double>> inputs, double epsilon, double tolerance,
                                  int64_t max_elements_per_input, uint64_t sample_seed) {
    auto eval = [&](const std::vector<Tensor<double>>& xs, bool with_grad,
                    std::vector<Tensor<double>>* grads_out) -> double {
        Tape<double> tape;
        std::vector<Var> vars;
        vars.reserve(xs.size());
        for (const auto& x : xs) vars.push_back(tape.input(x, with_grad));
        Var loss = build(tape, vars);
        if (tape.value(loss).numel() != 1)
            throw std::logic_error("finite_diff_check(" + name + "): builder must return a scalar");
        const double f = tape.value(loss).data[0];
        if (!std::isfinite(f)) throw std::runtime_error("finite_diff_check(" + name + "): non-finite forward value");
        if (with_grad) {
            tape.backward(loss);
            tape.check_finite(("finite_diff_check " + name).c_str());
            grads_out->clear();
            for (size_t i = 0; i < vars.size(); ++i) {
                if (tape.grad(vars[i]).numel() == 0)
                    grads_out->push_back(Tensor<double>::zeros(xs[i].shape));
                else
                    grads_out->push_back(tape.grad(vars[i]));
            }
        }
        return f;
    };

    std::vector<Tensor<double>> analytic;
    eval(inputs, true, &analytic);

    Rng sample_rng(sample_seed);
    GradCheckReport report{name, 0.0, false};
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<int64_t> indices(static_cast<size_t>(inputs[i].numel()));
        std::iota(indices.begin(), indices.end(), int64_t{0});
        if (max_elements_per_input > 0 && inputs[i].numel() > max_elements_per_input) {
            sample_rng.shuffle(indices.begin(), indices.end());
            indices.resize(static_cast<size_t>(max_elements_per_input));
        }
        for (int64_t j : indices) {
            const double saved = inputs[i].data[static_cast<size_t>(j)];
            inputs[i].data[static_cast<size_t>(j)] = saved + epsilon;
            const double fp = eval(inputs, false, nullptr);
            inputs[i].data[static_cast<size_t>(j)] = saved - epsilon;
            const double fm = eval(inputs, false, nullptr);
            inputs[i].data[static_cast<size_t>(j)] = saved;

            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double a = analytic[i].data[static_cast<size_t>(j)];
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw std::runtime_error("finite_diff_check(" + name + "): non-finite gradient");
            const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
            if (rel > report.max_rel_err) report.max_rel_err = rel;
        }
    }
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

}  // namespace mpseg
