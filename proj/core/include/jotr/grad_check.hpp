#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "jotr/ops.hpp"
#include "jotr/tensor.hpp"

namespace jotr {

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::string worst; // input/element of the worst mismatch, or the failure site
};

// Compares reverse-mode gradients of a scalar-valued function against
// central finite differences, elementwise over every input.
//
// Relative error uses a floor of 1e-3 in the denominator so that noise on
// near-zero gradients does not register; callers should keep loss values
// around O(1..100) for the differences to stay clean in 64-bit.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double eps = 1e-5, double tol = 1e-4) {
    GradCheckReport report;

    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }

    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        typename Tape<double>::Scope scope(tape);
        Tensor<double> loss = fn(inputs);
        if (loss.size() != 1) {
            report.worst = "loss is not scalar";
            return report;
        }
        if (!std::isfinite(loss.value())) {
            report.worst = "non-finite loss at base point";
            return report;
        }
        tape.backward(loss);
        for (auto& in : inputs) analytic.push_back(in.mutable_grad());
    }

    const double guard = 1e-3;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto& vals = inputs[t].mutable_values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + eps;
            const double fp = fn(inputs).value();
            vals[i] = saved - eps;
            const double fm = fn(inputs).value();
            vals[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                report.worst = "non-finite perturbation at input " + std::to_string(t) +
                               " element " + std::to_string(i);
                report.max_rel_err = INFINITY;
                return report;
            }
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[t][i];
            const double rel =
                std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), guard});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                std::ostringstream os;
                os << "input " << t << " elem " << i << ": analytic " << a << " numeric " << numeric;
                report.worst = os.str();
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

} // namespace jotr
