#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mdst/ops.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const {
        double m = 0.0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_error);
        return m;
    }
    bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

inline constexpr double kGradCheckFloor = 1e-6;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Compares tape gradients of a scalar computation against central finite
// differences. Error per parameter is normwise: max|analytic - numeric| over
// max(max|analytic|, max|numeric|, 1e-6); the floor keeps parameters with an
// exactly zero gradient from dividing finite-difference roundoff by ~0.
inline GradCheckReport check_gradients(const std::function<Tensor()>& f, const NamedTensors& params,
                                       double h = 1e-5) {
    for (const auto& [name, p] : params) {
        if (!p.requires_grad()) throw ContractError("check_gradients: parameter '" + name + "' does not require grad");
        Tensor handle = p;
        handle.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = f();
        if (loss.size() != 1) throw DimensionError("check_gradients: computation is not scalar-valued");
        if (!std::isfinite(loss.item())) throw NumericError("check_gradients: non-finite loss");
        tape.backward(loss);
        for (const auto& [name, p] : params) {
            analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                               : std::vector<double>(p.size(), 0.0));
        }
    }
    auto eval = [&] {
        NoGradScope no_grad;
        const double v = f().item();
        if (!std::isfinite(v)) throw NumericError("check_gradients: non-finite loss under perturbation");
        return v;
    };
    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi].second;
        auto values = p.mutable_values();
        double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double fp = eval();
            values[i] = saved - h;
            const double fm = eval();
            values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            max_diff = std::max(max_diff, std::abs(numeric - analytic[pi][i]));
            max_a = std::max(max_a, std::abs(analytic[pi][i]));
            max_n = std::max(max_n, std::abs(numeric));
        }
        p.zero_grad();
        report.entries.push_back({params[pi].first, max_diff / std::max({max_a, max_n, kGradCheckFloor}), max_diff});
    }
    return report;
}

}  // namespace mdst
