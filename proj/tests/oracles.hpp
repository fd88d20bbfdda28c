// Independent test oracles. Everything here recomputes expected values
// from first principles (finite differences, exhaustive enumeration,
// naive recursions) without touching the implementation paths it checks.
#pragma once

#include "caml/params.hpp"
#include "caml/tensor.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace oracles {

// Central finite-difference gradient of `loss_fn` w.r.t. every element of
// `param`. loss_fn must re-run the forward pass from current values.
inline std::vector<double> finite_diff_grad(caml::Tensor& param,
                                            const std::function<double()>& loss_fn,
                                            double h = 1e-5) {
    std::vector<double> grad(param.size());
    for (size_t i = 0; i < param.size(); ++i) {
        const double orig = param.values()[i];
        param.values()[i] = orig + h;
        const double up = loss_fn();
        param.values()[i] = orig - h;
        const double down = loss_fn();
        param.values()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

// Worst relative error between an analytic gradient and its FD estimate,
// with an absolute floor so near-zero entries do not blow up the ratio.
inline double max_rel_error(std::span<const double> analytic, std::span<const double> fd,
                            double floor = 1e-6) {
    double worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(fd[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
    }
    return worst;
}

// FD check over every parameter of a ModelParams collection.
inline double model_fd_max_rel_error(caml::ModelParams& params,
                                     const std::function<double()>& loss_fn,
                                     const std::function<void()>& backward_fn,
                                     double h = 1e-5) {
    backward_fn();
    double worst = 0.0;
    for (auto& [path, t] : params.all()) {
        const std::vector<double> analytic = t.grad();
        const std::vector<double> fd = finite_diff_grad(t, loss_fn, h);
        worst = std::max(worst, max_rel_error(analytic, fd));
    }
    return worst;
}

// Naive exponential-time Levenshtein distance.
inline int naive_edit_distance(std::span<const int> a, std::span<const int> b) {
    if (a.empty()) return static_cast<int>(b.size());
    if (b.empty()) return static_cast<int>(a.size());
    const int same = a[0] == b[0] ? 0 : 1;
    const int sub = naive_edit_distance(a.subspan(1), b.subspan(1)) + same;
    const int del = naive_edit_distance(a.subspan(1), b) + 1;
    const int ins = naive_edit_distance(a, b.subspan(1)) + 1;
    return std::min({sub, del, ins});
}

} // namespace oracles
