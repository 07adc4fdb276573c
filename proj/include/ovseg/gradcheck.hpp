#pragma once

#include <cmath>
#include <functional>

#include "ovseg/tensor.hpp"

namespace ovseg {

// Central-difference gradient check against one reverse-mode pass.
// `fn` must rebuild its graph from scratch each call (reading the current
// contents of `x`) and return a scalar. Returns the max relative error
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over elements of x.
inline double grad_check(const std::function<Tensor<double>()>& fn, Tensor<double>& x,
                         double eps = 1e-5) {
    if (!x.requires_grad()) throw Error("grad_check: x does not require gradients");
    x.zero_grad();
    Tensor<double> loss = fn();
    backward(loss);
    if (!x.has_grad()) throw Error("grad_check: x received no gradient");
    std::vector<double> analytic = x.grad();

    double worst = 0.0;
    auto& xd = x.mutable_data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const double keep = xd[i];
        xd[i] = keep + eps;
        const double f_plus = fn().item();
        xd[i] = keep - eps;
        const double f_minus = fn().item();
        xd[i] = keep;
        const double numeric = (f_plus - f_minus) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace ovseg
