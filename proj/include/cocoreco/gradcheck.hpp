#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cocoreco/ops.hpp"
#include "cocoreco/tensor.hpp"

namespace cocoreco {

template <typename S>
using TensorFn = std::function<Tensor<S>(const std::vector<Tensor<S>>&)>;

// Compares the analytic gradient of a scalar-valued tensor function against
// central differences (f(x+eps) - f(x-eps)) / (2 eps), element-wise over every
// input, and returns the worst relative error. Meant to run on 64-bit
// tensors; the caller compares against its tolerance.
template <typename S>
S grad_check(const TensorFn<S>& fn, const std::vector<Tensor<S>>& inputs,
             S eps) {
    std::vector<Tensor<S>> xs;
    xs.reserve(inputs.size());
    for (const auto& t : inputs) xs.push_back(t.clone().set_requires_grad(true));

    std::vector<std::vector<S>> analytic;
    {
        Tape<S> tape;
        typename Tape<S>::Scope scope(tape);
        Tensor<S> y = fn(xs);
        if (y.size() != 1)
            throw shape_error("grad_check: fn must return a scalar, got " +
                              shape_str(y.shape()));
        backward(y);
        for (const auto& t : xs)
            analytic.push_back(t.has_grad() ? t.grad()
                                            : std::vector<S>(t.size(), S(0)));
    }

    typename Tape<S>::NoTape pure;
    S worst = S(0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        for (std::size_t e = 0; e < xs[i].size(); ++e) {
            const S orig = xs[i].data()[e];
            xs[i].data()[e] = orig + eps;
            const S fp = fn(xs).item();
            xs[i].data()[e] = orig - eps;
            const S fm = fn(xs).item();
            xs[i].data()[e] = orig;
            const S numeric = (fp - fm) / (S(2) * eps);
            const S a = analytic[i][e];
            const S denom = std::max({std::abs(a), std::abs(numeric), S(1)});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace cocoreco
