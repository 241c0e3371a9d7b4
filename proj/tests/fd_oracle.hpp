// SPDX-License-Identifier: Apache-2.0
//
// Central finite differences, kept independent of the tape so it can serve
// as an oracle for reverse-mode gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vibvit/random.hpp"
#include "vibvit/tensor.hpp"

namespace vibvit::testing {

inline Tensor<double> central_difference(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                                         double h = 1e-5) {
    Tensor<double> g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-12) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace vibvit::testing
