// SPDX-License-Identifier: Apache-2.0
//
// Composite Simpson quadrature of the 1-D KL integral
//   KL(q || p) = int q(z) ln(q(z) / p(z)) dz,  q = N(mu, sigma^2), p = N(0, 1)
// evaluated from the two densities directly, without the closed form.
#pragma once

#include <cmath>
#include <numbers>

namespace vibvit::testing {

inline double normal_log_pdf(double z, double mu, double sigma) {
    const double u = (z - mu) / sigma;
    return -0.5 * u * u - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double kl_quadrature(double mu, double sigma, int intervals = 40000) {
    const double lo = mu - 14.0 * sigma, hi = mu + 14.0 * sigma;
    const double h = (hi - lo) / intervals;
    auto f = [&](double z) {
        const double lq = normal_log_pdf(z, mu, sigma);
        return std::exp(lq) * (lq - normal_log_pdf(z, 0.0, 1.0));
    };
    double acc = f(lo) + f(hi);
    for (int i = 1; i < intervals; ++i) acc += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

}  // namespace vibvit::testing
