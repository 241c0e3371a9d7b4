// SPDX-License-Identifier: Apache-2.0
//
// Monte Carlo mutual information between a dataset index X (uniform over L
// items) and a Gaussian channel U ~ N(mu_x, diag sigma_x^2):
//
//   I(X;U) = E_x E_{u|x} [ ln p(u|x) - ln (1/L) sum_j p(u|x_j) ]
//
// The aggregated-posterior term is evaluated exactly over all L items; only
// the outer expectation is sampled. Draws are split into fixed chunks with
// keyed random streams and reduced in chunk order, so estimates do not
// depend on the thread count.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vibvit/errors.hpp"
#include "vibvit/random.hpp"
#include "vibvit/train.hpp"

namespace vibvit::analysis {

inline constexpr std::uint64_t kMiChunk = 8192;

/// Channel parameters for every dataset item; row-major [items, dims].
struct GaussianChannelSet {
    std::size_t items = 0;
    std::size_t dims = 0;
    std::vector<double> mu;
    std::vector<double> sigma;

    void validate() const {
        if (items == 0 || dims == 0) throw UsageError("mi: empty channel set");
        if (mu.size() != items * dims || sigma.size() != items * dims) {
            throw UsageError("mi: channel parameters have mismatched dimensionality");
        }
        for (double s : sigma)
            if (!(s > 0.0) || !std::isfinite(s)) throw NumericError("mi: sigma must be positive and finite");
        for (double m : mu)
            if (!std::isfinite(m)) throw NumericError("mi: non-finite mean");
    }
};

/// Build a set from per-item vectors; every item must have the same length.
inline GaussianChannelSet make_channel_set(const std::vector<std::vector<double>>& mu,
                                           const std::vector<std::vector<double>>& sigma) {
    if (mu.size() != sigma.size() || mu.empty()) throw UsageError("mi: mu/sigma item counts differ");
    GaussianChannelSet c;
    c.items = mu.size();
    c.dims = mu.front().size();
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (mu[i].size() != c.dims || sigma[i].size() != c.dims) {
            throw UsageError("mi: item " + std::to_string(i) + " has mismatched dimensionality");
        }
        c.mu.insert(c.mu.end(), mu[i].begin(), mu[i].end());
        c.sigma.insert(c.sigma.end(), sigma[i].begin(), sigma[i].end());
    }
    return c;
}

/// Joint channel (U, V) given x: parameters concatenated per item.
inline GaussianChannelSet concat_channels(const GaussianChannelSet& a, const GaussianChannelSet& b) {
    if (a.items != b.items) throw UsageError("mi: channels index different item counts");
    GaussianChannelSet c;
    c.items = a.items;
    c.dims = a.dims + b.dims;
    for (std::size_t i = 0; i < a.items; ++i) {
        c.mu.insert(c.mu.end(), a.mu.begin() + i * a.dims, a.mu.begin() + (i + 1) * a.dims);
        c.mu.insert(c.mu.end(), b.mu.begin() + i * b.dims, b.mu.begin() + (i + 1) * b.dims);
        c.sigma.insert(c.sigma.end(), a.sigma.begin() + i * a.dims, a.sigma.begin() + (i + 1) * a.dims);
        c.sigma.insert(c.sigma.end(), b.sigma.begin() + i * b.dims, b.sigma.begin() + (i + 1) * b.dims);
    }
    return c;
}

struct MIEstimate {
    double value = 0.0;   // nats
    double stderr = 0.0;  // nats
    std::size_t items = 0;
    std::uint64_t draws = 0;
};

namespace detail {

struct MomentSums {
    double sum = 0.0;
    double sumsq = 0.0;
};

// Integrand for draws [first, first + count) of chunk `chunk`.
inline MomentSums mi_chunk(const GaussianChannelSet& ch, std::uint64_t count, std::uint64_t seed, std::uint64_t chunk,
                           std::vector<double>& u, std::vector<double>& lp) {
    Rng rng = Rng::keyed(seed, {stream::analysis, 0x4D49, chunk});
    const std::size_t L = ch.items, D = ch.dims;
    // ln p(u|x_j) up to the shared -D/2 ln 2pi constant
    std::vector<double> log_norm(L);
    for (std::size_t j = 0; j < L; ++j) {
        double s = 0;
        for (std::size_t d = 0; d < D; ++d) s += std::log(ch.sigma[j * D + d]);
        log_norm[j] = -s;
    }
    MomentSums m;
    const double lnL = std::log(static_cast<double>(L));
    for (std::uint64_t t = 0; t < count; ++t) {
        const std::size_t x = static_cast<std::size_t>(rng.below(L));
        for (std::size_t d = 0; d < D; ++d) u[d] = ch.mu[x * D + d] + ch.sigma[x * D + d] * rng.normal();
        double mx = -INFINITY;
        for (std::size_t j = 0; j < L; ++j) {
            double q = 0;
            const double* mu = ch.mu.data() + j * D;
            const double* sg = ch.sigma.data() + j * D;
            for (std::size_t d = 0; d < D; ++d) {
                const double z = (u[d] - mu[d]) / sg[d];
                q += z * z;
            }
            lp[j] = log_norm[j] - 0.5 * q;
            mx = std::max(mx, lp[j]);
        }
        // ln p(u|x) - ln mean_j p(u|x_j), shifted by the max for stability
        double s = 0;
        for (std::size_t j = 0; j < L; ++j) s += std::exp(lp[j] - mx);
        const double v = (lp[x] - mx) - std::log(s) + lnL;
        m.sum += v;
        m.sumsq += v * v;
    }
    return m;
}

}  // namespace detail

inline MIEstimate mi_monte_carlo(const GaussianChannelSet& ch, std::uint64_t draws, std::uint64_t seed,
                                 std::size_t threads = 1) {
    ch.validate();
    if (draws < 1) throw UsageError("mi: draws must be at least 1");
    const std::uint64_t chunks = (draws + kMiChunk - 1) / kMiChunk;
    std::vector<detail::MomentSums> parts(chunks);
    parallel_chunks(static_cast<std::size_t>(chunks), threads, [&](std::size_t c) {
        std::vector<double> u(ch.dims), lp(ch.items);
        const std::uint64_t first = c * kMiChunk;
        parts[c] = detail::mi_chunk(ch, std::min<std::uint64_t>(kMiChunk, draws - first), seed, c, u, lp);
    });
    double sum = 0, sumsq = 0;
    for (const auto& p : parts) {
        sum += p.sum;
        sumsq += p.sumsq;
    }
    const double n = static_cast<double>(draws);
    MIEstimate e;
    e.value = sum / n;
    const double var = draws > 1 ? std::max(0.0, (sumsq - n * e.value * e.value) / (n - 1)) : 0.0;
    e.stderr = std::sqrt(var / n);
    e.items = ch.items;
    e.draws = draws;
    return e;
}

struct NmiEstimate {
    double nmi = 0.0;      // clamped to [0, 1]
    double raw = 0.0;      // unclamped ratio
    double stderr = 0.0;   // first-order propagation, terms treated as independent
    MIEstimate i_u, i_v, i_uv, i_uu, i_vv;
    double mi_uv = 0.0;    // I(U;V)
    double norm_u = 0.0;   // I(U;U')
    double norm_v = 0.0;   // I(V;V')
};

/// Normalized mutual information between two channels over the same items.
/// Each of the five MI terms uses its own random stream.
inline NmiEstimate nmi_heads(const GaussianChannelSet& u, const GaussianChannelSet& v, std::uint64_t draws,
                             std::uint64_t seed, std::size_t threads = 1) {
    if (u.items != v.items) throw UsageError("nmi: channels must index the same items");
    NmiEstimate r;
    r.i_u = mi_monte_carlo(u, draws, stream_seed(seed, {1}), threads);
    r.i_v = mi_monte_carlo(v, draws, stream_seed(seed, {2}), threads);
    r.i_uv = mi_monte_carlo(concat_channels(u, v), draws, stream_seed(seed, {3}), threads);
    r.i_uu = mi_monte_carlo(concat_channels(u, u), draws, stream_seed(seed, {4}), threads);
    r.i_vv = mi_monte_carlo(concat_channels(v, v), draws, stream_seed(seed, {5}), threads);
    const double a = r.i_u.value, b = r.i_v.value, c = r.i_uv.value, du = r.i_uu.value, dv = r.i_vv.value;
    r.mi_uv = a + b - c;
    r.norm_u = 2 * a - du;
    r.norm_v = 2 * b - dv;
    if (!(r.norm_u > 1e-9) || !(r.norm_v > 1e-9)) {
        throw UndefinedNmiError("nmi: a channel carries no information (zero normalizer)");
    }
    const double den = std::sqrt(r.norm_u * r.norm_v);
    r.raw = r.mi_uv / den;
    r.nmi = std::clamp(r.raw, 0.0, 1.0);
    // partial derivatives of raw w.r.t. (a, b, c, du, dv)
    const double g_a = 1.0 / den - r.raw / r.norm_u;
    const double g_b = 1.0 / den - r.raw / r.norm_v;
    const double g_c = -1.0 / den;
    const double g_du = 0.5 * r.raw / r.norm_u;
    const double g_dv = 0.5 * r.raw / r.norm_v;
    auto sq = [](double x) { return x * x; };
    r.stderr = std::sqrt(sq(g_a * r.i_u.stderr) + sq(g_b * r.i_v.stderr) + sq(g_c * r.i_uv.stderr) +
                         sq(g_du * r.i_uu.stderr) + sq(g_dv * r.i_vv.stderr));
    return r;
}

}  // namespace vibvit::analysis
