// SPDX-License-Identifier: Apache-2.0
//
// Per-head variational information bottleneck: a diagonal Gaussian encoder
// q(z | delta), a fixed N(0, I) prior and an affine decoder back to the
// head's update space. The functions here act on single update vectors; the
// model's batched forward expresses the same maps with tape ops.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vibvit/config.hpp"
#include "vibvit/errors.hpp"
#include "vibvit/random.hpp"
#include "vibvit/tape.hpp"
#include "vibvit/tensor.hpp"

namespace vibvit {

inline constexpr double kMinSigma = 1e-6;
inline constexpr double kMaxSigma = 1e6;

template <class T>
T min_log_sigma() {
    return static_cast<T>(std::log(kMinSigma));
}
template <class T>
T max_log_sigma() {
    return static_cast<T>(std::log(kMaxSigma));
}

/// Encoder maps delta[head_dim] -> (mu, log sigma) through one affine layer
/// whose output columns are [mu | log sigma]; decoder maps z[latent] -> delta.
template <class T>
struct BottleneckChannel {
    Parameter<T> enc_w;  // [head_dim, 2 * latent]
    Parameter<T> enc_b;  // [2 * latent]
    Parameter<T> dec_w;  // [latent, head_dim]
    Parameter<T> dec_b;  // [head_dim]

    BottleneckChannel() = default;
    BottleneckChannel(const std::string& prefix, std::size_t head_dim, std::size_t latent)
        : enc_w(prefix + ".enc.weight", Tensor<T>(Shape{head_dim, 2 * latent}), true),
          enc_b(prefix + ".enc.bias", Tensor<T>(Shape{2 * latent}), true),
          dec_w(prefix + ".dec.weight", Tensor<T>(Shape{latent, head_dim}), true),
          dec_b(prefix + ".dec.bias", Tensor<T>(Shape{head_dim}), true) {}

    std::size_t head_dim() const { return enc_w.value.dim(0); }
    std::size_t latent_dim() const { return dec_w.value.dim(0); }

    template <class F>
    void visit(F&& f) {
        f(enc_w);
        f(enc_b);
        f(dec_w);
        f(dec_b);
    }
    template <class F>
    void visit(F&& f) const {
        f(enc_w);
        f(enc_b);
        f(dec_w);
        f(dec_b);
    }
};

/// Information cost of one (layer, head, patch) message.
struct KLRecord {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t patch = 0;
    std::size_t image = 0;  // dataset index when records are pooled across images
    double kl_nats = 0.0;
    std::vector<double> per_dim_kl;
};

template <class T>
struct GaussianParams {
    std::vector<T> mu;
    std::vector<T> sigma;
};

template <class T>
GaussianParams<T> encode(std::span<const T> delta, const BottleneckChannel<T>& ch) {
    const std::size_t hd = ch.head_dim();
    const std::size_t L = ch.latent_dim();
    if (delta.size() != hd) throw DimensionError("encode: update length does not match head_dim");
    for (T v : delta) {
        if (!std::isfinite(v)) throw NumericError("encode: non-finite update");
    }
    GaussianParams<T> out{std::vector<T>(L), std::vector<T>(L)};
    const auto& W = ch.enc_w.value;
    const auto& b = ch.enc_b.value;
    for (std::size_t j = 0; j < 2 * L; ++j) {
        T acc = b[j];
        for (std::size_t i = 0; i < hd; ++i) acc += delta[i] * W[i * 2 * L + j];
        if (j < L) {
            out.mu[j] = acc;
        } else {
            out.sigma[j - L] = std::exp(std::clamp(acc, min_log_sigma<T>(), max_log_sigma<T>()));
        }
    }
    return out;
}

/// z = mu + sigma * eps with eps ~ N(0, I).
template <class T>
std::vector<T> sample_reparam(std::span<const T> mu, std::span<const T> sigma, Rng& rng) {
    if (mu.size() != sigma.size()) throw DimensionError("sample_reparam: mu/sigma length mismatch");
    std::vector<T> z(mu.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + sigma[i] * static_cast<T>(rng.normal());
    return z;
}

struct KLValue {
    double kl_nats = 0.0;
    std::vector<double> per_dim_kl;
};

/// KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum_d (mu^2 + sigma^2 - 1 - ln sigma^2).
template <class T>
KLValue kl_diag_gaussian(std::span<const T> mu, std::span<const T> sigma) {
    if (mu.size() != sigma.size()) throw DimensionError("kl_diag_gaussian: mu/sigma length mismatch");
    KLValue out{0.0, std::vector<double>(mu.size())};
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double s = static_cast<double>(sigma[i]);
        if (!(s > 0.0)) throw NumericError("kl_diag_gaussian: sigma must be positive");
        const double m = static_cast<double>(mu[i]);
        const double kl = 0.5 * (m * m + s * s - 1.0 - 2.0 * std::log(s));
        out.per_dim_kl[i] = std::max(kl, 0.0);
        out.kl_nats += out.per_dim_kl[i];
    }
    return out;
}

template <class T>
std::vector<T> decode(std::span<const T> z, const BottleneckChannel<T>& ch) {
    const std::size_t hd = ch.head_dim();
    const std::size_t L = ch.latent_dim();
    if (z.size() != L) throw DimensionError("decode: latent length mismatch");
    std::vector<T> out(ch.dec_b.value.storage());
    const auto& W = ch.dec_w.value;
    for (std::size_t i = 0; i < L; ++i) {
        const T zi = z[i];
        for (std::size_t j = 0; j < hd; ++j) out[j] += zi * W[i * hd + j];
    }
    return out;
}

template <class T>
struct BottleneckOutput {
    std::vector<T> update;
    KLValue kl;
};

template <class T>
BottleneckOutput<T> bottleneck_apply(std::span<const T> delta, const BottleneckChannel<T>& ch, BottleneckMode mode,
                                     Rng* rng) {
    if (mode == BottleneckMode::disabled) {
        return {std::vector<T>(delta.begin(), delta.end()), KLValue{0.0, std::vector<double>(ch.latent_dim(), 0.0)}};
    }
    if (mode == BottleneckMode::stochastic && rng == nullptr) {
        throw UsageError("bottleneck_apply: stochastic mode requires an rng");
    }
    auto q = encode<T>(delta, ch);
    KLValue kl = kl_diag_gaussian<T>(q.mu, q.sigma);
    std::vector<T> z;
    switch (mode) {
        case BottleneckMode::stochastic: z = sample_reparam<T>(q.mu, q.sigma, *rng); break;
        case BottleneckMode::mean: z = q.mu; break;
        default: z.assign(ch.latent_dim(), T{0}); break;
    }
    return {decode<T>(z, ch), std::move(kl)};
}

}  // namespace vibvit
