// SPDX-License-Identifier: Apache-2.0
//
// Per-patch voting statistics and output-distribution comparison.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "vibvit/errors.hpp"
#include "vibvit/random.hpp"
#include "vibvit/tensor.hpp"

namespace vibvit::analysis {

/// 1 / sum_c p_c^2 where p_c is the fraction of patches voting class c.
inline double inverse_simpson(std::span<const std::size_t> top_class) {
    if (top_class.empty()) throw UsageError("inverse_simpson: no patches");
    const std::size_t classes = *std::max_element(top_class.begin(), top_class.end()) + 1;
    std::vector<double> counts(classes, 0.0);
    for (std::size_t c : top_class) counts[c] += 1.0;
    const double n = static_cast<double>(top_class.size());
    double s = 0;
    for (double k : counts) s += (k / n) * (k / n);
    return 1.0 / s;
}

/// Max minus min over every entry of the patch x class matrix.
template <class T>
double logit_range(const Tensor<T>& per_patch_logits) {
    if (per_patch_logits.size() == 0) return 0.0;
    const auto [lo, hi] = std::minmax_element(per_patch_logits.data().begin(), per_patch_logits.data().end());
    return static_cast<double>(*hi) - static_cast<double>(*lo);
}

/// Argmax class of every row of a [N, C] matrix; ties go to the lower class.
template <class T>
std::vector<std::size_t> patch_votes(const Tensor<T>& per_patch_logits) {
    const std::size_t N = per_patch_logits.dim(0), C = per_patch_logits.dim(1);
    std::vector<std::size_t> out(N);
    for (std::size_t i = 0; i < N; ++i) {
        const T* row = per_patch_logits.raw() + i * C;
        out[i] = static_cast<std::size_t>(std::max_element(row, row + C) - row);
    }
    return out;
}

struct VoteStats {
    std::size_t image = 0;
    double effective_classes = 0.0;  // inverse Simpson index of the votes
    double logit_range = 0.0;
    double top_agreement = 0.0;  // fraction of patches voting for the pooled prediction
    std::size_t predicted = 0;
};

template <class T>
VoteStats vote_stats(const Tensor<T>& per_patch_logits, std::span<const T> logits, std::size_t image = 0) {
    const auto votes = patch_votes(per_patch_logits);
    VoteStats s;
    s.image = image;
    s.effective_classes = inverse_simpson(votes);
    s.logit_range = logit_range(per_patch_logits);
    s.predicted = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    s.top_agreement = static_cast<double>(std::count(votes.begin(), votes.end(), s.predicted)) /
                      static_cast<double>(votes.size());
    return s;
}

template <class T>
std::vector<double> softmax_probs(std::span<const T> logits) {
    double mx = -INFINITY;
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(static_cast<double>(logits[i]) - mx));
    for (auto& v : p) v /= s;
    return p;
}

/// Jensen-Shannon distance in nats: sqrt(KL(p||m)/2 + KL(q||m)/2), m = (p+q)/2.
inline double jsd(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw UsageError("jsd: length mismatch");
    auto check = [](std::span<const double> v) {
        double s = 0;
        for (double x : v) {
            if (!(x >= 0.0)) throw UsageError("jsd: negative probability");
            s += x;
        }
        if (std::abs(s - 1.0) > 1e-6) throw UsageError("jsd: input does not sum to 1");
    };
    check(p);
    check(q);
    double div = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0) div += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0) div += 0.5 * q[i] * std::log(q[i] / m);
    }
    return std::sqrt(std::max(div, 0.0));
}

struct JsdSelection {
    std::vector<double> distances;         // per image
    std::vector<std::size_t> top;          // images in the top fraction, by distance descending
    std::vector<std::size_t> sampled;      // uniform sample from `top`, ascending
};

/// Rank images by JSD between two models' output distributions, keep the
/// top `fraction`, and sample `samples` of those uniformly without replacement.
inline JsdSelection jsd_select(const std::vector<std::vector<double>>& probs_a,
                               const std::vector<std::vector<double>>& probs_b, double fraction, std::size_t samples,
                               Rng& rng) {
    if (probs_a.size() != probs_b.size() || probs_a.empty()) throw UsageError("jsd_select: mismatched inputs");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw UsageError("jsd_select: fraction must be in (0, 1]");
    JsdSelection out;
    for (std::size_t i = 0; i < probs_a.size(); ++i) out.distances.push_back(jsd(probs_a[i], probs_b[i]));
    std::vector<std::size_t> order(probs_a.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return out.distances[a] > out.distances[b]; });
    const auto k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(order.size()) - 1e-9)));
    out.top.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::vector<std::size_t> pool = out.top;
    const std::size_t take = std::min(samples, pool.size());
    for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    out.sampled.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(out.sampled.begin(), out.sampled.end());
    return out;
}

}  // namespace vibvit::analysis
