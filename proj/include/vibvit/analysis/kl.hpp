// SPDX-License-Identifier: Apache-2.0
//
// KL-record instruments: spatial KL maps, per-head survival curves and
// active head / latent-dimension detection.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "vibvit/errors.hpp"
#include "vibvit/model.hpp"
#include "vibvit/vib.hpp"

namespace vibvit::analysis {

inline constexpr double kActiveThreshold = 1e-2;  // nats

/// Per-patch KL summed over layers and heads, row-major on the patch grid.
struct PatchKLMap {
    std::size_t image = 0;
    std::size_t grid = 0;
    std::vector<double> values;  // grid * grid

    double at(std::size_t row, std::size_t col) const { return values[row * grid + col]; }
    double total() const {
        double s = 0;
        for (double v : values) s += v;
        return s;
    }
};

inline PatchKLMap patch_kl_map(std::span<const KLRecord> records, std::size_t patch_count, std::size_t image = 0) {
    const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(patch_count))));
    if (g * g != patch_count) throw DimensionError("patch_kl_map: patch count is not a square");
    PatchKLMap m{image, g, std::vector<double>(patch_count, 0.0)};
    for (const auto& r : records) {
        if (r.patch >= patch_count) throw DimensionError("patch_kl_map: patch index out of range");
        m.values[r.patch] += r.kl_nats;
    }
    return m;
}

template <class T>
PatchKLMap patch_kl_map(const ForwardTrace<T>& trace, std::size_t image = 0) {
    return patch_kl_map(trace.kl_records, trace.per_patch_logits.dim(0), image);
}

/// Total KL per (layer, head), indexed layer * heads + head.
inline std::vector<double> head_kl_totals(std::span<const KLRecord> records, std::size_t depth, std::size_t heads) {
    std::vector<double> out(depth * heads, 0.0);
    for (const auto& r : records) {
        if (r.layer >= depth || r.head >= heads) throw DimensionError("head_kl_totals: record out of range");
        out[r.layer * heads + r.head] += r.kl_nats;
    }
    return out;
}

/// Empirical P(KL >= x) over one head's per-patch records.
inline std::vector<double> kl_survival(std::span<const KLRecord> records, std::size_t layer, std::size_t head,
                                       std::span<const double> xs) {
    std::vector<double> kl;
    for (const auto& r : records)
        if (r.layer == layer && r.head == head) kl.push_back(r.kl_nats);
    if (kl.empty()) throw UsageError("kl_survival: no records for the requested head");
    std::sort(kl.begin(), kl.end());
    std::vector<double> out;
    out.reserve(xs.size());
    for (double x : xs) {
        const auto first_ge = std::lower_bound(kl.begin(), kl.end(), x);
        out.push_back(static_cast<double>(kl.end() - first_ge) / static_cast<double>(kl.size()));
    }
    return out;
}

/// Log-spaced grid from lo to hi (inclusive), preceded by 0.
inline std::vector<double> survival_grid(double lo, double hi, std::size_t points) {
    if (!(lo > 0 && hi > lo) || points < 2) throw UsageError("survival_grid: need 0 < lo < hi and >= 2 points");
    std::vector<double> xs{0.0};
    const double a = std::log(lo), b = std::log(hi);
    for (std::size_t i = 0; i < points; ++i)
        xs.push_back(std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(points - 1)));
    return xs;
}

struct HeadActivity {
    std::size_t layer = 0;
    std::size_t head = 0;
    double max_kl = 0.0;  // largest per-patch KL seen
    bool active = false;
    std::vector<double> per_dim_mean_kl;
    std::vector<double> per_dim_max_kl;
};

/// A head is active when some per-patch KL strictly exceeds `threshold`.
inline std::vector<HeadActivity> active_heads(std::span<const KLRecord> records, std::size_t depth, std::size_t heads,
                                              double threshold = kActiveThreshold) {
    std::vector<HeadActivity> out(depth * heads);
    std::vector<std::size_t> counts(depth * heads, 0);
    for (std::size_t l = 0; l < depth; ++l)
        for (std::size_t h = 0; h < heads; ++h) {
            out[l * heads + h].layer = l;
            out[l * heads + h].head = h;
        }
    for (const auto& r : records) {
        if (r.layer >= depth || r.head >= heads) throw DimensionError("active_heads: record out of range");
        auto& a = out[r.layer * heads + r.head];
        a.max_kl = std::max(a.max_kl, r.kl_nats);
        if (a.per_dim_mean_kl.size() < r.per_dim_kl.size()) {
            a.per_dim_mean_kl.resize(r.per_dim_kl.size(), 0.0);
            a.per_dim_max_kl.resize(r.per_dim_kl.size(), 0.0);
        }
        for (std::size_t d = 0; d < r.per_dim_kl.size(); ++d) {
            a.per_dim_mean_kl[d] += r.per_dim_kl[d];
            a.per_dim_max_kl[d] = std::max(a.per_dim_max_kl[d], r.per_dim_kl[d]);
        }
        ++counts[r.layer * heads + r.head];
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].active = out[i].max_kl > threshold;
        if (counts[i])
            for (auto& v : out[i].per_dim_mean_kl) v /= static_cast<double>(counts[i]);
    }
    return out;
}

/// Dimensions whose largest per-patch KL contribution strictly exceeds `threshold`.
inline std::vector<std::size_t> active_latent_dims(std::span<const KLRecord> records, std::size_t layer,
                                                   std::size_t head, double threshold = kActiveThreshold) {
    std::vector<double> mx;
    for (const auto& r : records) {
        if (r.layer != layer || r.head != head) continue;
        if (mx.size() < r.per_dim_kl.size()) mx.resize(r.per_dim_kl.size(), 0.0);
        for (std::size_t d = 0; d < r.per_dim_kl.size(); ++d) mx[d] = std::max(mx[d], r.per_dim_kl[d]);
    }
    std::vector<std::size_t> dims;
    for (std::size_t d = 0; d < mx.size(); ++d)
        if (mx[d] > threshold) dims.push_back(d);
    return dims;
}

/// Active dimension with the largest mean per-patch KL.
inline std::size_t dominant_dimension(std::span<const KLRecord> records, std::size_t layer, std::size_t head,
                                      double threshold = kActiveThreshold) {
    const auto dims = active_latent_dims(records, layer, head, threshold);
    if (dims.empty()) throw UsageError("head has no active latent dimension");
    std::vector<double> mean;
    for (const auto& r : records) {
        if (r.layer != layer || r.head != head) continue;
        if (mean.size() < r.per_dim_kl.size()) mean.resize(r.per_dim_kl.size(), 0.0);
        for (std::size_t d = 0; d < r.per_dim_kl.size(); ++d) mean[d] += r.per_dim_kl[d];
    }
    std::size_t best = dims.front();
    for (std::size_t d : dims)
        if (mean[d] > mean[best]) best = d;
    return best;
}

}  // namespace vibvit::analysis
