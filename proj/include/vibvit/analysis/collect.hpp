// SPDX-License-Identifier: Apache-2.0
//
// Dataset sweeps that gather the per-patch quantities the analyses consume.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "vibvit/analysis/mi.hpp"
#include "vibvit/dataset.hpp"
#include "vibvit/model.hpp"
#include "vibvit/train.hpp"

namespace vibvit::analysis {

/// Analyses read bottleneck parameters deterministically; models trained
/// without bottlenecks are read without them.
inline BottleneckMode analysis_mode(const TrainConfig& tc) {
    return tc.train_mode == BottleneckMode::disabled ? BottleneckMode::disabled : BottleneckMode::mean;
}

inline std::vector<std::size_t> first_indices(const Dataset& ds, std::size_t limit) {
    std::vector<std::size_t> idx(limit == 0 ? ds.size() : std::min(limit, ds.size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

/// One (image, patch) observation of a single head.
struct HeadSample {
    std::size_t image = 0;
    std::size_t patch = 0;
    double kl = 0.0;
    std::vector<double> per_dim_kl;
    std::vector<double> mu;
    std::vector<double> sigma;
};

struct SweepOptions {
    BottleneckMode mode = BottleneckMode::mean;
    std::size_t batch = 100;
    std::size_t threads = 1;
};

namespace detail {

inline void check_head(const ViTConfig& cfg, std::size_t layer, std::size_t head) {
    if (layer >= cfg.depth || head >= cfg.heads_per_block) {
        throw UsageError("head (" + std::to_string(layer) + ", " + std::to_string(head) + ") does not exist");
    }
}

inline Rng no_rng(std::size_t) { return Rng(0); }

}  // namespace detail

/// KL records of every image, concatenated in image order.
template <class T>
std::vector<KLRecord> collect_kl_records(const ViTModel<T>& model, const Dataset& ds,
                                         std::span<const std::size_t> indices, const SweepOptions& opt) {
    if (opt.mode == BottleneckMode::stochastic) throw UsageError("collect_kl_records: use a deterministic mode");
    std::vector<KLRecord> out;
    for_each_trace<T>(model, ds, indices, opt.mode, detail::no_rng, opt.batch, opt.threads,
                      [&](std::size_t, std::size_t idx, const ForwardTrace<T>& tr) {
                          for (const auto& r : tr.kl_records) {
                              out.push_back(r);
                              out.back().image = idx;
                          }
                      });
    return out;
}

/// Every (image, patch) observation of one head, in (image, patch) order.
template <class T>
std::vector<HeadSample> collect_head(const ViTModel<T>& model, const Dataset& ds, std::span<const std::size_t> indices,
                                     std::size_t layer, std::size_t head, const SweepOptions& opt) {
    const auto& cfg = model.config;
    detail::check_head(cfg, layer, head);
    if (opt.mode != BottleneckMode::mean) throw UsageError("collect_head: channel parameters need mean mode");
    const std::size_t N = cfg.patch_count(), L = cfg.latent_dim, slot = layer * cfg.heads_per_block + head;
    std::vector<HeadSample> out;
    out.reserve(indices.size() * N);
    for_each_trace<T>(model, ds, indices, opt.mode, detail::no_rng, opt.batch, opt.threads,
                      [&](std::size_t, std::size_t idx, const ForwardTrace<T>& tr) {
                          const auto& mu = tr.head_latent_means[slot];
                          const auto& sg = tr.head_latent_sigmas[slot];
                          for (std::size_t i = 0; i < N; ++i) {
                              const auto& rec = tr.kl_records[slot * N + i];
                              HeadSample s;
                              s.image = idx;
                              s.patch = i;
                              s.kl = rec.kl_nats;
                              s.per_dim_kl = rec.per_dim_kl;
                              s.mu.assign(mu.raw() + i * L, mu.raw() + (i + 1) * L);
                              s.sigma.assign(sg.raw() + i * L, sg.raw() + (i + 1) * L);
                              out.push_back(std::move(s));
                          }
                      });
    return out;
}

/// KLRecords for one head, rebuilt from its samples.
inline std::vector<KLRecord> head_records(const std::vector<HeadSample>& samples, std::size_t layer, std::size_t head) {
    std::vector<KLRecord> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        KLRecord r;
        r.layer = layer;
        r.head = head;
        r.patch = s.patch;
        r.image = s.image;
        r.kl_nats = s.kl;
        r.per_dim_kl = s.per_dim_kl;
        out.push_back(std::move(r));
    }
    return out;
}

/// Positions of `count` samples drawn uniformly without replacement, ascending.
inline std::vector<std::size_t> choose_items(std::size_t total, std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> pool(total);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    if (count == 0 || count >= total) return pool;
    Rng rng = Rng::keyed(seed, {stream::analysis, 0x4954});
    for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + rng.below(total - i)]);
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

inline GaussianChannelSet channel_from_samples(const std::vector<HeadSample>& samples,
                                               std::span<const std::size_t> items) {
    if (items.empty()) throw UsageError("channel_from_samples: no items");
    GaussianChannelSet c;
    c.items = items.size();
    c.dims = samples.at(items.front()).mu.size();
    for (std::size_t k : items) {
        const auto& s = samples.at(k);
        if (s.mu.size() != c.dims) throw UsageError("channel_from_samples: mismatched dimensionality");
        c.mu.insert(c.mu.end(), s.mu.begin(), s.mu.end());
        c.sigma.insert(c.sigma.end(), s.sigma.begin(), s.sigma.end());
    }
    return c;
}

}  // namespace vibvit::analysis
