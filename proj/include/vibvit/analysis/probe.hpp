// SPDX-License-Identifier: Apache-2.0
//
// Copy-paste repetition probe and top-activating patch extraction.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vibvit/analysis/collect.hpp"
#include "vibvit/analysis/kl.hpp"
#include "vibvit/errors.hpp"
#include "vibvit/model.hpp"
#include "vibvit/random.hpp"

namespace vibvit::analysis {

namespace detail {

template <class T>
void copy_patch(std::span<T> image, const ViTConfig& cfg, std::size_t from, std::size_t to) {
    const std::size_t g = cfg.grid(), P = cfg.patch_size, S = cfg.image_size;
    const std::size_t fr = from / g * P, fc = from % g * P, tr = to / g * P, tc = to % g * P;
    for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t y = 0; y < P; ++y)
            for (std::size_t x = 0; x < P; ++x)
                image[(c * S + tr + y) * S + tc + x] = image[(c * S + fr + y) * S + fc + x];
}

}  // namespace detail

/// Copy the source patch onto N distinct other patch locations chosen
/// uniformly without replacement.
template <class T>
std::vector<T> copy_paste_augment(std::span<const T> image, const ViTConfig& cfg, std::size_t source, std::size_t n,
                                  Rng& rng) {
    const std::size_t patches = cfg.patch_count();
    if (image.size() != cfg.image_numel()) throw DimensionError("copy_paste_augment: image size mismatch");
    if (source >= patches) throw UsageError("copy_paste_augment: source patch out of range");
    if (n > patches - 1) {
        throw UsageError("copy_paste_augment: N=" + std::to_string(n) + " exceeds the " +
                         std::to_string(patches - 1) + " available locations");
    }
    std::vector<T> out(image.begin(), image.end());
    std::vector<std::size_t> others;
    for (std::size_t p = 0; p < patches; ++p)
        if (p != source) others.push_back(p);
    for (std::size_t i = 0; i < n; ++i) {
        std::swap(others[i], others[i + rng.below(others.size() - i)]);
        detail::copy_patch<T>(out, cfg, source, others[i]);
    }
    return out;
}

struct ProbeSample {
    std::size_t image = 0;
    std::size_t patch = 0;
    std::vector<double> mu0;                        // [dims]
    std::vector<std::vector<double>> displacement;  // [n_values][dims]
};

struct ProbeResult {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::vector<std::size_t> dims;      // active latent dimensions reported
    std::vector<std::size_t> n_values;
    std::vector<ProbeSample> samples;
};

/// For each (image, patch) site: mean-mode latent of the head at the source
/// patch, and its displacement after copy-pasting the patch N times.
template <class T>
ProbeResult repetition_probe(const ViTModel<T>& model, const Dataset& ds, std::size_t layer, std::size_t head,
                             std::span<const std::size_t> active_dims,
                             std::span<const std::pair<std::size_t, std::size_t>> sites,
                             std::span<const std::size_t> n_values, std::uint64_t seed, std::size_t threads = 1) {
    const auto& cfg = model.config;
    detail::check_head(cfg, layer, head);
    check_dataset(ds, cfg);
    if (active_dims.empty()) throw UsageError("repetition_probe: head has no active latent dimension");
    for (std::size_t d : active_dims)
        if (d >= cfg.latent_dim) throw UsageError("repetition_probe: latent dimension out of range");
    const std::size_t slot = layer * cfg.heads_per_block + head, L = cfg.latent_dim, V = n_values.size();
    ProbeResult res{layer, head, {active_dims.begin(), active_dims.end()}, {n_values.begin(), n_values.end()}, {}};
    res.samples.resize(sites.size());
    parallel_chunks(sites.size(), threads, [&](std::size_t s) {
        const auto [img, patch] = sites[s];
        if (img >= ds.size() || patch >= cfg.patch_count()) throw UsageError("repetition_probe: site out of range");
        const auto base = ds.image(img);
        std::vector<T> batch(base.begin(), base.end());
        for (std::size_t v = 0; v < V; ++v) {
            Rng rng = Rng::keyed(seed, {stream::analysis, 0x5052, s, v});
            std::vector<T> src(base.begin(), base.end());
            const auto aug = copy_paste_augment<T>(src, cfg, patch, n_values[v], rng);
            batch.insert(batch.end(), aug.begin(), aug.end());
        }
        const auto traces = forward_batch<T>(batch, V + 1, model, BottleneckMode::mean, nullptr);
        auto latent = [&](std::size_t b, std::size_t d) {
            return static_cast<double>(traces[b].head_latent_means[slot][patch * L + d]);
        };
        auto& out = res.samples[s];
        out.image = img;
        out.patch = patch;
        for (std::size_t d : active_dims) out.mu0.push_back(latent(0, d));
        out.displacement.assign(V, {});
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t k = 0; k < active_dims.size(); ++k)
                out.displacement[v].push_back(latent(v + 1, active_dims[k]) - out.mu0[k]);
    });
    return res;
}

/// Uniform (image, patch) sites over the given images.
inline std::vector<std::pair<std::size_t, std::size_t>> probe_sites(std::span<const std::size_t> images,
                                                                    std::size_t patches, std::size_t count,
                                                                    std::uint64_t seed) {
    if (images.empty()) throw UsageError("probe_sites: no images");
    Rng rng = Rng::keyed(seed, {stream::analysis, 0x5053});
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t img = images[rng.below(images.size())];
        out.emplace_back(img, static_cast<std::size_t>(rng.below(patches)));
    }
    return out;
}

struct TopPatch {
    std::size_t image = 0;
    std::size_t patch = 0;
    double kl = 0.0;
    double mu = 0.0;                 // latent mean on the dominant dimension
    std::vector<double> attention;   // the head's attention row for this patch
};

struct TopPatches {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t dominant_dim = 0;
    std::size_t k = 0;
    std::vector<TopPatch> positive;  // mu > 0
    std::vector<TopPatch> negative;  // mu <= 0
};

/// Number of items kept from `count` at `percent` percent; at least one.
inline std::size_t top_count(std::size_t count, double percent) {
    if (!(percent > 0.0 && percent <= 100.0)) throw UsageError("percentile must be in (0, 100]");
    const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(count) * percent / 100.0));
    return std::clamp<std::size_t>(k, 1, count);
}

/// Rank a head's (image, patch) samples by KL, keep the top `percent`, and
/// split them by the sign of the dominant latent dimension's mean. Samples
/// must be in (image, patch) order; ties keep that order. Attention rows
/// are left empty.
inline TopPatches top_activating_patches(const std::vector<HeadSample>& samples, std::size_t layer, std::size_t head,
                                         double percent, double threshold = kActiveThreshold) {
    if (samples.empty()) throw UsageError("top_activating_patches: no samples");
    const auto records = head_records(samples, layer, head);
    TopPatches out;
    out.layer = layer;
    out.head = head;
    out.dominant_dim = dominant_dimension(records, layer, head, threshold);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return samples[a].kl > samples[b].kl; });
    out.k = top_count(samples.size(), percent);
    for (std::size_t r = 0; r < out.k; ++r) {
        const auto& s = samples[order[r]];
        TopPatch t{s.image, s.patch, s.kl, s.mu.at(out.dominant_dim), {}};
        (t.mu > 0 ? out.positive : out.negative).push_back(std::move(t));
    }
    return out;
}

/// Fill in attention rows by re-running the images that contributed patches.
template <class T>
void attach_attention_rows(TopPatches& top, const ViTModel<T>& model, const Dataset& ds) {
    const std::size_t slot = top.layer * model.config.heads_per_block + top.head, N = model.config.patch_count();
    std::vector<std::size_t> images;
    for (const auto* group : {&top.positive, &top.negative})
        for (const auto& t : *group) images.push_back(t.image);
    std::sort(images.begin(), images.end());
    images.erase(std::unique(images.begin(), images.end()), images.end());
    for (std::size_t img : images) {
        const auto tr = forward<T>(ds.image(img), model, BottleneckMode::mean, nullptr);
        const auto& a = tr.attention_maps[slot];
        for (auto* group : {&top.positive, &top.negative})
            for (auto& t : *group)
                if (t.image == img) t.attention.assign(a.raw() + t.patch * N, a.raw() + (t.patch + 1) * N);
    }
}

}  // namespace vibvit::analysis
