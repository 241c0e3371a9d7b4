// SPDX-License-Identifier: Apache-2.0
//
// VIB training loop and stochastic evaluation.
//
// Randomness is drawn from keyed streams so results do not depend on thread
// count or scheduling:
//   shuffle        TrainerState::rng (advances across epochs, checkpointed)
//   augmentation   (seed, 1, epoch, sample index)
//   train noise    (seed, 2, step, chunk)
//   eval noise     (seed, 3, run, chunk)
// Work is split into fixed-size chunks; per-chunk results are reduced in
// chunk order.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "vibvit/config.hpp"
#include "vibvit/dataset.hpp"
#include "vibvit/errors.hpp"
#include "vibvit/model.hpp"
#include "vibvit/ops.hpp"
#include "vibvit/optim.hpp"
#include "vibvit/random.hpp"

namespace vibvit {

inline constexpr std::size_t kTrainChunk = 16;

namespace stream {
inline constexpr std::uint64_t augment = 1;
inline constexpr std::uint64_t train_noise = 2;
inline constexpr std::uint64_t eval_noise = 3;
inline constexpr std::uint64_t analysis = 4;
inline constexpr std::uint64_t init = 5;
}  // namespace stream

// ---------------------------------------------------------------------------
// Objective

struct LossParts {
    double total = 0.0;
    double ce = 0.0;
    double kl = 0.0;  // summed over layers, heads and patches
};

/// Per-example objective: CE(logits, label) + beta * sum of record KLs.
template <class T>
LossParts vib_loss(std::span<const T> logits, int label, std::span<const KLRecord> records, double beta) {
    if (!(beta >= 0.0)) throw ConfigError("vib_loss: beta must be nonnegative");
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) throw UsageError("vib_loss: label out of range");
    double mx = -INFINITY;
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    double s = 0;
    for (T v : logits) s += std::exp(static_cast<double>(v) - mx);
    LossParts out;
    out.ce = -(static_cast<double>(logits[label]) - mx - std::log(s));
    for (const auto& r : records) out.kl += r.kl_nats;
    out.total = beta == 0.0 ? out.ce : out.ce + beta * out.kl;
    return out;
}

/// Batch reduction: mean over examples of per-example totals.
template <class T>
LossParts vib_loss(const std::vector<ForwardTrace<T>>& traces, std::span<const int> labels, double beta) {
    if (traces.size() != labels.size() || traces.empty()) throw UsageError("vib_loss: traces/labels mismatch");
    LossParts out;
    for (std::size_t b = 0; b < traces.size(); ++b) {
        auto p = vib_loss<T>(traces[b].logits, labels[b], traces[b].kl_records, beta);
        out.total += p.total;
        out.ce += p.ce;
        out.kl += p.kl;
    }
    const double n = static_cast<double>(traces.size());
    return {out.total / n, out.ce / n, out.kl / n};
}

template <class T>
struct LossGraph {
    Var<T> total;
    Var<T> ce_sum;  // summed over the chunk
    Var<T> kl_sum;  // summed over the chunk
};

/// Graph form used for training. `denominator` is the full batch size so
/// chunk losses add up to the batch mean.
template <class T>
LossGraph<T> vib_loss_graph(const ForwardGraph<T>& g, std::span<const int> labels, double beta,
                            std::size_t denominator) {
    if (!(beta >= 0.0)) throw ConfigError("vib_loss: beta must be nonnegative");
    Var<T> ce_sum = ops::sum(ops::cross_entropy(g.logits, labels));
    Var<T> total = ops::scale(ce_sum, static_cast<T>(1.0 / static_cast<double>(denominator)));
    if (beta != 0.0) {
        total = ops::add(total, ops::scale(g.kl_sum, static_cast<T>(beta / static_cast<double>(denominator))));
    }
    return {total, ce_sum, g.kl_sum};
}

// ---------------------------------------------------------------------------
// Parallel chunk helper

/// Runs fn(chunk) for chunk in [0, n) on up to `threads` workers.
inline void parallel_chunks(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += threads) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

template <class T>
std::vector<T> gather_images(const Dataset& ds, std::span<const std::size_t> indices) {
    std::vector<T> out;
    out.reserve(indices.size() * ds.image_numel());
    for (std::size_t i : indices) {
        auto img = ds.image(i);
        out.insert(out.end(), img.begin(), img.end());
    }
    return out;
}

inline void check_dataset(const Dataset& ds, const ViTConfig& cfg) {
    if (ds.size() == 0) throw UsageError("dataset is empty");
    if (ds.channels != cfg.channels || ds.image_size != cfg.image_size) {
        throw ConfigError("dataset images (" + std::to_string(ds.channels) + "x" + std::to_string(ds.image_size) +
                          ") do not match model config");
    }
    for (int l : ds.labels)
        if (l < 0 || static_cast<std::size_t>(l) >= cfg.num_classes) throw ConfigError("dataset label out of range");
}

template <class T>
std::size_t argmax(std::span<const T> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// Training

template <class T>
struct TrainerState {
    OptimizerState<T> optimizer;
    std::size_t epoch = 0;  // completed epochs
    std::uint64_t step = 0;
    Rng rng;

    TrainerState() = default;
    TrainerState(const ViTModel<T>& model, std::uint64_t seed) : optimizer(model), rng(Rng::keyed(seed, {0})) {}
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0.0;  // rate of the epoch's last update
    double ce = 0.0;
    double kl = 0.0;  // mean per-example sum over layers, heads, patches
    double accuracy = 0.0;
};

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

namespace detail {

template <class T>
struct ChunkResult {
    std::vector<std::pair<Parameter<T>*, Tensor<T>>> grads;
    double ce_sum = 0.0;
    double kl_sum = 0.0;
    std::size_t correct = 0;
};

template <class T>
ChunkResult<T> train_chunk(ViTModel<T>& model, std::span<const T> images, std::span<const int> labels,
                           const TrainConfig& tc, std::size_t batch_size, Rng& noise) {
    Tape<T> tape;
    std::vector<std::pair<Parameter<T>*, Var<T>>> leaves;
    auto mv = detail::bind_impl<T>(model, [&](Parameter<T>& p) {
        Var<T> v = tape.leaf(p.value);
        leaves.emplace_back(&p, v);
        return v;
    });
    auto g = forward_graph<T>(tape, mv, model.config, images, labels.size(), tc.train_mode, &noise);
    auto loss = vib_loss_graph<T>(g, labels, tc.beta, batch_size);
    tape.backward(loss.total);
    ChunkResult<T> out;
    out.ce_sum = loss.ce_sum.value().item();
    out.kl_sum = loss.kl_sum.value().item();
    const auto& lg = g.logits.value();
    const std::size_t C = model.config.num_classes;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        std::span<const T> row(lg.raw() + b * C, C);
        out.correct += argmax(row) == static_cast<std::size_t>(labels[b]);
    }
    out.grads.reserve(leaves.size());
    for (auto& [p, v] : leaves) out.grads.emplace_back(p, tape.grad(v));
    return out;
}

}  // namespace detail

/// One pass over the shuffled training set with AdamW updates.
template <class T>
EpochMetrics train_epoch(ViTModel<T>& model, const Dataset& ds, const TrainConfig& tc, TrainerState<T>& state,
                         std::size_t threads = 1) {
    tc.validate();
    check_dataset(ds, model.config);
    const std::size_t n = ds.size(), B = tc.batch_size;
    const std::size_t spe = steps_per_epoch(n, B);
    const std::size_t total_steps = spe * tc.epochs, warmup_steps = spe * tc.warmup_epochs;
    const std::size_t epoch = state.epoch;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[state.rng.below(i)]);

    auto params = parameter_list(model);
    EpochMetrics m;
    m.epoch = epoch + 1;
    double ce = 0, kl = 0;
    std::size_t correct = 0;
    const std::size_t npx = ds.image_numel();
    for (std::size_t s = 0; s < spe; ++s) {
        const std::size_t lo = s * B, hi = std::min(n, lo + B), bs = hi - lo;
        std::vector<T> images(bs * npx);
        std::vector<int> labels(bs);
        parallel_chunks(bs, threads, [&](std::size_t k) {
            const std::size_t idx = order[lo + k];
            Rng rng = Rng::keyed(tc.seed, {stream::augment, epoch, idx});
            auto aug = augment_train(ds.image(idx), ds.channels, ds.image_size, rng);
            std::copy(aug.begin(), aug.end(), images.begin() + k * npx);
            labels[k] = ds.labels[idx];
        });
        const std::size_t chunks = (bs + kTrainChunk - 1) / kTrainChunk;
        std::vector<detail::ChunkResult<T>> results(chunks);
        parallel_chunks(chunks, threads, [&](std::size_t c) {
            const std::size_t a = c * kTrainChunk, b = std::min(bs, a + kTrainChunk);
            Rng noise = Rng::keyed(tc.seed, {stream::train_noise, state.step, c});
            results[c] = detail::train_chunk<T>(model, std::span<const T>(images).subspan(a * npx, (b - a) * npx),
                                                std::span<const int>(labels).subspan(a, b - a), tc, bs, noise);
        });
        model.zero_grad();
        double step_ce = 0, step_kl = 0;
        for (auto& r : results) {
            for (auto& [p, g] : r.grads) {
                auto& dst = p->grad;
                for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
            }
            step_ce += r.ce_sum;
            step_kl += r.kl_sum;
            correct += r.correct;
        }
        const double loss = (step_ce + tc.beta * step_kl) / static_cast<double>(bs);
        if (!std::isfinite(loss)) {
            std::ostringstream os;
            os << "non-finite loss at epoch " << epoch + 1 << " step " << state.step << " (ce " << step_ce / bs
               << ", kl " << step_kl / bs << ")";
            throw NumericError(os.str());
        }
        const double lr = lr_schedule(static_cast<std::size_t>(state.step), total_steps, warmup_steps, tc.base_lr);
        adamw_step(params, state.optimizer, lr, tc.weight_decay);
        ++state.step;
        m.lr = lr;
        ce += step_ce;
        kl += step_kl;
    }
    state.epoch += 1;
    m.ce = ce / static_cast<double>(n);
    m.kl = kl / static_cast<double>(n);
    m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
    std::size_t runs = 10;
    BottleneckMode mode = BottleneckMode::stochastic;
    std::uint64_t seed = 0;
    std::size_t batch = 100;
    std::size_t threads = 1;
};

struct EvalMetrics {
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;  // population std across runs
    double kl_per_image = 0.0;  // mean over runs and images of the summed KL
    std::vector<double> run_accuracy;
    std::vector<double> head_kl_per_image;  // [layer * H + head]
};

/// Visits per-image traces in dataset order. Chunks of `batch` images are
/// computed in parallel; fn runs on the calling thread in index order.
template <class T, class F>
void for_each_trace(const ViTModel<T>& model, const Dataset& ds, std::span<const std::size_t> indices,
                    BottleneckMode mode, const std::function<Rng(std::size_t chunk)>& chunk_rng, std::size_t batch,
                    std::size_t threads, F&& fn) {
    check_dataset(ds, model.config);
    const std::size_t n = indices.size();
    const std::size_t chunks = (n + batch - 1) / batch;
    // bound memory by processing `threads` chunks at a time
    const std::size_t wave = std::max<std::size_t>(1, threads);
    for (std::size_t c0 = 0; c0 < chunks; c0 += wave) {
        const std::size_t cn = std::min(wave, chunks - c0);
        std::vector<std::vector<ForwardTrace<T>>> res(cn);
        parallel_chunks(cn, threads, [&](std::size_t k) {
            const std::size_t c = c0 + k;
            const std::size_t a = c * batch, b = std::min(n, a + batch);
            auto imgs = gather_images<T>(ds, indices.subspan(a, b - a));
            Rng rng = chunk_rng(c);
            res[k] = forward_batch<T>(imgs, b - a, model, mode, mode == BottleneckMode::stochastic ? &rng : nullptr);
        });
        for (std::size_t k = 0; k < cn; ++k) {
            const std::size_t a = (c0 + k) * batch;
            for (std::size_t j = 0; j < res[k].size(); ++j) fn(a + j, indices[a + j], res[k][j]);
        }
    }
}

template <class T>
EvalMetrics evaluate_stochastic(const ViTModel<T>& model, const Dataset& ds, const EvalOptions& opt) {
    if (opt.runs < 1) throw ConfigError("eval_runs must be at least 1");
    if (ds.size() == 0) throw UsageError("evaluate: dataset is empty");
    const auto& cfg = model.config;
    const std::size_t heads = cfg.channel_count(), N = cfg.patch_count();
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    // deterministic modes give identical runs; compute once
    const std::size_t distinct = opt.mode == BottleneckMode::stochastic ? opt.runs : 1;
    EvalMetrics out;
    out.head_kl_per_image.assign(heads, 0.0);
    double kl = 0;
    for (std::size_t r = 0; r < distinct; ++r) {
        std::size_t correct = 0;
        for_each_trace<T>(
            model, ds, all, opt.mode,
            [&](std::size_t c) { return Rng::keyed(opt.seed, {stream::eval_noise, r, c}); }, opt.batch,
            opt.threads, [&](std::size_t, std::size_t idx, const ForwardTrace<T>& tr) {
                correct += argmax<T>(tr.logits) == static_cast<std::size_t>(ds.labels[idx]);
                kl += tr.total_kl;
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < N; ++i) out.head_kl_per_image[h] += tr.kl_records[h * N + i].kl_nats;
            });
        out.run_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(ds.size()));
    }
    const double denom = static_cast<double>(distinct * ds.size());
    out.kl_per_image = kl / denom;
    for (auto& h : out.head_kl_per_image) h /= denom;
    while (out.run_accuracy.size() < opt.runs) out.run_accuracy.push_back(out.run_accuracy.front());
    const double R = static_cast<double>(opt.runs);
    out.accuracy_mean = std::accumulate(out.run_accuracy.begin(), out.run_accuracy.end(), 0.0) / R;
    double var = 0;
    for (double a : out.run_accuracy) var += (a - out.accuracy_mean) * (a - out.accuracy_mean);
    out.accuracy_std = std::sqrt(var / R);
    return out;
}

/// Validation mode for a training configuration; a model trained without
/// bottlenecks is evaluated without them.
inline BottleneckMode effective_eval_mode(const TrainConfig& tc) {
    return tc.train_mode == BottleneckMode::disabled ? BottleneckMode::disabled : tc.eval_mode;
}

inline EvalOptions eval_options(const TrainConfig& tc, std::size_t batch, std::size_t threads) {
    return EvalOptions{tc.eval_runs, effective_eval_mode(tc), tc.seed, batch, threads};
}

}  // namespace vibvit
