// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the vibvit executable: train, eval,
// analyze, sweep. Each writes its outputs under cfg.out_dir and returns the
// metrics it wrote so callers can check them without reparsing files.
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vibvit/analysis/collect.hpp"
#include "vibvit/analysis/export.hpp"
#include "vibvit/analysis/kl.hpp"
#include "vibvit/analysis/mi.hpp"
#include "vibvit/analysis/probe.hpp"
#include "vibvit/analysis/voting.hpp"
#include "vibvit/checkpoint.hpp"
#include "vibvit/dataset.hpp"
#include "vibvit/model.hpp"
#include "vibvit/run_config.hpp"
#include "vibvit/train.hpp"

namespace vibvit::app {

namespace fs = std::filesystem;
using analysis::CsvTable;
using analysis::fmt;
using analysis::Json;

inline const std::vector<std::string>& analysis_names() {
    static const std::vector<std::string> names{"kl-map", "survival", "active-heads", "voting", "jsd-select",
                                                "mi",     "nmi",      "probe",        "top-patches"};
    return names;
}

namespace detail {

inline void note(std::ostream* log, const std::string& line) {
    if (log) *log << line << '\n' << std::flush;
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& text) {
    std::vector<double> out;
    for (const auto& item : vibvit::detail::split_list(text)) out.push_back(vibvit::detail::parse_number<double>(key, item));
    return out;
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
    std::vector<std::size_t> out;
    for (const auto& item : vibvit::detail::split_list(text))
        out.push_back(vibvit::detail::parse_number<std::size_t>(key, item));
    return out;
}

inline std::optional<ChannelStats> configured_stats(const RunConfig& cfg) {
    if (cfg.norm_mean.empty() && cfg.norm_std.empty()) return std::nullopt;
    const auto m = parse_doubles("norm_mean", cfg.norm_mean), s = parse_doubles("norm_std", cfg.norm_std);
    if (m.size() != kCifarChannels || s.size() != kCifarChannels) {
        throw ConfigError("norm_mean and norm_std need one value per channel");
    }
    ChannelStats st;
    for (std::size_t c = 0; c < kCifarChannels; ++c) {
        if (!(s[c] > 0)) throw ConfigError("norm_std values must be positive");
        st.mean[c] = m[c];
        st.std[c] = s[c];
    }
    return st;
}

inline void store_stats(RunConfig& cfg, const ChannelStats& st) {
    cfg.norm_mean = cfg.norm_std = "";
    for (std::size_t c = 0; c < kCifarChannels; ++c) {
        cfg.norm_mean += (c ? "," : "") + fmt(st.mean[c]);
        cfg.norm_std += (c ? "," : "") + fmt(st.std[c]);
    }
}

inline Dataset load_split(const std::vector<std::string>& files, std::size_t limit, const std::string& split,
                          const std::optional<ChannelStats>& stats) {
    if (files.empty()) throw ConfigError(split + "_data is not set");
    std::vector<fs::path> paths(files.begin(), files.end());
    for (const auto& p : paths)
        if (!fs::exists(p)) throw ConfigError("data file not found: " + p.string());
    LoadOptions opt;
    opt.limit = limit;
    opt.stats = stats;
    opt.split = split;
    return load_cifar10(paths, opt);
}

/// Normalization of a trained model: stored with the checkpoint, or
/// recomputed from the training files for configurations that lack it.
inline std::optional<ChannelStats> model_stats(const RunConfig& cfg) {
    if (auto st = configured_stats(cfg)) return st;
    if (!cfg.train_data.empty()) return load_split(cfg.train_data, cfg.train_limit, "train", std::nullopt).stats;
    return std::nullopt;
}

/// Data the read commands run on: the validation files, else the training files.
inline Dataset eval_split(const RunConfig& cfg, std::size_t limit, const std::optional<ChannelStats>& stats) {
    if (!cfg.val_data.empty()) return load_split(cfg.val_data, limit, "val", stats);
    return load_split(cfg.train_data, limit, "train", stats);
}

inline std::string csv_header() { return "epoch,lr,train_ce,train_kl,train_acc,val_acc_mean,val_acc_std,val_kl_per_image"; }

inline bool is_explicit(const RunConfig& cfg, const std::string& key) { return cfg.explicit_keys.count(key) > 0; }

inline std::string beta_label(double beta) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", beta);
    return std::string("beta_") + buf;
}

}  // namespace detail

/// Model and training settings come from the checkpoint. Settings given
/// explicitly by the user override them, except that architecture keys must
/// agree with the checkpoint.
inline RunConfig merge_checkpoint_config(const RunConfig& user, const RunConfig& stored) {
    RunConfig out = user;
    const auto& arch = architecture_keys();
    for (const auto& [key, field] : vibvit::detail::fields()) {
        if (!field.model_state) continue;
        const bool is_arch = std::find(arch.begin(), arch.end(), key) != arch.end();
        if (detail::is_explicit(user, key)) {
            if (is_arch && field.get(user) != field.get(stored)) {
                throw ConfigError("configuration mismatch: " + key + " = " + field.get(user) + " but the checkpoint has " +
                                  field.get(stored));
            }
            continue;
        }
        field.set(out, field.get(stored));
    }
    return out;
}

// ---------------------------------------------------------------------------
// train

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    std::vector<std::optional<EvalMetrics>> validation;  // per epoch; empty where not validated
    fs::path checkpoint;
    fs::path log_csv;
};

inline TrainResult run_train(RunConfig cfg, std::ostream* log = nullptr) {
    validate(cfg);
    if (cfg.train.epochs < 1) throw ConfigError("epochs must be at least 1");
    const Dataset train = detail::load_split(cfg.train_data, cfg.train_limit, "train", detail::configured_stats(cfg));
    detail::store_stats(cfg, train.stats);
    std::optional<Dataset> val;
    if (!cfg.val_data.empty()) val = detail::load_split(cfg.val_data, cfg.val_limit, "val", train.stats);
    check_dataset(train, cfg.model);

    const fs::path out_dir = cfg.out_dir;
    fs::create_directories(out_dir);
    Rng init = Rng::keyed(cfg.train.seed, {stream::init});
    ViTModel<float> model(cfg.model, init);
    TrainerState<float> state(model, cfg.train.seed);

    TrainResult res;
    res.log_csv = out_dir / "train_log.csv";
    res.checkpoint = out_dir / "final.ckpt";
    std::string csv = detail::csv_header() + "\n";
    const std::size_t E = cfg.train.epochs;
    for (std::size_t e = 0; e < E; ++e) {
        const auto m = train_epoch(model, train, cfg.train, state, cfg.threads);
        std::optional<EvalMetrics> ev;
        if (val && ((e + 1) % cfg.val_every == 0 || e + 1 == E)) {
            ev = evaluate_stochastic(model, *val, eval_options(cfg.train, cfg.eval_batch, cfg.threads));
        }
        csv += std::to_string(m.epoch) + "," + fmt(m.lr) + "," + fmt(m.ce) + "," + fmt(m.kl) + "," + fmt(m.accuracy);
        if (ev) {
            csv += "," + fmt(ev->accuracy_mean) + "," + fmt(ev->accuracy_std) + "," + fmt(ev->kl_per_image) + "\n";
        } else {
            csv += ",,,\n";
        }
        analysis::write_text(res.log_csv, csv);
        std::string line = "epoch " + std::to_string(m.epoch) + "/" + std::to_string(E) + " ce " + fmt(m.ce) + " kl " +
                           fmt(m.kl) + " acc " + fmt(m.accuracy);
        if (ev) line += " val_acc " + fmt(ev->accuracy_mean) + " val_kl " + fmt(ev->kl_per_image);
        detail::note(log, line);
        if (cfg.checkpoint_every && (e + 1) % cfg.checkpoint_every == 0 && e + 1 < E) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%03zu.ckpt", e + 1);
            save_checkpoint(out_dir / name, cfg, model, state);
        }
        res.epochs.push_back(m);
        res.validation.push_back(ev);
    }
    save_checkpoint(res.checkpoint, cfg, model, state);

    analysis::Provenance prov{"train", res.checkpoint.string(), "", train.content_hash, train.size()};
    Json j = analysis::metadata_json(cfg, prov);
    if (val) {
        j["provenance"]["val_dataset_hash"] = analysis::hex64(val->content_hash);
        j["provenance"]["val_dataset_size"] = val->size();
    }
    j["log"] = res.log_csv.filename().string();
    const auto& last = res.epochs.back();
    Json fin;
    fin["train_ce"] = last.ce;
    fin["train_kl"] = last.kl;
    fin["train_acc"] = last.accuracy;
    if (const auto& ev = res.validation.back()) {
        fin["val_acc_mean"] = ev->accuracy_mean;
        fin["val_acc_std"] = ev->accuracy_std;
        fin["val_kl_per_image"] = ev->kl_per_image;
    }
    j["final"] = fin;
    analysis::write_json(out_dir / "train_log.json", j);
    return res;
}

// ---------------------------------------------------------------------------
// eval

inline EvalMetrics run_eval(const RunConfig& user, std::ostream* log = nullptr) {
    if (user.checkpoint.empty()) throw ConfigError("eval needs checkpoint=PATH");
    const Checkpoint ck = load_checkpoint(user.checkpoint);
    const RunConfig cfg = merge_checkpoint_config(user, ck.config);
    validate(cfg);
    const Dataset ds = detail::eval_split(cfg, cfg.val_limit, detail::model_stats(cfg));
    const auto opt = eval_options(cfg.train, cfg.eval_batch, cfg.threads);
    const EvalMetrics ev = evaluate_stochastic(ck.model, ds, opt);

    analysis::Provenance prov{"eval", cfg.checkpoint, "", ds.content_hash, ds.size()};
    Json j = analysis::metadata_json(cfg, prov);
    j["mode"] = to_string(opt.mode);
    j["runs"] = opt.runs;
    j["accuracy_mean"] = ev.accuracy_mean;
    j["accuracy_std"] = ev.accuracy_std;
    j["run_accuracy"] = ev.run_accuracy;
    j["kl_per_image"] = ev.kl_per_image;
    Json heads = Json::array();
    const std::size_t H = cfg.model.heads_per_block;
    for (std::size_t s = 0; s < ev.head_kl_per_image.size(); ++s) {
        heads.push_back({{"layer", s / H}, {"head", s % H}, {"kl_per_image", ev.head_kl_per_image[s]}});
    }
    j["head_kl"] = heads;
    analysis::write_json(fs::path(cfg.out_dir) / "eval.json", j);
    detail::note(log, "accuracy " + fmt(ev.accuracy_mean) + " +- " + fmt(ev.accuracy_std) + ", kl/image " +
                          fmt(ev.kl_per_image));
    return ev;
}

// ---------------------------------------------------------------------------
// analyze

namespace detail {

struct Loaded {
    RunConfig cfg;
    Checkpoint ck;
    Dataset ds;
    std::vector<std::size_t> indices;
};

inline Loaded load_for_analysis(const RunConfig& user, const std::string& path) {
    if (path.empty()) throw ConfigError("analysis needs checkpoint=PATH");
    Loaded l;
    l.ck = load_checkpoint(path);
    l.cfg = merge_checkpoint_config(user, l.ck.config);
    validate(l.cfg);
    l.ds = eval_split(l.cfg, 0, model_stats(l.cfg));
    l.indices = analysis::first_indices(l.ds, l.cfg.analysis_images);
    return l;
}

inline analysis::SweepOptions sweep_options(const RunConfig& cfg) {
    return {analysis::analysis_mode(cfg.train), cfg.eval_batch, cfg.threads};
}

inline void require_bottlenecks(const RunConfig& cfg, const std::string& name) {
    if (analysis::analysis_mode(cfg.train) == BottleneckMode::disabled) {
        throw UsageError(name + " needs a model trained with bottlenecks");
    }
}

/// The requested head when layer or head was given, else the head with the
/// largest total KL (lowest index on ties).
inline std::pair<std::size_t, std::size_t> pick_head(const Loaded& l) {
    if (is_explicit(l.cfg, "layer") || is_explicit(l.cfg, "head")) return {l.cfg.layer, l.cfg.head};
    const auto recs = analysis::collect_kl_records(l.ck.model, l.ds, l.indices, sweep_options(l.cfg));
    const std::size_t H = l.cfg.model.heads_per_block;
    const auto totals = analysis::head_kl_totals(recs, l.cfg.model.depth, H);
    const auto best = static_cast<std::size_t>(std::max_element(totals.begin(), totals.end()) - totals.begin());
    return {best / H, best % H};
}

inline std::string output_stem(const std::string& name) {
    std::string s = name;
    std::replace(s.begin(), s.end(), '-', '_');
    return s;
}

inline void write_outputs(const RunConfig& cfg, const std::string& name, const CsvTable& table, const Json& summary) {
    const fs::path dir = cfg.out_dir;
    analysis::write_text(dir / (output_stem(name) + ".csv"), table.str());
    analysis::write_json(dir / (output_stem(name) + ".json"), summary);
}

inline std::string survival_column(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "p_ge_%.6g", x);
    return buf;
}

}  // namespace detail

/// Runs one named analysis; returns its JSON summary.
inline Json run_analyze(const RunConfig& user, std::ostream* log = nullptr) {
    const std::string name = user.analysis;
    const auto& names = analysis_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
        std::string list;
        for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
        throw UsageError("unknown analysis '" + name + "'; available: " + list);
    }
    const auto l = detail::load_for_analysis(user, user.checkpoint);
    const RunConfig& cfg = l.cfg;
    const auto& model = l.ck.model;
    const auto& mc = cfg.model;
    const std::size_t H = mc.heads_per_block, N = mc.patch_count();
    const auto sweep = detail::sweep_options(cfg);
    const std::uint64_t seed = cfg.train.seed;

    analysis::Provenance prov{"analyze " + name, cfg.checkpoint, cfg.checkpoint2, l.ds.content_hash, l.ds.size()};
    Json meta = analysis::metadata_json(cfg, prov);
    meta["analysis"] = name;
    meta["mode"] = to_string(sweep.mode);
    meta["images"] = l.indices.size();

    if (name == "kl-map") {
        if (cfg.image_index >= l.ds.size()) throw UsageError("image_index is past the end of the dataset");
        const auto tr = forward<float>(l.ds.image(cfg.image_index), model, sweep.mode, nullptr);
        const auto map = analysis::patch_kl_map(tr, cfg.image_index);
        meta.erase("images");
        analysis::write_kl_map(fs::path(cfg.out_dir) / "kl_map.csv", map, meta);
        detail::note(log, "kl-map image " + std::to_string(cfg.image_index) + " total " + fmt(map.total()) + " nats");
        Json out = meta;
        out["total_kl"] = map.total();
        return out;
    }

    if (name == "survival" || name == "active-heads") {
        const auto recs = analysis::collect_kl_records(model, l.ds, l.indices, sweep);
        if (name == "survival") {
            const auto grid = analysis::survival_grid(1e-4, 1e2, std::max<std::size_t>(2, cfg.survival_points));
            std::vector<std::string> header{"layer", "head"};
            for (double x : grid) header.push_back(detail::survival_column(x));
            CsvTable t(header);
            for (std::size_t layer = 0; layer < mc.depth; ++layer)
                for (std::size_t h = 0; h < H; ++h) {
                    std::vector<std::string> row{fmt(layer), fmt(h)};
                    for (double p : analysis::kl_survival(recs, layer, h, grid)) row.push_back(fmt(p));
                    t.add(row);
                }
            meta["grid"] = grid;
            meta["units"] = "nats";
            meta["rows"] = mc.depth * H;
            detail::write_outputs(cfg, name, t, meta);
            return meta;
        }
        const auto act = analysis::active_heads(recs, mc.depth, H, cfg.threshold);
        const auto totals = analysis::head_kl_totals(recs, mc.depth, H);
        CsvTable t({"layer", "head", "max_kl", "active", "active_dims", "kl_per_image"});
        std::size_t active = 0;
        for (std::size_t s = 0; s < act.size(); ++s) {
            const auto& a = act[s];
            const auto dims = analysis::active_latent_dims(recs, a.layer, a.head, cfg.threshold);
            active += a.active;
            t.add({fmt(a.layer), fmt(a.head), fmt(a.max_kl), a.active ? "1" : "0", fmt(dims.size()),
                   fmt(totals[s] / static_cast<double>(l.indices.size()))});
        }
        meta["threshold"] = cfg.threshold;
        meta["active_heads"] = active;
        meta["inactive_fraction"] = static_cast<double>(act.size() - active) / static_cast<double>(act.size());
        detail::write_outputs(cfg, name, t, meta);
        detail::note(log, std::to_string(active) + " of " + std::to_string(act.size()) + " heads active");
        return meta;
    }

    if (name == "voting") {
        CsvTable t({"image", "label", "predicted", "effective_classes", "logit_range", "top_agreement"});
        double eff = 0, range = 0;
        std::size_t correct = 0;
        for_each_trace<float>(
            model, l.ds, l.indices, sweep.mode, analysis::detail::no_rng, sweep.batch, sweep.threads,
            [&](std::size_t, std::size_t idx, const ForwardTrace<float>& tr) {
                const auto v = analysis::vote_stats<float>(tr.per_patch_logits, tr.logits, idx);
                const int label = l.ds.labels[idx];
                t.add({fmt(idx), std::to_string(label), fmt(v.predicted), fmt(v.effective_classes), fmt(v.logit_range),
                       fmt(v.top_agreement)});
                eff += v.effective_classes;
                range += v.logit_range;
                correct += static_cast<int>(v.predicted) == label;
            });
        const double n = static_cast<double>(l.indices.size());
        meta["mean_effective_classes"] = eff / n;
        meta["mean_logit_range"] = range / n;
        meta["accuracy"] = static_cast<double>(correct) / n;
        detail::write_outputs(cfg, name, t, meta);
        return meta;
    }

    if (name == "jsd-select") {
        if (cfg.checkpoint2.empty()) throw ConfigError("jsd-select needs checkpoint2=PATH");
        const auto l2 = detail::load_for_analysis(user, cfg.checkpoint2);
        auto probs = [](const detail::Loaded& x) {
            std::vector<std::vector<double>> out;
            const auto opt = detail::sweep_options(x.cfg);
            for_each_trace<float>(x.ck.model, x.ds, x.indices, opt.mode, analysis::detail::no_rng, opt.batch,
                                            opt.threads, [&](std::size_t, std::size_t, const ForwardTrace<float>& tr) {
                                                out.push_back(analysis::softmax_probs<float>(tr.logits));
                                            });
            return out;
        };
        if (l2.indices != l.indices || l2.ds.labels != l.ds.labels) {
            throw UsageError("jsd-select: both checkpoints must be read on the same images");
        }
        Rng rng = Rng::keyed(seed, {stream::analysis, 0x4A53});
        const auto sel = analysis::jsd_select(probs(l), probs(l2), cfg.jsd_fraction, cfg.jsd_samples, rng);
        std::vector<int> in_top(l.indices.size(), 0), sampled(l.indices.size(), 0);
        for (std::size_t i : sel.top) in_top[i] = 1;
        for (std::size_t i : sel.sampled) sampled[i] = 1;
        CsvTable t({"image", "label", "jsd", "in_top", "sampled"});
        for (std::size_t k = 0; k < l.indices.size(); ++k) {
            t.add({fmt(l.indices[k]), std::to_string(l.ds.labels[l.indices[k]]), fmt(sel.distances[k]),
                   std::to_string(in_top[k]), std::to_string(sampled[k])});
        }
        auto to_images = [&](const std::vector<std::size_t>& pos) {
            Json a = Json::array();
            for (std::size_t p : pos) a.push_back(l.indices[p]);
            return a;
        };
        meta["top"] = to_images(sel.top);
        meta["sampled"] = to_images(sel.sampled);
        detail::write_outputs(cfg, name, t, meta);
        return meta;
    }

    if (name == "mi") {
        detail::require_bottlenecks(cfg, name);
        std::vector<std::pair<std::size_t, std::size_t>> heads;
        if (detail::is_explicit(cfg, "layer") || detail::is_explicit(cfg, "head")) {
            heads.emplace_back(cfg.layer, cfg.head);
        } else {
            for (std::size_t layer = 0; layer < mc.depth; ++layer)
                for (std::size_t h = 0; h < H; ++h) heads.emplace_back(layer, h);
        }
        CsvTable t({"layer", "head", "mi", "stderr", "items", "draws"});
        for (const auto& [layer, h] : heads) {
            const auto samples = analysis::collect_head(model, l.ds, l.indices, layer, h, sweep);
            const auto items = analysis::choose_items(samples.size(), cfg.mi_items, seed);
            const auto ch = analysis::channel_from_samples(samples, items);
            const auto est = analysis::mi_monte_carlo(ch, cfg.mi_draws, stream_seed(seed, {layer * H + h}), cfg.threads);
            t.add({fmt(layer), fmt(h), fmt(est.value), fmt(est.stderr), fmt(est.items), fmt(est.draws)});
            detail::note(log, "mi (" + std::to_string(layer) + ", " + std::to_string(h) + ") " + fmt(est.value) +
                                  " +- " + fmt(est.stderr));
        }
        meta["units"] = "nats";
        meta["items"] = "(image, patch) pairs";
        detail::write_outputs(cfg, name, t, meta);
        return meta;
    }

    if (name == "nmi") {
        detail::require_bottlenecks(cfg, name);
        const bool second = !cfg.checkpoint2.empty();
        std::optional<detail::Loaded> other;
        if (second) {
            other = detail::load_for_analysis(user, cfg.checkpoint2);
            detail::require_bottlenecks(other->cfg, name);
            if (other->indices != l.indices || other->ds.labels != l.ds.labels) {
                throw UsageError("nmi: both checkpoints must be read on the same images");
            }
        }
        const detail::Loaded& l2 = second ? *other : l;
        std::vector<std::array<std::size_t, 4>> pairs;
        const bool explicit_pair = detail::is_explicit(cfg, "layer") || detail::is_explicit(cfg, "head");
        if (explicit_pair) {
            const std::size_t l2_ = detail::is_explicit(cfg, "layer2") ? cfg.layer2 : cfg.layer;
            const std::size_t h2_ = detail::is_explicit(cfg, "head2") ? cfg.head2 : cfg.head;
            pairs.push_back({cfg.layer, cfg.head, l2_, h2_});
        } else {
            const auto recs = analysis::collect_kl_records(model, l.ds, l.indices, sweep);
            for (const auto& a : analysis::active_heads(recs, mc.depth, H, cfg.threshold))
                if (a.active) pairs.push_back({a.layer, a.head, a.layer, a.head});
        }
        const auto sweep2 = detail::sweep_options(l2.cfg);
        CsvTable t({"layer", "head", "layer2", "head2", "status", "nmi", "nmi_raw", "stderr", "mi_uv", "norm_u",
                    "norm_v", "items", "draws"});
        for (const auto& [la, ha, lb, hb] : pairs) {
            const auto su = analysis::collect_head(model, l.ds, l.indices, la, ha, sweep);
            const auto sv = analysis::collect_head(l2.ck.model, l2.ds, l2.indices, lb, hb, sweep2);
            const auto items = analysis::choose_items(su.size(), cfg.mi_items, seed);
            const auto u = analysis::channel_from_samples(su, items), v = analysis::channel_from_samples(sv, items);
            const std::uint64_t s = stream_seed(seed, {la * H + ha, lb * l2.cfg.model.heads_per_block + hb});
            std::vector<std::string> row{fmt(la), fmt(ha), fmt(lb), fmt(hb)};
            try {
                const auto r = analysis::nmi_heads(u, v, cfg.mi_draws, s, cfg.threads);
                for (const auto& f : {std::string("ok"), fmt(r.nmi), fmt(r.raw), fmt(r.stderr), fmt(r.mi_uv),
                                      fmt(r.norm_u), fmt(r.norm_v)})
                    row.push_back(f);
                detail::note(log, "nmi (" + std::to_string(la) + ", " + std::to_string(ha) + ") vs (" +
                                      std::to_string(lb) + ", " + std::to_string(hb) + ") " + fmt(r.nmi) + " +- " +
                                      fmt(r.stderr));
            } catch (const UndefinedNmiError&) {
                for (const char* f : {"undefined", "", "", "", "", "", ""}) row.push_back(f);
            }
            row.push_back(fmt(items.size()));
            row.push_back(fmt(static_cast<std::size_t>(cfg.mi_draws)));
            t.add(row);
        }
        meta["pairs"] = pairs.size();
        meta["stderr_method"] = "first-order propagation; the five MI terms are treated as independent";
        detail::write_outputs(cfg, name, t, meta);
        return meta;
    }

    if (name == "probe") {
        detail::require_bottlenecks(cfg, name);
        const auto [layer, h] = detail::pick_head(l);
        const auto samples = analysis::collect_head(model, l.ds, l.indices, layer, h, sweep);
        const auto recs = analysis::head_records(samples, layer, h);
        const auto dims = analysis::active_latent_dims(recs, layer, h, cfg.threshold);
        if (dims.empty()) throw UsageError("probe: head has no active latent dimension");
        const auto n_values = detail::parse_sizes("probe_n", cfg.probe_n);
        const auto sites = analysis::probe_sites(l.indices, N, cfg.probe_samples, seed);
        const auto res = analysis::repetition_probe<float>(model, l.ds, layer, h, dims, sites, n_values, seed, cfg.threads);
        CsvTable t({"site", "image", "patch", "n", "dim", "mu0", "displacement"});
        for (std::size_t s = 0; s < res.samples.size(); ++s) {
            const auto& p = res.samples[s];
            for (std::size_t v = 0; v < res.n_values.size(); ++v)
                for (std::size_t k = 0; k < res.dims.size(); ++k)
                    t.add({fmt(s), fmt(p.image), fmt(p.patch), fmt(res.n_values[v]), fmt(res.dims[k]), fmt(p.mu0[k]),
                           fmt(p.displacement[v][k])});
        }
        meta["layer"] = layer;
        meta["head"] = h;
        meta["dims"] = res.dims;
        meta["n_values"] = res.n_values;
        meta["displacement"] = "raw signed latent-mean change, augmented minus original";
        detail::write_outputs(cfg, name, t, meta);
        return meta;
    }

    // top-patches
    detail::require_bottlenecks(cfg, name);
    const auto [layer, h] = detail::pick_head(l);
    const auto samples = analysis::collect_head(model, l.ds, l.indices, layer, h, sweep);
    auto top = analysis::top_activating_patches(samples, layer, h, cfg.percentile, cfg.threshold);
    analysis::attach_attention_rows<float>(top, model, l.ds);
    std::vector<std::string> header{"polarity", "rank", "image", "patch", "kl", "mu"};
    for (std::size_t j = 0; j < N; ++j) header.push_back("attn_" + std::to_string(j));
    CsvTable t(header);
    for (const auto& [label, group] : {std::pair{"positive", &top.positive}, std::pair{"negative", &top.negative}})
        for (std::size_t r = 0; r < group->size(); ++r) {
            const auto& p = (*group)[r];
            std::vector<std::string> row{label, fmt(r), fmt(p.image), fmt(p.patch), fmt(p.kl), fmt(p.mu)};
            for (double a : p.attention) row.push_back(fmt(a));
            t.add(row);
        }
    meta["layer"] = layer;
    meta["head"] = h;
    meta["dominant_dim"] = top.dominant_dim;
    meta["k"] = top.k;
    meta["positive"] = top.positive.size();
    meta["negative"] = top.negative.size();
    detail::write_outputs(cfg, name, t, meta);
    return meta;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepEntry {
    double beta = 0.0;
    fs::path dir;
    TrainResult result;
};

inline std::vector<SweepEntry> run_sweep(const RunConfig& cfg, std::ostream* log = nullptr) {
    const auto betas = detail::parse_doubles("betas", cfg.betas);
    if (betas.empty()) throw ConfigError("betas is empty");
    for (double b : betas)
        if (!(b >= 0.0)) throw ConfigError("beta must be nonnegative");
    std::vector<SweepEntry> out;
    CsvTable t({"beta", "dir", "train_ce", "train_kl", "train_acc", "val_acc_mean", "val_acc_std", "val_kl_per_image"});
    for (double b : betas) {
        RunConfig c = cfg;
        c.train.beta = b;
        c.explicit_keys.insert("beta");
        const std::string sub = detail::beta_label(b);
        c.out_dir = (fs::path(cfg.out_dir) / sub).string();
        detail::note(log, "beta " + fmt(b));
        SweepEntry e{b, c.out_dir, run_train(c, log)};
        const auto& m = e.result.epochs.back();
        std::vector<std::string> row{fmt(b), sub, fmt(m.ce), fmt(m.kl), fmt(m.accuracy)};
        if (const auto& ev = e.result.validation.back()) {
            for (double v : {ev->accuracy_mean, ev->accuracy_std, ev->kl_per_image}) row.push_back(fmt(v));
        } else {
            row.insert(row.end(), 3, "");
        }
        t.add(row);
        out.push_back(std::move(e));
    }
    analysis::write_text(fs::path(cfg.out_dir) / "sweep.csv", t.str());
    analysis::Provenance prov{"sweep", "", "", 0, 0};
    analysis::write_json(fs::path(cfg.out_dir) / "sweep.json", analysis::metadata_json(cfg, prov));
    return out;
}

// ---------------------------------------------------------------------------
// synthetic data

/// Disjoint train and validation files in the record layout.
inline void make_synthetic(const fs::path& dir, std::size_t train, std::size_t val, std::uint64_t seed) {
    fs::create_directories(dir);
    write_cifar_records(dir / "train.bin", synthetic_records(seed, 0, train));
    write_cifar_records(dir / "val.bin", synthetic_records(seed, train, val));
}

}  // namespace vibvit::app
