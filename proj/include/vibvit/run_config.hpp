// SPDX-License-Identifier: Apache-2.0
//
// Plain-text `key = value` configuration. Files are read first, then
// command-line `key=value` overrides in order, so later settings win.
#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vibvit/config.hpp"
#include "vibvit/errors.hpp"

namespace vibvit {

struct RunConfig {
    std::string command;  // train | eval | analyze | sweep
    ViTConfig model;
    TrainConfig train;
    std::vector<std::string> train_data;
    std::vector<std::string> val_data;
    std::size_t train_limit = 0;
    std::size_t val_limit = 0;
    std::string checkpoint;
    std::string checkpoint2;
    std::string analysis;
    std::string out_dir = "out";
    std::size_t threads = 1;
    std::size_t checkpoint_every = 0;  // epochs; 0 = final only
    std::size_t eval_batch = 100;
    // analysis parameters
    std::size_t analysis_images = 256;
    std::size_t image_index = 0;
    std::uint64_t mi_draws = 1000000;
    std::size_t mi_items = 256;  // (image, patch) pairs indexing the MI channel
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t layer2 = 0;
    std::size_t head2 = 0;
    double threshold = 1e-2;
    double percentile = 0.1;  // percent
    std::size_t probe_samples = 1024;
    std::string probe_n = "0,4,16,63";  // copies; at most patches - 1
    std::size_t survival_points = 64;
    double jsd_fraction = 0.1;
    std::size_t jsd_samples = 16;
    std::string betas = "0,0.1,10";
    std::size_t val_every = 1;  // epochs between validations; the final epoch is always validated
    // per-channel normalization "r,g,b"; empty = computed from the training split
    std::string norm_mean;
    std::string norm_std;

    std::set<std::string> explicit_keys;  // keys set from files or overrides
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class U>
U parse_number(const std::string& key, const std::string& v) {
    U out{};
    const char* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + v + "' for " + key);
    return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
    bool model_state;  // part of a checkpoint's embedded configuration
};

template <class U>
Field size_field(U RunConfig::*member, bool ms = false) {
    return {[member](RunConfig& c, const std::string& v) { c.*member = parse_number<U>("value", v); },
            [member](const RunConfig& c) { return std::to_string(c.*member); }, ms};
}

inline const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        auto model_size = [&](const char* key, std::size_t ViTConfig::*m) {
            t[key] = {[m, key](RunConfig& c, const std::string& v) { c.model.*m = parse_number<std::size_t>(key, v); },
                      [m](const RunConfig& c) { return std::to_string(c.model.*m); }, true};
        };
        model_size("image_size", &ViTConfig::image_size);
        model_size("patch_size", &ViTConfig::patch_size);
        model_size("channels", &ViTConfig::channels);
        model_size("embed_dim", &ViTConfig::embed_dim);
        model_size("depth", &ViTConfig::depth);
        model_size("heads", &ViTConfig::heads_per_block);
        model_size("mlp_ratio", &ViTConfig::mlp_ratio);
        model_size("num_classes", &ViTConfig::num_classes);
        model_size("latent_dim", &ViTConfig::latent_dim);
        auto train_double = [&](const char* key, double TrainConfig::*m) {
            t[key] = {[m, key](RunConfig& c, const std::string& v) { c.train.*m = parse_number<double>(key, v); },
                      [m](const RunConfig& c) { return format_double(c.train.*m); }, true};
        };
        train_double("beta", &TrainConfig::beta);
        train_double("lr", &TrainConfig::base_lr);
        train_double("weight_decay", &TrainConfig::weight_decay);
        auto train_size = [&](const char* key, std::size_t TrainConfig::*m) {
            t[key] = {[m, key](RunConfig& c, const std::string& v) { c.train.*m = parse_number<std::size_t>(key, v); },
                      [m](const RunConfig& c) { return std::to_string(c.train.*m); }, true};
        };
        train_size("epochs", &TrainConfig::epochs);
        train_size("warmup_epochs", &TrainConfig::warmup_epochs);
        train_size("batch_size", &TrainConfig::batch_size);
        train_size("eval_runs", &TrainConfig::eval_runs);
        t["seed"] = {[](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("seed", v); },
                     [](const RunConfig& c) { return std::to_string(c.train.seed); }, true};
        t["train_mode"] = {
            [](RunConfig& c, const std::string& v) { c.train.train_mode = parse_bottleneck_mode(v); },
            [](const RunConfig& c) { return std::string(to_string(c.train.train_mode)); }, true};
        t["eval_mode"] = {[](RunConfig& c, const std::string& v) { c.train.eval_mode = parse_bottleneck_mode(v); },
                          [](const RunConfig& c) { return std::string(to_string(c.train.eval_mode)); }, true};

        auto str = [&](const char* key, std::string RunConfig::*m) {
            t[key] = {[m](RunConfig& c, const std::string& v) { c.*m = v; },
                      [m](const RunConfig& c) { return c.*m; }, false};
        };
        str("checkpoint", &RunConfig::checkpoint);
        str("checkpoint2", &RunConfig::checkpoint2);
        str("analysis", &RunConfig::analysis);
        str("out_dir", &RunConfig::out_dir);
        str("probe_n", &RunConfig::probe_n);
        str("betas", &RunConfig::betas);
        t["norm_mean"] = {[](RunConfig& c, const std::string& v) { c.norm_mean = v; },
                          [](const RunConfig& c) { return c.norm_mean; }, true};
        t["norm_std"] = {[](RunConfig& c, const std::string& v) { c.norm_std = v; },
                         [](const RunConfig& c) { return c.norm_std; }, true};
        auto list = [&](const char* key, std::vector<std::string> RunConfig::*m) {
            t[key] = {[m](RunConfig& c, const std::string& v) { c.*m = split_list(v); },
                      [m](const RunConfig& c) { return join_list(c.*m); }, false};
        };
        list("train_data", &RunConfig::train_data);
        list("val_data", &RunConfig::val_data);
        t["train_limit"] = size_field(&RunConfig::train_limit);
        t["val_limit"] = size_field(&RunConfig::val_limit);
        t["threads"] = size_field(&RunConfig::threads);
        t["checkpoint_every"] = size_field(&RunConfig::checkpoint_every);
        t["eval_batch"] = size_field(&RunConfig::eval_batch);
        t["analysis_images"] = size_field(&RunConfig::analysis_images);
        t["image_index"] = size_field(&RunConfig::image_index);
        t["mi_draws"] = size_field(&RunConfig::mi_draws);
        t["mi_items"] = size_field(&RunConfig::mi_items);
        t["layer"] = size_field(&RunConfig::layer);
        t["head"] = size_field(&RunConfig::head);
        t["layer2"] = size_field(&RunConfig::layer2);
        t["head2"] = size_field(&RunConfig::head2);
        t["probe_samples"] = size_field(&RunConfig::probe_samples);
        t["survival_points"] = size_field(&RunConfig::survival_points);
        t["jsd_samples"] = size_field(&RunConfig::jsd_samples);
        t["val_every"] = size_field(&RunConfig::val_every);
        auto dbl = [&](const char* key, double RunConfig::*m) {
            t[key] = {[m, key](RunConfig& c, const std::string& v) { c.*m = parse_number<double>(key, v); },
                      [m](const RunConfig& c) { return format_double(c.*m); }, false};
        };
        dbl("threshold", &RunConfig::threshold);
        dbl("percentile", &RunConfig::percentile);
        dbl("jsd_fraction", &RunConfig::jsd_fraction);
        return t;
    }();
    return table;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& f = detail::fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("unknown configuration key '" + key + "'");
    try {
        it->second.set(cfg, value);
        cfg.explicit_keys.insert(key);
    } catch (const ConfigError&) {
        throw ConfigError("invalid value '" + value + "' for " + key);
    }
}

/// Apply `key = value` lines; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str());
}

/// "key=value" from the command line.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

/// Sorted `key = value` lines; `model_state_only` restricts to model/training keys.
inline std::string format_config(const RunConfig& cfg, bool model_state_only = false) {
    std::string out;
    for (const auto& [key, field] : detail::fields()) {
        if (model_state_only && !field.model_state) continue;
        out += key + " = " + field.get(cfg) + "\n";
    }
    return out;
}

/// Keys describing the network architecture.
inline const std::vector<std::string>& architecture_keys() {
    static const std::vector<std::string> keys{"image_size", "patch_size", "channels",    "embed_dim", "depth",
                                               "heads",      "mlp_ratio",  "num_classes", "latent_dim"};
    return keys;
}

inline std::string config_value(const RunConfig& cfg, const std::string& key) {
    const auto& f = detail::fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("unknown configuration key '" + key + "'");
    return it->second.get(cfg);
}

inline void validate(const RunConfig& cfg) {
    cfg.model.validate();
    cfg.train.validate();
    if (cfg.threads < 1) throw ConfigError("threads must be at least 1");
    if (cfg.eval_batch < 1) throw ConfigError("eval_batch must be at least 1");
    if (cfg.val_every < 1) throw ConfigError("val_every must be at least 1");
}

}  // namespace vibvit
