// SPDX-License-Identifier: Apache-2.0
//
// CSV tables and JSON metadata for analysis and training outputs. Numbers
// are printed with %.17g so files round-trip and compare byte-for-byte.
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "vibvit/analysis/kl.hpp"
#include "vibvit/errors.hpp"
#include "vibvit/run_config.hpp"

namespace vibvit::analysis {

using Json = nlohmann::ordered_json;

inline std::string fmt(double v) { return vibvit::detail::format_double(v); }
inline std::string fmt(std::size_t v) { return std::to_string(v); }

inline std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    void add(std::vector<std::string> row) {
        if (row.size() != header_.size()) {
            throw UsageError("csv row has " + std::to_string(row.size()) + " fields, header has " +
                             std::to_string(header_.size()));
        }
        rows_.push_back(std::move(row));
    }
    std::size_t rows() const { return rows_.size(); }

    std::string str() const {
        std::string out;
        auto line = [&](const std::vector<std::string>& r) {
            for (std::size_t i = 0; i < r.size(); ++i) {
                if (i) out += ',';
                out += r[i];
            }
            out += '\n';
        };
        line(header_);
        for (const auto& r : rows_) line(r);
        return out;
    }

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path.string());
    out << text;
    if (!out) throw UsageError("failed writing " + path.string());
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

/// Every configuration key with its resolved value.
inline Json config_json(const RunConfig& cfg) {
    Json j = Json::object();
    for (const auto& [key, field] : vibvit::detail::fields()) j[key] = field.get(cfg);
    return j;
}

struct Provenance {
    std::string command;
    std::string checkpoint;
    std::string checkpoint2;
    std::uint64_t dataset_hash = 0;
    std::size_t dataset_size = 0;
};

/// Shared header of every JSON output: resolved config, seed, provenance.
inline Json metadata_json(const RunConfig& cfg, const Provenance& p) {
    Json j;
    j["command"] = p.command;
    j["seed"] = cfg.train.seed;
    Json prov;
    if (!p.checkpoint.empty()) prov["checkpoint"] = p.checkpoint;
    if (!p.checkpoint2.empty()) prov["checkpoint2"] = p.checkpoint2;
    prov["dataset_hash"] = hex64(p.dataset_hash);
    prov["dataset_size"] = p.dataset_size;
    j["provenance"] = prov;
    j["config"] = config_json(cfg);
    return j;
}

/// KL map as a grid CSV (one row per patch row) plus a plotting sidecar.
inline void write_kl_map(const std::filesystem::path& csv_path, const PatchKLMap& map, const Json& metadata) {
    std::string text;
    double lo = map.values.empty() ? 0.0 : map.values.front(), hi = lo;
    for (std::size_t r = 0; r < map.grid; ++r) {
        for (std::size_t c = 0; c < map.grid; ++c) {
            if (c) text += ',';
            text += fmt(map.at(r, c));
            lo = std::min(lo, map.at(r, c));
            hi = std::max(hi, map.at(r, c));
        }
        text += '\n';
    }
    write_text(csv_path, text);
    Json side = metadata;
    side["image"] = map.image;
    side["grid"] = map.grid;
    side["units"] = "nats";
    side["total_kl"] = map.total();
    side["colormap_range"] = {lo, hi};
    auto json_path = csv_path;
    json_path.replace_extension(".json");
    write_json(json_path, side);
}

}  // namespace vibvit::analysis
