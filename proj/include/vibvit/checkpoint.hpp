// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container, all integers and floats little-endian:
//
//   "VIBVITCK"            8-byte magic
//   u32 version           currently 1
//   str config            `key = value` lines for the model and training keys
//   u64 epoch, u64 step
//   str rng               serialized shuffle-stream state
//   u32 count             parameter tensors, then for each:
//     str name, u32 rank, u64 dims[rank], f32 values[numel]
//   u64 optimizer step
//   for each parameter in the same order: f32 m[numel], f32 v[numel]
//
// where str is u32 length + bytes.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vibvit/errors.hpp"
#include "vibvit/model.hpp"
#include "vibvit/run_config.hpp"
#include "vibvit/train.hpp"

namespace vibvit {

inline constexpr char kCheckpointMagic[8] = {'V', 'I', 'B', 'V', 'I', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    RunConfig config;  // model and train sections are meaningful
    ViTModel<float> model;
    TrainerState<float> state;
};

namespace detail {

class ByteWriter {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    const std::vector<std::uint8_t>& data() const { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}
    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) throw FormatError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const RunConfig& cfg, const ViTModel<float>& model,
                                                      const TrainerState<float>& state) {
    detail::ByteWriter w;
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.u32(kCheckpointVersion);
    RunConfig c = cfg;
    c.model = model.config;
    w.str(format_config(c, true));
    w.u64(state.epoch);
    w.u64(state.step);
    w.str(state.rng.serialize());
    std::vector<const Parameter<float>*> params;
    model.visit([&](const Parameter<float>& p) { params.push_back(&p); });
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        w.str(p->name);
        w.u32(static_cast<std::uint32_t>(p->value.rank()));
        for (std::size_t d : p->value.shape()) w.u64(d);
        for (float v : p->value.data()) w.f32(v);
    }
    const auto& opt = state.optimizer;
    if (opt.m.size() != params.size() || opt.v.size() != params.size()) {
        throw UsageError("checkpoint: optimizer state does not match the model");
    }
    w.u64(opt.step);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (opt.m[i].size() != params[i]->value.size()) throw UsageError("checkpoint: moment shape mismatch");
        for (float v : opt.m[i].data()) w.f32(v);
        for (float v : opt.v[i].data()) w.f32(v);
    }
    return w.data();
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader body(bytes);
    body.need(sizeof kCheckpointMagic);
    if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
        throw FormatError("not a checkpoint (bad magic)");
    }
    body.skip(sizeof kCheckpointMagic);
    const std::uint32_t version = body.u32();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    try {
        apply_config_text(ck.config, body.str());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    ck.config.explicit_keys.clear();
    ck.config.model.validate();
    Rng dummy(0);
    ck.model = ViTModel<float>(ck.config.model, dummy);
    ck.state.epoch = body.u64();
    ck.state.step = body.u64();
    ck.state.rng.deserialize(body.str());
    std::vector<Parameter<float>*> params;
    ck.model.visit([&](Parameter<float>& p) { params.push_back(&p); });
    const std::uint32_t count = body.u32();
    if (count != params.size()) throw FormatError("checkpoint parameter count does not match its config");
    for (auto* p : params) {
        const std::string name = body.str();
        if (name != p->name) throw FormatError("checkpoint parameter '" + name + "' where '" + p->name + "' expected");
        Shape shape(body.u32());
        for (auto& d : shape) d = body.u64();
        if (shape != p->value.shape()) throw FormatError("checkpoint shape mismatch for " + name);
        for (auto& v : p->value.data()) v = body.f32();
    }
    ck.state.optimizer = OptimizerState<float>(ck.model);
    ck.state.optimizer.step = body.u64();
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (auto& v : ck.state.optimizer.m[i].data()) v = body.f32();
        for (auto& v : ck.state.optimizer.v[i].data()) v = body.f32();
    }
    if (!body.done()) throw FormatError("trailing bytes after checkpoint");
    return ck;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw UsageError("failed writing " + path.string());
}

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const ViTModel<float>& model,
                            const TrainerState<float>& state) {
    write_bytes(path, serialize_checkpoint(cfg, model, state));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
    return deserialize_checkpoint(read_file_bytes(path));
}

}  // namespace vibvit
