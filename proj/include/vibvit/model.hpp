// SPDX-License-Identifier: Apache-2.0
//
// Patch-based transformer classifier with a variational bottleneck on every
// attention head's update. Each patch keeps its own residual stream; the
// attention write is the only path by which patches exchange information,
// and that write passes through the head's bottleneck before the shared
// output projection. Classification is global average pooling + linear head.
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vibvit/config.hpp"
#include "vibvit/errors.hpp"
#include "vibvit/ops.hpp"
#include "vibvit/random.hpp"
#include "vibvit/tape.hpp"
#include "vibvit/tensor.hpp"
#include "vibvit/vib.hpp"

namespace vibvit {

template <class T>
struct Block {
    Parameter<T> norm1_g, norm1_b;
    Parameter<T> q_w, q_b, k_w, k_b, v_w, v_b;
    Parameter<T> proj_w, proj_b;
    Parameter<T> norm2_g, norm2_b;
    Parameter<T> fc1_w, fc1_b, fc2_w, fc2_b;
    std::vector<BottleneckChannel<T>> channels;  // one per head

    template <class Self, class F>
    static void visit_impl(Self& self, F&& f) {
        f(self.norm1_g);
        f(self.norm1_b);
        f(self.q_w);
        f(self.q_b);
        f(self.k_w);
        f(self.k_b);
        f(self.v_w);
        f(self.v_b);
        f(self.proj_w);
        f(self.proj_b);
        f(self.norm2_g);
        f(self.norm2_b);
        f(self.fc1_w);
        f(self.fc1_b);
        f(self.fc2_w);
        f(self.fc2_b);
        for (auto& ch : self.channels) ch.visit(f);
    }
};

template <class T>
class ViTModel {
public:
    ViTConfig config;
    Parameter<T> patch_w, patch_b, pos;
    std::vector<Block<T>> blocks;
    Parameter<T> norm_g, norm_b;
    Parameter<T> head_w, head_b;

    ViTModel() = default;

    /// Allocates every parameter; weights are truncated-normal(0.02), biases
    /// zero, norm gains one. Bottleneck log-sigma biases start at zero so
    /// posteriors begin near the prior.
    ViTModel(const ViTConfig& cfg, Rng& rng) : config(cfg) {
        cfg.validate();
        const std::size_t d = cfg.embed_dim, N = cfg.patch_count(), P = cfg.patch_dim();
        auto W = [](std::string name, Shape s) { return Parameter<T>(std::move(name), Tensor<T>(std::move(s)), false); };
        auto V = [](std::string name, std::size_t n, T fill) {
            return Parameter<T>(std::move(name), Tensor<T>(Shape{n}, fill), true);
        };
        patch_w = W("patch_embed.weight", {P, d});
        patch_b = V("patch_embed.bias", d, T{0});
        pos = W("pos_embed", {N, d});
        for (std::size_t l = 0; l < cfg.depth; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            Block<T> b;
            b.norm1_g = V(p + "norm1.weight", d, T{1});
            b.norm1_b = V(p + "norm1.bias", d, T{0});
            b.q_w = W(p + "attn.q.weight", {d, d});
            b.q_b = V(p + "attn.q.bias", d, T{0});
            b.k_w = W(p + "attn.k.weight", {d, d});
            b.k_b = V(p + "attn.k.bias", d, T{0});
            b.v_w = W(p + "attn.v.weight", {d, d});
            b.v_b = V(p + "attn.v.bias", d, T{0});
            b.proj_w = W(p + "attn.proj.weight", {d, d});
            b.proj_b = V(p + "attn.proj.bias", d, T{0});
            b.norm2_g = V(p + "norm2.weight", d, T{1});
            b.norm2_b = V(p + "norm2.bias", d, T{0});
            b.fc1_w = W(p + "mlp.fc1.weight", {d, cfg.mlp_dim()});
            b.fc1_b = V(p + "mlp.fc1.bias", cfg.mlp_dim(), T{0});
            b.fc2_w = W(p + "mlp.fc2.weight", {cfg.mlp_dim(), d});
            b.fc2_b = V(p + "mlp.fc2.bias", d, T{0});
            for (std::size_t h = 0; h < cfg.heads_per_block; ++h) {
                b.channels.emplace_back(p + "vib." + std::to_string(h), cfg.head_dim(), cfg.latent_dim);
            }
            blocks.push_back(std::move(b));
        }
        norm_g = V("norm.weight", d, T{1});
        norm_b = V("norm.bias", d, T{0});
        head_w = W("head.weight", {d, cfg.num_classes});
        head_b = V("head.bias", cfg.num_classes, T{0});

        visit([&](Parameter<T>& p) {
            const bool is_weight = p.value.rank() >= 2;
            if (is_weight) {
                for (auto& v : p.value.data()) v = static_cast<T>(rng.truncated_normal(0.02));
            }
            p.zero_grad();
        });
    }

    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](const Parameter<T>& p) { n += p.value.size(); });
        return n;
    }

    Parameter<T>* find(const std::string& name) {
        Parameter<T>* out = nullptr;
        visit([&](Parameter<T>& p) {
            if (p.name == name) out = &p;
        });
        return out;
    }

    const BottleneckChannel<T>& channel(std::size_t layer, std::size_t head) const {
        return blocks.at(layer).channels.at(head);
    }
    BottleneckChannel<T>& channel(std::size_t layer, std::size_t head) { return blocks.at(layer).channels.at(head); }

    void zero_grad() {
        visit([](Parameter<T>& p) { p.zero_grad(); });
    }

    /// Same weights at another precision.
    template <class U>
    ViTModel<U> cast() const {
        ViTModel<U> out;
        out.config = config;
        Rng dummy(0);
        out = ViTModel<U>(config, dummy);
        std::vector<const Parameter<T>*> src;
        visit([&](const Parameter<T>& p) { src.push_back(&p); });
        std::size_t i = 0;
        out.visit([&](Parameter<U>& p) {
            p.value = src[i++]->value.template cast<U>();
            p.zero_grad();
        });
        return out;
    }

private:
    template <class Self, class F>
    static void visit_impl(Self& self, F& f) {
        f(self.patch_w);
        f(self.patch_b);
        f(self.pos);
        for (auto& b : self.blocks) Block<T>::visit_impl(b, f);
        f(self.norm_g);
        f(self.norm_b);
        f(self.head_w);
        f(self.head_b);
    }
};

// ---------------------------------------------------------------------------
// Patches

/// channels x S x S image -> [N, channels*p*p], patches in row-major grid
/// order, each flattened as (channel, row, col).
template <class T>
Tensor<T> patchify(std::span<const T> image, const ViTConfig& cfg) {
    if (cfg.patch_size == 0 || cfg.image_size % cfg.patch_size != 0) {
        throw ConfigError("patchify: image_size not divisible by patch_size");
    }
    if (image.size() != cfg.image_numel()) throw DimensionError("patchify: image size does not match config");
    const std::size_t S = cfg.image_size, p = cfg.patch_size, g = cfg.grid(), C = cfg.channels;
    Tensor<T> out(Shape{cfg.patch_count(), cfg.patch_dim()});
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
            T* dst = out.raw() + (gy * g + gx) * cfg.patch_dim();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        *dst++ = image[(c * S + gy * p + y) * S + gx * p + x];
        }
    return out;
}

template <class T>
std::vector<T> unpatchify(const Tensor<T>& patches, const ViTConfig& cfg) {
    const std::size_t S = cfg.image_size, p = cfg.patch_size, g = cfg.grid(), C = cfg.channels;
    if (patches.size() != cfg.image_numel()) throw DimensionError("unpatchify: size mismatch");
    std::vector<T> img(cfg.image_numel());
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx) {
            const T* src = patches.raw() + (gy * g + gx) * cfg.patch_dim();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x) img[(c * S + gy * p + y) * S + gx * p + x] = *src++;
        }
    return img;
}

// ---------------------------------------------------------------------------
// Graph construction

/// Model parameters placed on a tape: leaves with gradients for a mutable
/// model, constants for a const one.
template <class T>
struct ModelVars {
    struct BlockVars {
        Var<T> norm1_g, norm1_b, q_w, q_b, k_w, k_b, v_w, v_b, proj_w, proj_b;
        Var<T> norm2_g, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b;
        Var<T> enc_w, enc_b, dec_w, dec_b;  // stacked over heads
    };
    Var<T> patch_w, patch_b, pos, norm_g, norm_b, head_w, head_b;
    std::vector<BlockVars> blocks;
};

namespace detail {
template <class T, class M, class Bind>
ModelVars<T> bind_impl(M& model, Bind&& bind) {
    using namespace vibvit::ops;
    ModelVars<T> mv;
    mv.patch_w = bind(model.patch_w);
    mv.patch_b = bind(model.patch_b);
    mv.pos = bind(model.pos);
    for (auto& b : model.blocks) {
        typename ModelVars<T>::BlockVars bv;
        bv.norm1_g = bind(b.norm1_g);
        bv.norm1_b = bind(b.norm1_b);
        bv.q_w = bind(b.q_w);
        bv.q_b = bind(b.q_b);
        bv.k_w = bind(b.k_w);
        bv.k_b = bind(b.k_b);
        bv.v_w = bind(b.v_w);
        bv.v_b = bind(b.v_b);
        bv.proj_w = bind(b.proj_w);
        bv.proj_b = bind(b.proj_b);
        bv.norm2_g = bind(b.norm2_g);
        bv.norm2_b = bind(b.norm2_b);
        bv.fc1_w = bind(b.fc1_w);
        bv.fc1_b = bind(b.fc1_b);
        bv.fc2_w = bind(b.fc2_w);
        bv.fc2_b = bind(b.fc2_b);
        std::vector<Var<T>> ew, eb, dw, db;
        for (auto& ch : b.channels) {
            ew.push_back(bind(ch.enc_w));
            eb.push_back(bind(ch.enc_b));
            dw.push_back(bind(ch.dec_w));
            db.push_back(bind(ch.dec_b));
        }
        bv.enc_w = stack(ew);
        bv.enc_b = stack(eb);
        bv.dec_w = stack(dw);
        bv.dec_b = stack(db);
        mv.blocks.push_back(bv);
    }
    mv.norm_g = bind(model.norm_g);
    mv.norm_b = bind(model.norm_b);
    mv.head_w = bind(model.head_w);
    mv.head_b = bind(model.head_b);
    return mv;
}
}  // namespace detail

template <class T>
ModelVars<T> bind_params(Tape<T>& tape, ViTModel<T>& model) {
    return detail::bind_impl<T>(model, [&](Parameter<T>& p) { return tape.param(p); });
}

template <class T>
ModelVars<T> bind_constants(Tape<T>& tape, const ViTModel<T>& model) {
    return detail::bind_impl<T>(model, [&](const Parameter<T>& p) { return tape.constant(p.value); });
}

/// images [B, C*S*S] -> patches [B*N, P]
template <class T>
Tensor<T> patchify_batch(std::span<const T> images, std::size_t batch, const ViTConfig& cfg) {
    const std::size_t n = cfg.image_numel();
    if (images.size() != batch * n) throw DimensionError("patchify_batch: image buffer size mismatch");
    Tensor<T> out(Shape{batch * cfg.patch_count(), cfg.patch_dim()});
    const std::size_t each = cfg.patch_count() * cfg.patch_dim();
    for (std::size_t b = 0; b < batch; ++b) {
        Tensor<T> p = patchify<T>(images.subspan(b * n, n), cfg);
        std::copy(p.raw(), p.raw() + each, out.raw() + b * each);
    }
    return out;
}

/// Linear patch projection plus positional embedding: [B*N, P] -> [B*N, d].
template <class T>
Var<T> embed_graph(Var<T> patches, const ModelVars<T>& mv, const ViTConfig& cfg) {
    using namespace vibvit::ops;
    const std::size_t N = cfg.patch_count(), d = cfg.embed_dim;
    if (patches.shape().size() != 2 || patches.shape()[1] != cfg.patch_dim() || patches.shape()[0] % N != 0) {
        throw DimensionError("embed: patch matrix shape " + shape_str(patches.shape()) + " does not match config");
    }
    const std::size_t B = patches.shape()[0] / N;
    Var<T> x = add_bias(matmul(patches, mv.patch_w), mv.patch_b);
    x = add_bias(reshape(x, {B, N * d}), reshape(mv.pos, {N * d}));
    return reshape(x, {B * N, d});
}

template <class T>
struct AttentionGraph {
    Var<T> attn;   // [B*H, N, N]
    Var<T> delta;  // [B*H, N, head_dim], value aggregation before the output projection
};

/// Scaled dot-product attention for every head on the pre-normed stream [B*N, d].
template <class T>
AttentionGraph<T> attention_graph(Var<T> normed, const typename ModelVars<T>::BlockVars& bv, const ViTConfig& cfg) {
    using namespace vibvit::ops;
    const std::size_t N = cfg.patch_count(), H = cfg.heads_per_block, hd = cfg.head_dim();
    const std::size_t B = normed.shape()[0] / N;
    auto heads = [&](Var<T> w, Var<T> b) {
        Var<T> y = add_bias(matmul(normed, w), b);
        return reshape(permute(reshape(y, {B, N, H, hd}), {0, 2, 1, 3}), {B * H, N, hd});
    };
    Var<T> q = heads(bv.q_w, bv.q_b);
    Var<T> k = heads(bv.k_w, bv.k_b);
    Var<T> v = heads(bv.v_w, bv.v_b);
    Var<T> scores = scale(bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
    Var<T> attn = softmax(scores, 2);
    return {attn, bmm(attn, v)};
}

/// Pre-norm pointwise MLP with residual add.
template <class T>
Var<T> mlp_graph(Var<T> stream, const typename ModelVars<T>::BlockVars& bv) {
    using namespace vibvit::ops;
    Var<T> y = layer_norm(stream, bv.norm2_g, bv.norm2_b);
    y = gelu(add_bias(matmul(y, bv.fc1_w), bv.fc1_b));
    y = add_bias(matmul(y, bv.fc2_w), bv.fc2_b);
    return add(stream, y);
}

template <class T>
struct BottleneckGraph {
    Var<T> update;                // [B*N, d] decoded heads, concatenated
    std::optional<Var<T>> mu;         // [H, B*N, L]
    std::optional<Var<T>> log_sigma;  // [H, B*N, L], clamped
    std::optional<Var<T>> kl;         // [H, B*N, L]
};

/// Routes each head's update through its channel. delta is [B*H, N, hd].
template <class T>
BottleneckGraph<T> bottleneck_graph(Var<T> delta, const typename ModelVars<T>::BlockVars& bv, const ViTConfig& cfg,
                                    BottleneckMode mode, Rng* rng) {
    using namespace vibvit::ops;
    auto& tape = *delta.tape;
    const std::size_t N = cfg.patch_count(), H = cfg.heads_per_block, hd = cfg.head_dim(), L = cfg.latent_dim;
    const std::size_t B = delta.shape()[0] / H;
    if (mode == BottleneckMode::disabled) {
        Var<T> merged = permute(reshape(delta, {B, H, N, hd}), {0, 2, 1, 3});
        return {reshape(merged, {B * N, H * hd}), std::nullopt, std::nullopt, std::nullopt};
    }
    if (mode == BottleneckMode::stochastic && rng == nullptr) {
        throw UsageError("forward: stochastic bottleneck mode requires an rng");
    }
    Var<T> per_head = reshape(permute(reshape(delta, {B, H, N, hd}), {1, 0, 2, 3}), {H, B * N, hd});
    Var<T> enc = add_group_bias(bmm(per_head, bv.enc_w), bv.enc_b);
    Var<T> mu = slice_last(enc, 0, L);
    Var<T> log_sigma = clamp(slice_last(enc, L, 2 * L), min_log_sigma<T>(), max_log_sigma<T>());
    Var<T> kl = gaussian_kl(mu, log_sigma);
    Var<T> z = mu;
    if (mode == BottleneckMode::stochastic) {
        Tensor<T> eps(Shape{H, B * N, L});
        for (auto& e : eps.data()) e = static_cast<T>(rng->normal());
        z = add(mu, mul(ops::exp(log_sigma), tape.constant(std::move(eps))));
    } else if (mode == BottleneckMode::prior_mean) {
        z = tape.constant(Tensor<T>(Shape{H, B * N, L}));
    }
    Var<T> dec = add_group_bias(bmm(z, bv.dec_w), bv.dec_b);
    Var<T> merged = permute(reshape(dec, {H, B, N, hd}), {1, 2, 0, 3});
    return {reshape(merged, {B * N, H * hd}), mu, log_sigma, kl};
}

template <class T>
struct ForwardGraph {
    std::size_t batch = 0;
    Var<T> logits;            // [B, C]
    Var<T> per_patch_logits;  // [B, N, C]
    Var<T> final_repr;        // [B*N, d] after the final norm
    Var<T> kl_sum;            // scalar, summed over layers, heads, patches and batch
    struct Layer {
        AttentionGraph<T> attention;
        std::optional<Var<T>> mu;
        std::optional<Var<T>> log_sigma;
        std::optional<Var<T>> kl;
    };
    std::vector<Layer> layers;
};

/// Per-patch classifier contributions and pooled logits from the final-norm stream.
template <class T>
std::pair<Var<T>, Var<T>> gap_graph(Var<T> final_repr, const ModelVars<T>& mv, const ViTConfig& cfg) {
    using namespace vibvit::ops;
    const std::size_t N = cfg.patch_count(), C = cfg.num_classes;
    const std::size_t B = final_repr.shape()[0] / N;
    Var<T> ppl = reshape(matmul(final_repr, mv.head_w), {B, N, C});
    Var<T> logits = add_bias(mean_axis(ppl, 1), mv.head_b);
    return {logits, ppl};
}

/// Full forward over a batch of images laid out as [B, C*S*S].
template <class T>
ForwardGraph<T> forward_graph(Tape<T>& tape, const ModelVars<T>& mv, const ViTConfig& cfg, std::span<const T> images,
                              std::size_t batch, BottleneckMode mode, Rng* rng) {
    using namespace vibvit::ops;
    if (mode == BottleneckMode::stochastic && rng == nullptr) {
        throw UsageError("forward: stochastic bottleneck mode requires an rng");
    }
    ForwardGraph<T> g;
    g.batch = batch;
    Var<T> x = embed_graph(tape.constant(patchify_batch<T>(images, batch, cfg)), mv, cfg);
    std::optional<Var<T>> kl_sum;
    for (const auto& bv : mv.blocks) {
        Var<T> normed = layer_norm(x, bv.norm1_g, bv.norm1_b);
        auto att = attention_graph<T>(normed, bv, cfg);
        auto bn = bottleneck_graph<T>(att.delta, bv, cfg, mode, rng);
        x = add(x, add_bias(matmul(bn.update, bv.proj_w), bv.proj_b));
        x = mlp_graph<T>(x, bv);
        if (bn.kl) {
            Var<T> s = sum(*bn.kl);
            kl_sum = kl_sum ? add(*kl_sum, s) : s;
        }
        g.layers.push_back({att, bn.mu, bn.log_sigma, bn.kl});
    }
    g.final_repr = layer_norm(x, mv.norm_g, mv.norm_b);
    auto [logits, ppl] = gap_graph<T>(g.final_repr, mv, cfg);
    g.logits = logits;
    g.per_patch_logits = ppl;
    g.kl_sum = kl_sum ? *kl_sum : tape.constant(Tensor<T>::scalar(T{0}));
    return g;
}

// ---------------------------------------------------------------------------
// Single-image instrumentation

template <class T>
struct ForwardTrace {
    std::vector<T> logits;                  // [C]
    Tensor<T> per_patch_logits;             // [N, C]
    Tensor<T> final_repr;                   // [N, d], pre-pooling representation
    std::vector<KLRecord> kl_records;       // depth * heads * N, ordered (layer, head, patch)
    std::vector<Tensor<T>> attention_maps;  // [layer * H + head] -> [N, N]
    std::vector<Tensor<T>> head_updates;    // [layer * H + head] -> [N, head_dim], before the bottleneck
    std::vector<Tensor<T>> head_latent_means;   // [layer * H + head] -> [N, L]; empty when disabled
    std::vector<Tensor<T>> head_latent_sigmas;  // same layout as the means
    double total_kl = 0.0;
};

/// Splits a batched forward into per-image traces.
template <class T>
std::vector<ForwardTrace<T>> extract_traces(const ForwardGraph<T>& g, const ViTConfig& cfg) {
    const std::size_t B = g.batch, N = cfg.patch_count(), C = cfg.num_classes, d = cfg.embed_dim;
    const std::size_t H = cfg.heads_per_block, hd = cfg.head_dim(), L = cfg.latent_dim;
    std::vector<ForwardTrace<T>> out(B);
    const auto& logits = g.logits.value();
    const auto& ppl = g.per_patch_logits.value();
    const auto& fr = g.final_repr.value();
    for (std::size_t b = 0; b < B; ++b) {
        auto& tr = out[b];
        tr.logits.assign(logits.raw() + b * C, logits.raw() + (b + 1) * C);
        tr.per_patch_logits = Tensor<T>(Shape{N, C}, std::vector<T>(ppl.raw() + b * N * C, ppl.raw() + (b + 1) * N * C));
        tr.final_repr = Tensor<T>(Shape{N, d}, std::vector<T>(fr.raw() + b * N * d, fr.raw() + (b + 1) * N * d));
        tr.kl_records.reserve(g.layers.size() * H * N);
    }
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        const auto& layer = g.layers[l];
        const auto& attn = layer.attention.attn.value();
        const auto& delta = layer.attention.delta.value();
        for (std::size_t b = 0; b < B; ++b) {
            auto& tr = out[b];
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t bh = b * H + h;
                tr.attention_maps.emplace_back(
                    Shape{N, N}, std::vector<T>(attn.raw() + bh * N * N, attn.raw() + (bh + 1) * N * N));
                tr.head_updates.emplace_back(
                    Shape{N, hd}, std::vector<T>(delta.raw() + bh * N * hd, delta.raw() + (bh + 1) * N * hd));
                Tensor<T> means(Shape{N, L}), sigmas(Shape{N, L});
                for (std::size_t i = 0; i < N; ++i) {
                    KLRecord rec;
                    rec.layer = l;
                    rec.head = h;
                    rec.patch = i;
                    rec.per_dim_kl.assign(L, 0.0);
                    if (layer.kl) {
                        const std::size_t row = (h * B + b) * N + i;
                        const T* k = layer.kl->value().raw() + row * L;
                        const T* m = layer.mu->value().raw() + row * L;
                        const T* ls = layer.log_sigma->value().raw() + row * L;
                        for (std::size_t j = 0; j < L; ++j) {
                            rec.per_dim_kl[j] = std::max(0.0, static_cast<double>(k[j]));
                            rec.kl_nats += rec.per_dim_kl[j];
                            means[i * L + j] = m[j];
                            sigmas[i * L + j] = std::exp(ls[j]);
                        }
                    }
                    tr.total_kl += rec.kl_nats;
                    tr.kl_records.push_back(std::move(rec));
                }
                if (layer.mu) {
                    tr.head_latent_means.push_back(std::move(means));
                    tr.head_latent_sigmas.push_back(std::move(sigmas));
                }
            }
        }
    }
    return out;
}

/// Forward a batch of images [B, C*S*S] on a fresh tape and return per-image traces.
template <class T>
std::vector<ForwardTrace<T>> forward_batch(std::span<const T> images, std::size_t batch, const ViTModel<T>& model,
                                           BottleneckMode mode, Rng* rng) {
    Tape<T> tape;
    auto mv = bind_constants(tape, model);
    auto g = forward_graph<T>(tape, mv, model.config, images, batch, mode, rng);
    return extract_traces(g, model.config);
}

template <class T>
ForwardTrace<T> forward(std::span<const T> image, const ViTModel<T>& model, BottleneckMode mode, Rng* rng) {
    return std::move(forward_batch<T>(image, 1, model, mode, rng).front());
}

// Single-stage helpers, one image at a time.

/// patches [N, P] -> residual stream [N, d]
template <class T>
Tensor<T> embed(const Tensor<T>& patches, const ViTModel<T>& model) {
    Tape<T> tape;
    auto mv = bind_constants(tape, model);
    return embed_graph<T>(tape.constant(patches), mv, model.config).value();
}

template <class T>
struct HeadUpdate {
    Tensor<T> delta;          // [N, head_dim]
    Tensor<T> attention_map;  // [N, N]
};

/// One head's value aggregation on the pre-normed stream, before the output projection.
template <class T>
HeadUpdate<T> attention_head_update(const Tensor<T>& stream, std::size_t layer, std::size_t head,
                                    const ViTModel<T>& model) {
    const auto& cfg = model.config;
    const std::size_t N = cfg.patch_count(), H = cfg.heads_per_block, hd = cfg.head_dim();
    if (stream.shape() != Shape{N, cfg.embed_dim}) throw DimensionError("attention_head_update: stream shape mismatch");
    if (layer >= cfg.depth || head >= H) throw UsageError("attention_head_update: layer/head out of range");
    Tape<T> tape;
    auto mv = bind_constants(tape, model);
    const auto& bv = mv.blocks[layer];
    Var<T> normed = ops::layer_norm(tape.constant(stream), bv.norm1_g, bv.norm1_b);
    auto att = attention_graph<T>(normed, bv, cfg);
    HeadUpdate<T> out{Tensor<T>(Shape{N, hd}), Tensor<T>(Shape{N, N})};
    std::copy_n(att.delta.value().raw() + head * N * hd, N * hd, out.delta.raw());
    std::copy_n(att.attn.value().raw() + head * N * N, N * N, out.attention_map.raw());
    return out;
}

template <class T>
Tensor<T> mlp_block(const Tensor<T>& stream, std::size_t layer, const ViTModel<T>& model) {
    if (layer >= model.config.depth) throw UsageError("mlp_block: layer out of range");
    Tape<T> tape;
    auto mv = bind_constants(tape, model);
    return mlp_graph<T>(tape.constant(stream), mv.blocks[layer]).value();
}

template <class T>
struct GapOutput {
    std::vector<T> logits;
    Tensor<T> per_patch_logits;
};

/// stream is the final-norm representation [N, d].
template <class T>
GapOutput<T> gap_classify(const Tensor<T>& stream, const ViTModel<T>& model) {
    Tape<T> tape;
    auto mv = bind_constants(tape, model);
    auto [logits, ppl] = gap_graph<T>(tape.constant(stream), mv, model.config);
    const auto& cfg = model.config;
    return {logits.value().storage(), ppl.value().reshaped({cfg.patch_count(), cfg.num_classes})};
}

}  // namespace vibvit
