// SPDX-License-Identifier: Apache-2.0
//
// Loop-level reference forward pass in double precision. Reads the model's
// parameters directly and uses none of the tape ops, so it can act as an
// oracle for the batched graph forward.
#pragma once

#include <cmath>
#include <vector>

#include "vibvit/model.hpp"
#include "vibvit/vib.hpp"

namespace vibvit::testing {

using Mat = std::vector<std::vector<double>>;

struct ReferenceOutput {
    std::vector<double> logits;
    Mat final_repr;
    std::vector<double> kl_per_head_patch;  // (layer, head, patch) order; empty when disabled
};

template <class T>
Mat ref_affine(const Mat& x, const Parameter<T>& w, const Parameter<T>& b) {
    const std::size_t in = w.value.dim(0), out = w.value.dim(1);
    Mat y(x.size(), std::vector<double>(out));
    for (std::size_t r = 0; r < x.size(); ++r)
        for (std::size_t j = 0; j < out; ++j) {
            double acc = b.value[j];
            for (std::size_t i = 0; i < in; ++i) acc += x[r][i] * double(w.value[i * out + j]);
            y[r][j] = acc;
        }
    return y;
}

template <class T>
Mat ref_layer_norm(const Mat& x, const Parameter<T>& g, const Parameter<T>& b) {
    Mat y = x;
    for (std::size_t r = 0; r < x.size(); ++r) {
        const double n = double(x[r].size());
        double mean = 0, var = 0;
        for (double v : x[r]) mean += v;
        mean /= n;
        for (double v : x[r]) var += (v - mean) * (v - mean);
        var /= n;
        for (std::size_t j = 0; j < x[r].size(); ++j)
            y[r][j] = (x[r][j] - mean) / std::sqrt(var + 1e-6) * double(g.value[j]) + double(b.value[j]);
    }
    return y;
}

inline double ref_gelu(double x) {
    const double c = std::sqrt(2.0 / M_PI);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

/// mode: disabled, mean or prior_mean (deterministic modes only).
template <class T>
ReferenceOutput reference_forward(const std::vector<double>& image, const ViTModel<T>& model,
                                  BottleneckMode mode = BottleneckMode::disabled) {
    const auto& cfg = model.config;
    const std::size_t S = cfg.image_size, p = cfg.patch_size, g = cfg.grid(), C = cfg.channels;
    const std::size_t N = cfg.patch_count(), d = cfg.embed_dim, H = cfg.heads_per_block, hd = cfg.head_dim();
    ReferenceOutput out;

    Mat patches(N);
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        patches[gy * g + gx].push_back(image[(c * S + gy * p + y) * S + gx * p + x]);

    Mat x = ref_affine(patches, model.patch_w, model.patch_b);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < d; ++j) x[i][j] += double(model.pos.value[i * d + j]);

    for (const auto& blk : model.blocks) {
        Mat n = ref_layer_norm(x, blk.norm1_g, blk.norm1_b);
        Mat q = ref_affine(n, blk.q_w, blk.q_b);
        Mat k = ref_affine(n, blk.k_w, blk.k_b);
        Mat v = ref_affine(n, blk.v_w, blk.v_b);
        Mat merged(N, std::vector<double>(d, 0.0));
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < N; ++i) {
                std::vector<double> s(N);
                double mx = -1e300;
                for (std::size_t j = 0; j < N; ++j) {
                    double dot = 0;
                    for (std::size_t e = 0; e < hd; ++e) dot += q[i][h * hd + e] * k[j][h * hd + e];
                    s[j] = dot / std::sqrt(double(hd));
                    mx = std::max(mx, s[j]);
                }
                double z = 0;
                for (auto& sj : s) z += (sj = std::exp(sj - mx));
                std::vector<T> delta(hd, T{0});
                for (std::size_t e = 0; e < hd; ++e) {
                    double acc = 0;
                    for (std::size_t j = 0; j < N; ++j) acc += s[j] / z * v[j][h * hd + e];
                    delta[e] = static_cast<T>(acc);
                }
                auto bo = bottleneck_apply<T>(delta, blk.channels[h], mode, nullptr);
                if (mode != BottleneckMode::disabled) out.kl_per_head_patch.push_back(bo.kl.kl_nats);
                for (std::size_t e = 0; e < hd; ++e) merged[i][h * hd + e] = double(bo.update[e]);
            }
        }
        Mat proj = ref_affine(merged, blk.proj_w, blk.proj_b);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < d; ++j) x[i][j] += proj[i][j];
        Mat m = ref_layer_norm(x, blk.norm2_g, blk.norm2_b);
        Mat h1 = ref_affine(m, blk.fc1_w, blk.fc1_b);
        for (auto& row : h1)
            for (auto& val : row) val = ref_gelu(val);
        Mat h2 = ref_affine(h1, blk.fc2_w, blk.fc2_b);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < d; ++j) x[i][j] += h2[i][j];
    }
    out.final_repr = ref_layer_norm(x, model.norm_g, model.norm_b);
    const std::size_t K = cfg.num_classes;
    out.logits.assign(K, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < K; ++c) {
            double acc = 0;
            for (std::size_t j = 0; j < d; ++j) acc += out.final_repr[i][j] * double(model.head_w.value[j * K + c]);
            out.logits[c] += acc / double(N);
        }
    for (std::size_t c = 0; c < K; ++c) out.logits[c] += double(model.head_b.value[c]);
    return out;
}

/// Random weights at a scale where every block visibly changes the stream.
template <class T>
void randomize(ViTModel<T>& model, Rng& rng, double scale = 0.3) {
    model.visit([&](Parameter<T>& p) {
        const double s = p.value.rank() >= 2 ? scale / std::sqrt(double(p.value.dim(0))) * 3.0 : scale;
        for (auto& v : p.value.data()) v = static_cast<T>(rng.uniform(-s, s));
    });
}

}  // namespace vibvit::testing
