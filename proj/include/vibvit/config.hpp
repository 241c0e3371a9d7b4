// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "vibvit/errors.hpp"

namespace vibvit {

/// How each head's bottleneck transforms its update.
enum class BottleneckMode {
    stochastic,  ///< z ~ N(mu, sigma^2) via reparameterization
    mean,        ///< z = mu
    prior_mean,  ///< z = 0 for every input; no information crosses patches
    disabled,    ///< bottleneck bypassed, update written unchanged
};

inline std::string_view to_string(BottleneckMode m) {
    switch (m) {
        case BottleneckMode::stochastic: return "stochastic";
        case BottleneckMode::mean: return "mean";
        case BottleneckMode::prior_mean: return "prior-mean";
        case BottleneckMode::disabled: return "disabled";
    }
    return "?";
}

inline BottleneckMode parse_bottleneck_mode(std::string_view s) {
    if (s == "stochastic") return BottleneckMode::stochastic;
    if (s == "mean") return BottleneckMode::mean;
    if (s == "prior-mean" || s == "prior_mean") return BottleneckMode::prior_mean;
    if (s == "disabled") return BottleneckMode::disabled;
    throw ConfigError("unknown bottleneck mode '" + std::string(s) + "'");
}

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads_per_block = 2;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 10;
    std::size_t latent_dim = 32;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patch_count() const { return grid() * grid(); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t head_dim() const { return embed_dim / heads_per_block; }
    std::size_t mlp_dim() const { return embed_dim * mlp_ratio; }
    std::size_t image_numel() const { return channels * image_size * image_size; }
    std::size_t channel_count() const { return depth * heads_per_block; }

    void validate() const {
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
            throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                              std::to_string(patch_size));
        }
        if (heads_per_block == 0 || embed_dim % heads_per_block != 0) {
            throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads_per_block " +
                              std::to_string(heads_per_block));
        }
        if (channels == 0 || depth == 0 || num_classes == 0 || latent_dim == 0 || mlp_ratio == 0) {
            throw ConfigError("model extents must be positive");
        }
    }

    /// Default CPU-trainable configuration.
    static ViTConfig desk() { return ViTConfig{}; }

    /// ViT-Tiny at 224px (12 blocks, width 192, 3 heads, patch 16).
    static ViTConfig vit_tiny(std::size_t classes = 100) {
        return ViTConfig{224, 16, 3, 192, 12, 3, 4, classes, 64};
    }

    friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

struct TrainConfig {
    double beta = 0.0;
    double base_lr = 6e-4;
    double weight_decay = 0.05;
    std::size_t epochs = 20;
    std::size_t warmup_epochs = 2;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t eval_runs = 10;
    /// stochastic for VIB training, disabled for the bottleneck-free baseline.
    BottleneckMode train_mode = BottleneckMode::stochastic;
    /// Mode used for validation; stochastic draws fresh samples per run.
    BottleneckMode eval_mode = BottleneckMode::stochastic;

    void validate() const {
        if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
        if (warmup_epochs > epochs) throw ConfigError("warmup_epochs exceeds epochs");
        if (eval_runs < 1) throw ConfigError("eval_runs must be at least 1");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (!(base_lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("lr and weight decay must be nonnegative");
        if (train_mode != BottleneckMode::stochastic && train_mode != BottleneckMode::disabled) {
            throw ConfigError("train_mode must be stochastic or disabled");
        }
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

}  // namespace vibvit
