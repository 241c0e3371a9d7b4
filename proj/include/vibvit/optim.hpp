// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "vibvit/errors.hpp"
#include "vibvit/model.hpp"
#include "vibvit/tape.hpp"
#include "vibvit/tensor.hpp"

namespace vibvit {

/// Linear warmup 0 -> base_lr over warmup_steps, then half-cosine base_lr -> 0
/// at total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
    if (warmup_steps > total_steps) throw ConfigError("lr_schedule: warmup_steps exceeds total_steps");
    if (step > total_steps) throw ConfigError("lr_schedule: step beyond total_steps");
    if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps == warmup_steps) return base_lr;
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moments per parameter, in model visit order.
template <class T>
struct OptimizerState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::vector<bool> decay_exempt;
    std::uint64_t step = 0;

    OptimizerState() = default;
    explicit OptimizerState(const ViTModel<T>& model) {
        model.visit([&](const Parameter<T>& p) {
            m.emplace_back(p.value.shape());
            v.emplace_back(p.value.shape());
            decay_exempt.push_back(p.decay_exempt);
        });
    }

    friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// Decoupled weight decay on non-exempt parameters, then a bias-corrected Adam step.
template <class T>
void adamw_step(std::vector<Parameter<T>*> params, OptimizerState<T>& state, double lr, double weight_decay,
                const AdamHyper& hp = {}) {
    if (params.size() != state.m.size()) throw DimensionError("adamw_step: optimizer state does not match parameters");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter<T>& p = *params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
            throw DimensionError("adamw_step: shape mismatch for " + p.name);
        }
        const bool decay = !state.decay_exempt[i] && weight_decay != 0.0;
        const T shrink = static_cast<T>(1.0 - lr * weight_decay);
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const double g = static_cast<double>(p.grad[k]);
            const double mk = hp.beta1 * static_cast<double>(m[k]) + (1.0 - hp.beta1) * g;
            const double vk = hp.beta2 * static_cast<double>(v[k]) + (1.0 - hp.beta2) * g * g;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            T value = p.value[k];
            if (decay) value *= shrink;
            const double mhat = mk / bc1;
            const double vhat = vk / bc2;
            value -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + hp.eps));
            p.value[k] = value;
        }
    }
}

template <class T>
std::vector<Parameter<T>*> parameter_list(ViTModel<T>& model) {
    std::vector<Parameter<T>*> out;
    model.visit([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
}

template <class T>
void adamw_step(ViTModel<T>& model, OptimizerState<T>& state, double lr, double weight_decay,
                const AdamHyper& hp = {}) {
    adamw_step(parameter_list(model), state, lr, weight_decay, hp);
}

}  // namespace vibvit
