// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "proglm/tensor.hpp"

namespace proglm {

/// A tensor with a stable name used for optimizer state, checkpoints and
/// penalty bookkeeping.
struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamSet = std::vector<NamedParam>;

inline void zero_grads(ParamSet& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

/// Cosine annealing from `base_lr` at step 0 to `lr_min` at `total_steps`.
/// Steps past the horizon stay at `lr_min`.
inline double cosine_lr(long step, long total_steps, double base_lr, double lr_min = 0.0) {
    if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
    if (step < 0) throw ConfigError("cosine_lr: negative step");
    if (step >= total_steps) return lr_min;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (base_lr - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamWConfig {
    double base_lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    long total_steps = 1; // cosine annealing horizon
};

/// AdamW with decoupled weight decay and cosine-annealed learning rate.
/// First and second moments are kept in float64 and keyed by parameter name,
/// so the same logical parameter keeps its state across step calls even if
/// the ParamSet is rebuilt.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {
        if (cfg.total_steps <= 0) throw ConfigError("AdamW: total_steps must be positive");
        if (cfg.base_lr < 0) throw ConfigError("AdamW: negative learning rate");
    }

    /// Learning rate the next step() call will use.
    double current_lr() const { return cosine_lr(t_, cfg_.total_steps, cfg_.base_lr); }

    long steps_taken() const { return t_; }

    void step(ParamSet& params) {
        const double lr = current_lr();
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& p : params) {
            if (!p.tensor.has_grad())
                throw std::runtime_error("AdamW: parameter '" + p.name + "' has no populated gradient");
            auto g = p.tensor.grad();
            auto& st = moments_[p.name];
            if (st.m.empty()) {
                st.m.assign(g.size(), 0.0);
                st.v.assign(g.size(), 0.0);
            } else if (st.m.size() != g.size()) {
                throw std::runtime_error("AdamW: parameter '" + p.name + "' changed size");
            }
            auto w = p.tensor.values_mut();
            for (size_t i = 0; i < g.size(); ++i) {
                const double gi = g[i];
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                const double wi = static_cast<double>(w[i]);
                // decoupled decay: applied to the weight, not folded into the gradient
                w[i] = static_cast<float>(wi - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * wi));
            }
        }
        zero_grads(params);
    }

private:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    AdamWConfig cfg_;
    long t_ = 0;
    std::map<std::string, Moments> moments_;
};

/// Plain SGD over a ParamSet, used for inner-loop adaptation.
inline void sgd_step(ParamSet& params, double lr) {
    for (auto& p : params) {
        if (!p.tensor.has_grad())
            throw std::runtime_error("sgd_step: parameter '" + p.name + "' has no populated gradient");
        auto g = p.tensor.grad();
        auto w = p.tensor.values_mut();
        for (size_t i = 0; i < g.size(); ++i)
            w[i] = static_cast<float>(static_cast<double>(w[i]) - lr * g[i]);
    }
    zero_grads(params);
}

} // namespace proglm
