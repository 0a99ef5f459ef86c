// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "proglm/io.hpp"
#include "proglm/model.hpp"
#include "proglm/tensor.hpp"

namespace proglm {

/// One task column: a single hidden layer over the combined hidden states
/// (h = ReLU(x W1 + b1)) and its own vocabulary head (logits = h W2 + b2).
struct Column {
    int task_id = -1;
    Tensor w1; // d_model x d_col
    Tensor b1; // d_col
    Tensor w2; // d_col x vocab
    Tensor b2; // vocab
    bool frozen = false;
};

/// Carries a prior column's hidden activations into a later column's input.
/// U starts as the identity, so a fresh adapter passes activations through
/// unchanged.
struct LateralAdapter {
    int source = -1;
    Tensor u; // d_col x d_col
};

/// Low-rank residual on a frozen weight matrix W (rows x cols):
/// effective W = W + (scale/rank) * B A, with B zero-initialized so the
/// attachment is exactly transparent.
struct LoraAdapter {
    std::string target; // parameter name of the adapted matrix
    Tensor a;           // rank x cols
    Tensor b;           // rows x rank
    long rank = 4;
    double scale = 1.0;
};

/// Frozen base model plus an ordered stack of task columns with lateral
/// adapters and a fixed logit-fusion weight alpha.
class ProgressiveNetwork {
public:
    ProgressiveNetwork(std::shared_ptr<BaseModel> base, uint64_t seed, double alpha = 0.7)
        : base_(std::move(base)), seed_(seed) {
        if (!base_) throw ConfigError("ProgressiveNetwork: null base model");
        if (!base_->is_frozen()) throw ConfigError("ProgressiveNetwork: base model must be frozen first");
        set_alpha(alpha);
    }

    const BaseModel& base() const { return *base_; }
    BaseModel& base_mut() { return *base_; }
    long d_col() const { return base_->config().d_model; }
    long vocab() const { return base_->config().vocab; }

    double alpha() const { return alpha_; }
    void set_alpha(double a) {
        if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(a));
        alpha_ = a;
    }

    size_t column_count() const { return columns_.size(); }
    Column& column(size_t i) { return columns_.at(i); }
    const Column& column(size_t i) const { return columns_.at(i); }
    const std::vector<LateralAdapter>& adapters(size_t dest) const { return adapters_.at(dest); }
    std::vector<LateralAdapter>& adapters_mut(size_t dest) { return adapters_.at(dest); }

    bool has_task(int task_id) const { return index_of(task_id) >= 0; }
    long index_of(int task_id) const {
        for (size_t i = 0; i < columns_.size(); ++i)
            if (columns_[i].task_id == task_id) return static_cast<long>(i);
        return -1;
    }

    /// Freezes every existing column, appends a trainable column for
    /// `task_id` with identity adapters from each prior column, and returns
    /// the new column's index.
    long add_column(int task_id) {
        if (has_task(task_id))
            throw ConfigError("add_column: task " + std::to_string(task_id) + " already has a column");
        for (size_t i = 0; i < columns_.size(); ++i) freeze_column(i);
        const long idx = static_cast<long>(columns_.size());
        const long d = d_col();
        Rng rng(Rng::derive(seed_, 0x100 + static_cast<uint64_t>(idx)));
        const float w1_lim = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
        const float w2_lim = w1_lim; // fan_in of W2 is d_col == d_model
        Column col;
        col.task_id = task_id;
        col.w1 = Tensor::uniform({d, d}, -w1_lim, w1_lim, rng, true);
        col.b1 = Tensor::zeros({d}, true);
        col.w2 = Tensor::uniform({d, vocab()}, -w2_lim, w2_lim, rng, true);
        col.b2 = Tensor::zeros({vocab()}, true);
        columns_.push_back(std::move(col));
        std::vector<LateralAdapter> lats;
        for (long s = 0; s < idx; ++s) {
            Tensor u = Tensor::identity(d);
            u.set_requires_grad(true);
            lats.push_back({static_cast<int>(s), std::move(u)});
        }
        adapters_.push_back(std::move(lats));
        return idx;
    }

    void freeze_column(size_t i) {
        Column& c = columns_.at(i);
        c.frozen = true;
        c.w1.set_requires_grad(false);
        c.b1.set_requires_grad(false);
        c.w2.set_requires_grad(false);
        c.b2.set_requires_grad(false);
        for (auto& ad : adapters_.at(i)) ad.u.set_requires_grad(false);
    }

    /// Named parameters of one column, adapters included.
    ParamSet column_params(size_t i) {
        const std::string p = "pnn/col" + std::to_string(i) + "/";
        Column& c = columns_.at(i);
        ParamSet out{{p + "w1", c.w1}, {p + "b1", c.b1}, {p + "w2", c.w2}, {p + "b2", c.b2}};
        for (auto& ad : adapters_.at(i)) out.push_back({p + "u" + std::to_string(ad.source), ad.u});
        return out;
    }

    /// The parameter a checkpoint name refers to, searching columns and base.
    Tensor find_param(const std::string& name) {
        for (size_t i = 0; i < columns_.size(); ++i)
            for (auto& p : column_params(i))
                if (p.name == name) return p.tensor;
        for (auto& p : base_->params())
            if (p.name == name) return p.tensor;
        throw ConfigError("unknown parameter '" + name + "'");
    }

    std::map<std::string, LoraAdapter>& loras() { return loras_; }
    const std::map<std::string, LoraAdapter>& loras() const { return loras_; }
    const LoraAdapter* lora_for(const std::string& target) const {
        auto it = loras_.find(target);
        return it == loras_.end() ? nullptr : &it->second;
    }

    uint64_t seed() const { return seed_; }

private:
    std::shared_ptr<BaseModel> base_;
    uint64_t seed_;
    double alpha_ = 0.7;
    std::vector<Column> columns_;
    std::vector<std::vector<LateralAdapter>> adapters_; // adapters_[dest]
    std::map<std::string, LoraAdapter> loras_;          // keyed by target name
};

namespace detail {
/// x W plus the low-rank residual (scale/rank) (x B) A when a LoRA adapter is
/// present; the dense product B A is never materialized.
inline Tensor matmul_with_lora(const Tensor& x, const Tensor& w, const LoraAdapter* lora) {
    Tensor out = matmul(x, w);
    if (lora) {
        if (lora->b.shape()[0] != w.shape()[0] || lora->a.shape()[1] != w.shape()[1])
            throw ConfigError("lora adapter on '" + lora->target + "' does not match the target shape");
        out = add(out, scale(matmul(matmul(x, lora->b), lora->a), lora->scale / static_cast<double>(lora->rank)));
    }
    return out;
}
} // namespace detail

/// h = ReLU(x W1 + b1) for one column.
inline Tensor column_hidden(const Column& col, const Tensor& x, const LoraAdapter* lora = nullptr) {
    if (x.dims() != 2 || x.shape()[1] != col.w1.shape()[0])
        throw ConfigError("column_hidden: input width " + shape_str(x.shape()) + " does not match W1 " +
                          shape_str(col.w1.shape()));
    return relu(add_bias(detail::matmul_with_lora(x, col.w1, lora), col.b1));
}

/// logits = h W2 + b2 for one column.
inline Tensor column_logits(const Column& col, const Tensor& h, const LoraAdapter* lora = nullptr) {
    if (h.dims() != 2 || h.shape()[1] != col.w2.shape()[0])
        throw ConfigError("column_logits: hidden width " + shape_str(h.shape()) + " does not match W2 " +
                          shape_str(col.w2.shape()));
    return add_bias(detail::matmul_with_lora(h, col.w2, lora), col.b2);
}

/// H_lateral for column `dest`: sum over prior columns of U_i h_i. An empty
/// prior list (dest == 0) yields the zero matrix, for which `rows` supplies
/// the row count.
inline Tensor lateral_sum(const ProgressiveNetwork& net, size_t dest, const std::vector<Tensor>& prior_hiddens,
                          long rows) {
    const auto& ads = net.adapters(dest);
    if (prior_hiddens.size() != ads.size())
        throw ConfigError("lateral_sum: " + std::to_string(prior_hiddens.size()) + " hidden states for " +
                          std::to_string(ads.size()) + " adapters");
    if (ads.empty()) return Tensor::zeros({rows, net.d_col()});
    Tensor acc = matmul(prior_hiddens[0], ads[0].u);
    for (size_t i = 1; i < ads.size(); ++i) acc = add(acc, matmul(prior_hiddens[i], ads[i].u));
    return acc;
}

/// H_combined = H_base + H_lateral, elementwise.
inline Tensor combined_hidden(const Tensor& h_base, const Tensor& h_lateral) { return add(h_base, h_lateral); }

/// logits_final = alpha * logits_base + (1 - alpha) * logits_pnn.
inline Tensor fuse_logits(const Tensor& logits_base, const Tensor& logits_pnn, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ConfigError("fuse_logits: alpha must lie in [0, 1], got " + std::to_string(alpha));
    detail::check_same_shape("fuse_logits", logits_base, logits_pnn);
    return add(scale(logits_base, alpha), scale(logits_pnn, 1.0 - alpha));
}

/// Full fused forward for one task: base forward, then columns 0..k in
/// order (each consuming H_base plus the lateral sum of earlier hiddens),
/// then fusion of base logits with column k's logits.
inline Tensor forward_task(const ProgressiveNetwork& net, std::span<const int> tokens, int task_id) {
    const long k = net.index_of(task_id);
    if (k < 0) throw ConfigError("forward_task: unknown task " + std::to_string(task_id));
    ForwardOut base_out = net.base().forward(tokens);
    const long rows = base_out.hidden.shape()[0];
    std::vector<Tensor> hiddens;
    for (long i = 0; i <= k; ++i) {
        const std::string prefix = "pnn/col" + std::to_string(i) + "/";
        Tensor lat = lateral_sum(net, static_cast<size_t>(i), hiddens, rows);
        Tensor x = combined_hidden(base_out.hidden, lat);
        hiddens.push_back(column_hidden(net.column(static_cast<size_t>(i)), x, net.lora_for(prefix + "w1")));
    }
    const std::string kp = "pnn/col" + std::to_string(k) + "/";
    Tensor logits_pnn = column_logits(net.column(static_cast<size_t>(k)), hiddens.back(), net.lora_for(kp + "w2"));
    return fuse_logits(base_out.logits, logits_pnn, net.alpha());
}

/// Mean next-token loss of one sequence through the fused network.
inline Tensor task_sequence_loss(const ProgressiveNetwork& net, std::span<const int> ids, int task_id) {
    if (ids.size() < 2) throw ConfigError("task_sequence_loss: need at least 2 tokens");
    Tensor logits = forward_task(net, ids.subspan(0, ids.size() - 1), task_id);
    return cross_entropy_with_logits(logits, ids.subspan(1));
}

inline double task_perplexity(const ProgressiveNetwork& net, int task_id, const std::vector<std::vector<int>>& seqs) {
    return perplexity([&](std::span<const int> ids) { return forward_task(net, ids, task_id); }, seqs);
}

// ---------------------------------------------------------------------------
// Network checkpointing
// ---------------------------------------------------------------------------

inline StateDict network_state_dict(ProgressiveNetwork& net) {
    StateDict state = to_state_dict(net.base_mut().params());
    for (size_t i = 0; i < net.column_count(); ++i)
        for (auto& p : net.column_params(i)) state.emplace(p.name, p.tensor);
    state.emplace("pnn/alpha", Tensor::from({1}, {static_cast<float>(net.alpha())}));
    for (auto& [target, lora] : net.loras()) {
        state.emplace("lora/" + target + "/a", lora.a);
        state.emplace("lora/" + target + "/b", lora.b);
        state.emplace("lora/" + target + "/scale", Tensor::from({1}, {static_cast<float>(lora.scale)}));
    }
    return state;
}

inline void save_network(const std::filesystem::path& path, ProgressiveNetwork& net) {
    save_checkpoint(path, network_state_dict(net));
}

/// Rebuilds columns, adapters and LoRA attachments of `net` from a state
/// dict produced by network_state_dict. Existing columns are discarded by
/// requiring a freshly constructed network (no columns yet).
inline void load_network(ProgressiveNetwork& net, const StateDict& state) {
    if (net.column_count() != 0) throw ConfigError("load_network: expected a column-free network");
    load_into(state, net.base_mut().params());
    for (long idx = 0;; ++idx) {
        const std::string p = "pnn/col" + std::to_string(idx) + "/";
        if (!state.count(p + "w1")) break;
        net.add_column(idx); // this artifact always assigns task id == column index
        ParamSet params = net.column_params(static_cast<size_t>(idx));
        load_into(state, params);
    }
    if (auto it = state.find("pnn/alpha"); it != state.end()) net.set_alpha(it->second.values()[0]);
    for (const auto& [name, t] : state) {
        if (name.rfind("lora/", 0) != 0 || name.size() < 7) continue;
        if (name.substr(name.size() - 2) != "/a") continue;
        const std::string target = name.substr(5, name.size() - 7);
        const Tensor& a = t;
        const Tensor& b = state.at("lora/" + target + "/b");
        LoraAdapter lora;
        lora.target = target;
        lora.a = a.clone_values();
        lora.b = b.clone_values();
        lora.rank = a.shape()[0];
        if (auto sc = state.find("lora/" + target + "/scale"); sc != state.end())
            lora.scale = sc->second.values()[0];
        lora.a.set_requires_grad(true);
        lora.b.set_requires_grad(true);
        net.loras().emplace(target, std::move(lora));
    }
    // a loaded network is a completed training state: only the newest column
    // may train further
    for (size_t i = 0; i + 1 < net.column_count(); ++i) net.freeze_column(i);
}

} // namespace proglm
