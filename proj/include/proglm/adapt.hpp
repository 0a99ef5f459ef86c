// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "proglm/optim.hpp"
#include "proglm/pnn.hpp"
#include "proglm/tokenizer.hpp"

namespace proglm {

// ---------------------------------------------------------------------------
// Elastic weight consolidation
// ---------------------------------------------------------------------------

/// Diagonal Fisher estimates plus the anchor snapshot they were taken at.
/// F is kept in float64 so that estimates are insensitive to how the sample
/// sum was grouped; the anchor is a bit-exact copy of the parameter values.
struct FisherInfo {
    std::map<std::string, std::vector<double>> f;
    std::map<std::string, std::vector<float>> anchor;
    long sample_count = 0;

    bool empty() const { return f.empty(); }
    bool tracks(const std::string& name) const { return f.count(name) != 0; }
};

/// Mean over `n_samples` sequences of the squared gradient of the sequence
/// log-likelihood with respect to each tracked parameter, cycling through
/// `data` when n_samples exceeds it. Also snapshots the current parameter
/// values as the anchor.
inline FisherInfo estimate_fisher(const ProgressiveNetwork& net, ParamSet& params,
                                  const std::vector<std::vector<int>>& data, int task_id, long n_samples) {
    if (n_samples < 1) throw ConfigError("estimate_fisher: n_samples must be >= 1");
    if (data.empty()) throw ConfigError("estimate_fisher: empty data");
    if (params.empty()) throw ConfigError("estimate_fisher: no parameters to track");
    for (const auto& p : params)
        if (!p.tensor.requires_grad())
            throw ConfigError("estimate_fisher: parameter '" + p.name + "' is not trainable");

    FisherInfo out;
    for (const auto& p : params) out.f[p.name].assign(static_cast<size_t>(p.tensor.numel()), 0.0);

    zero_grads(params);
    for (long s = 0; s < n_samples; ++s) {
        const auto& seq = data[static_cast<size_t>(s) % data.size()];
        if (seq.size() < 2) throw ConfigError("estimate_fisher: sequence shorter than 2 tokens");
        // gradient of the log-likelihood: the sign flip against the summed
        // negative log-likelihood squares away
        Tensor nll = scale(task_sequence_loss(net, seq, task_id), static_cast<double>(seq.size() - 1));
        backward(nll);
        for (auto& p : params) {
            auto& acc = out.f[p.name];
            if (p.tensor.has_grad()) {
                auto g = p.tensor.grad();
                for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * g[i];
            }
            p.tensor.zero_grad();
        }
    }
    for (auto& [name, acc] : out.f)
        for (double& v : acc) v /= static_cast<double>(n_samples);
    for (const auto& p : params)
        out.anchor[p.name] = {p.tensor.values().begin(), p.tensor.values().end()};
    out.sample_count = n_samples;
    return out;
}

namespace detail {
inline void check_ewc_item(const NamedParam& item, const FisherInfo& fisher) {
    if (!fisher.tracks(item.name))
        throw ConfigError("ewc_penalty: parameter '" + item.name + "' is not tracked by the Fisher estimate");
    const auto& f = fisher.f.at(item.name);
    const auto& anchor = fisher.anchor.at(item.name);
    if (f.size() != static_cast<size_t>(item.tensor.numel()) || anchor.size() != f.size())
        throw ConfigError("ewc_penalty: size mismatch for parameter '" + item.name + "'");
}
} // namespace detail

/// (lambda/2) * sum_i F_i (theta_i - anchor_i)^2 evaluated entirely in
/// float64. This is the reference value the differentiable term must agree
/// with up to one float32 rounding of the final scalar.
inline double ewc_penalty_value(const ParamSet& items, const FisherInfo& fisher, double lambda) {
    if (lambda < 0) throw ConfigError("ewc_penalty: negative lambda");
    double acc = 0.0;
    for (const auto& item : items) {
        detail::check_ewc_item(item, fisher);
        const auto& f = fisher.f.at(item.name);
        const auto& anchor = fisher.anchor.at(item.name);
        auto v = item.tensor.values();
        for (size_t i = 0; i < f.size(); ++i) {
            const double d = static_cast<double>(v[i]) - static_cast<double>(anchor[i]);
            acc += f[i] * d * d;
        }
    }
    return 0.5 * lambda * acc;
}

/// Differentiable consolidation term over the given parameters (leaves or
/// computed effective weights). One fused graph node: the forward value is
/// the float64 penalty, the backward rule is lambda * F_i * (theta_i -
/// anchor_i) into each parent.
inline Tensor ewc_penalty(const ParamSet& items, const FisherInfo& fisher, double lambda) {
    const double value = ewc_penalty_value(items, fisher, lambda);
    std::vector<detail::NodePtr> parents;
    std::vector<std::vector<double>> pulls; // lambda * F * (theta - anchor), per item
    parents.reserve(items.size());
    pulls.reserve(items.size());
    for (const auto& item : items) {
        const auto& f = fisher.f.at(item.name);
        const auto& anchor = fisher.anchor.at(item.name);
        auto v = item.tensor.values();
        std::vector<double> pull(f.size());
        for (size_t i = 0; i < f.size(); ++i)
            pull[i] = lambda * f[i] * (static_cast<double>(v[i]) - static_cast<double>(anchor[i]));
        parents.push_back(item.tensor.handle());
        pulls.push_back(std::move(pull));
    }
    return detail::make_result({1}, {static_cast<float>(value)}, std::move(parents),
                               [pulls = std::move(pulls)](detail::Node& self) {
                                   const double g = self.grad[0];
                                   for (size_t j = 0; j < self.parents.size(); ++j) {
                                       const auto& p = self.parents[j];
                                       if (!p->requires_grad) continue;
                                       p->ensure_grad();
                                       for (size_t i = 0; i < pulls[j].size(); ++i)
                                           p->grad[i] += g * pulls[j][i];
                                   }
                               });
}

/// Persists a Fisher estimate in the checkpoint format under "fisher/".
/// Estimates round to float32 on disk; the anchor is stored bit-exactly.
inline StateDict fisher_state_dict(const FisherInfo& fisher) {
    StateDict state;
    for (const auto& [name, f] : fisher.f) {
        std::vector<float> fv(f.begin(), f.end());
        const auto& anchor = fisher.anchor.at(name);
        const long nf = static_cast<long>(fv.size());
        const long na = static_cast<long>(anchor.size());
        state.emplace("fisher/f/" + name, Tensor::from({nf}, std::move(fv)));
        state.emplace("fisher/anchor/" + name, Tensor::from({na}, {anchor.begin(), anchor.end()}));
    }
    state.emplace("fisher/sample_count", Tensor::from({1}, {static_cast<float>(fisher.sample_count)}));
    return state;
}

inline FisherInfo fisher_from_state(const StateDict& state) {
    FisherInfo out;
    for (const auto& [name, t] : state) {
        if (name.rfind("fisher/f/", 0) == 0) {
            const std::string param = name.substr(9);
            out.f[param] = {t.values().begin(), t.values().end()};
            const Tensor& a = state.at("fisher/anchor/" + param);
            out.anchor[param] = {a.values().begin(), a.values().end()};
        }
    }
    if (auto it = state.find("fisher/sample_count"); it != state.end())
        out.sample_count = static_cast<long>(it->second.values()[0]);
    return out;
}

// ---------------------------------------------------------------------------
// Low-rank adaptation
// ---------------------------------------------------------------------------

namespace detail {
/// Column index a "pnn/col{i}/..." parameter name refers to.
inline size_t lora_column_index(const std::string& target) {
    if (target.rfind("pnn/col", 0) != 0)
        throw ConfigError("lora: target '" + target + "' is not a column parameter");
    size_t pos = 7;
    size_t end = target.find('/', pos);
    if (end == std::string::npos || end == pos)
        throw ConfigError("lora: target '" + target + "' is not a column parameter");
    return static_cast<size_t>(std::stol(target.substr(pos, end - pos)));
}
} // namespace detail

/// Attaches a zero-initialized low-rank adapter to a frozen column matrix.
/// B = 0 makes the attachment exactly transparent until training moves it.
inline LoraAdapter attach_lora(ProgressiveNetwork& net, const std::string& target, long rank,
                               double scale = 1.0) {
    if (rank < 1) throw ConfigError("attach_lora: rank must be >= 1");
    if (net.lora_for(target)) throw ConfigError("attach_lora: '" + target + "' is already adapted");
    const size_t col_idx = detail::lora_column_index(target);
    if (col_idx >= net.column_count())
        throw ConfigError("attach_lora: no column for target '" + target + "'");
    if (!net.column(col_idx).frozen)
        throw ConfigError("attach_lora: column " + std::to_string(col_idx) + " is not frozen");
    Tensor w = net.find_param(target);
    if (w.dims() != 2)
        throw ConfigError("attach_lora: target '" + target + "' is not a matrix");
    const long rows = w.shape()[0];
    const long cols = w.shape()[1];
    if (rank * (rows + cols) >= rows * cols)
        throw ConfigError("attach_lora: rank " + std::to_string(rank) + " yields no parameter reduction on " +
                          shape_str(w.shape()));
    Rng rng(Rng::derive(net.seed(), fnv1a64(target.data(), target.size())));
    LoraAdapter lora;
    lora.target = target;
    lora.rank = rank;
    lora.scale = scale;
    lora.a = Tensor::normal({rank, cols}, 0.0f, 0.02f, rng, true);
    lora.b = Tensor::zeros({rows, rank}, true);
    net.loras().emplace(target, lora);
    return lora;
}

/// Named adapter parameters across every attachment, for the optimizer.
inline ParamSet lora_params(ProgressiveNetwork& net) {
    ParamSet out;
    for (auto& [target, lora] : net.loras()) {
        out.push_back({"lora/" + target + "/a", lora.a});
        out.push_back({"lora/" + target + "/b", lora.b});
    }
    return out;
}

/// Adapter parameters attached to one column's matrices only.
inline ParamSet lora_params_for_column(ProgressiveNetwork& net, size_t col_idx) {
    const std::string prefix = "pnn/col" + std::to_string(col_idx) + "/";
    ParamSet out;
    for (auto& [target, lora] : net.loras()) {
        if (target.rfind(prefix, 0) != 0) continue;
        out.push_back({"lora/" + target + "/a", lora.a});
        out.push_back({"lora/" + target + "/b", lora.b});
    }
    return out;
}

/// W plus its low-rank residual as a graph expression. Differentiable
/// through A and B; parameters without an adapter pass through unchanged.
inline Tensor effective_weight(ProgressiveNetwork& net, const std::string& name) {
    Tensor w = net.find_param(name);
    const LoraAdapter* lora = net.lora_for(name);
    if (!lora || w.dims() != 2) return w;
    return add(w, scale(matmul(lora->b, lora->a), lora->scale / static_cast<double>(lora->rank)));
}

/// Folds (scale/rank) * B A into the target weights in float64, casting once
/// per entry, then removes the adapter so the residual is not applied twice.
inline void merge_lora(ProgressiveNetwork& net, const std::string& target) {
    const LoraAdapter* lora = net.lora_for(target);
    if (!lora) throw ConfigError("merge_lora: '" + target + "' has no adapter");
    Tensor w = net.find_param(target);
    const long rows = w.shape()[0];
    const long cols = w.shape()[1];
    const double f = lora->scale / static_cast<double>(lora->rank);
    auto a = lora->a.values();
    auto b = lora->b.values();
    auto wv = w.values_mut();
    for (long i = 0; i < rows; ++i)
        for (long j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (long k = 0; k < lora->rank; ++k)
                acc += static_cast<double>(b[static_cast<size_t>(i * lora->rank + k)]) *
                       static_cast<double>(a[static_cast<size_t>(k * cols + j)]);
            const size_t at = static_cast<size_t>(i * cols + j);
            wv[at] = static_cast<float>(static_cast<double>(wv[at]) + f * acc);
        }
    net.loras().erase(target);
}

/// Removes an adapter without folding it in. Returns whether one was attached.
inline bool detach_lora(ProgressiveNetwork& net, const std::string& target) {
    return net.loras().erase(target) != 0;
}

namespace detail {

/// Maps a penalty parameter name to the tensor the penalty should bind.
/// Adapter leaves ("lora/<target>/a|b") resolve directly; anything else goes
/// through effective_weight so a penalty on a frozen matrix still reaches
/// the adapter that perturbs it.
inline Tensor resolve_penalty_item(ProgressiveNetwork& net, const std::string& name) {
    if (name.rfind("lora/", 0) == 0 && name.size() > 7) {
        const std::string target = name.substr(5, name.size() - 7);
        const char leaf = name.back();
        if ((leaf == 'a' || leaf == 'b') && name[name.size() - 2] == '/') {
            const LoraAdapter* lora = net.lora_for(target);
            if (!lora) throw ConfigError("resolve_penalty_item: '" + target + "' has no adapter");
            return leaf == 'a' ? lora->a : lora->b;
        }
    }
    return effective_weight(net, name);
}

} // namespace detail

/// Root of the summed squared distance between the current (effective)
/// values of every anchored parameter and its anchor snapshot. Measures how
/// far consolidation-bound weights have drifted.
inline double anchor_displacement(ProgressiveNetwork& net, const FisherInfo& fisher) {
    double acc = 0.0;
    for (const auto& [name, anchor] : fisher.anchor) {
        Tensor t = detail::resolve_penalty_item(net, name);
        auto v = t.values();
        if (v.size() != anchor.size())
            throw ConfigError("anchor_displacement: size mismatch on '" + name + "'");
        for (size_t i = 0; i < v.size(); ++i) {
            const double d = static_cast<double>(v[i]) - static_cast<double>(anchor[i]);
            acc += d * d;
        }
    }
    return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Experience replay
// ---------------------------------------------------------------------------

struct ReplayItem {
    int task_id = -1;
    std::vector<int> tokens;
};

/// Capacity-capped FIFO of raw token sequences; eviction is oldest-first.
class ReplayBuffer {
public:
    explicit ReplayBuffer(long capacity) : capacity_(capacity) {
        if (capacity < 1) throw ConfigError("ReplayBuffer: capacity must be >= 1");
    }

    void push(int task_id, std::vector<int> tokens) {
        if (static_cast<long>(items_.size()) == capacity_) items_.pop_front();
        items_.push_back({task_id, std::move(tokens)});
    }

    long capacity() const { return capacity_; }
    size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    const ReplayItem& item(size_t i) const { return items_.at(i); }

private:
    long capacity_;
    std::deque<ReplayItem> items_;
};

struct ReplayMixResult {
    std::vector<std::vector<int>> batch;
    long replaced = 0;
    bool buffer_empty_warning = false;
};

/// Replaces the trailing floor(fraction * batch) slots with buffer samples,
/// drawn without replacement while the buffer allows it. A positive fraction
/// against an empty buffer leaves the batch unchanged and sets the warning.
inline ReplayMixResult replay_mix(const ReplayBuffer& buffer, std::vector<std::vector<int>> task_batch,
                                  double fraction, uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0))
        throw ConfigError("replay_mix: fraction must lie in [0, 1], got " + std::to_string(fraction));
    ReplayMixResult out;
    const long n = static_cast<long>(task_batch.size());
    const long k = static_cast<long>(std::floor(fraction * static_cast<double>(n)));
    out.batch = std::move(task_batch);
    if (k == 0) return out;
    if (buffer.empty()) {
        out.buffer_empty_warning = true;
        return out;
    }
    Rng rng(seed);
    const long avail = static_cast<long>(buffer.size());
    std::vector<size_t> picks;
    if (avail >= k) {
        std::vector<size_t> idx(static_cast<size_t>(avail));
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (long i = 0; i < k; ++i) {
            const size_t j = static_cast<size_t>(i + rng.below(avail - i));
            std::swap(idx[static_cast<size_t>(i)], idx[j]);
            picks.push_back(idx[static_cast<size_t>(i)]);
        }
    } else {
        for (long i = 0; i < k; ++i) picks.push_back(static_cast<size_t>(rng.below(avail)));
    }
    for (long t = 0; t < k; ++t)
        out.batch[static_cast<size_t>(n - k + t)] = buffer.item(picks[static_cast<size_t>(t)]).tokens;
    out.replaced = k;
    return out;
}

// ---------------------------------------------------------------------------
// First-order meta-learning
// ---------------------------------------------------------------------------

struct MetaAdaptResult {
    StateDict adapted;                 // parameter values after the inner loop
    std::vector<double> support_losses; // loss at the start of each inner step
};

namespace detail {
inline ParamSet newest_trainable_params(ProgressiveNetwork& net) {
    if (net.column_count() == 0) throw ConfigError("meta: network has no columns");
    ParamSet all = net.column_params(net.column_count() - 1);
    ParamSet out;
    for (auto& p : all)
        if (p.tensor.requires_grad()) out.push_back(p);
    if (out.empty()) throw ConfigError("meta: the active column is frozen");
    return out;
}
} // namespace detail

/// Runs `inner_steps` full-batch gradient-descent steps on the support-set
/// loss of the newest column and returns the adapted values, restoring the
/// network to its pre-call state bit-exactly.
inline MetaAdaptResult meta_adapt(ProgressiveNetwork& net, const std::vector<std::vector<int>>& support,
                                  long inner_steps, double inner_lr) {
    if (support.empty()) throw ConfigError("meta_adapt: empty support set");
    if (inner_steps < 0) throw ConfigError("meta_adapt: negative inner_steps");
    if (inner_lr <= 0) throw ConfigError("meta_adapt: inner_lr must be positive");
    ParamSet params = detail::newest_trainable_params(net);
    const int task_id = net.column(net.column_count() - 1).task_id;

    std::vector<std::vector<float>> saved;
    saved.reserve(params.size());
    for (auto& p : params) saved.emplace_back(p.tensor.values().begin(), p.tensor.values().end());

    MetaAdaptResult out;
    zero_grads(params);
    for (long step = 0; step < inner_steps; ++step) {
        Tensor loss;
        for (const auto& seq : support) {
            Tensor l = task_sequence_loss(net, seq, task_id);
            loss = loss.valid() ? add(loss, l) : l;
        }
        loss = scale(loss, 1.0 / static_cast<double>(support.size()));
        out.support_losses.push_back(static_cast<double>(loss.scalar_value()));
        backward(loss);
        sgd_step(params, inner_lr);
    }
    for (auto& p : params) out.adapted.emplace(p.name, p.tensor.clone_values());

    for (size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].tensor.values_mut();
        std::copy(saved[i].begin(), saved[i].end(), w.begin());
        params[i].tensor.zero_grad();
    }
    return out;
}

/// First-order outer update: theta += outer_lr * mean_j(theta'_j - theta),
/// mutating the newest column's initialization in place.
inline void meta_outer_step(ProgressiveNetwork& net, const std::vector<StateDict>& snapshots, double outer_lr) {
    if (snapshots.empty()) throw ConfigError("meta_outer_step: need at least one snapshot");
    if (outer_lr < 0) throw ConfigError("meta_outer_step: negative outer_lr");
    ParamSet params = detail::newest_trainable_params(net);
    for (auto& p : params) {
        auto w = p.tensor.values_mut();
        for (size_t i = 0; i < w.size(); ++i) {
            double mean_delta = 0.0;
            for (const auto& snap : snapshots) {
                auto it = snap.find(p.name);
                if (it == snap.end())
                    throw ConfigError("meta_outer_step: snapshot is missing parameter '" + p.name + "'");
                if (it->second.shape() != p.tensor.shape())
                    throw ConfigError("meta_outer_step: shape mismatch for parameter '" + p.name + "'");
                mean_delta += static_cast<double>(it->second.values()[i]) - static_cast<double>(w[i]);
            }
            mean_delta /= static_cast<double>(snapshots.size());
            w[i] = static_cast<float>(static_cast<double>(w[i]) + outer_lr * mean_delta);
        }
    }
}

// ---------------------------------------------------------------------------
// Task training
// ---------------------------------------------------------------------------

struct TrainConfig {
    long micro_batch = 64;
    long accumulation_steps = 4;
    long epochs = 1;
    double base_lr = 1e-4;
    double ewc_lambda = 100.0;
    double replay_fraction = 0.2;
    long lora_rank = 4;
    double lora_scale = 1.0;
    long meta_inner_steps = 5;
    double meta_inner_lr = 1e-3;
    double meta_outer_lr = 0.5;
    long meta_episodes = 3;
    long meta_support = 8;
    long replay_push = 64;
    long fisher_samples = 64;
    uint64_t seed = 0;

    void validate() const {
        if (micro_batch < 1 || accumulation_steps < 1 || epochs < 1)
            throw ConfigError("TrainConfig: batch, accumulation and epoch counts must be >= 1");
        if (base_lr <= 0 || meta_inner_lr <= 0) throw ConfigError("TrainConfig: learning rates must be positive");
        if (meta_outer_lr < 0 || ewc_lambda < 0) throw ConfigError("TrainConfig: rates must be non-negative");
        if (!(replay_fraction >= 0.0 && replay_fraction <= 1.0))
            throw ConfigError("TrainConfig: replay_fraction must lie in [0, 1]");
        if (lora_rank < 1 || meta_inner_steps < 0 || meta_episodes < 1 || meta_support < 1)
            throw ConfigError("TrainConfig: meta/LoRA counts out of range");
        if (replay_push < 0 || fisher_samples < 1) throw ConfigError("TrainConfig: sample counts out of range");
    }
};

struct TaskReport {
    double final_loss = 0.0;
    double heldout_perplexity = 0.0;
    double wall_seconds = 0.0;
    long optimizer_steps = 0;
    bool ewc_applied = false;
    bool replay_warning = false;
    std::vector<std::string> updated_params;
};

/// One epoch (by default) of next-token training on `corpus.train` for one
/// task. Trains the newest column directly, or the LoRA adapters when the
/// column is frozen. Mixes replayed sequences into each micro-batch, adds
/// the consolidation penalty when a Fisher estimate is supplied, and pushes
/// a sample of the task's sequences into the buffer afterwards.
inline TaskReport train_task(ProgressiveNetwork& net, int task_id, const TokenCorpus& corpus,
                             const TrainConfig& cfg, const FisherInfo* fisher = nullptr,
                             ReplayBuffer* buffer = nullptr) {
    cfg.validate();
    const long idx = net.index_of(task_id);
    if (idx < 0) throw ConfigError("train_task: unknown task " + std::to_string(task_id));
    if (corpus.train.empty()) throw ConfigError("train_task: empty training corpus");

    const bool newest = static_cast<size_t>(idx) + 1 == net.column_count();
    ParamSet params;
    if (newest && !net.column(static_cast<size_t>(idx)).frozen) {
        for (auto& p : net.column_params(static_cast<size_t>(idx)))
            if (p.tensor.requires_grad()) params.push_back(p);
    } else {
        params = lora_params_for_column(net, static_cast<size_t>(idx));
        if (params.empty())
            throw ConfigError("train_task: column " + std::to_string(idx) +
                              " is frozen and has no adapters attached");
    }

    // the penalty binds to effective weights so its gradient reaches adapters
    ParamSet penalized;
    if (fisher && !fisher->empty()) {
        for (const auto& [name, f] : fisher->f) penalized.push_back({name, Tensor()});
    }

    const auto t0 = std::chrono::steady_clock::now();
    AdamWConfig ocfg;
    ocfg.base_lr = cfg.base_lr;
    const long n_train = static_cast<long>(corpus.train.size());
    const long micros_per_epoch = (n_train + cfg.micro_batch - 1) / cfg.micro_batch;
    const long steps_per_epoch = (micros_per_epoch + cfg.accumulation_steps - 1) / cfg.accumulation_steps;
    ocfg.total_steps = steps_per_epoch * cfg.epochs;
    AdamW opt(ocfg);

    TaskReport report;
    std::vector<size_t> order(static_cast<size_t>(n_train));
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    long micro_index = 0;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(Rng::derive(cfg.seed, 1 + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (long start = 0; start < n_train; start += cfg.micro_batch * cfg.accumulation_steps) {
            const long group_end = std::min(n_train, start + cfg.micro_batch * cfg.accumulation_steps);
            const long micro_count = (group_end - start + cfg.micro_batch - 1) / cfg.micro_batch;
            double group_loss = 0.0;
            for (long ms = start; ms < group_end; ms += cfg.micro_batch) {
                const long me = std::min(group_end, ms + cfg.micro_batch);
                std::vector<std::vector<int>> batch;
                batch.reserve(static_cast<size_t>(me - ms));
                for (long i = ms; i < me; ++i) batch.push_back(corpus.train[order[static_cast<size_t>(i)]]);
                if (buffer && cfg.replay_fraction > 0.0) {
                    auto mixed = replay_mix(*buffer, std::move(batch), cfg.replay_fraction,
                                            Rng::derive(cfg.seed, 0x300 + static_cast<uint64_t>(micro_index)));
                    report.replay_warning = report.replay_warning || mixed.buffer_empty_warning;
                    batch = std::move(mixed.batch);
                }
                Tensor loss;
                for (const auto& seq : batch) {
                    Tensor l = task_sequence_loss(net, seq, task_id);
                    loss = loss.valid() ? add(loss, l) : l;
                }
                loss = scale(loss, 1.0 / static_cast<double>(batch.size()));
                if (!penalized.empty()) {
                    for (auto& item : penalized) item.tensor = detail::resolve_penalty_item(net, item.name);
                    loss = add(loss, ewc_penalty(penalized, *fisher, cfg.ewc_lambda));
                    report.ewc_applied = true;
                }
                group_loss += static_cast<double>(loss.scalar_value());
                backward(scale(loss, 1.0 / static_cast<double>(micro_count)));
                ++micro_index;
            }
            opt.step(params);
            report.final_loss = group_loss / static_cast<double>(micro_count);
        }
    }
    report.optimizer_steps = opt.steps_taken();

    if (buffer && cfg.replay_push > 0) {
        const long push = std::min<long>(cfg.replay_push, n_train);
        std::vector<size_t> pick(static_cast<size_t>(n_train));
        for (size_t i = 0; i < pick.size(); ++i) pick[i] = i;
        Rng push_rng(Rng::derive(cfg.seed, 2));
        for (long i = 0; i < push; ++i) {
            const size_t j = static_cast<size_t>(i + push_rng.below(n_train - i));
            std::swap(pick[static_cast<size_t>(i)], pick[j]);
            buffer->push(task_id, corpus.train[pick[static_cast<size_t>(i)]]);
        }
    }

    const auto& eval_set = corpus.heldout.empty() ? corpus.train : corpus.heldout;
    report.heldout_perplexity = task_perplexity(net, task_id, eval_set);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& p : params) report.updated_params.push_back(p.name);
    return report;
}

} // namespace proglm
