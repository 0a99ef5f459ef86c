// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "proglm/eval.hpp"
#include "proglm/optim.hpp"
#include "proglm/tensor.hpp"
#include "proglm/tokenizer.hpp"

namespace proglm {

struct ModelConfig {
    long d_model = 64;
    long n_layers = 2;
    long n_heads = 4;
    long ffn_mult = 4;
    long max_seq_len = 128;
    long vocab = ByteTokenizer::kVocab;

    void validate() const {
        if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || ffn_mult <= 0 || max_seq_len < 3 || vocab <= 0)
            throw ConfigError("ModelConfig: all extents must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("ModelConfig: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
    }
};

/// Hidden states and logits for one token sequence.
struct ForwardOut {
    Tensor hidden; // seq_len x d_model, final normalized hidden states
    Tensor logits; // seq_len x vocab
};

/// Decoder-only pre-norm transformer over the byte vocabulary.
///
/// The layout per layer is: x += attn(ln1(x)); x += ffn(ln2(x)); with a final
/// layer norm before the untied output head. Positional embeddings are
/// learned. All parameters carry stable "base/..." names.
class BaseModel {
public:
    explicit BaseModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const long d = cfg_.d_model;
        const float std0 = 0.02f;
        auto weight = [&](Shape s) { return Tensor::normal(std::move(s), 0.0f, std0, rng, true); };
        auto zero = [&](Shape s) { return Tensor::zeros(std::move(s), true); };
        auto one = [&](long n) { return Tensor::full({n}, 1.0f, true); };

        push("base/tok_emb", weight({cfg_.vocab, d}));
        push("base/pos_emb", weight({cfg_.max_seq_len, d}));
        for (long l = 0; l < cfg_.n_layers; ++l) {
            const std::string p = "base/l" + std::to_string(l) + "/";
            push(p + "ln1/g", one(d));
            push(p + "ln1/b", zero({d}));
            push(p + "attn/wq", weight({d, d}));
            push(p + "attn/bq", zero({d}));
            push(p + "attn/wk", weight({d, d}));
            push(p + "attn/bk", zero({d}));
            push(p + "attn/wv", weight({d, d}));
            push(p + "attn/bv", zero({d}));
            push(p + "attn/wo", weight({d, d}));
            push(p + "attn/bo", zero({d}));
            push(p + "ln2/g", one(d));
            push(p + "ln2/b", zero({d}));
            push(p + "ffn/w1", weight({d, d * cfg_.ffn_mult}));
            push(p + "ffn/b1", zero({d * cfg_.ffn_mult}));
            push(p + "ffn/w2", weight({d * cfg_.ffn_mult, d}));
            push(p + "ffn/b2", zero({d}));
        }
        push("base/ln_f/g", one(d));
        push("base/ln_f/b", zero({d}));
        push("base/head/w", weight({d, cfg_.vocab}));
    }

    const ModelConfig& config() const { return cfg_; }

    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    const Tensor& param(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw ConfigError("BaseModel: unknown parameter '" + name + "'");
    }

    long param_count() const {
        long n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    /// Permanently stop gradient flow into the base parameters.
    void freeze() {
        for (auto& p : params_) p.tensor.set_requires_grad(false);
        frozen_ = true;
    }
    bool is_frozen() const { return frozen_; }

    ForwardOut forward(std::span<const int> ids) const {
        const long n = static_cast<long>(ids.size());
        if (n < 1 || n > cfg_.max_seq_len)
            throw ConfigError("forward: sequence length " + std::to_string(n) + " outside [1, " +
                              std::to_string(cfg_.max_seq_len) + "]");
        std::vector<int> pos(static_cast<size_t>(n));
        for (long i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = static_cast<int>(i);
        Tensor x = embedding_rows(param("base/tok_emb"), ids) + embedding_rows(param("base/pos_emb"), pos);

        const long d = cfg_.d_model;
        const long dh = d / cfg_.n_heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        for (long l = 0; l < cfg_.n_layers; ++l) {
            const std::string p = "base/l" + std::to_string(l) + "/";
            Tensor h1 = layer_norm(x, param(p + "ln1/g"), param(p + "ln1/b"));
            Tensor q = linear(h1, param(p + "attn/wq"), param(p + "attn/bq"));
            Tensor k = linear(h1, param(p + "attn/wk"), param(p + "attn/bk"));
            Tensor v = linear(h1, param(p + "attn/wv"), param(p + "attn/bv"));
            std::vector<Tensor> heads;
            heads.reserve(static_cast<size_t>(cfg_.n_heads));
            for (long h = 0; h < cfg_.n_heads; ++h) {
                Tensor qh = slice_cols(q, h * dh, dh);
                Tensor kh = slice_cols(k, h * dh, dh);
                Tensor vh = slice_cols(v, h * dh, dh);
                Tensor att = causal_softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
                heads.push_back(matmul(att, vh));
            }
            x = x + linear(concat_cols(heads), param(p + "attn/wo"), param(p + "attn/bo"));
            Tensor h2 = layer_norm(x, param(p + "ln2/g"), param(p + "ln2/b"));
            Tensor f1 = relu(linear(h2, param(p + "ffn/w1"), param(p + "ffn/b1")));
            x = x + linear(f1, param(p + "ffn/w2"), param(p + "ffn/b2"));
        }
        Tensor hidden = layer_norm(x, param("base/ln_f/g"), param("base/ln_f/b"));
        Tensor logits = matmul(hidden, param("base/head/w"));
        return {hidden, logits};
    }

    /// Next-token loss for one sequence: positions 0..n-2 predict 1..n-1.
    Tensor sequence_loss(std::span<const int> ids) const {
        if (ids.size() < 2) throw ConfigError("sequence_loss: need at least 2 tokens");
        ForwardOut out = forward(ids.subspan(0, ids.size() - 1));
        return cross_entropy_with_logits(out.logits, ids.subspan(1));
    }

private:
    void push(std::string name, Tensor t) { params_.push_back({std::move(name), std::move(t)}); }

    ModelConfig cfg_;
    ParamSet params_;
    bool frozen_ = false;
};

struct PretrainOptions {
    long epochs = 1;
    long micro_batch = 64;
    long accumulation = 4;
    double base_lr = 1e-4;
    uint64_t seed = 0x5EEDu;
};

struct PretrainReport {
    long optimizer_steps = 0;
    double final_loss = 0.0;      // last optimizer group's mean loss
    double heldout_perplexity = 0.0;
};

inline double corpus_perplexity(const BaseModel& model, const std::vector<std::vector<int>>& seqs) {
    return perplexity([&](std::span<const int> ids) { return model.forward(ids).logits; }, seqs);
}

/// Train the base model on the general corpus with AdamW, cosine annealing
/// and micro-batch gradient accumulation. Each micro-batch loss is scaled by
/// the reciprocal group size before backward, so one optimizer step sees the
/// mean loss over the whole accumulation group.
inline PretrainReport pretrain(BaseModel& model, const TokenCorpus& corpus, const PretrainOptions& opt) {
    if (model.is_frozen()) throw ConfigError("pretrain: model is frozen");
    if (corpus.train.empty()) throw ConfigError("pretrain: empty training corpus");
    if (opt.epochs <= 0 || opt.micro_batch <= 0 || opt.accumulation <= 0)
        throw ConfigError("pretrain: epochs, micro_batch and accumulation must be positive");

    const long n_seq = static_cast<long>(corpus.train.size());
    const long group = opt.micro_batch * opt.accumulation;
    const long steps_per_epoch = (n_seq + group - 1) / group;
    AdamWConfig acfg;
    acfg.base_lr = opt.base_lr;
    acfg.total_steps = steps_per_epoch * opt.epochs;
    AdamW adam(acfg);

    Rng rng(Rng::derive(opt.seed, /*stream*/ 1));
    std::vector<long> order(static_cast<size_t>(n_seq));
    PretrainReport report;
    for (long e = 0; e < opt.epochs; ++e) {
        for (long i = 0; i < n_seq; ++i) order[static_cast<size_t>(i)] = i;
        rng.shuffle(order);
        long pos = 0;
        while (pos < n_seq) {
            const long group_end = std::min(pos + group, n_seq);
            const long micro_count = (group_end - pos + opt.micro_batch - 1) / opt.micro_batch;
            double group_loss = 0.0;
            while (pos < group_end) {
                const long mb_end = std::min(pos + opt.micro_batch, group_end);
                std::vector<Tensor> losses;
                for (long i = pos; i < mb_end; ++i)
                    losses.push_back(model.sequence_loss(corpus.train[static_cast<size_t>(order[static_cast<size_t>(i)])]));
                Tensor mb_loss = losses.front();
                for (size_t i = 1; i < losses.size(); ++i) mb_loss = mb_loss + losses[i];
                mb_loss = scale(mb_loss, 1.0 / static_cast<double>(losses.size()));
                group_loss += static_cast<double>(mb_loss.scalar_value()) / static_cast<double>(micro_count);
                backward(scale(mb_loss, 1.0 / static_cast<double>(micro_count)));
                pos = mb_end;
            }
            adam.step(model.params());
            ++report.optimizer_steps;
            report.final_loss = group_loss;
        }
    }
    report.heldout_perplexity = corpus_perplexity(model, corpus.heldout.empty() ? corpus.train : corpus.heldout);
    return report;
}

} // namespace proglm
