// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "proglm/tensor.hpp"
#include "proglm/tokenizer.hpp"

namespace proglm {

/// Maps a token prefix to next-token logits (seq_len x vocab). Both the bare
/// base model and the fused progressive network are exposed through this.
using LogitsFn = std::function<Tensor(std::span<const int>)>;

/// Softmax of one logit row computed entirely in float64.
inline std::vector<double> softmax_double(std::span<const float> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax_double: empty input");
    double mx = logits[0];
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    double denom = 0.0;
    std::vector<double> out(logits.size());
    for (size_t j = 0; j < logits.size(); ++j) {
        out[j] = std::exp(static_cast<double>(logits[j]) - mx);
        denom += out[j];
    }
    for (double& v : out) v /= denom;
    return out;
}

/// Sum of next-token negative log-likelihoods for one sequence, in float64.
/// Row i of `logits` scores targets[i].
inline double nll_sum(const Tensor& logits, std::span<const int> targets) {
    const long r = logits.rows(), c = logits.cols();
    if (static_cast<long>(targets.size()) != r)
        throw std::invalid_argument("nll_sum: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(r) + " rows");
    double total = 0.0;
    for (long i = 0; i < r; ++i) {
        const float* x = logits.values().data() + i * c;
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= c) throw std::invalid_argument("nll_sum: target out of range");
        double mx = x[0];
        for (long j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(x[j]));
        double denom = 0.0;
        for (long j = 0; j < c; ++j) denom += std::exp(static_cast<double>(x[j]) - mx);
        total += mx + std::log(denom) - static_cast<double>(x[t]);
    }
    return total;
}

/// exp of the mean next-token negative log-likelihood over all predicted
/// tokens of all sequences. Sequences shorter than 2 tokens are skipped.
inline double perplexity(const LogitsFn& fn, const std::vector<std::vector<int>>& seqs) {
    double total = 0.0;
    long count = 0;
    for (const auto& ids : seqs) {
        if (ids.size() < 2) continue;
        std::span<const int> s(ids);
        Tensor logits = fn(s.subspan(0, ids.size() - 1));
        total += nll_sum(logits, s.subspan(1));
        count += static_cast<long>(ids.size()) - 1;
    }
    if (count == 0) throw std::invalid_argument("perplexity: no scorable tokens");
    return std::exp(total / static_cast<double>(count));
}

/// Greedy continuation of a byte prompt. Ties in the argmax resolve to the
/// lowest token id. Generation stops at EOS, at `max_new_tokens`, or when the
/// context window is full. Returns only the newly generated bytes.
inline std::string generate_greedy(const LogitsFn& fn, const ByteTokenizer& tok, const std::string& prompt,
                                   long max_new_tokens = 64) {
    if (max_new_tokens < 0) throw std::invalid_argument("generate_greedy: negative max_new_tokens");
    std::vector<int> ids = tok.tokenize(prompt);
    ids.pop_back(); // continue the sequence instead of closing it
    std::vector<int> fresh;
    while (static_cast<long>(fresh.size()) < max_new_tokens &&
           static_cast<long>(ids.size()) < tok.max_seq_len()) {
        Tensor logits = fn(ids);
        const long c = logits.cols();
        const float* row = logits.values().data() + (logits.rows() - 1) * c;
        int best = 0;
        for (long j = 1; j < c; ++j)
            if (row[j] > row[best]) best = static_cast<int>(j);
        if (best == ByteTokenizer::kEos) break;
        ids.push_back(best);
        fresh.push_back(best);
    }
    return tok.detokenize(fresh);
}

} // namespace proglm
