// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "proglm/eval.hpp"

namespace proglm {

namespace detail {

inline std::map<std::vector<int>, long> ngram_counts(const std::vector<int>& seq, int n) {
    std::map<std::vector<int>, long> counts;
    if (static_cast<int>(seq.size()) < n) return counts;
    for (size_t i = 0; i + static_cast<size_t>(n) <= seq.size(); ++i)
        ++counts[std::vector<int>(seq.begin() + static_cast<long>(i), seq.begin() + static_cast<long>(i) + n)];
    return counts;
}

} // namespace detail

/// BLEU-4: geometric mean of clipped n-gram precisions (n = 1..4) times the
/// brevity penalty. Zero-count precisions for n >= 2 get add-1 smoothing;
/// a zero unigram overlap or empty hypothesis scores 0.
inline double bleu4(const std::vector<int>& hypothesis, const std::vector<std::vector<int>>& references) {
    if (references.empty()) throw ConfigError("bleu4: need at least one reference");
    if (hypothesis.empty()) return 0.0;

    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        const long total = std::max<long>(0, static_cast<long>(hypothesis.size()) - n + 1);
        auto hyp_counts = detail::ngram_counts(hypothesis, n);
        long clipped = 0;
        for (const auto& [gram, count] : hyp_counts) {
            long best = 0;
            for (const auto& ref : references) {
                auto rc = detail::ngram_counts(ref, n);
                auto it = rc.find(gram);
                if (it != rc.end()) best = std::max(best, it->second);
            }
            clipped += std::min(count, best);
        }
        double p;
        if (clipped > 0) {
            p = static_cast<double>(clipped) / static_cast<double>(total);
        } else if (n >= 2) {
            p = 1.0 / static_cast<double>(total + 1);
        } else {
            return 0.0;
        }
        log_sum += std::log(p) / 4.0;
    }

    // brevity against the closest reference length, ties broken downward
    const long c = static_cast<long>(hypothesis.size());
    long r = static_cast<long>(references[0].size());
    for (const auto& ref : references) {
        const long len = static_cast<long>(ref.size());
        if (std::labs(len - c) < std::labs(r - c) || (std::labs(len - c) == std::labs(r - c) && len < r)) r = len;
    }
    const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
    return bp * std::exp(log_sum);
}

/// Fraction of teacher-forced greedy next-token predictions that equal the
/// ground truth, pooled over every sequence position.
inline double code_accuracy(const LogitsFn& fn, const std::vector<std::vector<int>>& seqs) {
    if (seqs.empty()) throw ConfigError("code_accuracy: empty corpus");
    long hits = 0;
    long positions = 0;
    for (const auto& seq : seqs) {
        if (seq.size() < 2) continue;
        Tensor logits = fn(std::span<const int>(seq.data(), seq.size() - 1));
        const long rows = logits.rows();
        const long v = logits.cols();
        auto lv = logits.values();
        for (long t = 0; t < rows; ++t) {
            long best = 0;
            for (long j = 1; j < v; ++j)
                if (lv[static_cast<size_t>(t * v + j)] > lv[static_cast<size_t>(t * v + best)]) best = j;
            if (best == seq[static_cast<size_t>(t) + 1]) ++hits;
            ++positions;
        }
    }
    if (positions == 0) throw ConfigError("code_accuracy: no scorable positions");
    return static_cast<double>(hits) / static_cast<double>(positions);
}

} // namespace proglm
