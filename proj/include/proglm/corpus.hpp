// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "proglm/common.hpp"
#include "proglm/records.hpp"
#include "proglm/tokenizer.hpp"

namespace proglm {

/// Splits one record into BOS/EOS-framed token windows. Windows tile the
/// byte stream without overlap; a record shorter than one window yields
/// exactly one chunk.
inline std::vector<std::vector<int>> chunk_record(const std::string& text, long seq_len) {
    if (seq_len < 3) throw ConfigError("chunk_record: seq_len must be >= 3");
    const long body = seq_len - 2;
    std::vector<std::vector<int>> chunks;
    size_t pos = 0;
    do {
        const size_t take = std::min(static_cast<size_t>(body), text.size() - pos);
        std::vector<int> ids;
        ids.reserve(take + 2);
        ids.push_back(ByteTokenizer::kBos);
        for (size_t i = 0; i < take; ++i) ids.push_back(static_cast<unsigned char>(text[pos + i]));
        ids.push_back(ByteTokenizer::kEos);
        chunks.push_back(std::move(ids));
        pos += take;
    } while (pos < text.size());
    return chunks;
}

/// Token windows plus the record texts they came from, split into train and
/// held-out parts by record id.
struct TaskCorpus {
    TokenCorpus tokens;
    std::vector<std::string> train_texts;
    std::vector<std::string> heldout_texts;
    long record_count = 0;
};

/// Builds the training corpus for one tag: the last 10% of records by id
/// (at least one) are held out, the rest train. `fence_id` limits the view
/// to records appended up to that id, so a corpus built mid-collection is a
/// stable snapshot.
inline TaskCorpus build_task_corpus(const RecordStore& store, const std::string& task_tag, long seq_len,
                                    long fence_id = -1) {
    const std::vector<Record> records = store.records_for_tag(task_tag, fence_id);
    const long n = static_cast<long>(records.size());
    if (n < 10)
        throw ConfigError("build_task_corpus: tag '" + task_tag + "' has " + std::to_string(n) +
                          " records, need at least 10");
    const long heldout_count = std::max<long>(1, n / 10);
    TaskCorpus corpus;
    corpus.record_count = n;
    for (long i = 0; i < n; ++i) {
        const bool heldout = i >= n - heldout_count;
        auto chunks = chunk_record(records[i].text, seq_len);
        auto& dest = heldout ? corpus.tokens.heldout : corpus.tokens.train;
        for (auto& chunk : chunks) dest.push_back(std::move(chunk));
        (heldout ? corpus.heldout_texts : corpus.train_texts).push_back(records[i].text);
    }
    return corpus;
}

/// All records regardless of tag, chunked with no held-out split. Used for
/// base model pretraining.
inline std::vector<std::vector<int>> build_general_corpus(const RecordStore& store, long seq_len) {
    std::vector<std::vector<int>> out;
    for (const auto& r : store.records()) {
        auto chunks = chunk_record(r.text, seq_len);
        for (auto& chunk : chunks) out.push_back(std::move(chunk));
    }
    return out;
}

/// Order-sensitive hash over every token of a corpus, train part then
/// held-out part. Frozen goldens compare against this.
inline unsigned long long corpus_hash(const TaskCorpus& corpus) {
    unsigned long long h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const std::vector<std::vector<int>>& seqs) {
        for (const auto& seq : seqs) {
            const long n = static_cast<long>(seq.size());
            h = fnv1a64(&n, sizeof(n), h);
            h = fnv1a64(seq.data(), seq.size() * sizeof(int), h);
        }
    };
    mix(corpus.tokens.train);
    mix(corpus.tokens.heldout);
    return h;
}

} // namespace proglm
