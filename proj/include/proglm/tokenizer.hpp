// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "proglm/common.hpp"

namespace proglm {

/// Byte-level tokenizer. Ids 0..255 are raw bytes; three specials follow.
/// The vocabulary size is fixed at 259.
class ByteTokenizer {
public:
    static constexpr int kVocab = 259;
    static constexpr int kPad = 256;
    static constexpr int kBos = 257;
    static constexpr int kEos = 258;

    explicit ByteTokenizer(long max_seq_len = 128) : max_seq_len_(max_seq_len) {
        if (max_seq_len_ < 3) throw ConfigError("ByteTokenizer: max_seq_len must allow BOS, one byte and EOS");
    }

    long max_seq_len() const { return max_seq_len_; }

    /// BOS + bytes + EOS, truncated to max_seq_len. Truncation drops trailing
    /// bytes but always keeps the final EOS.
    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(std::min<size_t>(text.size() + 2, static_cast<size_t>(max_seq_len_)));
        ids.push_back(kBos);
        const size_t body = std::min(text.size(), static_cast<size_t>(max_seq_len_ - 2));
        for (size_t i = 0; i < body; ++i) ids.push_back(static_cast<unsigned char>(text[i]));
        ids.push_back(kEos);
        return ids;
    }

    /// Inverse of tokenize on the byte range; special ids are skipped.
    std::string detokenize(std::span<const int> ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) {
            if (id < 0 || id >= kVocab) throw ConfigError("detokenize: id " + std::to_string(id) + " out of range");
            if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
        return out;
    }

private:
    long max_seq_len_;
};

/// Token sequences split into a training part and a held-out part.
struct TokenCorpus {
    std::vector<std::vector<int>> train;
    std::vector<std::vector<int>> heldout;
};

} // namespace proglm
