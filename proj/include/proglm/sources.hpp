// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "proglm/common.hpp"
#include "proglm/records.hpp"

namespace proglm {

/// Which task metric applies to a tag's evaluation rows.
enum class MetricKind { bleu, code_accuracy };

inline std::string metric_name(MetricKind kind) {
    return kind == MetricKind::bleu ? "bleu" : "code_accuracy";
}

inline MetricKind metric_from_name(const std::string& name) {
    if (name == "bleu") return MetricKind::bleu;
    if (name == "code_accuracy") return MetricKind::code_accuracy;
    throw ConfigError("unknown metric kind '" + name + "'");
}

/// One raw document before cleaning and storage.
struct RawRecord {
    std::string source_uri;
    std::string text;
};

/// A pull-based document source. fetch_next yields zero or one record per
/// call and must be deterministic for a fixed construction seed.
class DataSource {
public:
    virtual ~DataSource() = default;
    virtual std::string name() const = 0;
    virtual std::string task_tag() const = 0;
    virtual MetricKind metric() const = 0;
    virtual bool exhausted() const = 0;
    virtual std::optional<RawRecord> fetch_next() = 0;
};

/// Seeded question/answer generator over a small fixed fact table. Each
/// record holds one exchange.
class SyntheticDialogSource : public DataSource {
public:
    SyntheticDialogSource(unsigned long long seed, long total, std::string tag = "dialog")
        : seed_(seed), total_(total), tag_(std::move(tag)), rng_(Rng::derive(seed, 0xD1A106)) {
        if (total_ < 0) throw ConfigError("SyntheticDialogSource: total must be >= 0");
    }

    std::string name() const override { return "synthetic-dialog"; }
    std::string task_tag() const override { return tag_; }
    MetricKind metric() const override { return MetricKind::bleu; }
    bool exhausted() const override { return emitted_ >= total_; }

    std::optional<RawRecord> fetch_next() override {
        if (exhausted()) return std::nullopt;
        static const std::pair<const char*, const char*> facts[] = {
            {"the sky", "blue"},  {"the sea", "deep"},  {"a cat", "soft"},   {"a dog", "loyal"},
            {"the sun", "bright"}, {"a tree", "tall"},  {"the moon", "pale"}, {"a bird", "quick"},
        };
        const auto& [subject, attribute] = facts[rng_.below(8)];
        const long form = rng_.below(3);
        std::string text;
        if (form == 0)
            text = std::string("Q: what is ") + subject + " like? A: " + subject + " is " + attribute + ".";
        else if (form == 1)
            text = std::string("Q: is ") + subject + " " + attribute + "? A: yes, " + subject + " is " +
                   attribute + ".";
        else
            text = std::string("Q: tell me about ") + subject + ". A: " + subject + " is " + attribute + ".";
        RawRecord r;
        r.source_uri = "synthetic://dialog/" + std::to_string(seed_) + "/" + std::to_string(emitted_);
        r.text = std::move(text);
        ++emitted_;
        return r;
    }

private:
    unsigned long long seed_;
    long total_;
    std::string tag_;
    Rng rng_;
    long emitted_ = 0;
};

/// Seeded toy-assignment generator: two statements of arithmetic over
/// single-letter variables per record.
class SyntheticCodeSource : public DataSource {
public:
    SyntheticCodeSource(unsigned long long seed, long total, std::string tag = "code")
        : seed_(seed), total_(total), tag_(std::move(tag)), rng_(Rng::derive(seed, 0xC0DE)) {
        if (total_ < 0) throw ConfigError("SyntheticCodeSource: total must be >= 0");
    }

    std::string name() const override { return "synthetic-code"; }
    std::string task_tag() const override { return tag_; }
    MetricKind metric() const override { return MetricKind::code_accuracy; }
    bool exhausted() const override { return emitted_ >= total_; }

    std::optional<RawRecord> fetch_next() override {
        if (exhausted()) return std::nullopt;
        std::string text = statement(0) + " " + statement(1);
        RawRecord r;
        r.source_uri = "synthetic://code/" + std::to_string(seed_) + "/" + std::to_string(emitted_);
        r.text = std::move(text);
        ++emitted_;
        return r;
    }

private:
    std::string expr(int depth) {
        static const char vars[] = {'a', 'b', 'c', 'd', 'e', 'f'};
        static const char ops[] = {'+', '-', '*'};
        if (depth >= 2 || rng_.below(2) == 0) {
            if (rng_.below(2) == 0) return std::string(1, vars[rng_.below(6)]);
            return std::to_string(rng_.below(10));
        }
        const std::string lhs = expr(depth + 1);
        const std::string rhs = expr(depth + 1);
        const char op = ops[rng_.below(3)];
        return "(" + lhs + " " + op + " " + rhs + ")";
    }

    std::string statement(int slot) {
        static const char vars[] = {'a', 'b', 'c', 'd', 'e', 'f'};
        const char target = vars[(rng_.below(3) + slot * 3) % 6];
        return std::string(1, target) + " = " + expr(0) + ";";
    }

    unsigned long long seed_;
    long total_;
    std::string tag_;
    Rng rng_;
    long emitted_ = 0;
};

/// Reads every regular file under a directory, sorted by path for
/// determinism. An unreadable file raises; a missing root exhausts with an
/// error on the first fetch.
class LocalDirectorySource : public DataSource {
public:
    LocalDirectorySource(std::filesystem::path root, std::string tag, MetricKind metric_kind)
        : root_(std::move(root)), tag_(std::move(tag)), metric_(metric_kind) {}

    std::string name() const override { return "local-directory"; }
    std::string task_tag() const override { return tag_; }
    MetricKind metric() const override { return metric_; }

    bool exhausted() const override { return scanned_ && next_ >= files_.size(); }

    std::optional<RawRecord> fetch_next() override {
        if (!scanned_) scan();
        if (next_ >= files_.size()) return std::nullopt;
        const std::filesystem::path p = files_[next_++];
        std::ifstream in(p, std::ios::binary);
        if (!in) throw std::runtime_error("LocalDirectorySource: cannot read '" + p.string() + "'");
        std::ostringstream buf;
        buf << in.rdbuf();
        RawRecord r;
        r.source_uri = "file://" + std::filesystem::absolute(p).string();
        r.text = buf.str();
        return r;
    }

private:
    void scan() {
        scanned_ = true;
        if (!std::filesystem::is_directory(root_))
            throw std::runtime_error("LocalDirectorySource: '" + root_.string() + "' is not a directory");
        for (const auto& entry : std::filesystem::recursive_directory_iterator(root_))
            if (entry.is_regular_file()) files_.push_back(entry.path());
        std::sort(files_.begin(), files_.end());
    }

    std::filesystem::path root_;
    std::string tag_;
    MetricKind metric_;
    bool scanned_ = false;
    std::vector<std::filesystem::path> files_;
    size_t next_ = 0;
};

/// Outcome of one collection pass.
struct CollectResult {
    long collected = 0;
    long duplicates = 0;
    long rejected = 0;
    bool at_cap = false;
    std::vector<std::string> errors;
};

/// Pulls up to `limit` records from `source` into `store`, cleaning each
/// text first. Duplicate or empty-after-cleaning texts are counted but not
/// stored; a fetch error ends the pass with the error recorded. A store
/// already at cap collects nothing and flags at_cap.
inline CollectResult collect(RecordStore& store, DataSource& source, long limit) {
    if (limit < 0) throw ConfigError("collect: limit must be >= 0");
    CollectResult result;
    if (store.count() >= store.cap()) {
        result.at_cap = true;
        return result;
    }
    long misses = 0;
    while (result.collected < limit) {
        if (store.count() >= store.cap()) {
            result.at_cap = true;
            break;
        }
        if (source.exhausted()) break;
        std::optional<RawRecord> raw;
        try {
            raw = source.fetch_next();
        } catch (const std::exception& e) {
            result.errors.push_back(std::string(source.name()) + ": " + e.what());
            break;
        }
        if (!raw) {
            // A source may probe and miss without being exhausted; give up
            // after enough consecutive misses rather than spinning forever.
            if (++misses >= 10000) break;
            continue;
        }
        misses = 0;
        const std::string cleaned = clean_text(raw->text);
        if (cleaned.empty()) {
            ++result.rejected;
            continue;
        }
        if (store.contains_text(cleaned)) {
            ++result.duplicates;
            continue;
        }
        store.append(raw->source_uri, source.task_tag(), cleaned);
        ++result.collected;
    }
    return result;
}

} // namespace proglm
