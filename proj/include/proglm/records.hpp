// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "proglm/common.hpp"

namespace proglm {

/// Normalizes raw collected bytes: control bytes other than newline are
/// dropped, whitespace runs collapse (to a newline if the run contained one,
/// else a single space) and leading/trailing whitespace is stripped. The
/// result is idempotent under re-cleaning.
inline std::string clean_text(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool in_ws = false;
    bool ws_had_newline = false;
    for (unsigned char c : raw) {
        const bool control = c < 0x20 || c == 0x7f;
        if (control && c != '\n') continue;
        if (c == ' ' || c == '\n') {
            in_ws = true;
            ws_had_newline = ws_had_newline || c == '\n';
            continue;
        }
        if (in_ws) {
            if (!out.empty()) out.push_back(ws_had_newline ? '\n' : ' ');
            in_ws = false;
            ws_had_newline = false;
        }
        out.push_back(static_cast<char>(c));
    }
    return out;
}

/// One collected document. `collected_at` is an RFC 3339 UTC stamp derived
/// from the record id on a fixed logical clock, keeping stores byte-stable
/// across reruns.
struct Record {
    long id = -1;
    std::string source_uri;
    std::string task_tag;
    std::string text;
    std::string collected_at;
};

inline std::string rfc3339_from_logical(long id) {
    std::tm base{};
    base.tm_year = 2026 - 1900;
    base.tm_mon = 0;
    base.tm_mday = 1;
    const std::time_t epoch = timegm(&base);
    const std::time_t t = epoch + static_cast<std::time_t>(id);
    std::tm out{};
    gmtime_r(&t, &out);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &out);
    return buf;
}

inline nlohmann::ordered_json record_to_json(const Record& r) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["source_uri"] = r.source_uri;
    j["task_tag"] = r.task_tag;
    j["text"] = r.text;
    j["collected_at"] = r.collected_at;
    return j;
}

inline Record record_from_json(const nlohmann::json& j) {
    Record r;
    r.id = j.at("id").get<long>();
    r.source_uri = j.at("source_uri").get<std::string>();
    r.task_tag = j.at("task_tag").get<std::string>();
    r.text = j.at("text").get<std::string>();
    r.collected_at = j.at("collected_at").get<std::string>();
    return r;
}

/// Append-only JSONL store with a hard record cap. Appends past the cap are
/// refused, never truncated; re-opening an existing file resumes from it.
class RecordStore {
public:
    explicit RecordStore(std::filesystem::path path, long cap = 100000) : path_(std::move(path)), cap_(cap) {
        if (cap_ < 1) throw ConfigError("RecordStore: cap must be >= 1");
        if (std::filesystem::exists(path_)) load();
    }

    const std::filesystem::path& path() const { return path_; }
    long cap() const { return cap_; }
    long count() const { return static_cast<long>(records_.size()); }
    const std::vector<Record>& records() const { return records_; }

    bool contains_text(const std::string& text) const { return texts_.count(text) != 0; }

    /// Appends one cleaned record; returns its id, or nullopt once the cap
    /// is reached. Empty text is a caller error, not a silent skip.
    std::optional<long> append(const std::string& source_uri, const std::string& task_tag,
                               const std::string& cleaned_text) {
        if (cleaned_text.empty()) throw ConfigError("RecordStore: empty text after cleaning");
        if (count() >= cap_) return std::nullopt;
        Record r;
        r.id = next_id_++;
        r.source_uri = source_uri;
        r.task_tag = task_tag;
        r.text = cleaned_text;
        r.collected_at = rfc3339_from_logical(r.id);

        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        std::ofstream out(path_, std::ios::app | std::ios::binary);
        if (!out) throw std::runtime_error("RecordStore: cannot open '" + path_.string() + "' for append");
        out << record_to_json(r).dump() << '\n';
        out.flush();
        if (!out) throw std::runtime_error("RecordStore: write failed on '" + path_.string() + "'");

        texts_.insert(r.text);
        records_.push_back(std::move(r));
        return records_.back().id;
    }

    /// Records carrying `task_tag`, in id order, optionally only up to a
    /// fence id (snapshot semantics for concurrent collection).
    std::vector<Record> records_for_tag(const std::string& task_tag, long fence_id = -1) const {
        std::vector<Record> out;
        for (const auto& r : records_) {
            if (fence_id >= 0 && r.id > fence_id) continue;
            if (r.task_tag == task_tag) out.push_back(r);
        }
        return out;
    }

    long max_id() const { return next_id_ - 1; }

private:
    void load() {
        std::ifstream in(path_, std::ios::binary);
        if (!in) throw std::runtime_error("RecordStore: cannot read '" + path_.string() + "'");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            Record r = record_from_json(nlohmann::json::parse(line));
            if (r.id < next_id_)
                throw std::runtime_error("RecordStore: non-monotonic id " + std::to_string(r.id) + " in '" +
                                         path_.string() + "'");
            next_id_ = r.id + 1;
            texts_.insert(r.text);
            records_.push_back(std::move(r));
        }
        if (count() > cap_)
            throw ConfigError("RecordStore: existing store holds " + std::to_string(count()) +
                              " records, above cap " + std::to_string(cap_));
    }

    std::filesystem::path path_;
    long cap_;
    long next_id_ = 0;
    std::vector<Record> records_;
    std::unordered_set<std::string> texts_;
};

} // namespace proglm
