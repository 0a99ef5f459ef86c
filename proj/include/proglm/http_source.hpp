// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include "httplib.h"

#include "proglm/sources.hpp"

namespace proglm {

/// Fetches articles over HTTP, one URL per record. The source only touches
/// the network when AGENT_HTTP_ENABLED=1 is set in the environment; without
/// it every instance reports exhausted and fetches nothing, so test runs
/// stay fully offline.
class HttpArticleSource : public DataSource {
public:
    HttpArticleSource(std::string host, std::vector<std::string> paths, std::string tag,
                      MetricKind metric_kind)
        : host_(std::move(host)), paths_(std::move(paths)), tag_(std::move(tag)), metric_(metric_kind) {}

    static bool enabled() {
        const char* v = std::getenv("AGENT_HTTP_ENABLED");
        return v != nullptr && std::string(v) == "1";
    }

    std::string name() const override { return "http-article"; }
    std::string task_tag() const override { return tag_; }
    MetricKind metric() const override { return metric_; }

    bool exhausted() const override { return !enabled() || next_ >= paths_.size(); }

    std::optional<RawRecord> fetch_next() override {
        if (exhausted()) return std::nullopt;
        const std::string path = paths_[next_++];
        httplib::Client client(host_);
        client.set_connection_timeout(5);
        client.set_read_timeout(10);
        auto res = client.Get(path);
        if (!res) throw std::runtime_error("HttpArticleSource: request to '" + host_ + path + "' failed");
        if (res->status != 200)
            throw std::runtime_error("HttpArticleSource: '" + host_ + path + "' returned status " +
                                     std::to_string(res->status));
        RawRecord r;
        r.source_uri = host_ + path;
        r.text = res->body;
        return r;
    }

private:
    std::string host_;
    std::vector<std::string> paths_;
    std::string tag_;
    MetricKind metric_;
    size_t next_ = 0;
};

} // namespace proglm
