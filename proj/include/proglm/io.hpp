// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "proglm/optim.hpp"
#include "proglm/tensor.hpp"

namespace proglm {

namespace detail {

inline constexpr char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back(kB64Alphabet[v & 63]);
    }
    const size_t rem = bytes.size() - i;
    if (rem == 1) {
        const std::uint32_t v = bytes[i] << 16;
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (rem == 2) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    std::uint32_t acc = 0;
    int bits = 0;
    bool padded = false;
    for (char c : text) {
        if (c == '=') {
            padded = true;
            continue;
        }
        if (padded) throw std::runtime_error("base64: data after padding");
        const int v = value_of(c);
        if (v < 0) throw std::runtime_error("base64: invalid character");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
        }
    }
    return out;
}

inline std::vector<std::uint8_t> floats_to_le_bytes(std::span<const float> v) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(v.size() * 4);
    for (float f : v) {
        const std::uint32_t u = std::bit_cast<std::uint32_t>(f);
        bytes.push_back(static_cast<std::uint8_t>(u & 0xff));
        bytes.push_back(static_cast<std::uint8_t>((u >> 8) & 0xff));
        bytes.push_back(static_cast<std::uint8_t>((u >> 16) & 0xff));
        bytes.push_back(static_cast<std::uint8_t>((u >> 24) & 0xff));
    }
    return bytes;
}

inline std::vector<float> le_bytes_to_floats(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() % 4 != 0) throw std::runtime_error("checkpoint: float payload not a multiple of 4 bytes");
    std::vector<float> v(bytes.size() / 4);
    for (size_t i = 0; i < v.size(); ++i) {
        const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) |
                                (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                                (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                                (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
        v[i] = std::bit_cast<float>(u);
    }
    return v;
}

} // namespace detail

/// Write a file atomically (temp file + rename) so readers never observe a
/// partially written checkpoint or report.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return content;
}

/// Ordered name -> tensor map, the in-memory form of a checkpoint.
using StateDict = std::map<std::string, Tensor>;

/// Checkpoint document: a JSON object mapping each parameter name to
/// {"shape": [...], "data": "<base64 little-endian float32>"}.
/// Round-trips are bit-exact.
inline std::string checkpoint_to_json(const StateDict& state) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    for (const auto& [name, tensor] : state) {
        nlohmann::ordered_json entry;
        entry["shape"] = tensor.shape();
        entry["data"] = detail::base64_encode(detail::floats_to_le_bytes(tensor.values()));
        doc[name] = std::move(entry);
    }
    return doc.dump();
}

inline StateDict checkpoint_from_json(const std::string& text) {
    const auto doc = nlohmann::json::parse(text);
    if (!doc.is_object()) throw std::runtime_error("checkpoint: top-level JSON must be an object");
    StateDict state;
    for (const auto& [name, entry] : doc.items()) {
        Shape shape = entry.at("shape").get<Shape>();
        std::vector<float> values = detail::le_bytes_to_floats(detail::base64_decode(entry.at("data").get<std::string>()));
        state.emplace(name, Tensor::from(std::move(shape), std::move(values)));
    }
    return state;
}

inline void save_checkpoint(const std::filesystem::path& path, const StateDict& state) {
    write_file_atomic(path, checkpoint_to_json(state));
}

inline StateDict load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_json(read_file(path));
}

inline StateDict to_state_dict(const ParamSet& params) {
    StateDict state;
    for (const auto& p : params) {
        if (!state.emplace(p.name, p.tensor).second)
            throw std::runtime_error("duplicate parameter name '" + p.name + "'");
    }
    return state;
}

/// Copy checkpoint values into an existing parameter set, shape-checked.
inline void load_into(const StateDict& state, ParamSet& params) {
    for (auto& p : params) {
        auto it = state.find(p.name);
        if (it == state.end()) throw std::runtime_error("checkpoint missing parameter '" + p.name + "'");
        if (it->second.shape() != p.tensor.shape())
            throw std::runtime_error("checkpoint shape mismatch for '" + p.name + "': " +
                                     shape_str(it->second.shape()) + " vs " + shape_str(p.tensor.shape()));
        std::copy(it->second.values().begin(), it->second.values().end(), p.tensor.values_mut().begin());
    }
}

/// FNV-1a hash over a parameter set's raw float bytes, in name order.
inline std::uint64_t params_hash(const ParamSet& params) {
    StateDict state = to_state_dict(params);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, tensor] : state) {
        h = fnv1a64(name.data(), name.size(), h);
        h = hash_floats(tensor.values(), h);
    }
    return h;
}

} // namespace proglm
