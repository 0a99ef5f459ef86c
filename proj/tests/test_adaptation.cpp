// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "proglm/adapt.hpp"
#include "proglm/eval.hpp"

using proglm::BaseModel;
using proglm::FisherInfo;
using proglm::ModelConfig;
using proglm::ParamSet;
using proglm::ProgressiveNetwork;
using proglm::ReplayBuffer;
using proglm::Tensor;
using proglm::TrainConfig;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 16;
    return cfg;
}

std::shared_ptr<BaseModel> frozen_base(uint64_t seed = 31) {
    auto base = std::make_shared<BaseModel>(tiny_config(), seed);
    base->freeze();
    return base;
}

std::vector<std::vector<int>> pattern_corpus(const std::string& pattern, int copies, long max_len = 16) {
    proglm::ByteTokenizer tok(max_len);
    std::vector<std::vector<int>> out;
    for (int i = 0; i < copies; ++i) out.push_back(tok.tokenize(pattern));
    return out;
}

ParamSet trainable_params(ProgressiveNetwork& net, size_t col) {
    ParamSet out;
    for (auto& p : net.column_params(col))
        if (p.tensor.requires_grad()) out.push_back(p);
    return out;
}

double l2_displacement(std::span<const float> now, const std::vector<float>& anchor) {
    double acc = 0.0;
    for (size_t i = 0; i < anchor.size(); ++i) {
        const double d = static_cast<double>(now[i]) - static_cast<double>(anchor[i]);
        acc += d * d;
    }
    return acc;
}

} // namespace

// ---------------------------------------------------------------------------
// Fisher estimation
// ---------------------------------------------------------------------------

TEST_CASE("fisher estimates are non-negative and anchored at the current values") {
    ProgressiveNetwork net(frozen_base(), 41);
    net.add_column(0);
    ParamSet params = trainable_params(net, 0);
    auto data = pattern_corpus("hello", 3);
    FisherInfo fi = proglm::estimate_fisher(net, params, data, 0, 4);
    CHECK(fi.sample_count == 4);
    for (const auto& [name, f] : fi.f) {
        for (double v : f) CHECK(v >= 0.0);
        CHECK(fi.anchor.count(name) == 1);
    }
    for (const auto& p : params) {
        const auto& anchor = fi.anchor.at(p.name);
        REQUIRE(anchor.size() == static_cast<size_t>(p.tensor.numel()));
        for (size_t i = 0; i < anchor.size(); ++i) CHECK(anchor[i] == p.tensor.values()[i]);
    }
    // some coordinate must carry signal on a real sequence
    double total = 0.0;
    for (const auto& [name, f] : fi.f)
        for (double v : f) total += v;
    CHECK(total > 0.0);
}

TEST_CASE("a column cut off from the loss has zero Fisher everywhere") {
    // alpha = 1 zeroes the column's contribution, so every gradient is 0
    ProgressiveNetwork net(frozen_base(), 42, 1.0);
    net.add_column(0);
    ParamSet params = trainable_params(net, 0);
    auto data = pattern_corpus("abc", 2);
    FisherInfo fi = proglm::estimate_fisher(net, params, data, 0, 2);
    for (const auto& [name, f] : fi.f)
        for (double v : f) CHECK(v == 0.0);
}

TEST_CASE("fisher matches a finite-difference square on high-signal coordinates") {
    ProgressiveNetwork net(frozen_base(43), 44, 0.5);
    net.add_column(0);
    ParamSet params = trainable_params(net, 0);
    auto data = pattern_corpus("abab", 1);
    const auto& seq = data[0];
    FisherInfo fi = proglm::estimate_fisher(net, params, data, 0, 1);

    auto loglike = [&]() {
        Tensor nll = proglm::task_sequence_loss(net, seq, 0);
        return -static_cast<double>(nll.scalar_value()) * static_cast<double>(seq.size() - 1);
    };
    int checked = 0;
    for (const char* pname : {"pnn/col0/b1", "pnn/col0/b2"}) {
        Tensor t = net.find_param(pname);
        const auto& f = fi.f.at(pname);
        // probe the largest-magnitude coordinate, where FD noise is smallest
        size_t j = 0;
        for (size_t i = 1; i < f.size(); ++i)
            if (f[i] > f[j]) j = i;
        REQUIRE(f[j] > 1e-6);
        auto w = t.values_mut();
        const float theta = w[j];
        const float h = 1e-2f;
        w[j] = theta + h;
        const double lp = loglike();
        w[j] = theta - h;
        const double lm = loglike();
        w[j] = theta;
        const double heff = static_cast<double>(theta + h) - static_cast<double>(theta - h);
        const double g_fd = (lp - lm) / heff;
        const double rel = std::fabs(f[j] - g_fd * g_fd) / std::max(1e-9, g_fd * g_fd);
        CHECK(rel < 1e-2);
        ++checked;
    }
    CHECK(checked == 2);
}

TEST_CASE("duplicating the dataset leaves the Fisher unchanged") {
    ProgressiveNetwork net(frozen_base(45), 46);
    net.add_column(0);
    ParamSet params = trainable_params(net, 0);
    std::vector<std::vector<int>> data;
    for (const char* s : {"aa", "bb", "cc"}) data.push_back(proglm::ByteTokenizer(16).tokenize(s));
    std::vector<std::vector<int>> dup = data;
    dup.insert(dup.end(), data.begin(), data.end());

    FisherInfo a = proglm::estimate_fisher(net, params, data, 0, 6);
    FisherInfo b = proglm::estimate_fisher(net, params, dup, 0, 6);
    FisherInfo c = proglm::estimate_fisher(net, params, data, 0, 3);
    for (const auto& [name, fa] : a.f) {
        const auto& fb = b.f.at(name);
        const auto& fc = c.f.at(name);
        for (size_t i = 0; i < fa.size(); ++i) {
            CHECK(fa[i] == fb[i]); // same cycling order, bit-identical
            CHECK(std::fabs(fa[i] - fc[i]) < 1e-9);
        }
    }
}

TEST_CASE("fisher estimation rejects misuse") {
    ProgressiveNetwork net(frozen_base(47), 48);
    net.add_column(0);
    ParamSet params = trainable_params(net, 0);
    auto data = pattern_corpus("xy", 1);
    CHECK_THROWS_AS(proglm::estimate_fisher(net, params, {}, 0, 1), proglm::ConfigError);
    CHECK_THROWS_AS(proglm::estimate_fisher(net, params, data, 0, 0), proglm::ConfigError);
    net.freeze_column(0);
    CHECK_THROWS_AS(proglm::estimate_fisher(net, params, data, 0, 1), proglm::ConfigError);
}

// ---------------------------------------------------------------------------
// EWC penalty
// ---------------------------------------------------------------------------

TEST_CASE("ewc penalty is zero at the anchor and follows the closed form") {
    FisherInfo fi;
    fi.f["p"] = {2.0};
    fi.anchor["p"] = {0.0f};
    Tensor theta = Tensor::from({1}, {0.0f}, true);
    ParamSet items{{"p", theta}};
    CHECK(proglm::ewc_penalty_value(items, fi, 1.0) == 0.0);

    theta.values_mut()[0] = 3.0f;
    CHECK(proglm::ewc_penalty_value(items, fi, 1.0) == 9.0);
    Tensor pen = proglm::ewc_penalty(items, fi, 1.0);
    CHECK(pen.scalar_value() == 9.0f);

    // strictly positive for any displacement along a positive-F coordinate
    theta.values_mut()[0] = 1e-4f;
    CHECK(proglm::ewc_penalty_value(items, fi, 1.0) > 0.0);
}

TEST_CASE("ewc penalty matches an explicit summation loop") {
    proglm::Rng rng(201);
    FisherInfo fi;
    ParamSet items;
    std::vector<std::string> names{"a", "b", "c"};
    std::vector<long> sizes{3, 4, 3};
    for (size_t k = 0; k < names.size(); ++k) {
        Tensor t = Tensor::uniform({sizes[k]}, -2.0f, 2.0f, rng, true);
        std::vector<double> f(static_cast<size_t>(sizes[k]));
        std::vector<float> anchor(static_cast<size_t>(sizes[k]));
        for (size_t i = 0; i < f.size(); ++i) {
            f[i] = rng.uniform(0.0, 3.0);
            anchor[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
        }
        fi.f[names[k]] = f;
        fi.anchor[names[k]] = anchor;
        items.push_back({names[k], t});
    }
    const double lambda = 1.7;
    double want = 0.0;
    for (size_t k = 0; k < names.size(); ++k) {
        const auto& f = fi.f[names[k]];
        const auto& anchor = fi.anchor[names[k]];
        auto v = items[k].tensor.values();
        for (size_t i = 0; i < f.size(); ++i) {
            const double d = static_cast<double>(v[i]) - static_cast<double>(anchor[i]);
            want += 0.5 * lambda * f[i] * d * d;
        }
    }
    CHECK(std::fabs(proglm::ewc_penalty_value(items, fi, lambda) - want) < 1e-9);
    CHECK(proglm::ewc_penalty(items, fi, lambda).scalar_value() ==
          Catch::Approx(want).epsilon(1e-6));
}

TEST_CASE("ewc penalty rejects untracked parameters by name") {
    FisherInfo fi;
    fi.f["known"] = {1.0};
    fi.anchor["known"] = {0.0f};
    ParamSet items{{"pnn/col0/w1", Tensor::zeros({1}, true)}};
    CHECK_THROWS_WITH(proglm::ewc_penalty_value(items, fi, 1.0),
                      Catch::Matchers::ContainsSubstring("pnn/col0/w1"));
    CHECK_THROWS_AS(proglm::ewc_penalty(items, fi, 1.0), proglm::ConfigError);
    CHECK_THROWS_AS(proglm::ewc_penalty_value(items, fi, -1.0), proglm::ConfigError);
}

TEST_CASE("ewc penalty gradients match finite differences of the value path") {
    proglm::Rng rng(202);
    FisherInfo fi;
    Tensor theta = Tensor::uniform({5}, -1.0f, 1.0f, rng, true);
    std::vector<double> f(5);
    std::vector<float> anchor(5);
    for (size_t i = 0; i < 5; ++i) {
        f[i] = rng.uniform(0.1, 2.0);
        anchor[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    fi.f["t"] = f;
    fi.anchor["t"] = anchor;
    ParamSet items{{"t", theta}};
    const double lambda = 3.0;

    Tensor pen = proglm::scale(proglm::ewc_penalty(items, fi, lambda), 0.5); // non-unit upstream factor
    proglm::backward(pen);
    auto g = theta.grad();
    auto w = theta.values_mut();
    for (size_t i = 0; i < 5; ++i) {
        const float orig = w[i];
        const float h = 1e-3f;
        w[i] = orig + h;
        const double vp = proglm::ewc_penalty_value(items, fi, lambda);
        w[i] = orig - h;
        const double vm = proglm::ewc_penalty_value(items, fi, lambda);
        w[i] = orig;
        const double heff = static_cast<double>(orig + h) - static_cast<double>(orig - h);
        const double fd = 0.5 * (vp - vm) / heff; // the 0.5 mirrors the upstream scale
        CHECK(std::fabs(g[i] - fd) < 1e-6);
    }
}

TEST_CASE("ewc gradients flow into adapters through effective weights") {
    ProgressiveNetwork net(frozen_base(49), 50);
    net.add_column(0);
    net.add_column(1); // freezes column 0
    proglm::attach_lora(net, "pnn/col0/w1", 2);
    auto& lora = net.loras().at("pnn/col0/w1");
    // move B off zero so the effective weight departs from the anchor
    for (auto& v : lora.b.values_mut()) v = 0.1f;

    Tensor w = net.find_param("pnn/col0/w1");
    FisherInfo fi;
    fi.f["pnn/col0/w1"].assign(static_cast<size_t>(w.numel()), 1.0);
    fi.anchor["pnn/col0/w1"] = {w.values().begin(), w.values().end()};

    ParamSet items{{"pnn/col0/w1", proglm::effective_weight(net, "pnn/col0/w1")}};
    CHECK(proglm::ewc_penalty_value(items, fi, 100.0) > 0.0);
    Tensor pen = proglm::ewc_penalty(items, fi, 100.0);
    proglm::backward(pen);
    double a_norm = 0.0, b_norm = 0.0;
    for (double v : lora.a.grad()) a_norm += std::fabs(v);
    for (double v : lora.b.grad()) b_norm += std::fabs(v);
    CHECK(a_norm > 0.0);
    CHECK(b_norm > 0.0);
    CHECK_FALSE(w.has_grad()); // the frozen matrix itself receives nothing
}

TEST_CASE("fisher state survives the checkpoint format") {
    ProgressiveNetwork net(frozen_base(91), 92);
    net.add_column(0);
    ParamSet params = trainable_params(net, 0);
    auto data = pattern_corpus("save", 2);
    FisherInfo fi = proglm::estimate_fisher(net, params, data, 0, 2);

    auto path = std::filesystem::temp_directory_path() / "proglm_test_fisher" / "fisher.json";
    proglm::save_checkpoint(path, proglm::fisher_state_dict(fi));
    FisherInfo back = proglm::fisher_from_state(proglm::load_checkpoint(path));

    CHECK(back.sample_count == fi.sample_count);
    REQUIRE(back.f.size() == fi.f.size());
    for (const auto& [name, f] : fi.f) {
        const auto& bf = back.f.at(name);
        REQUIRE(bf.size() == f.size());
        for (size_t i = 0; i < f.size(); ++i) {
            // estimates round to float32 on disk
            CHECK(bf[i] == Catch::Approx(f[i]).epsilon(1e-6).margin(1e-12));
        }
        const auto& anchor = fi.anchor.at(name);
        const auto& banchor = back.anchor.at(name);
        for (size_t i = 0; i < anchor.size(); ++i) CHECK(banchor[i] == anchor[i]);
    }
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

TEST_CASE("freshly attached adapters leave every output bit-identical") {
    ProgressiveNetwork net(frozen_base(51), 52);
    net.add_column(0);
    net.add_column(1);
    std::vector<int> ids{257, 'l', 'o', 'w'};
    Tensor before0 = proglm::forward_task(net, ids, 0);
    Tensor before1 = proglm::forward_task(net, ids, 1);
    proglm::attach_lora(net, "pnn/col0/w1", 4);
    proglm::attach_lora(net, "pnn/col0/w2", 4);
    Tensor after0 = proglm::forward_task(net, ids, 0);
    Tensor after1 = proglm::forward_task(net, ids, 1);
    double worst = 0.0;
    for (long i = 0; i < before0.numel(); ++i) {
        worst = std::max(worst, std::fabs(static_cast<double>(before0.values()[static_cast<size_t>(i)]) -
                                          static_cast<double>(after0.values()[static_cast<size_t>(i)])));
        worst = std::max(worst, std::fabs(static_cast<double>(before1.values()[static_cast<size_t>(i)]) -
                                          static_cast<double>(after1.values()[static_cast<size_t>(i)])));
    }
    CHECK(worst == 0.0);
}

TEST_CASE("rank-4 adapters on 64x64 matrices cut trainable parameters to 12.5%") {
    ModelConfig cfg; // defaults: d_model 64
    auto base = std::make_shared<BaseModel>(cfg, 53);
    base->freeze();
    ProgressiveNetwork net(base, 54);
    net.add_column(0);
    net.add_column(1);
    auto lora = proglm::attach_lora(net, "pnn/col0/w1", 4);
    Tensor w = net.find_param("pnn/col0/w1");
    REQUIRE(w.shape() == proglm::Shape{64, 64});
    const double ratio =
        static_cast<double>(lora.a.numel() + lora.b.numel()) / static_cast<double>(w.numel());
    CHECK(ratio == 0.125);
    CHECK(ratio <= 0.2);
}

TEST_CASE("lora attachment rejects misuse") {
    ProgressiveNetwork net(frozen_base(55), 56);
    net.add_column(0);
    net.add_column(1);
    CHECK_THROWS_AS(proglm::attach_lora(net, "pnn/col0/b1", 4), proglm::ConfigError); // not a matrix
    CHECK_THROWS_AS(proglm::attach_lora(net, "pnn/col1/w1", 4), proglm::ConfigError); // not frozen
    CHECK_THROWS_AS(proglm::attach_lora(net, "pnn/col9/w1", 4), proglm::ConfigError); // no such column
    CHECK_THROWS_AS(proglm::attach_lora(net, "base/head/w", 4), proglm::ConfigError); // base is off-limits
    CHECK_THROWS_AS(proglm::attach_lora(net, "pnn/col0/w1", 8), proglm::ConfigError); // no reduction at d=16
    proglm::attach_lora(net, "pnn/col0/w1", 2);
    CHECK_THROWS_AS(proglm::attach_lora(net, "pnn/col0/w1", 2), proglm::ConfigError); // already adapted
}

TEST_CASE("merge folds the dense residual within 1e-7 and detach removes cleanly") {
    ProgressiveNetwork net(frozen_base(57), 58);
    net.add_column(0);
    net.add_column(1);
    proglm::attach_lora(net, "pnn/col0/w1", 2, 1.5);
    auto& lora = net.loras().at("pnn/col0/w1");
    proglm::Rng rng(203);
    for (auto& v : lora.a.values_mut()) v = static_cast<float>(rng.uniform(-0.3, 0.3));
    for (auto& v : lora.b.values_mut()) v = static_cast<float>(rng.uniform(-0.3, 0.3));

    Tensor w = net.find_param("pnn/col0/w1");
    const long d = w.shape()[0];
    std::vector<double> want(static_cast<size_t>(w.numel()));
    for (long i = 0; i < d; ++i)
        for (long j = 0; j < d; ++j) {
            double acc = 0.0;
            for (long k = 0; k < 2; ++k)
                acc += static_cast<double>(lora.b.values()[static_cast<size_t>(i * 2 + k)]) *
                       static_cast<double>(lora.a.values()[static_cast<size_t>(k * d + j)]);
            want[static_cast<size_t>(i * d + j)] =
                static_cast<double>(w.values()[static_cast<size_t>(i * d + j)]) + (1.5 / 2.0) * acc;
        }

    std::vector<int> ids{257, 'm', 'g'};
    Tensor with_adapter = proglm::forward_task(net, ids, 0);
    proglm::merge_lora(net, "pnn/col0/w1");
    for (long i = 0; i < w.numel(); ++i)
        CHECK(std::fabs(static_cast<double>(w.values()[static_cast<size_t>(i)]) - want[static_cast<size_t>(i)]) <
              1e-7);
    CHECK(net.lora_for("pnn/col0/w1") == nullptr);
    Tensor merged = proglm::forward_task(net, ids, 0);
    for (long i = 0; i < merged.numel(); ++i)
        CHECK(merged.values()[static_cast<size_t>(i)] ==
              Catch::Approx(with_adapter.values()[static_cast<size_t>(i)]).margin(1e-4));

    CHECK_FALSE(proglm::detach_lora(net, "pnn/col0/w1")); // already gone after merge
    proglm::attach_lora(net, "pnn/col0/w2", 2);
    CHECK(proglm::detach_lora(net, "pnn/col0/w2"));
    CHECK(net.loras().empty());
    CHECK_THROWS_AS(proglm::merge_lora(net, "pnn/col0/w2"), proglm::ConfigError);
}

// ---------------------------------------------------------------------------
// Experience replay
// ---------------------------------------------------------------------------

TEST_CASE("the replay buffer is a capacity-capped FIFO") {
    ReplayBuffer buf(2);
    buf.push(0, {1});
    buf.push(0, {2});
    buf.push(1, {3});
    REQUIRE(buf.size() == 2);
    CHECK(buf.item(0).tokens == std::vector<int>{2});
    CHECK(buf.item(1).tokens == std::vector<int>{3});
    CHECK(buf.item(1).task_id == 1);
    CHECK_THROWS_AS(ReplayBuffer(0), proglm::ConfigError);
}

TEST_CASE("replay mixing honors fraction zero and empty buffers") {
    ReplayBuffer buf(4);
    std::vector<std::vector<int>> batch{{1, 2}, {3, 4}};
    auto untouched = proglm::replay_mix(buf, batch, 0.0, 9);
    CHECK(untouched.batch == batch);
    CHECK(untouched.replaced == 0);
    CHECK_FALSE(untouched.buffer_empty_warning);

    auto warned = proglm::replay_mix(buf, batch, 0.5, 9);
    CHECK(warned.batch == batch);
    CHECK(warned.replaced == 0);
    CHECK(warned.buffer_empty_warning);

    CHECK_THROWS_AS(proglm::replay_mix(buf, batch, 1.5, 9), proglm::ConfigError);
}

TEST_CASE("replay mixing reproduces the frozen golden sample") {
    ReplayBuffer buf(8);
    for (int i = 0; i < 5; ++i) buf.push(i, {257, 100 + i, 258});
    std::vector<std::vector<int>> batch{{257, 1, 258}, {257, 2, 258}, {257, 3, 258}, {257, 4, 258}};
    auto mixed = proglm::replay_mix(buf, batch, 0.5, 42);
    REQUIRE(mixed.replaced == 2);
    // leading slots keep the task batch; trailing slots carry the sampled entries
    CHECK(mixed.batch[0] == std::vector<int>{257, 1, 258});
    CHECK(mixed.batch[1] == std::vector<int>{257, 2, 258});
    CHECK(mixed.batch[2] == std::vector<int>{257, 101, 258});
    CHECK(mixed.batch[3] == std::vector<int>{257, 103, 258});

    auto again = proglm::replay_mix(buf, batch, 0.5, 42);
    CHECK(again.batch == mixed.batch);
}

TEST_CASE("undersized buffers still fill the requested slots") {
    ReplayBuffer buf(8);
    buf.push(0, {7, 7});
    std::vector<std::vector<int>> batch{{1}, {2}, {3}, {4}};
    auto mixed = proglm::replay_mix(buf, batch, 0.75, 5);
    CHECK(mixed.replaced == 3);
    for (size_t i = 1; i < 4; ++i) CHECK(mixed.batch[i] == std::vector<int>{7, 7});
    CHECK(mixed.batch[0] == std::vector<int>{1});
}

// ---------------------------------------------------------------------------
// Meta-learning
// ---------------------------------------------------------------------------

TEST_CASE("zero inner steps return the current parameters untouched") {
    ProgressiveNetwork net(frozen_base(59), 60);
    net.add_column(0);
    auto support = pattern_corpus("meta", 2);
    auto res = proglm::meta_adapt(net, support, 0, 0.1);
    CHECK(res.support_losses.empty());
    for (auto& p : trainable_params(net, 0)) {
        const Tensor& snap = res.adapted.at(p.name);
        for (long i = 0; i < p.tensor.numel(); ++i)
            CHECK(snap.values()[static_cast<size_t>(i)] == p.tensor.values()[static_cast<size_t>(i)]);
    }
}

TEST_CASE("meta adaptation does not mutate the network") {
    ProgressiveNetwork net(frozen_base(61), 62);
    net.add_column(0);
    ParamSet params = trainable_params(net, 0);
    std::vector<std::vector<float>> before;
    for (auto& p : params) before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());

    auto support = pattern_corpus("hold", 3);
    auto res = proglm::meta_adapt(net, support, 3, 0.05);
    REQUIRE(res.support_losses.size() == 3);
    for (size_t k = 0; k < params.size(); ++k)
        for (long i = 0; i < params[k].tensor.numel(); ++i)
            CHECK(params[k].tensor.values()[static_cast<size_t>(i)] == before[k][static_cast<size_t>(i)]);

    // the adapted snapshot did move
    double moved = 0.0;
    for (size_t k = 0; k < params.size(); ++k) {
        const Tensor& snap = res.adapted.at(params[k].name);
        for (long i = 0; i < params[k].tensor.numel(); ++i)
            moved += std::fabs(static_cast<double>(snap.values()[static_cast<size_t>(i)]) -
                               static_cast<double>(before[k][static_cast<size_t>(i)]));
    }
    CHECK(moved > 0.0);
}

TEST_CASE("inner-loop support loss decreases step over step on a fixed task") {
    ProgressiveNetwork net(frozen_base(63), 64);
    net.add_column(0);
    auto support = pattern_corpus("abababab", 4);
    auto res = proglm::meta_adapt(net, support, 5, 0.05);
    REQUIRE(res.support_losses.size() == 5);
    for (size_t i = 1; i < res.support_losses.size(); ++i)
        CHECK(res.support_losses[i] < res.support_losses[i - 1]);
}

TEST_CASE("meta_adapt rejects misuse") {
    ProgressiveNetwork net(frozen_base(65), 66);
    CHECK_THROWS_AS(proglm::meta_adapt(net, pattern_corpus("x", 1), 1, 0.1), proglm::ConfigError);
    net.add_column(0);
    CHECK_THROWS_AS(proglm::meta_adapt(net, {}, 1, 0.1), proglm::ConfigError);
    CHECK_THROWS_AS(proglm::meta_adapt(net, pattern_corpus("x", 1), 1, 0.0), proglm::ConfigError);
}

TEST_CASE("the outer step averages displacements with the closed form") {
    ProgressiveNetwork net(frozen_base(67), 68);
    net.add_column(0);
    Tensor b1 = net.find_param("pnn/col0/b1");
    b1.values_mut()[0] = 1.0f;

    proglm::StateDict snap;
    for (auto& p : trainable_params(net, 0)) snap.emplace(p.name, p.tensor.clone_values());
    snap.at("pnn/col0/b1").values_mut()[0] = 0.8f;

    proglm::meta_outer_step(net, {snap}, 0.5);
    CHECK(b1.values()[0] == Catch::Approx(0.9).margin(1e-6));
    // parameters with identical snapshots stay bit-identical
    Tensor w1 = net.find_param("pnn/col0/w1");
    for (long i = 0; i < w1.numel(); ++i)
        CHECK(w1.values()[static_cast<size_t>(i)] == snap.at("pnn/col0/w1").values()[static_cast<size_t>(i)]);
}

TEST_CASE("outer steps with zero rate or symmetric snapshots change nothing") {
    ProgressiveNetwork net(frozen_base(69), 70);
    net.add_column(0);
    Tensor b1 = net.find_param("pnn/col0/b1");
    b1.values_mut()[0] = 1.0f;

    auto make_snap = [&](float v) {
        proglm::StateDict snap;
        for (auto& p : trainable_params(net, 0)) snap.emplace(p.name, p.tensor.clone_values());
        snap.at("pnn/col0/b1").values_mut()[0] = v;
        return snap;
    };
    proglm::meta_outer_step(net, {make_snap(0.5f)}, 0.0);
    CHECK(b1.values()[0] == 1.0f);

    proglm::meta_outer_step(net, {make_snap(1.25f), make_snap(0.75f)}, 0.5);
    CHECK(b1.values()[0] == 1.0f);

    CHECK_THROWS_AS(proglm::meta_outer_step(net, {}, 0.5), proglm::ConfigError);
    proglm::StateDict bad = make_snap(0.5f);
    bad.erase("pnn/col0/w2");
    CHECK_THROWS_AS(proglm::meta_outer_step(net, {bad}, 0.5), proglm::ConfigError);
    proglm::StateDict wrong = make_snap(0.5f);
    wrong.insert_or_assign("pnn/col0/b1", Tensor::zeros({2}));
    CHECK_THROWS_AS(proglm::meta_outer_step(net, {wrong}, 0.5), proglm::ConfigError);
}

// ---------------------------------------------------------------------------
// Task training
// ---------------------------------------------------------------------------

namespace {

TrainConfig small_train_config() {
    TrainConfig cfg;
    cfg.micro_batch = 4;
    cfg.accumulation_steps = 2;
    cfg.epochs = 2;
    cfg.base_lr = 5e-3;
    cfg.replay_push = 4;
    cfg.seed = 77;
    return cfg;
}

} // namespace

TEST_CASE("task training lowers held-out perplexity and freezes the base") {
    ProgressiveNetwork net(frozen_base(71), 72);
    net.add_column(0);
    proglm::TokenCorpus corpus;
    corpus.train = pattern_corpus("abababababab", 24);
    corpus.heldout = pattern_corpus("abababababab", 4);

    const uint64_t base_hash_before = proglm::params_hash(net.base_mut().params());
    const double ppl_before = proglm::task_perplexity(net, 0, corpus.heldout);
    auto report = proglm::train_task(net, 0, corpus, small_train_config());
    CHECK(report.heldout_perplexity < ppl_before);
    CHECK(report.optimizer_steps == 3 * 2); // ceil(24/4/2) groups per epoch, 2 epochs
    CHECK(proglm::params_hash(net.base_mut().params()) == base_hash_before);
    CHECK_FALSE(report.ewc_applied);
    CHECK(report.updated_params.size() == 4); // w1 b1 w2 b2, no adapters on column 0
}

TEST_CASE("identical seeds give identical task reports") {
    auto run = [&]() {
        ProgressiveNetwork net(frozen_base(73), 74);
        net.add_column(0);
        proglm::TokenCorpus corpus;
        corpus.train = pattern_corpus("cdcdcdcd", 16);
        corpus.heldout = pattern_corpus("cdcdcdcd", 2);
        ReplayBuffer buf(32);
        buf.push(0, proglm::ByteTokenizer(16).tokenize("zz"));
        return proglm::train_task(net, 0, corpus, small_train_config(), nullptr, &buf);
    };
    auto a = run();
    auto b = run();
    CHECK(a.final_loss == b.final_loss);
    CHECK(a.heldout_perplexity == b.heldout_perplexity);
    CHECK(a.optimizer_steps == b.optimizer_steps);
    CHECK(a.updated_params == b.updated_params);
}

TEST_CASE("training pushes task sequences into the replay buffer") {
    ProgressiveNetwork net(frozen_base(75), 76);
    net.add_column(0);
    proglm::TokenCorpus corpus;
    corpus.train = pattern_corpus("efef", 8);
    ReplayBuffer buf(64);
    TrainConfig cfg = small_train_config();
    cfg.epochs = 1;
    cfg.replay_fraction = 0.0; // no mixing, still pushes afterwards
    proglm::train_task(net, 0, corpus, cfg, nullptr, &buf);
    CHECK(buf.size() == 4); // replay_push = 4
    CHECK(buf.item(0).task_id == 0);
}

TEST_CASE("training a frozen column without adapters is rejected") {
    ProgressiveNetwork net(frozen_base(77), 78);
    net.add_column(0);
    net.add_column(1);
    proglm::TokenCorpus corpus;
    corpus.train = pattern_corpus("gh", 4);
    CHECK_THROWS_AS(proglm::train_task(net, 0, corpus, small_train_config()), proglm::ConfigError);
    CHECK_THROWS_AS(proglm::train_task(net, 9, corpus, small_train_config()), proglm::ConfigError);

    // with adapters attached the same call trains them
    proglm::attach_lora(net, "pnn/col0/w1", 2);
    proglm::attach_lora(net, "pnn/col0/w2", 2);
    auto report = proglm::train_task(net, 0, corpus, small_train_config());
    CHECK(report.updated_params.size() == 4); // a and b of both adapters
    for (const auto& n : report.updated_params) CHECK(n.rfind("lora/", 0) == 0);
}

TEST_CASE("consolidation keeps refined weights closer to the anchor") {
    auto refine = [&](double lambda) {
        ProgressiveNetwork net(frozen_base(79), 80, 0.3);
        net.add_column(0);
        proglm::TokenCorpus first;
        first.train = pattern_corpus("ababab", 12);
        TrainConfig cfg = small_train_config();
        cfg.epochs = 1;
        cfg.base_lr = 1e-2;
        proglm::train_task(net, 0, first, cfg);

        ParamSet col0 = trainable_params(net, 0);
        FisherInfo fi = proglm::estimate_fisher(net, col0, first.train, 0, 8);

        net.add_column(1);
        proglm::attach_lora(net, "pnn/col0/w1", 2);
        proglm::attach_lora(net, "pnn/col0/w2", 2);
        proglm::TokenCorpus drift;
        drift.train = pattern_corpus("axaxax", 12);
        TrainConfig rcfg = small_train_config();
        rcfg.epochs = 1;
        rcfg.base_lr = 5e-2; // large enough to move the adapters visibly
        rcfg.ewc_lambda = lambda;
        proglm::train_task(net, 0, drift, rcfg, &fi);

        double disp = 0.0;
        for (const char* name : {"pnn/col0/w1", "pnn/col0/w2"}) {
            Tensor eff = proglm::effective_weight(net, name);
            disp += l2_displacement(eff.values(), fi.anchor.at(name));
        }
        return disp;
    };
    const double with_ewc = refine(100.0);
    const double without = refine(0.0);
    CHECK(with_ewc <= without);
    CHECK(without > 0.0);
}
