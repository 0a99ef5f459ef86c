// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "proglm/optim.hpp"

using proglm::AdamW;
using proglm::AdamWConfig;
using proglm::ParamSet;
using proglm::Tensor;

namespace {

ParamSet one_param(const char* name, std::vector<float> v) {
    const long n = static_cast<long>(v.size());
    return {{name, Tensor::from({n}, std::move(v), true)}};
}

void quadratic_backward(ParamSet& p) {
    // loss = sum(theta^2)
    proglm::backward(proglm::sum(proglm::mul(p[0].tensor, p[0].tensor)));
}

} // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(proglm::cosine_lr(0, 100, 1e-4) == Catch::Approx(1e-4));
    CHECK(proglm::cosine_lr(100, 100, 1e-4) == Catch::Approx(0.0));
    CHECK(proglm::cosine_lr(50, 100, 1e-4) == Catch::Approx(5e-5));
    CHECK(proglm::cosine_lr(250, 100, 1e-4) == Catch::Approx(0.0)); // clamped past horizon
    CHECK_THROWS_AS(proglm::cosine_lr(-1, 100, 1e-4), proglm::ConfigError);
    CHECK_THROWS_AS(proglm::cosine_lr(0, 0, 1e-4), proglm::ConfigError);
}

TEST_CASE("cosine schedule decreases monotonically") {
    double prev = proglm::cosine_lr(0, 40, 1e-3);
    for (long s = 1; s <= 40; ++s) {
        const double lr = proglm::cosine_lr(s, 40, 1e-3);
        CHECK(lr < prev);
        prev = lr;
    }
}

TEST_CASE("first AdamW step matches the hand-derived update") {
    AdamWConfig cfg;
    cfg.base_lr = 0.1;
    cfg.total_steps = 10;
    AdamW opt(cfg);
    ParamSet p = one_param("w", {1.0f});
    quadratic_backward(p);
    CHECK(opt.current_lr() == Catch::Approx(0.1));
    opt.step(p);
    // g = 2, mhat = 2, vhat = 4:
    // w <- 1 - 0.1 * (2 / (2 + 1e-8) + 0.01 * 1)
    const double expect = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8) + 0.01);
    CHECK(p[0].tensor.values()[0] == Catch::Approx(expect).margin(1e-7));
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("weight decay is decoupled from the gradient") {
    AdamWConfig cfg;
    cfg.base_lr = 0.1;
    cfg.total_steps = 2;
    AdamW opt(cfg);
    ParamSet p = one_param("w", {4.0f});
    p[0].tensor.grad_mut(); // populated but all-zero gradient
    opt.step(p);
    // zero gradient leaves the Adam direction at exactly zero, so the update
    // is pure decay: w * (1 - lr * wd)
    CHECK(p[0].tensor.values()[0] == Catch::Approx(4.0 * (1.0 - 0.1 * 0.01)).margin(1e-7));
}

TEST_CASE("stepping without a gradient names the parameter") {
    AdamW opt(AdamWConfig{});
    ParamSet p = one_param("pnn/col0/w1", {1.0f});
    try {
        opt.step(p);
        FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("pnn/col0/w1") != std::string::npos);
    }
}

TEST_CASE("optimizer runs are deterministic") {
    auto run = [] {
        AdamWConfig cfg;
        cfg.base_lr = 0.05;
        cfg.total_steps = 5;
        AdamW opt(cfg);
        ParamSet p = one_param("w", {1.0f, -2.0f, 0.5f});
        for (int i = 0; i < 5; ++i) {
            quadratic_backward(p);
            opt.step(p);
        }
        return std::vector<float>(p[0].tensor.values().begin(), p[0].tensor.values().end());
    };
    auto a = run();
    auto b = run();
    CHECK(a == b); // bitwise identical
}

TEST_CASE("learning rate follows the cosine schedule across steps") {
    AdamWConfig cfg;
    cfg.base_lr = 1e-2;
    cfg.total_steps = 4;
    AdamW opt(cfg);
    ParamSet p = one_param("w", {1.0f});
    for (long s = 0; s < 4; ++s) {
        CHECK(opt.current_lr() == Catch::Approx(proglm::cosine_lr(s, 4, 1e-2)));
        quadratic_backward(p);
        opt.step(p);
    }
    CHECK(opt.current_lr() == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("plain SGD takes the textbook step") {
    ParamSet p = one_param("w", {1.0f});
    quadratic_backward(p); // g = 2
    proglm::sgd_step(p, 0.1);
    CHECK(p[0].tensor.values()[0] == 0.8f);
    CHECK_FALSE(p[0].tensor.grad()[0] != 0.0); // grads cleared
}

TEST_CASE("grads are cleared after an optimizer step") {
    AdamW opt(AdamWConfig{});
    ParamSet p = one_param("w", {1.0f});
    quadratic_backward(p);
    opt.step(p);
    CHECK(p[0].tensor.grad()[0] == 0.0);
}
