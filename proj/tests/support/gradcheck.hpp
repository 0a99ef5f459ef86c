// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

// Finite-difference gradient oracle.
//
// Each op case pairs the library forward with an independent straight-line
// float64 reimplementation of the same map. Central differences run on the
// float64 reference so the FD baseline is not drowned by float32 forward
// noise at step 1e-5; the analytic gradients under test still come from the
// float32 library path.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "proglm/tensor.hpp"

namespace gradcheck {

using proglm::Rng;
using proglm::Shape;
using proglm::Tensor;

using Build = std::function<Tensor(const std::vector<Tensor>&)>;
using Ref = std::function<std::vector<double>(const std::vector<std::vector<double>>&)>;

inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

/// Max relative error between analytic gradients of loss = sum(R * build(x))
/// and central finite differences of the float64 reference, over every
/// element of every input.
inline double grad_check(const Build& build, const Ref& ref, std::vector<Tensor> inputs, Rng& rng,
                         double h = 1e-5) {
    for (Tensor& t : inputs) t.set_requires_grad(true);
    Tensor out = build(inputs);
    std::vector<float> wv(static_cast<size_t>(out.numel()));
    for (float& v : wv) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    Tensor weights = Tensor::from(out.shape(), wv);
    proglm::backward(proglm::sum(proglm::mul(out, weights)));

    std::vector<std::vector<double>> xs;
    for (const Tensor& t : inputs) xs.emplace_back(t.values().begin(), t.values().end());
    auto loss_ref = [&](const std::vector<std::vector<double>>& x) {
        std::vector<double> y = ref(x);
        double acc = 0.0;
        for (size_t i = 0; i < y.size(); ++i) acc += static_cast<double>(wv[i]) * y[i];
        return acc;
    };

    double worst = 0.0;
    for (size_t k = 0; k < inputs.size(); ++k) {
        auto g = inputs[k].grad();
        for (size_t i = 0; i < xs[k].size(); ++i) {
            const double keep = xs[k][i];
            xs[k][i] = keep + h;
            const double lp = loss_ref(xs);
            xs[k][i] = keep - h;
            const double lm = loss_ref(xs);
            xs[k][i] = keep;
            worst = std::max(worst, rel_err(g[i], (lp - lm) / (2.0 * h)));
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// float64 reference forwards
// ---------------------------------------------------------------------------

inline std::vector<double> ref_matmul(const std::vector<double>& a, const std::vector<double>& b, long m, long k,
                                      long n) {
    std::vector<double> c(static_cast<size_t>(m * n), 0.0);
    for (long i = 0; i < m; ++i)
        for (long l = 0; l < k; ++l)
            for (long j = 0; j < n; ++j) c[static_cast<size_t>(i * n + j)] +=
                a[static_cast<size_t>(i * k + l)] * b[static_cast<size_t>(l * n + j)];
    return c;
}

inline std::vector<double> ref_softmax_row(const std::vector<double>& x, size_t first, size_t m) {
    double mx = x[first];
    for (size_t j = 0; j < m; ++j) mx = std::max(mx, x[first + j]);
    double denom = 0.0;
    std::vector<double> y(m);
    for (size_t j = 0; j < m; ++j) {
        y[j] = std::exp(x[first + j] - mx);
        denom += y[j];
    }
    for (double& v : y) v /= denom;
    return y;
}

inline std::vector<double> ref_layer_norm(const std::vector<double>& x, const std::vector<double>& g,
                                          const std::vector<double>& b, long r, long c, double eps = 1e-5) {
    std::vector<double> y(static_cast<size_t>(r * c));
    for (long i = 0; i < r; ++i) {
        double mu = 0.0;
        for (long j = 0; j < c; ++j) mu += x[static_cast<size_t>(i * c + j)];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (long j = 0; j < c; ++j) {
            const double d = x[static_cast<size_t>(i * c + j)] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        for (long j = 0; j < c; ++j)
            y[static_cast<size_t>(i * c + j)] =
                (x[static_cast<size_t>(i * c + j)] - mu) * is * g[static_cast<size_t>(j)] + b[static_cast<size_t>(j)];
    }
    return y;
}

inline double ref_cross_entropy(const std::vector<double>& logits, const std::vector<int>& targets, long r, long c) {
    double total = 0.0;
    for (long i = 0; i < r; ++i) {
        double mx = logits[static_cast<size_t>(i * c)];
        for (long j = 1; j < c; ++j) mx = std::max(mx, logits[static_cast<size_t>(i * c + j)]);
        double denom = 0.0;
        for (long j = 0; j < c; ++j) denom += std::exp(logits[static_cast<size_t>(i * c + j)] - mx);
        total += mx + std::log(denom) - logits[static_cast<size_t>(i * c + targets[static_cast<size_t>(i)])];
    }
    return total / static_cast<double>(r);
}

// ---------------------------------------------------------------------------
// Per-op random instances
// ---------------------------------------------------------------------------

struct OpResult {
    std::string name;
    double max_rel_err = 0.0;
};

inline std::vector<float> sample(Rng& rng, long n, double lo = -1.0, double hi = 1.0) {
    std::vector<float> v(static_cast<size_t>(n));
    for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

/// Push values away from the ReLU kink so the subgradient choice cannot
/// disagree with finite differences.
inline std::vector<float> sample_off_kink(Rng& rng, long n) {
    std::vector<float> v = sample(rng, n);
    for (float& x : v)
        if (std::fabs(x) < 1e-3f) x += x >= 0.0f ? 0.01f : -0.01f;
    return v;
}

/// Runs `instances` random gradient checks for every differentiable op and
/// returns the per-op worst relative error.
inline std::vector<OpResult> run_all_op_checks(long instances, uint64_t seed) {
    Rng rng(seed);
    std::vector<OpResult> results;
    auto record = [&](const std::string& name, const std::function<double(Rng&)>& one) {
        OpResult r{name, 0.0};
        for (long i = 0; i < instances; ++i) r.max_rel_err = std::max(r.max_rel_err, one(rng));
        results.push_back(r);
    };

    auto dims = [&](Rng& r) { return std::pair<long, long>{1 + static_cast<long>(r.below(4)), 1 + static_cast<long>(r.below(4))};
    };

    record("add", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample(r, m * n));
        auto b = Tensor::from({m, n}, sample(r, m * n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::add(in[0], in[1]); },
                          [](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(x[0].size());
                              for (size_t i = 0; i < y.size(); ++i) y[i] = x[0][i] + x[1][i];
                              return y;
                          },
                          {a, b}, r);
    });

    record("sub", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample(r, m * n));
        auto b = Tensor::from({m, n}, sample(r, m * n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::sub(in[0], in[1]); },
                          [](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(x[0].size());
                              for (size_t i = 0; i < y.size(); ++i) y[i] = x[0][i] - x[1][i];
                              return y;
                          },
                          {a, b}, r);
    });

    record("mul", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample(r, m * n));
        auto b = Tensor::from({m, n}, sample(r, m * n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::mul(in[0], in[1]); },
                          [](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(x[0].size());
                              for (size_t i = 0; i < y.size(); ++i) y[i] = x[0][i] * x[1][i];
                              return y;
                          },
                          {a, b}, r);
    });

    record("scale", [&](Rng& r) {
        auto [m, n] = dims(r);
        const double f = r.uniform(-2.0, 2.0);
        auto a = Tensor::from({m, n}, sample(r, m * n));
        return grad_check([f](const std::vector<Tensor>& in) { return proglm::scale(in[0], f); },
                          [f](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(x[0].size());
                              for (size_t i = 0; i < y.size(); ++i) y[i] = x[0][i] * f;
                              return y;
                          },
                          {a}, r);
    });

    record("add_bias", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto x = Tensor::from({m, n}, sample(r, m * n));
        auto b = Tensor::from({n}, sample(r, n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::add_bias(in[0], in[1]); },
                          [m = m, n = n](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(static_cast<size_t>(m * n));
                              for (long i = 0; i < m; ++i)
                                  for (long j = 0; j < n; ++j)
                                      y[static_cast<size_t>(i * n + j)] =
                                          x[0][static_cast<size_t>(i * n + j)] + x[1][static_cast<size_t>(j)];
                              return y;
                          },
                          {x, b}, r);
    });

    record("matmul", [&](Rng& r) {
        const long m = 1 + static_cast<long>(r.below(4));
        const long k = 1 + static_cast<long>(r.below(4));
        const long n = 1 + static_cast<long>(r.below(4));
        auto a = Tensor::from({m, k}, sample(r, m * k));
        auto b = Tensor::from({k, n}, sample(r, k * n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::matmul(in[0], in[1]); },
                          [m, k, n](const std::vector<std::vector<double>>& x) { return ref_matmul(x[0], x[1], m, k, n); },
                          {a, b}, r);
    });

    record("transpose", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample(r, m * n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::transpose(in[0]); },
                          [m = m, n = n](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(x[0].size());
                              for (long i = 0; i < m; ++i)
                                  for (long j = 0; j < n; ++j)
                                      y[static_cast<size_t>(j * m + i)] = x[0][static_cast<size_t>(i * n + j)];
                              return y;
                          },
                          {a}, r);
    });

    record("relu", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample_off_kink(r, m * n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::relu(in[0]); },
                          [](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(x[0].size());
                              for (size_t i = 0; i < y.size(); ++i) y[i] = x[0][i] > 0.0 ? x[0][i] : 0.0;
                              return y;
                          },
                          {a}, r);
    });

    record("log", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample(r, m * n, 0.2, 2.0));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::log(in[0]); },
                          [](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(x[0].size());
                              for (size_t i = 0; i < y.size(); ++i) y[i] = std::log(x[0][i]);
                              return y;
                          },
                          {a}, r);
    });

    record("sum", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample(r, m * n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::sum(in[0]); },
                          [](const std::vector<std::vector<double>>& x) {
                              double acc = 0.0;
                              for (double v : x[0]) acc += v;
                              return std::vector<double>{acc};
                          },
                          {a}, r);
    });

    record("mean", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample(r, m * n));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::mean(in[0]); },
                          [](const std::vector<std::vector<double>>& x) {
                              double acc = 0.0;
                              for (double v : x[0]) acc += v;
                              return std::vector<double>{acc / static_cast<double>(x[0].size())};
                          },
                          {a}, r);
    });

    record("softmax_rows", [&](Rng& r) {
        auto [m, n] = dims(r);
        auto a = Tensor::from({m, n}, sample(r, m * n, -2.0, 2.0));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::softmax_rows(in[0]); },
                          [m = m, n = n](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y;
                              for (long i = 0; i < m; ++i) {
                                  auto row = ref_softmax_row(x[0], static_cast<size_t>(i * n), static_cast<size_t>(n));
                                  y.insert(y.end(), row.begin(), row.end());
                              }
                              return y;
                          },
                          {a}, r);
    });

    record("causal_softmax_rows", [&](Rng& r) {
        const long n = 1 + static_cast<long>(r.below(4));
        auto a = Tensor::from({n, n}, sample(r, n * n, -2.0, 2.0));
        return grad_check([](const std::vector<Tensor>& in) { return proglm::causal_softmax_rows(in[0]); },
                          [n](const std::vector<std::vector<double>>& x) {
                              std::vector<double> y(static_cast<size_t>(n * n), 0.0);
                              for (long i = 0; i < n; ++i) {
                                  auto row = ref_softmax_row(x[0], static_cast<size_t>(i * n), static_cast<size_t>(i + 1));
                                  for (long j = 0; j <= i; ++j) y[static_cast<size_t>(i * n + j)] = row[static_cast<size_t>(j)];
                              }
                              return y;
                          },
                          {a}, r);
    });

    record("cross_entropy_with_logits", [&](Rng& r) {
        const long m = 1 + static_cast<long>(r.below(4));
        const long n = 2 + static_cast<long>(r.below(4));
        auto a = Tensor::from({m, n}, sample(r, m * n, -2.0, 2.0));
        std::vector<int> targets(static_cast<size_t>(m));
        for (int& t : targets) t = static_cast<int>(r.below(static_cast<uint64_t>(n)));
        return grad_check(
            [targets](const std::vector<Tensor>& in) { return proglm::cross_entropy_with_logits(in[0], targets); },
            [m, n, targets](const std::vector<std::vector<double>>& x) {
                return std::vector<double>{ref_cross_entropy(x[0], targets, m, n)};
            },
            {a}, r);
    });

    record("slice_cols", [&](Rng& r) {
        const long m = 1 + static_cast<long>(r.below(4));
        const long n = 2 + static_cast<long>(r.below(4));
        const long first = static_cast<long>(r.below(static_cast<uint64_t>(n - 1)));
        const long width = 1 + static_cast<long>(r.below(static_cast<uint64_t>(n - first)));
        auto a = Tensor::from({m, n}, sample(r, m * n));
        return grad_check(
            [first, width](const std::vector<Tensor>& in) { return proglm::slice_cols(in[0], first, width); },
            [m, n, first, width](const std::vector<std::vector<double>>& x) {
                std::vector<double> y(static_cast<size_t>(m * width));
                for (long i = 0; i < m; ++i)
                    for (long j = 0; j < width; ++j)
                        y[static_cast<size_t>(i * width + j)] = x[0][static_cast<size_t>(i * n + first + j)];
                return y;
            },
            {a}, r);
    });

    record("concat_cols", [&](Rng& r) {
        const long m = 1 + static_cast<long>(r.below(4));
        const long n1 = 1 + static_cast<long>(r.below(3));
        const long n2 = 1 + static_cast<long>(r.below(3));
        auto a = Tensor::from({m, n1}, sample(r, m * n1));
        auto b = Tensor::from({m, n2}, sample(r, m * n2));
        return grad_check(
            [](const std::vector<Tensor>& in) { return proglm::concat_cols({in[0], in[1]}); },
            [m, n1, n2](const std::vector<std::vector<double>>& x) {
                std::vector<double> y(static_cast<size_t>(m * (n1 + n2)));
                for (long i = 0; i < m; ++i) {
                    for (long j = 0; j < n1; ++j) y[static_cast<size_t>(i * (n1 + n2) + j)] = x[0][static_cast<size_t>(i * n1 + j)];
                    for (long j = 0; j < n2; ++j)
                        y[static_cast<size_t>(i * (n1 + n2) + n1 + j)] = x[1][static_cast<size_t>(i * n2 + j)];
                }
                return y;
            },
            {a, b}, r);
    });

    record("layer_norm", [&](Rng& r) {
        const long m = 1 + static_cast<long>(r.below(4));
        const long n = 2 + static_cast<long>(r.below(4));
        auto x = Tensor::from({m, n}, sample(r, m * n));
        auto g = Tensor::from({n}, sample(r, n, 0.5, 1.5));
        auto b = Tensor::from({n}, sample(r, n));
        return grad_check(
            [](const std::vector<Tensor>& in) { return proglm::layer_norm(in[0], in[1], in[2]); },
            [m, n](const std::vector<std::vector<double>>& x) { return ref_layer_norm(x[0], x[1], x[2], m, n); },
            {x, g, b}, r);
    });

    record("embedding_rows", [&](Rng& r) {
        const long v = 2 + static_cast<long>(r.below(4));
        const long d = 1 + static_cast<long>(r.below(3));
        const long n = 1 + static_cast<long>(r.below(5));
        auto table = Tensor::from({v, d}, sample(r, v * d));
        std::vector<int> ids(static_cast<size_t>(n));
        for (int& id : ids) id = static_cast<int>(r.below(static_cast<uint64_t>(v)));
        return grad_check(
            [ids](const std::vector<Tensor>& in) { return proglm::embedding_rows(in[0], ids); },
            [d, ids](const std::vector<std::vector<double>>& x) {
                std::vector<double> y;
                for (int id : ids)
                    for (long j = 0; j < d; ++j) y.push_back(x[0][static_cast<size_t>(id * d + j)]);
                return y;
            },
            {table}, r);
    });

    return results;
}

} // namespace gradcheck
