// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "proglm/common.hpp"

namespace proglm {

namespace detail {

/// One node of the reverse-mode differentiation graph.
///
/// Leaves (parameters and inputs) have no `backprop`; interior nodes carry a
/// closure that reads this node's `grad` and accumulates into the parents.
/// Leaf gradients persist across backward passes until explicitly zeroed,
/// which is what makes micro-batch gradient accumulation work.
///
/// Values are float32; gradients accumulate in float64 so that summing
/// micro-batch contributions is order-insensitive far below test tolerances.
struct Node {
    Shape shape;
    std::vector<float> values;
    bool requires_grad = false;
    std::vector<double> grad; // empty until first needed
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

} // namespace detail

/// Shape-tagged real-valued array participating in reverse-mode differentiation.
/// A Tensor is a cheap shared handle: copies alias the same storage and gradient.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from_values(std::move(shape), {}, requires_grad, /*fill*/ true, 0.0f);
    }

    static Tensor full(Shape shape, float value, bool requires_grad = false) {
        return from_values(std::move(shape), {}, requires_grad, /*fill*/ true, value);
    }

    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
        return from_values(std::move(shape), std::move(values), requires_grad, false, 0.0f);
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor identity(long n) {
        Tensor t = zeros({n, n});
        for (long i = 0; i < n; ++i) t.values_mut()[static_cast<size_t>(i * n + i)] = 1.0f;
        return t;
    }

    static Tensor uniform(Shape shape, float lo, float hi, Rng& rng, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (float& v : t.node_->values) v = static_cast<float>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor normal(Shape shape, float mean, float stddev, Rng& rng, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (float& v : t.node_->values) v = static_cast<float>(rng.normal(mean, stddev));
        return t;
    }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    long numel() const { return static_cast<long>(node_->values.size()); }
    size_t dims() const { return node_->shape.size(); }

    /// Row/column extents for 1-D (treated as a single row) or 2-D tensors.
    long rows() const { return dims() == 2 ? shape()[0] : 1; }
    long cols() const { return dims() == 2 ? shape()[1] : (dims() == 1 ? shape()[0] : numel()); }

    std::span<const float> values() const { return node_->values; }
    std::span<float> values_mut() { return node_->values; }
    float scalar_value() const {
        if (numel() != 1) throw std::invalid_argument("scalar_value: tensor has shape " + shape_str(shape()));
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const {
        if (!has_grad()) throw std::runtime_error("grad: no gradient buffer populated");
        return node_->grad;
    }
    std::span<double> grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Detached value copy (no graph, no grad requirement).
    Tensor clone_values() const {
        return from(shape(), {node_->values.begin(), node_->values.end()});
    }

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& handle() const { return node_; }

private:
    static Tensor from_values(Shape shape, std::vector<float> values, bool requires_grad, bool fill, float fill_v) {
        for (long d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
        }
        auto n = std::make_shared<detail::Node>();
        const size_t count = static_cast<size_t>(shape_numel(shape));
        n->shape = std::move(shape);
        if (fill) {
            n->values.assign(count, fill_v);
        } else {
            if (values.size() != count)
                throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                            " does not match shape " + shape_str(n->shape));
            n->values = std::move(values);
        }
        n->requires_grad = requires_grad;
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

using NodePtr = std::shared_ptr<Node>;

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

inline Tensor make_result(Shape shape, std::vector<float> values, std::vector<NodePtr> parents,
                          std::function<void(Node&)> backprop) {
    Tensor out = Tensor::from(std::move(shape), std::move(values));
    bool needs = false;
    for (const auto& p : parents)
        if (p->requires_grad) needs = true;
    if (needs) {
        Node* n = out.node();
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return out;
}

inline void accumulate(const NodePtr& p, const double* g, size_t n) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    double* dst = p->grad.data();
    for (size_t i = 0; i < n; ++i) dst[i] += g[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and matrix operations
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] + b.values()[i];
    auto na = a.handle();
    auto nb = b.handle();
    return detail::make_result(a.shape(), std::move(out), {na, nb}, [na, nb, n](detail::Node& o) {
        detail::accumulate(na, o.grad.data(), n);
        detail::accumulate(nb, o.grad.data(), n);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] - b.values()[i];
    auto na = a.handle();
    auto nb = b.handle();
    return detail::make_result(a.shape(), std::move(out), {na, nb}, [na, nb, n](detail::Node& o) {
        detail::accumulate(na, o.grad.data(), n);
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (size_t i = 0; i < n; ++i) nb->grad[i] -= o.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] * b.values()[i];
    auto na = a.handle();
    auto nb = b.handle();
    return detail::make_result(a.shape(), std::move(out), {na, nb}, [na, nb, n](detail::Node& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < n; ++i) na->grad[i] += o.grad[i] * nb->values[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (size_t i = 0; i < n; ++i) nb->grad[i] += o.grad[i] * na->values[i];
        }
    });
}

/// Multiply by a scalar constant (no gradient w.r.t. the factor).
inline Tensor scale(const Tensor& a, double factor) {
    const size_t n = static_cast<size_t>(a.numel());
    const float f = static_cast<float>(factor);
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] * f;
    auto na = a.handle();
    return detail::make_result(a.shape(), std::move(out), {na}, [na, n, factor](detail::Node& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < n; ++i) na->grad[i] += o.grad[i] * factor;
        }
    });
}

/// Broadcast-add a length-m bias row to every row of an n-by-m matrix.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (x.dims() != 2 || b.dims() != 1 || x.shape()[1] != b.shape()[0])
        throw std::invalid_argument("add_bias: shapes " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    const long r = x.shape()[0], c = x.shape()[1];
    std::vector<float> out(static_cast<size_t>(r * c));
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j)
            out[static_cast<size_t>(i * c + j)] =
                x.values()[static_cast<size_t>(i * c + j)] + b.values()[static_cast<size_t>(j)];
    auto nx = x.handle();
    auto nb = b.handle();
    return detail::make_result(x.shape(), std::move(out), {nx, nb}, [nx, nb, r, c](detail::Node& o) {
        detail::accumulate(nx, o.grad.data(), static_cast<size_t>(r * c));
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (long i = 0; i < r; ++i)
                for (long j = 0; j < c; ++j) nb->grad[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(i * c + j)];
        }
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dims() != 2 || b.dims() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const long m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<float> out(static_cast<size_t>(m * n), 0.0f);
    {
        const float* pa = a.values().data();
        const float* pb = b.values().data();
        float* pc = out.data();
        for (long i = 0; i < m; ++i)
            for (long l = 0; l < k; ++l) {
                const float av = pa[i * k + l];
                if (av == 0.0f) continue;
                const float* brow = pb + l * n;
                float* crow = pc + i * n;
                for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    }
    auto na = a.handle();
    auto nb = b.handle();
    return detail::make_result({m, n}, std::move(out), {na, nb}, [na, nb, m, k, n](detail::Node& o) {
        const double* pg = o.grad.data();
        if (na->requires_grad) {
            na->ensure_grad();
            // dA[i,l] += sum_j dC[i,j] * B[l,j]
            const float* pb = nb->values.data();
            double* da = na->grad.data();
            for (long i = 0; i < m; ++i)
                for (long l = 0; l < k; ++l) {
                    const double* grow = pg + i * n;
                    const float* brow = pb + l * n;
                    double acc = 0.0;
                    for (long j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    da[i * k + l] += acc;
                }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            // dB[l,j] += sum_i A[i,l] * dC[i,j]
            const float* pa = na->values.data();
            double* db = nb->grad.data();
            for (long i = 0; i < m; ++i)
                for (long l = 0; l < k; ++l) {
                    const double av = pa[i * k + l];
                    if (av == 0.0) continue;
                    const double* grow = pg + i * n;
                    double* brow = db + l * n;
                    for (long j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.dims() != 2) throw std::invalid_argument("transpose: expected 2-D, got " + shape_str(a.shape()));
    const long r = a.shape()[0], c = a.shape()[1];
    std::vector<float> out(static_cast<size_t>(r * c));
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = a.values()[static_cast<size_t>(i * c + j)];
    auto na = a.handle();
    return detail::make_result({c, r}, std::move(out), {na}, [na, r, c](detail::Node& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (long i = 0; i < r; ++i)
                for (long j = 0; j < c; ++j)
                    na->grad[static_cast<size_t>(i * c + j)] += o.grad[static_cast<size_t>(j * r + i)];
        }
    });
}

inline Tensor relu(const Tensor& a) {
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = a.values()[i] > 0.0f ? a.values()[i] : 0.0f;
    auto na = a.handle();
    // subgradient at 0 is 0
    return detail::make_result(a.shape(), std::move(out), {na}, [na, n](detail::Node& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                if (na->values[i] > 0.0f) na->grad[i] += o.grad[i];
        }
    });
}

inline Tensor log(const Tensor& a) {
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = std::log(a.values()[i]);
    auto na = a.handle();
    return detail::make_result(a.shape(), std::move(out), {na}, [na, n](detail::Node& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < n; ++i) na->grad[i] += o.grad[i] / static_cast<double>(na->values[i]);
        }
    });
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.values()) acc += v;
    auto na = a.handle();
    const size_t n = static_cast<size_t>(a.numel());
    return detail::make_result({1}, {static_cast<float>(acc)}, {na}, [na, n](detail::Node& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            const double g = o.grad[0];
            for (size_t i = 0; i < n; ++i) na->grad[i] += g;
        }
    });
}

inline Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.values()) acc += v;
    const size_t n = static_cast<size_t>(a.numel());
    acc /= static_cast<double>(n);
    auto na = a.handle();
    return detail::make_result({1}, {static_cast<float>(acc)}, {na}, [na, n](detail::Node& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            const double g = o.grad[0] / static_cast<double>(n);
            for (size_t i = 0; i < n; ++i) na->grad[i] += g;
        }
    });
}

namespace detail {
inline void softmax_row(const float* x, float* y, long m) {
    double mx = x[0];
    for (long j = 1; j < m; ++j) mx = std::max(mx, static_cast<double>(x[j]));
    double denom = 0.0;
    for (long j = 0; j < m; ++j) denom += std::exp(static_cast<double>(x[j]) - mx);
    for (long j = 0; j < m; ++j) y[j] = static_cast<float>(std::exp(static_cast<double>(x[j]) - mx) / denom);
}
} // namespace detail

/// Row-wise softmax; a 1-D input is treated as a single row.
inline Tensor softmax_rows(const Tensor& a) {
    if (a.dims() > 2) throw std::invalid_argument("softmax_rows: expected 1-D or 2-D, got " + shape_str(a.shape()));
    const long r = a.rows(), c = a.cols();
    std::vector<float> out(static_cast<size_t>(r * c));
    for (long i = 0; i < r; ++i) detail::softmax_row(a.values().data() + i * c, out.data() + i * c, c);
    auto na = a.handle();
    std::vector<float> probs = out;
    return detail::make_result(a.shape(), std::move(out), {na}, [na, r, c, probs = std::move(probs)](detail::Node& o) {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (long i = 0; i < r; ++i) {
            const float* y = probs.data() + i * c;
            const double* dy = o.grad.data() + i * c;
            double dot = 0.0;
            for (long j = 0; j < c; ++j) dot += dy[j] * y[j];
            double* dx = na->grad.data() + i * c;
            for (long j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
}

/// Row-wise softmax over a square score matrix restricted to columns j <= i
/// (strictly causal attention weights); masked entries are exactly zero.
inline Tensor causal_softmax_rows(const Tensor& a) {
    if (a.dims() != 2 || a.shape()[0] != a.shape()[1])
        throw std::invalid_argument("causal_softmax_rows: expected square 2-D, got " + shape_str(a.shape()));
    const long n = a.shape()[0];
    std::vector<float> out(static_cast<size_t>(n * n), 0.0f);
    for (long i = 0; i < n; ++i) detail::softmax_row(a.values().data() + i * n, out.data() + i * n, i + 1);
    auto na = a.handle();
    std::vector<float> probs = out;
    return detail::make_result(a.shape(), std::move(out), {na}, [na, n, probs = std::move(probs)](detail::Node& o) {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (long i = 0; i < n; ++i) {
            const long m = i + 1;
            const float* y = probs.data() + i * n;
            const double* dy = o.grad.data() + i * n;
            double dot = 0.0;
            for (long j = 0; j < m; ++j) dot += dy[j] * y[j];
            double* dx = na->grad.data() + i * n;
            for (long j = 0; j < m; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
/// Per-row log-sum-exp and the mean run in float64.
inline Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> targets) {
    if (logits.dims() != 2)
        throw std::invalid_argument("cross_entropy_with_logits: expected 2-D logits, got " + shape_str(logits.shape()));
    const long r = logits.shape()[0], c = logits.shape()[1];
    if (static_cast<long>(targets.size()) != r)
        throw std::invalid_argument("cross_entropy_with_logits: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(r) + " rows");
    for (int t : targets)
        if (t < 0 || t >= c) throw std::invalid_argument("cross_entropy_with_logits: target out of range");

    std::vector<float> probs(static_cast<size_t>(r * c));
    double total = 0.0;
    for (long i = 0; i < r; ++i) {
        const float* x = logits.values().data() + i * c;
        double mx = x[0];
        for (long j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(x[j]));
        double denom = 0.0;
        for (long j = 0; j < c; ++j) denom += std::exp(static_cast<double>(x[j]) - mx);
        const double lse = mx + std::log(denom);
        total += lse - static_cast<double>(x[targets[static_cast<size_t>(i)]]);
        float* p = probs.data() + i * c;
        for (long j = 0; j < c; ++j) p[j] = static_cast<float>(std::exp(static_cast<double>(x[j]) - mx) / denom);
    }
    total /= static_cast<double>(r);
    auto nl = logits.handle();
    std::vector<int> tgt(targets.begin(), targets.end());
    return detail::make_result(
        {1}, {static_cast<float>(total)}, {nl},
        [nl, r, c, probs = std::move(probs), tgt = std::move(tgt)](detail::Node& o) {
            if (!nl->requires_grad) return;
            nl->ensure_grad();
            const double g = o.grad[0] / static_cast<double>(r);
            for (long i = 0; i < r; ++i) {
                const float* p = probs.data() + i * c;
                double* d = nl->grad.data() + i * c;
                const long t = tgt[static_cast<size_t>(i)];
                for (long j = 0; j < c; ++j) d[j] += g * (p[j] - (j == t ? 1.0 : 0.0));
            }
        });
}

inline Tensor slice_cols(const Tensor& a, long first, long width) {
    if (a.dims() != 2) throw std::invalid_argument("slice_cols: expected 2-D, got " + shape_str(a.shape()));
    const long r = a.shape()[0], c = a.shape()[1];
    if (first < 0 || width <= 0 || first + width > c)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(first) + ", " +
                                    std::to_string(first + width) + ") out of " + std::to_string(c) + " columns");
    std::vector<float> out(static_cast<size_t>(r * width));
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < width; ++j)
            out[static_cast<size_t>(i * width + j)] = a.values()[static_cast<size_t>(i * c + first + j)];
    auto na = a.handle();
    return detail::make_result({r, width}, std::move(out), {na}, [na, r, c, first, width](detail::Node& o) {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (long i = 0; i < r; ++i)
            for (long j = 0; j < width; ++j)
                na->grad[static_cast<size_t>(i * c + first + j)] += o.grad[static_cast<size_t>(i * width + j)];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const long r = parts.front().shape()[0];
    long total = 0;
    for (const Tensor& p : parts) {
        if (p.dims() != 2 || p.shape()[0] != r)
            throw std::invalid_argument("concat_cols: row mismatch, " + shape_str(parts.front().shape()) + " vs " +
                                        shape_str(p.shape()));
        total += p.shape()[1];
    }
    std::vector<float> out(static_cast<size_t>(r * total));
    std::vector<detail::NodePtr> parents;
    std::vector<long> widths;
    long off = 0;
    for (const Tensor& p : parts) {
        const long w = p.shape()[1];
        for (long i = 0; i < r; ++i)
            for (long j = 0; j < w; ++j)
                out[static_cast<size_t>(i * total + off + j)] = p.values()[static_cast<size_t>(i * w + j)];
        parents.push_back(p.handle());
        widths.push_back(w);
        off += w;
    }
    auto ps = parents;
    return detail::make_result({r, total}, std::move(out), std::move(parents),
                               [ps, widths, r, total](detail::Node& o) {
                                   long off2 = 0;
                                   for (size_t k = 0; k < ps.size(); ++k) {
                                       const long w = widths[k];
                                       if (ps[k]->requires_grad) {
                                           ps[k]->ensure_grad();
                                           for (long i = 0; i < r; ++i)
                                               for (long j = 0; j < w; ++j)
                                                   ps[k]->grad[static_cast<size_t>(i * w + j)] +=
                                                       o.grad[static_cast<size_t>(i * total + off2 + j)];
                                       }
                                       off2 += w;
                                   }
                               });
}

/// Per-row layer normalization with learned gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.dims() != 2 || gamma.dims() != 1 || beta.dims() != 1 || gamma.shape()[0] != x.shape()[1] ||
        beta.shape()[0] != x.shape()[1])
        throw std::invalid_argument("layer_norm: shapes " + shape_str(x.shape()) + ", " + shape_str(gamma.shape()) +
                                    ", " + shape_str(beta.shape()));
    const long r = x.shape()[0], c = x.shape()[1];
    std::vector<float> out(static_cast<size_t>(r * c));
    std::vector<float> xhat(static_cast<size_t>(r * c));
    std::vector<double> inv_std(static_cast<size_t>(r));
    for (long i = 0; i < r; ++i) {
        const float* p = x.values().data() + i * c;
        double mu = 0.0;
        for (long j = 0; j < c; ++j) mu += p[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (long j = 0; j < c; ++j) {
            const double d = p[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (long j = 0; j < c; ++j) {
            const float h = static_cast<float>((p[j] - mu) * is);
            xhat[static_cast<size_t>(i * c + j)] = h;
            out[static_cast<size_t>(i * c + j)] =
                h * gamma.values()[static_cast<size_t>(j)] + beta.values()[static_cast<size_t>(j)];
        }
    }
    auto nx = x.handle();
    auto ng = gamma.handle();
    auto nb = beta.handle();
    return detail::make_result(
        x.shape(), std::move(out), {nx, ng, nb},
        [nx, ng, nb, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& o) {
            if (ng->requires_grad) {
                ng->ensure_grad();
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j)
                        ng->grad[static_cast<size_t>(j)] +=
                            o.grad[static_cast<size_t>(i * c + j)] * xhat[static_cast<size_t>(i * c + j)];
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j)
                        nb->grad[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(i * c + j)];
            }
            if (nx->requires_grad) {
                nx->ensure_grad();
                for (long i = 0; i < r; ++i) {
                    const double* dy = o.grad.data() + i * c;
                    const float* xh = xhat.data() + i * c;
                    double m1 = 0.0, m2 = 0.0; // mean(dxhat), mean(dxhat * xhat)
                    for (long j = 0; j < c; ++j) {
                        const double dxh = dy[j] * ng->values[static_cast<size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    const double is = inv_std[static_cast<size_t>(i)];
                    double* dx = nx->grad.data() + i * c;
                    for (long j = 0; j < c; ++j) {
                        const double dxh = dy[j] * ng->values[static_cast<size_t>(j)];
                        dx[j] += is * (dxh - m1 - static_cast<double>(xh[j]) * m2);
                    }
                }
            }
        });
}

/// Gather rows of an embedding table; the backward pass scatter-adds.
inline Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
    if (table.dims() != 2) throw std::invalid_argument("embedding_rows: table must be 2-D, got " + shape_str(table.shape()));
    const long v = table.shape()[0], d = table.shape()[1];
    const long n = static_cast<long>(ids.size());
    if (n == 0) throw std::invalid_argument("embedding_rows: empty id list");
    for (int id : ids)
        if (id < 0 || id >= v) throw std::invalid_argument("embedding_rows: id " + std::to_string(id) + " out of range");
    std::vector<float> out(static_cast<size_t>(n * d));
    for (long i = 0; i < n; ++i)
        std::copy_n(table.values().data() + static_cast<long>(ids[static_cast<size_t>(i)]) * d, d, out.data() + i * d);
    auto nt = table.handle();
    std::vector<int> idv(ids.begin(), ids.end());
    return detail::make_result({n, d}, std::move(out), {nt}, [nt, d, idv = std::move(idv)](detail::Node& o) {
        if (!nt->requires_grad) return;
        nt->ensure_grad();
        for (size_t i = 0; i < idv.size(); ++i) {
            double* dst = nt->grad.data() + static_cast<long>(idv[i]) * d;
            const double* src = o.grad.data() + static_cast<long>(i) * d;
            for (long j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

/// Accumulate d(loss)/d(leaf) into every reachable requires-grad leaf.
///
/// Interior (non-leaf) gradients are transient and reset on each call; leaf
/// gradients add up across calls until zeroed, so calling backward on several
/// micro-batch losses accumulates their gradients.
inline void backward(const Tensor& loss) {
    if (!loss.valid() || loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar" +
                                    (loss.valid() ? ", got shape " + shape_str(loss.shape()) : std::string()));
    detail::Node* root = loss.node();
    if (!root->requires_grad)
        throw std::invalid_argument("backward: loss is not connected to any requires_grad tensor");

    // Reverse post-order over the requires-grad subgraph is a valid
    // topological order for the backward sweep.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            detail::Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (detail::Node* n : order)
        if (n->backprop) n->grad.assign(n->values.size(), 0.0);
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

} // namespace proglm
