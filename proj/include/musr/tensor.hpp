#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "musr/common.hpp"
#include "musr/rng.hpp"
#include "musr/thread_pool.hpp"

// Dense row-major tensors with reverse-mode differentiation. The tape is
// implicit: every op output holds its parents and a closure that pushes the
// output gradient back into them. Instantiate with double for checking and
// float for training throughput.

namespace musr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Boolean validity mask over a [batch, time] id grid; true = real token.
struct Mask {
    std::size_t batch = 0;
    std::size_t time = 0;
    std::vector<std::uint8_t> valid;

    bool at(std::size_t b, std::size_t t) const { return valid[b * time + t] != 0; }
};

namespace detail {

// Graph construction can be suspended (inference, evaluation) so that op
// outputs carry no parents and intermediates free up immediately.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline constexpr std::size_t kParallelMinWork = 32768;

template <typename Body>
void maybe_parallel(std::size_t count, std::size_t total_work, const Body& body) {
    if (total_work < kParallelMinWork || count < 2) {
        body(0, count);
    } else {
        parallel_for(count, body);
    }
}

// c[M,N] (+)= a[M,K] * b[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    maybe_parallel(m, m * k * n, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            T* crow = c + i * n;
            if (!accumulate) std::fill(crow, crow + n, T(0));
            const T* arow = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T av = arow[kk];
                const T* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

// c[M,N] += a[M,K] * b[K,N], accumulating into c.
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    maybe_parallel(m, m * k * n, [=](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            T* crow = c + i * n;
            const T* arow = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T av = arow[kk];
                const T* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
    std::vector<T> t(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
    return t;
}

// c[M,P] += a[M,N] * b[P,N]^T. The transpose costs O(P*N) and buys the
// vectorizable row-update loop; reductions over the inner axis do not
// auto-vectorize.
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t p) {
    const std::vector<T> bt = transpose(b, p, n);  // [N,P]
    gemm_nn_acc(a, bt.data(), c, m, n, p);
}

// c[K,N] += a[M,K]^T * b[M,N]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const std::vector<T> at = transpose(a, m, k);  // [K,M]
    gemm_nn_acc(at.data(), b, c, k, m, n);
}

}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : previous(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous; }
    bool previous;
};

template <typename T>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad;  // allocated iff requires_grad
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backprop;
    };

    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        node_->values.assign(shape_numel(node_->shape), T(0));
        if (requires_grad) enable_grad();
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        if (requires_grad) t.enable_grad();
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from(Shape{}, std::vector<T>{v}, requires_grad);
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->values.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape[axis]; }

    std::vector<T>& values() { return node_->values; }
    const std::vector<T>& values() const { return node_->values; }
    T item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor");
        return node_->values[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    void set_requires_grad(bool on) {
        if (!node_->parents.empty())
            throw ContractError("requires_grad can only be set on leaf tensors");
        if (on)
            enable_grad();
        else {
            node_->requires_grad = false;
            node_->grad.clear();
        }
    }

    std::vector<T>& grad() {
        if (!requires_grad()) throw ContractError("tensor does not track gradients");
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        if (!requires_grad()) throw ContractError("tensor does not track gradients");
        return node_->grad;
    }

    void zero_grad() {
        if (requires_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    bool has_nonfinite() const {
        for (T v : node_->values)
            if (!std::isfinite(static_cast<double>(v))) return true;
        return false;
    }

    // Value copy detached from the tape.
    Tensor detached() const { return from(node_->shape, node_->values, false); }

    std::shared_ptr<Node>& node() { return node_; }
    const std::shared_ptr<Node>& node() const { return node_; }

    // Internal: op output factory. Grad tracking engages only when some
    // parent participates and grad mode is on.
    static Tensor make(Shape shape, std::vector<T> values,
                       std::vector<std::shared_ptr<Node>> parents,
                       std::function<void(Node&)> backprop) {
        Tensor t = from(std::move(shape), std::move(values), false);
        bool any = false;
        for (const auto& p : parents)
            if (p->requires_grad) any = true;
        if (any && detail::grad_mode_flag()) {
            t.node_->requires_grad = true;
            t.node_->grad.assign(t.node_->values.size(), T(0));
            t.node_->parents = std::move(parents);
            t.node_->backprop = std::move(backprop);
        }
        return t;
    }

private:
    void enable_grad() {
        node_->requires_grad = true;
        node_->grad.assign(node_->values.size(), T(0));
    }

    std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Populates .grad for every grad-tracking tensor reachable from `loss`.
// Gradients accumulate across calls; callers zero them between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
    using Node = typename Tensor<T>::Node;
    if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss");
    if (!loss.requires_grad())
        throw ContractError("backward() requires a loss that participates in the tape");

    // Iterative post-order over parent edges.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior gradients are scratch space for this pass; only leaves keep
    // accumulating across repeated calls.
    for (Node* node : order)
        if (node->backprop) std::fill(node->grad.begin(), node->grad.end(), T(0));

    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make(a.shape(), std::move(out), {an, bn},
                           [an, bn](typename Tensor<T>::Node& o) {
                               if (an->requires_grad)
                                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                                       an->grad[i] += o.grad[i];
                               if (bn->requires_grad)
                                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                                       bn->grad[i] += o.grad[i];
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make(a.shape(), std::move(out), {an, bn},
                           [an, bn](typename Tensor<T>::Node& o) {
                               if (an->requires_grad)
                                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                                       an->grad[i] += o.grad[i] * bn->values[i];
                               if (bn->requires_grad)
                                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                                       bn->grad[i] += o.grad[i] * an->values[i];
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    auto an = a.node();
    return Tensor<T>::make(a.shape(), std::move(out), {an},
                           [an, factor](typename Tensor<T>::Node& o) {
                               if (an->requires_grad)
                                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                                       an->grad[i] += o.grad[i] * factor;
                           });
}

// x[..., D] + bias[D], broadcast over all leading axes.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() < 1 || bias.rank() != 1 || x.shape().back() != bias.extent(0))
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                             " does not match feature axis of " + shape_str(x.shape()));
    const std::size_t d = bias.extent(0);
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    const auto& bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + bv[j];
    auto xn = x.node();
    auto bn = bias.node();
    return Tensor<T>::make(x.shape(), std::move(out), {xn, bn},
                           [xn, bn, rows, d](typename Tensor<T>::Node& o) {
                               if (xn->requires_grad)
                                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                                       xn->grad[i] += o.grad[i];
                               if (bn->requires_grad)
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t j = 0; j < d; ++j)
                                           bn->grad[j] += o.grad[r * d + j];
                           });
}

// x[B,T,D] + table[T,D], broadcast over the batch axis (position encodings).
template <typename T>
Tensor<T> add_time_bias(const Tensor<T>& x, const Tensor<T>& table) {
    if (x.rank() != 3 || table.rank() != 2 || x.extent(1) != table.extent(0) ||
        x.extent(2) != table.extent(1))
        throw DimensionError("add_time_bias: table " + shape_str(table.shape()) +
                             " does not match " + shape_str(x.shape()));
    const std::size_t bsz = x.extent(0);
    const std::size_t td = table.numel();
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    const auto& tv = table.values();
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t i = 0; i < td; ++i) out[b * td + i] = xv[b * td + i] + tv[i];
    auto xn = x.node();
    auto tn = table.node();
    return Tensor<T>::make(x.shape(), std::move(out), {xn, tn},
                           [xn, tn, bsz, td](typename Tensor<T>::Node& o) {
                               if (xn->requires_grad)
                                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                                       xn->grad[i] += o.grad[i];
                               if (tn->requires_grad)
                                   for (std::size_t b = 0; b < bsz; ++b)
                                       for (std::size_t i = 0; i < td; ++i)
                                           tn->grad[i] += o.grad[b * td + i];
                           });
}

// s[B,D] -> [B,T,D], the same vector repeated at every time step.
template <typename T>
Tensor<T> broadcast_time(const Tensor<T>& s, std::size_t time) {
    if (s.rank() != 2) throw DimensionError("broadcast_time expects [B,D]");
    const std::size_t bsz = s.extent(0);
    const std::size_t d = s.extent(1);
    std::vector<T> out(bsz * time * d);
    const auto& sv = s.values();
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t t = 0; t < time; ++t)
            std::copy(sv.begin() + b * d, sv.begin() + (b + 1) * d,
                      out.begin() + (b * time + t) * d);
    auto sn = s.node();
    return Tensor<T>::make({bsz, time, d}, std::move(out), {sn},
                           [sn, bsz, time, d](typename Tensor<T>::Node& o) {
                               if (!sn->requires_grad) return;
                               for (std::size_t b = 0; b < bsz; ++b)
                                   for (std::size_t t = 0; t < time; ++t)
                                       for (std::size_t j = 0; j < d; ++j)
                                           sn->grad[b * d + j] +=
                                               o.grad[(b * time + t) * d + j];
                           });
}

// Concatenate along the last (feature) axis.
template <typename T>
Tensor<T> concat_features(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank() || a.rank() < 1)
        throw DimensionError("concat_features: rank mismatch");
    for (std::size_t i = 0; i + 1 < a.rank(); ++i)
        if (a.extent(i) != b.extent(i))
            throw DimensionError("concat_features: leading extents differ: " +
                                 shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t da = a.shape().back();
    const std::size_t db = b.shape().back();
    const std::size_t rows = a.numel() / da;
    Shape out_shape = a.shape();
    out_shape.back() = da + db;
    std::vector<T> out(rows * (da + db));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy(av.begin() + r * da, av.begin() + (r + 1) * da, out.begin() + r * (da + db));
        std::copy(bv.begin() + r * db, bv.begin() + (r + 1) * db,
                  out.begin() + r * (da + db) + da);
    }
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make(std::move(out_shape), std::move(out), {an, bn},
                           [an, bn, rows, da, db](typename Tensor<T>::Node& o) {
                               const std::size_t d = da + db;
                               for (std::size_t r = 0; r < rows; ++r) {
                                   if (an->requires_grad)
                                       for (std::size_t j = 0; j < da; ++j)
                                           an->grad[r * da + j] += o.grad[r * d + j];
                                   if (bn->requires_grad)
                                       for (std::size_t j = 0; j < db; ++j)
                                           bn->grad[r * db + j] += o.grad[r * d + da + j];
                               }
                           });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    auto xn = x.node();
    return Tensor<T>::make(x.shape(), std::move(out), {xn},
                           [xn](typename Tensor<T>::Node& o) {
                               if (!xn->requires_grad) return;
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                   if (xn->values[i] > T(0)) xn->grad[i] += o.grad[i];
                           });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    auto xn = x.node();
    return Tensor<T>::make(Shape{}, {acc}, {xn}, [xn](typename Tensor<T>::Node& o) {
        if (!xn->requires_grad) return;
        const T g = o.grad[0];
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

// a [..., K] x b [K, N] -> [..., N]. Leading axes of `a` are flattened into
// rows; b must be rank 2.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() != 2)
        throw DimensionError("matmul expects a rank>=2 lhs and a rank-2 rhs");
    const std::size_t k = a.shape().back();
    if (k != b.extent(0))
        throw DimensionError("matmul: inner extents disagree: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    const std::size_t n = b.extent(1);
    const std::size_t m = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(m * n);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n, false);
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make(std::move(out_shape), std::move(out), {an, bn},
                           [an, bn, m, k, n](typename Tensor<T>::Node& o) {
                               if (an->requires_grad)
                                   detail::gemm_nt_acc(o.grad.data(), bn->values.data(),
                                                       an->grad.data(), m, n, k);
                               if (bn->requires_grad)
                                   detail::gemm_tn_acc(an->values.data(), o.grad.data(),
                                                       bn->grad.data(), m, k, n);
                           });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSlices {
    std::size_t outer, n, inner;
};

inline AxisSlices axis_slices(const Shape& shape, std::size_t axis) {
    AxisSlices s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

// Max-subtracted softmax along `axis` (default: last). Finite inputs required.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
    const auto& xv = x.values();
    for (T v : xv)
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError("softmax: non-finite input");
    const auto s = detail::axis_slices(x.shape(), axis);
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            T mx = xv[base];
            for (std::size_t j = 1; j < s.n; ++j)
                mx = std::max(mx, xv[base + j * s.inner]);
            double denom = 0;
            for (std::size_t j = 0; j < s.n; ++j) {
                const T e = std::exp(xv[base + j * s.inner] - mx);
                out[base + j * s.inner] = e;
                denom += static_cast<double>(e);
            }
            const T inv = static_cast<T>(1.0 / denom);
            for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] *= inv;
        }
    auto xn = x.node();
    auto yv = std::make_shared<std::vector<T>>(out);
    return Tensor<T>::make(x.shape(), std::move(out), {xn},
                           [xn, yv, s](typename Tensor<T>::Node& o) {
                               if (!xn->requires_grad) return;
                               const auto& y = *yv;
                               for (std::size_t ot = 0; ot < s.outer; ++ot)
                                   for (std::size_t in = 0; in < s.inner; ++in) {
                                       const std::size_t base = ot * s.n * s.inner + in;
                                       T dot = T(0);
                                       for (std::size_t j = 0; j < s.n; ++j) {
                                           const std::size_t idx = base + j * s.inner;
                                           dot += o.grad[idx] * y[idx];
                                       }
                                       for (std::size_t j = 0; j < s.n; ++j) {
                                           const std::size_t idx = base + j * s.inner;
                                           xn->grad[idx] += y[idx] * (o.grad[idx] - dot);
                                       }
                                   }
                           });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    return softmax(x, x.rank() - 1);
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("log_softmax: axis out of range");
    const auto& xv = x.values();
    for (T v : xv)
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError("log_softmax: non-finite input");
    const auto s = detail::axis_slices(x.shape(), axis);
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            T mx = xv[base];
            for (std::size_t j = 1; j < s.n; ++j)
                mx = std::max(mx, xv[base + j * s.inner]);
            double denom = 0;
            for (std::size_t j = 0; j < s.n; ++j)
                denom += std::exp(static_cast<double>(xv[base + j * s.inner] - mx));
            const T lse = mx + static_cast<T>(std::log(denom));
            for (std::size_t j = 0; j < s.n; ++j)
                out[base + j * s.inner] = xv[base + j * s.inner] - lse;
        }
    auto xn = x.node();
    auto yv = std::make_shared<std::vector<T>>(out);
    return Tensor<T>::make(x.shape(), std::move(out), {xn},
                           [xn, yv, s](typename Tensor<T>::Node& o) {
                               if (!xn->requires_grad) return;
                               const auto& y = *yv;
                               for (std::size_t ot = 0; ot < s.outer; ++ot)
                                   for (std::size_t in = 0; in < s.inner; ++in) {
                                       const std::size_t base = ot * s.n * s.inner + in;
                                       T gsum = T(0);
                                       for (std::size_t j = 0; j < s.n; ++j)
                                           gsum += o.grad[base + j * s.inner];
                                       for (std::size_t j = 0; j < s.n; ++j) {
                                           const std::size_t idx = base + j * s.inner;
                                           xn->grad[idx] +=
                                               o.grad[idx] - std::exp(y[idx]) * gsum;
                                       }
                                   }
                           });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    return log_softmax(x, x.rank() - 1);
}

// ---------------------------------------------------------------------------
// Lookup, reduction, normalization
// ---------------------------------------------------------------------------

// table[V,D] gathered by ids (any shape) -> ids_shape + [D].
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::int32_t>& ids,
                           const Shape& ids_shape) {
    if (table.rank() != 2) throw DimensionError("embedding_lookup expects a [V,D] table");
    if (ids.size() != shape_numel(ids_shape))
        throw DimensionError("embedding_lookup: id count does not match ids shape");
    const std::size_t v = table.extent(0);
    const std::size_t d = table.extent(1);
    for (std::int32_t id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw InputError("embedding_lookup: id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(v));
    Shape out_shape = ids_shape;
    out_shape.push_back(d);
    std::vector<T> out(ids.size() * d);
    const auto& tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy(tv.begin() + ids[i] * d, tv.begin() + (ids[i] + 1) * d, out.begin() + i * d);
    auto tn = table.node();
    auto ids_copy = std::make_shared<std::vector<std::int32_t>>(ids);
    return Tensor<T>::make(std::move(out_shape), std::move(out), {tn},
                           [tn, ids_copy, d](typename Tensor<T>::Node& o) {
                               if (!tn->requires_grad) return;
                               const auto& idv = *ids_copy;
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                   T* dst = tn->grad.data() + idv[i] * d;
                                   const T* src = o.grad.data() + i * d;
                                   for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                               }
                           });
}

// Reduce one axis by max. The argmax per reduced slice is recorded; backward
// routes the gradient to exactly that element (ties to the lowest index).
template <typename T>
Tensor<T> max_over_axis(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("max_over_axis: axis out of range");
    const auto s = detail::axis_slices(x.shape(), axis);
    Shape out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.extent(i));
    std::vector<T> out(s.outer * s.inner);
    auto arg = std::make_shared<std::vector<std::uint32_t>>(s.outer * s.inner);
    const auto& xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            T best = xv[base];
            std::uint32_t best_j = 0;
            for (std::size_t j = 1; j < s.n; ++j) {
                const T v = xv[base + j * s.inner];
                if (v > best) {
                    best = v;
                    best_j = static_cast<std::uint32_t>(j);
                }
            }
            out[o * s.inner + in] = best;
            (*arg)[o * s.inner + in] = best_j;
        }
    auto xn = x.node();
    return Tensor<T>::make(std::move(out_shape), std::move(out), {xn},
                           [xn, arg, s](typename Tensor<T>::Node& o) {
                               if (!xn->requires_grad) return;
                               for (std::size_t ot = 0; ot < s.outer; ++ot)
                                   for (std::size_t in = 0; in < s.inner; ++in) {
                                       const std::size_t oi = ot * s.inner + in;
                                       const std::size_t src =
                                           ot * s.n * s.inner + (*arg)[oi] * s.inner + in;
                                       xn->grad[src] += o.grad[oi];
                                   }
                           });
}

// Per-dimension max over valid (non-pad) time steps: [B,T,D] -> [B,D].
template <typename T>
Tensor<T> masked_max_time(const Tensor<T>& x, const Mask& mask) {
    if (x.rank() != 3) throw DimensionError("masked_max_time expects [B,T,D]");
    const std::size_t bsz = x.extent(0);
    const std::size_t time = x.extent(1);
    const std::size_t d = x.extent(2);
    if (mask.batch != bsz || mask.time != time)
        throw DimensionError("masked_max_time: mask grid does not match tensor");
    std::vector<T> out(bsz * d);
    auto arg = std::make_shared<std::vector<std::uint32_t>>(bsz * d);
    const auto& xv = x.values();
    for (std::size_t b = 0; b < bsz; ++b) {
        bool any = false;
        for (std::size_t t = 0; t < time && !any; ++t) any = mask.at(b, t);
        if (!any)
            throw InputError("masked_max_time: row " + std::to_string(b) +
                             " has no valid positions");
        for (std::size_t j = 0; j < d; ++j) {
            bool seen = false;
            T best = T(0);
            std::uint32_t best_t = 0;
            for (std::size_t t = 0; t < time; ++t) {
                if (!mask.at(b, t)) continue;
                const T v = xv[(b * time + t) * d + j];
                if (!seen || v > best) {
                    best = v;
                    best_t = static_cast<std::uint32_t>(t);
                    seen = true;
                }
            }
            out[b * d + j] = best;
            (*arg)[b * d + j] = best_t;
        }
    }
    auto xn = x.node();
    return Tensor<T>::make({bsz, d}, std::move(out), {xn},
                           [xn, arg, bsz, time, d](typename Tensor<T>::Node& o) {
                               if (!xn->requires_grad) return;
                               for (std::size_t b = 0; b < bsz; ++b)
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const std::size_t t = (*arg)[b * d + j];
                                       xn->grad[(b * time + t) * d + j] += o.grad[b * d + j];
                                   }
                           });
}

// Layer normalization over the last axis with learnable gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1)
        throw DimensionError("layer_norm: expects x[...,D], gain[D], bias[D]");
    const std::size_t d = x.shape().back();
    if (gain.extent(0) != d || bias.extent(0) != d)
        throw DimensionError("layer_norm: gain/bias length does not match feature axis");
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        double mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*inv_std)[r] = istd;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = static_cast<T>((row[j] - mean)) * istd;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    return Tensor<T>::make(
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat, inv_std, rows, d](typename Tensor<T>::Node& o) {
            if (xn->requires_grad) {
                detail::maybe_parallel(rows, rows * d * 4, [&](std::size_t r0, std::size_t r1) {
                    for (std::size_t r = r0; r < r1; ++r) {
                        const T* g = o.grad.data() + r * d;
                        const T* h = xhat->data() + r * d;
                        T sum_dh = T(0), sum_dh_h = T(0);
                        for (std::size_t j = 0; j < d; ++j) {
                            const T dh = g[j] * gn->values[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[j];
                        }
                        const T inv_d = T(1) / static_cast<T>(d);
                        const T istd = (*inv_std)[r];
                        T* dst = xn->grad.data() + r * d;
                        for (std::size_t j = 0; j < d; ++j) {
                            const T dh = g[j] * gn->values[j];
                            dst[j] += istd * (dh - inv_d * sum_dh - h[j] * inv_d * sum_dh_h);
                        }
                    }
                });
            }
            // gain/bias accumulation stays serial so results are independent
            // of the thread count.
            if (gn->requires_grad || bn->requires_grad) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        const T g = o.grad[r * d + j];
                        if (gn->requires_grad) gn->grad[j] += g * (*xhat)[r * d + j];
                        if (bn->requires_grad) bn->grad[j] += g;
                    }
            }
        });
}

// Inverted dropout: scales kept activations by 1/(1-rate) so evaluation needs
// no rescaling. Identity when not training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<std::uint8_t>>(x.numel());
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool keep = rng.uniform01() >= rate;
        (*mask)[i] = keep ? 1 : 0;
        out[i] = keep ? xv[i] * keep_scale : T(0);
    }
    auto xn = x.node();
    return Tensor<T>::make(x.shape(), std::move(out), {xn},
                           [xn, mask, keep_scale](typename Tensor<T>::Node& o) {
                               if (!xn->requires_grad) return;
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                   if ((*mask)[i]) xn->grad[i] += o.grad[i] * keep_scale;
                           });
}

// ---------------------------------------------------------------------------
// Fused multi-head self-attention
// ---------------------------------------------------------------------------

// q,k,v: [B,T,D] with D divisible by `heads`. Scores use 1/sqrt(head_dim).
// `key_valid` (optional) masks pad keys; `causal` hides future positions.
// One tape node; the softmax probabilities are kept for the backward pass.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         std::size_t heads, const Mask* key_valid, bool causal) {
    check_same_shape(q, k, "self_attention");
    check_same_shape(q, v, "self_attention");
    if (q.rank() != 3) throw DimensionError("self_attention expects [B,T,D]");
    const std::size_t bsz = q.extent(0);
    const std::size_t time = q.extent(1);
    const std::size_t dim = q.extent(2);
    if (heads == 0 || dim % heads != 0)
        throw DimensionError("self_attention: model width not divisible by head count");
    if (key_valid && (key_valid->batch != bsz || key_valid->time != time))
        throw DimensionError("self_attention: mask grid does not match input");
    const std::size_t hd = dim / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

    auto probs = std::make_shared<std::vector<T>>(bsz * heads * time * time);
    std::vector<T> out(q.numel(), T(0));
    const T* qd = q.values().data();
    const T* kd = k.values().data();
    const T* vd = v.values().data();
    std::shared_ptr<Mask> mask_copy =
        key_valid ? std::make_shared<Mask>(*key_valid) : nullptr;

    const auto fwd = [&](std::size_t bh0, std::size_t bh1) {
        std::vector<T> row(time);
        for (std::size_t bh = bh0; bh < bh1; ++bh) {
            const std::size_t b = bh / heads;
            const std::size_t h = bh % heads;
            const std::size_t feat = h * hd;
            for (std::size_t i = 0; i < time; ++i) {
                T mx = std::numeric_limits<T>::lowest();
                for (std::size_t j = 0; j < time; ++j) {
                    bool blocked = (causal && j > i) ||
                                   (mask_copy && !mask_copy->at(b, j));
                    if (blocked) {
                        row[j] = std::numeric_limits<T>::lowest();
                        continue;
                    }
                    const T* qrow = qd + (b * time + i) * dim + feat;
                    const T* krow = kd + (b * time + j) * dim + feat;
                    T acc = T(0);
                    for (std::size_t f = 0; f < hd; ++f) acc += qrow[f] * krow[f];
                    row[j] = acc * scale;
                    mx = std::max(mx, row[j]);
                }
                double denom = 0;
                for (std::size_t j = 0; j < time; ++j) {
                    if (row[j] == std::numeric_limits<T>::lowest()) {
                        row[j] = T(0);
                        continue;
                    }
                    row[j] = std::exp(row[j] - mx);
                    denom += static_cast<double>(row[j]);
                }
                const T inv = denom > 0 ? static_cast<T>(1.0 / denom) : T(0);
                T* prow = probs->data() + (bh * time + i) * time;
                T* orow = out.data() + (b * time + i) * dim + feat;
                for (std::size_t j = 0; j < time; ++j) {
                    const T p = row[j] * inv;
                    prow[j] = p;
                    if (p != T(0)) {
                        const T* vrow = vd + (b * time + j) * dim + feat;
                        for (std::size_t f = 0; f < hd; ++f) orow[f] += p * vrow[f];
                    }
                }
            }
        }
    };
    detail::maybe_parallel(bsz * heads, bsz * heads * time * time * hd, fwd);

    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    return Tensor<T>::make(
        q.shape(), std::move(out), {qn, kn, vn},
        [qn, kn, vn, probs, bsz, heads, time, dim, hd, scale](typename Tensor<T>::Node& o) {
            const bool need_q = qn->requires_grad;
            const bool need_k = kn->requires_grad;
            const bool need_v = vn->requires_grad;
            if (!(need_q || need_k || need_v)) return;
            const auto bwd = [&](std::size_t bh0, std::size_t bh1) {
                std::vector<T> dp(time);
                for (std::size_t bh = bh0; bh < bh1; ++bh) {
                    const std::size_t b = bh / heads;
                    const std::size_t h = bh % heads;
                    const std::size_t feat = h * hd;
                    for (std::size_t i = 0; i < time; ++i) {
                        const T* go = o.grad.data() + (b * time + i) * dim + feat;
                        const T* prow = probs->data() + (bh * time + i) * time;
                        T dot = T(0);
                        for (std::size_t j = 0; j < time; ++j) {
                            if (prow[j] == T(0)) {
                                dp[j] = T(0);
                                continue;
                            }
                            const T* vrow = vn->values.data() + (b * time + j) * dim + feat;
                            T acc = T(0);
                            for (std::size_t f = 0; f < hd; ++f) acc += go[f] * vrow[f];
                            dp[j] = acc;
                            dot += acc * prow[j];
                        }
                        for (std::size_t j = 0; j < time; ++j) {
                            const T p = prow[j];
                            if (p == T(0)) continue;
                            const T ds = p * (dp[j] - dot) * scale;
                            if (need_v) {
                                T* dv = vn->grad.data() + (b * time + j) * dim + feat;
                                for (std::size_t f = 0; f < hd; ++f) dv[f] += p * go[f];
                            }
                            if (need_q) {
                                const T* krow =
                                    kn->values.data() + (b * time + j) * dim + feat;
                                T* dq = qn->grad.data() + (b * time + i) * dim + feat;
                                for (std::size_t f = 0; f < hd; ++f) dq[f] += ds * krow[f];
                            }
                            if (need_k) {
                                const T* qrow =
                                    qn->values.data() + (b * time + i) * dim + feat;
                                T* dk = kn->grad.data() + (b * time + j) * dim + feat;
                                for (std::size_t f = 0; f < hd; ++f) dk[f] += ds * qrow[f];
                            }
                        }
                    }
                }
            };
            detail::maybe_parallel(bsz * heads, bsz * heads * time * time * hd, bwd);
        });
}

}  // namespace musr
