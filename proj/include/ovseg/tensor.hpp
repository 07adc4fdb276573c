#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ovseg/errors.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Node in the reverse-mode tape. The graph is rebuilt on every forward pass;
// backward() walks it once in reverse topological order and sums gradients
// into every requires_grad leaf.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until needed
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return build(std::move(shape), {}, requires_grad, T(0));
    }

    static Tensor full(Shape shape, T value) {
        return build(std::move(shape), {}, false, value);
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    // Seeded uniform init with He-style scaling from the incoming fan.
    static Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng,
                             bool requires_grad = true) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.node_->data) x = static_cast<T>(rng.uniform(-bound, bound));
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape[axis]; }

    const std::vector<T>& data() const { return node_->data; }
    // Leaf mutation between tapes (optimizer updates, gradient checking).
    std::vector<T>& mutable_data() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (node_->grad.empty()) throw Error("tensor: gradient not populated");
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    T item() const {
        if (size() != 1)
            throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return node_->data[0];
    }

    T operator()(std::size_t i) const { return node_->data[i]; }
    T operator()(std::size_t i, std::size_t j) const {
        return node_->data[i * node_->shape[1] + j];
    }
    T operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->data[(i * node_->shape[1] + j) * node_->shape[2] + k];
    }

    // Constant view of the same values: severs the tape so no gradient flows
    // upstream through this handle.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        t.node_->requires_grad = false;
        return t;
    }

    // Deep copy with grads/tape dropped. Keeps requires_grad unless frozen.
    Tensor clone(bool requires_grad) const {
        Tensor t = detach();
        t.node_->requires_grad = requires_grad;
        return t;
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

private:
    static Tensor build(Shape shape, std::vector<T>, bool requires_grad, T fill) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->data.assign(numel(shape), fill);
        t.node_->shape = std::move(shape);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
    for (const T& x : v)
        if (!std::isfinite(x))
            throw NumericError(std::string(op) + ": non-finite value in output");
}

// Wire a freshly computed output into the tape if any input needs gradients.
template <typename T, typename Fn>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> data,
                  std::vector<Tensor<T>> inputs, Fn&& backward) {
    detail::check_finite(name, data);
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(data));
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        auto node = out.node();
        node->requires_grad = true;
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward_fn = std::forward<Fn>(backward);
    }
    return out;
}

template <typename T>
std::vector<T>* grad_of(const std::shared_ptr<TensorNode<T>>& n) {
    if (!n->requires_grad) return nullptr;
    n->ensure_grad();
    return &n->grad;
}

}  // namespace detail

// Reverse accumulation from a scalar loss. Every requires_grad leaf reachable
// from `loss` ends up with its gradient summed over all paths.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward: loss " + shape_str(loss.shape()) + " is not a scalar");
    if (!loss.requires_grad()) return;  // constant: nothing to do

    // Iterative post-order topological sort over the parent DAG.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    struct Frame {
        TensorNode<T>* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode<T>* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

// Clears accumulated gradients on every node reachable from `root`, interior
// nodes included. Needed before re-running backward over a shared graph.
template <typename T>
void zero_graph_grads(const Tensor<T>& root) {
    std::vector<TensorNode<T>*> stack{root.node().get()};
    std::unordered_set<TensorNode<T>*> visited{root.node().get()};
    while (!stack.empty()) {
        TensorNode<T>* n = stack.back();
        stack.pop_back();
        n->grad.clear();
        for (const auto& p : n->parents)
            if (visited.insert(p.get()).second) stack.push_back(p.get());
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
void expect_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    expect_same_shape("add", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op<T>("add", a.shape(), std::move(out), {a, b},
                              [](TensorNode<T>& n) {
                                  for (int k = 0; k < 2; ++k)
                                      if (auto* g = detail::grad_of(n.parents[k]))
                                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                                              (*g)[i] += n.grad[i];
                              });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    expect_same_shape("sub", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op<T>("sub", a.shape(), std::move(out), {a, b},
                              [](TensorNode<T>& n) {
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] += n.grad[i];
                                  if (auto* g = detail::grad_of(n.parents[1]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] -= n.grad[i];
                              });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    expect_same_shape("mul", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op<T>("mul", a.shape(), std::move(out), {a, b},
                              [](TensorNode<T>& n) {
                                  const auto& da = n.parents[0]->data;
                                  const auto& db = n.parents[1]->data;
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] += n.grad[i] * db[i];
                                  if (auto* g = detail::grad_of(n.parents[1]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] += n.grad[i] * da[i];
                              });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    expect_same_shape("div", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    return detail::make_op<T>("div", a.shape(), std::move(out), {a, b},
                              [](TensorNode<T>& n) {
                                  const auto& da = n.parents[0]->data;
                                  const auto& db = n.parents[1]->data;
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] += n.grad[i] / db[i];
                                  if (auto* g = detail::grad_of(n.parents[1]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] -= n.grad[i] * da[i] / (db[i] * db[i]);
                              });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    return detail::make_op<T>("add_scalar", a.shape(), std::move(out), {a},
                              [](TensorNode<T>& n) {
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] += n.grad[i];
                              });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op<T>("mul_scalar", a.shape(), std::move(out), {a},
                              [c](TensorNode<T>& n) {
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] += n.grad[i] * c;
                              });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a.data()[i];
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                           : std::exp(x) / (T(1) + std::exp(x));
    }
    return detail::make_op<T>("sigmoid", a.shape(), std::move(out), {a},
                              [](TensorNode<T>& n) {
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                                          const T y = n.data[i];
                                          (*g)[i] += n.grad[i] * y * (T(1) - y);
                                      }
                              });
}

// x * sigmoid(x); smooth everywhere, which keeps finite-difference checks clean.
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a.data()[i];
        const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                              : std::exp(x) / (T(1) + std::exp(x));
        out[i] = x * s;
    }
    return detail::make_op<T>("silu", a.shape(), std::move(out), {a},
                              [](TensorNode<T>& n) {
                                  const auto& x = n.parents[0]->data;
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                                          const T xi = x[i];
                                          const T s = xi >= T(0)
                                                          ? T(1) / (T(1) + std::exp(-xi))
                                                          : std::exp(xi) / (T(1) + std::exp(xi));
                                          (*g)[i] += n.grad[i] * (s + xi * s * (T(1) - s));
                                      }
                              });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

// C[m×n] += A[m×k] · B[k×n], optionally transposing either input. Plain
// accumulate-into-rows loop; contiguity of the inner n loop is what matters.
template <typename T>
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const T* a, bool ta,
              const T* b, bool tb, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ta ? a[p * m + i] : a[i * k + p];
            if (av == T(0)) continue;
            if (!tb) {
                const T* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<T> out(m * n, T(0));
    detail::gemm_acc(m, k, n, a.data().data(), false, b.data().data(), false, out.data());
    return detail::make_op<T>(
        "matmul", {m, n}, std::move(out), {a, b}, [m, k, n](TensorNode<T>& n_) {
            const auto& A = n_.parents[0]->data;
            const auto& B = n_.parents[1]->data;
            if (auto* g = detail::grad_of(n_.parents[0]))
                detail::gemm_acc(m, n, k, n_.grad.data(), false, B.data(), true, g->data());
            if (auto* g = detail::grad_of(n_.parents[1]))
                detail::gemm_acc(k, m, n, A.data(), true, n_.grad.data(), false, g->data());
        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: expected 2-d tensor");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return detail::make_op<T>("transpose", {n, m}, std::move(out), {a},
                              [m, n](TensorNode<T>& nd) {
                                  if (auto* g = detail::grad_of(nd.parents[0]))
                                      for (std::size_t i = 0; i < m; ++i)
                                          for (std::size_t j = 0; j < n; ++j)
                                              (*g)[i * n + j] += nd.grad[j * m + i];
                              });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    std::vector<T> out = a.data();
    return detail::make_op<T>("reshape", std::move(shape), std::move(out), {a},
                              [](TensorNode<T>& n) {
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < n.grad.size(); ++i)
                                          (*g)[i] += n.grad[i];
                              });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
    if (a.ndim() != 2 || c1 > a.shape()[1] || c0 >= c1)
        throw ShapeError("slice_cols: bad range on " + shape_str(a.shape()));
    const std::size_t m = a.shape()[0], n = a.shape()[1], w = c1 - c0;
    std::vector<T> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * n + c0 + j];
    return detail::make_op<T>("slice_cols", {m, w}, std::move(out), {a},
                              [m, n, w, c0](TensorNode<T>& nd) {
                                  if (auto* g = detail::grad_of(nd.parents[0]))
                                      for (std::size_t i = 0; i < m; ++i)
                                          for (std::size_t j = 0; j < w; ++j)
                                              (*g)[i * n + c0 + j] += nd.grad[i * w + j];
                              });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts[0].shape()[0];
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.shape()[0] != m)
            throw ShapeError("concat_cols: row mismatch");
        n += p.shape()[1];
    }
    std::vector<T> out(m * n);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[1];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * n + off + j] = p.data()[i * w + j];
        off += w;
    }
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.shape()[1]);
    return detail::make_op<T>("concat_cols", {m, n}, std::move(out), parts,
                              [m, n, widths](TensorNode<T>& nd) {
                                  std::size_t off2 = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                      const std::size_t w = widths[k];
                                      if (auto* g = detail::grad_of(nd.parents[k]))
                                          for (std::size_t i = 0; i < m; ++i)
                                              for (std::size_t j = 0; j < w; ++j)
                                                  (*g)[i * w + j] += nd.grad[i * n + off2 + j];
                                      off2 += w;
                                  }
                              });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts[0].shape()[1];
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.shape()[1] != n)
            throw ShapeError("concat_rows: column mismatch");
        m += p.shape()[0];
    }
    std::vector<T> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::size_t> rows;
    for (const auto& p : parts) rows.push_back(p.shape()[0]);
    return detail::make_op<T>("concat_rows", {m, n}, std::move(out), parts,
                              [n, rows](TensorNode<T>& nd) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < rows.size(); ++k) {
                                      const std::size_t cnt = rows[k] * n;
                                      if (auto* g = detail::grad_of(nd.parents[k]))
                                          for (std::size_t i = 0; i < cnt; ++i)
                                              (*g)[i] += nd.grad[off + i];
                                      off += cnt;
                                  }
                              });
}

// Embedding-style row lookup: out[i] = a[idx[i]]; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& idx) {
    if (a.ndim() != 2) throw ShapeError("gather_rows: expected 2-d table");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<T> out(idx.size() * n);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m) throw ShapeError("gather_rows: row index out of range");
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[idx[i] * n + j];
    }
    return detail::make_op<T>("gather_rows", {idx.size(), n}, std::move(out), {a},
                              [idx, n](TensorNode<T>& nd) {
                                  if (auto* g = detail::grad_of(nd.parents[0]))
                                      for (std::size_t i = 0; i < idx.size(); ++i)
                                          for (std::size_t j = 0; j < n; ++j)
                                              (*g)[idx[i] * n + j] += nd.grad[i * n + j];
                              });
}

// Row-broadcast bias add: a[m×n] + b[n].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 1 || b.shape()[0] != a.shape()[1])
        throw ShapeError("add_rowvec: shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + b.data()[j];
    return detail::make_op<T>("add_rowvec", {m, n}, std::move(out), {a, b},
                              [m, n](TensorNode<T>& nd) {
                                  if (auto* g = detail::grad_of(nd.parents[0]))
                                      for (std::size_t i = 0; i < m * n; ++i)
                                          (*g)[i] += nd.grad[i];
                                  if (auto* g = detail::grad_of(nd.parents[1]))
                                      for (std::size_t i = 0; i < m; ++i)
                                          for (std::size_t j = 0; j < n; ++j)
                                              (*g)[j] += nd.grad[i * n + j];
                              });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = T(0);
    for (T x : a.data()) s += x;
    return detail::make_op<T>("sum_all", {1}, {s}, {a}, [](TensorNode<T>& n) {
        if (auto* g = detail::grad_of(n.parents[0]))
            for (auto& x : *g) x += n.grad[0];
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    T s = T(0);
    for (T x : a.data()) s += x;
    const T inv = T(1) / static_cast<T>(a.size());
    return detail::make_op<T>("mean_all", {1}, {s * inv}, {a}, [inv](TensorNode<T>& n) {
        if (auto* g = detail::grad_of(n.parents[0]))
            for (auto& x : *g) x += n.grad[0] * inv;
    });
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
    expect_same_shape("dot", a, b);
    T s = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
    return detail::make_op<T>("dot", {1}, {s}, {a, b}, [](TensorNode<T>& n) {
        const auto& da = n.parents[0]->data;
        const auto& db = n.parents[1]->data;
        if (auto* g = detail::grad_of(n.parents[0]))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[0] * db[i];
        if (auto* g = detail::grad_of(n.parents[1]))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[0] * da[i];
    });
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
    if (axis >= a.ndim())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(a.shape()));
    const auto& sh = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
    for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    const std::size_t n = sh[axis];
    std::vector<T> out(a.size());
    const T* src = a.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = src[base];
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, src[base + i * inner]);
            T denom = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                const T e = std::exp(src[base + i * inner] - mx);
                out[base + i * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] *= inv;
        }
    return detail::make_op<T>(
        "softmax", a.shape(), std::move(out), {a}, [outer, inner, n](TensorNode<T>& nd) {
            if (auto* g = detail::grad_of(nd.parents[0]))
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t in = 0; in < inner; ++in) {
                        const std::size_t base = o * n * inner + in;
                        T dotv = T(0);
                        for (std::size_t i = 0; i < n; ++i)
                            dotv += nd.grad[base + i * inner] * nd.data[base + i * inner];
                        for (std::size_t i = 0; i < n; ++i) {
                            const std::size_t ix = base + i * inner;
                            (*g)[ix] += nd.data[ix] * (nd.grad[ix] - dotv);
                        }
                    }
        });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalize over the last axis, then affine with per-feature gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    if (x.ndim() < 1) throw ShapeError("layer_norm: scalar input");
    const std::size_t n = x.shape().back();
    if (gain.size() != n || bias.size() != n)
        throw ShapeError("layer_norm: gain/bias width mismatch");
    const std::size_t rows = x.size() / n;
    std::vector<T> out(x.size());
    std::vector<T> inv_sigma(rows), mu(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * n;
        T m = T(0);
        for (std::size_t i = 0; i < n; ++i) m += xr[i];
        m /= static_cast<T>(n);
        T var = T(0);
        for (std::size_t i = 0; i < n; ++i) var += (xr[i] - m) * (xr[i] - m);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        mu[r] = m;
        inv_sigma[r] = is;
        for (std::size_t i = 0; i < n; ++i)
            out[r * n + i] = (xr[i] - m) * is * gain.data()[i] + bias.data()[i];
    }
    return detail::make_op<T>(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias},
        [rows, n, mu, inv_sigma](TensorNode<T>& nd) {
            const auto& xd = nd.parents[0]->data;
            const auto& gd = nd.parents[1]->data;
            auto* gx = detail::grad_of(nd.parents[0]);
            auto* gg = detail::grad_of(nd.parents[1]);
            auto* gb = detail::grad_of(nd.parents[2]);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = xd.data() + r * n;
                const T* go = nd.grad.data() + r * n;
                const T is = inv_sigma[r], m = mu[r];
                T sum_dxa = T(0), sum_dxa_xh = T(0);
                for (std::size_t i = 0; i < n; ++i) {
                    const T xh = (xr[i] - m) * is;
                    const T dxa = go[i] * gd[i];
                    sum_dxa += dxa;
                    sum_dxa_xh += dxa * xh;
                    if (gg) (*gg)[i] += go[i] * xh;
                    if (gb) (*gb)[i] += go[i];
                }
                if (gx) {
                    const T invn = T(1) / static_cast<T>(n);
                    for (std::size_t i = 0; i < n; ++i) {
                        const T xh = (xr[i] - m) * is;
                        const T dxa = go[i] * gd[i];
                        (*gx)[r * n + i] +=
                            is * (dxa - invn * sum_dxa - xh * invn * sum_dxa_xh);
                    }
                }
            }
        });
}

// LayerNorm across the channel axis of a CHW map, per spatial position.
template <typename T>
Tensor<T> channel_layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                             const Tensor<T>& bias) {
    if (x.ndim() != 3) throw ShapeError("channel_layer_norm: expected CHW tensor");
    const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
    if (gain.size() != c || bias.size() != c)
        throw ShapeError("channel_layer_norm: gain/bias width mismatch");
    std::vector<T> out(x.size());
    std::vector<T> inv_sigma(hw), mu(hw);
    const T* xd = x.data().data();
    for (std::size_t p = 0; p < hw; ++p) {
        T m = T(0);
        for (std::size_t ch = 0; ch < c; ++ch) m += xd[ch * hw + p];
        m /= static_cast<T>(c);
        T var = T(0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T d = xd[ch * hw + p] - m;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        mu[p] = m;
        inv_sigma[p] = is;
        for (std::size_t ch = 0; ch < c; ++ch)
            out[ch * hw + p] = (xd[ch * hw + p] - m) * is * gain.data()[ch] + bias.data()[ch];
    }
    return detail::make_op<T>(
        "channel_layer_norm", x.shape(), std::move(out), {x, gain, bias},
        [c, hw, mu, inv_sigma](TensorNode<T>& nd) {
            const auto& xd2 = nd.parents[0]->data;
            const auto& gd = nd.parents[1]->data;
            auto* gx = detail::grad_of(nd.parents[0]);
            auto* gg = detail::grad_of(nd.parents[1]);
            auto* gb = detail::grad_of(nd.parents[2]);
            for (std::size_t p = 0; p < hw; ++p) {
                const T is = inv_sigma[p], m = mu[p];
                T sum_dxa = T(0), sum_dxa_xh = T(0);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const T xh = (xd2[ch * hw + p] - m) * is;
                    const T dxa = nd.grad[ch * hw + p] * gd[ch];
                    sum_dxa += dxa;
                    sum_dxa_xh += dxa * xh;
                    if (gg) (*gg)[ch] += nd.grad[ch * hw + p] * xh;
                    if (gb) (*gb)[ch] += nd.grad[ch * hw + p];
                }
                if (gx) {
                    const T invc = T(1) / static_cast<T>(c);
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const T xh = (xd2[ch * hw + p] - m) * is;
                        const T dxa = nd.grad[ch * hw + p] * gd[ch];
                        (*gx)[ch * hw + p] +=
                            is * (dxa - invc * sum_dxa - xh * invc * sum_dxa_xh);
                    }
                }
            }
        });
}

// Rows rescaled to unit L2 length; zero rows stay zero via the eps clamp.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a) {
    if (a.ndim() != 2) throw ShapeError("normalize_rows: expected 2-d tensor");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    constexpr T eps = T(1e-12);
    std::vector<T> out(a.size());
    std::vector<T> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T v = a.data()[i * n + j];
            s += v * v;
        }
        const T nrm = std::max(std::sqrt(s), eps);
        norms[i] = nrm;
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] / nrm;
    }
    return detail::make_op<T>(
        "normalize_rows", a.shape(), std::move(out), {a}, [m, n, norms](TensorNode<T>& nd) {
            if (auto* g = detail::grad_of(nd.parents[0]))
                for (std::size_t i = 0; i < m; ++i) {
                    T doty = T(0);
                    for (std::size_t j = 0; j < n; ++j)
                        doty += nd.grad[i * n + j] * nd.data[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                        (*g)[i * n + j] +=
                            (nd.grad[i * n + j] - nd.data[i * n + j] * doty) / norms[i];
                }
        });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Piecewise-quadratic robust loss, MEAN over elements. beta = 1 so
// 0.5*d^2 below |d|=1 and |d|-0.5 above, continuous (and C1) at the seam.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target) {
    expect_same_shape("smooth_l1", pred, target);
    if (target.requires_grad())
        throw Error("smooth_l1: target must not require gradients");
    T acc = T(0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred.data()[i] - target.data()[i];
        const T ad = std::abs(d);
        acc += ad < T(1) ? T(0.5) * d * d : ad - T(0.5);
    }
    const T inv = T(1) / static_cast<T>(pred.size());
    return detail::make_op<T>("smooth_l1", {1}, {acc * inv}, {pred, target},
                              [inv](TensorNode<T>& n) {
                                  const auto& p = n.parents[0]->data;
                                  const auto& t = n.parents[1]->data;
                                  if (auto* g = detail::grad_of(n.parents[0]))
                                      for (std::size_t i = 0; i < g->size(); ++i) {
                                          const T d = p[i] - t[i];
                                          const T dd = std::abs(d) < T(1)
                                                           ? d
                                                           : (d > T(0) ? T(1) : T(-1));
                                          (*g)[i] += n.grad[0] * inv * dd;
                                      }
                              });
}

// Numerically stable binary cross entropy on logits, MEAN over elements.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target) {
    expect_same_shape("bce_with_logits", logits, target);
    if (target.requires_grad())
        throw Error("bce_with_logits: target must not require gradients");
    T acc = T(0);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const T x = logits.data()[i], t = target.data()[i];
        acc += std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    const T inv = T(1) / static_cast<T>(logits.size());
    return detail::make_op<T>(
        "bce_with_logits", {1}, {acc * inv}, {logits, target}, [inv](TensorNode<T>& n) {
            const auto& x = n.parents[0]->data;
            const auto& t = n.parents[1]->data;
            if (auto* g = detail::grad_of(n.parents[0]))
                for (std::size_t i = 0; i < g->size(); ++i) {
                    const T s = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i]))
                                             : std::exp(x[i]) / (T(1) + std::exp(x[i]));
                    (*g)[i] += n.grad[0] * inv * (s - t[i]);
                }
        });
}

// Mean over rows of -log softmax(row)[label]; used by the contrastive stage.
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
    if (logits.ndim() != 2 || labels.size() != logits.shape()[0])
        throw ShapeError("cross_entropy_rows: want [rows x classes] with one label per row");
    const std::size_t m = logits.shape()[0], n = logits.shape()[1];
    for (std::size_t l : labels)
        if (l >= n) throw ShapeError("cross_entropy_rows: label out of range");
    T acc = T(0);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = logits.data().data() + i * n;
        T mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::size_t j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
        acc += std::log(denom) + mx - row[labels[i]];
    }
    const T inv = T(1) / static_cast<T>(m);
    return detail::make_op<T>(
        "cross_entropy_rows", {1}, {acc * inv}, {logits}, [m, n, labels, inv](TensorNode<T>& nd) {
            const auto& x = nd.parents[0]->data;
            if (auto* g = detail::grad_of(nd.parents[0]))
                for (std::size_t i = 0; i < m; ++i) {
                    const T* row = x.data() + i * n;
                    T mx = row[0];
                    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
                    T denom = T(0);
                    for (std::size_t j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
                    for (std::size_t j = 0; j < n; ++j) {
                        T p = std::exp(row[j] - mx) / denom;
                        if (j == labels[i]) p -= T(1);
                        (*g)[i * n + j] += nd.grad[0] * inv * p;
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

// Average-pool a CHW map onto a k x k grid. Partition boundaries use the
// floor(i*h/k) tiling so cells differ by at most one row/col and k=1 is the
// exact global mean.
template <typename T>
Tensor<T> avg_pool_grid(const Tensor<T>& f, std::size_t k) {
    if (f.ndim() != 3) throw ShapeError("avg_pool_grid: expected CHW tensor");
    const std::size_t c = f.shape()[0], h = f.shape()[1], w = f.shape()[2];
    if (k == 0 || k > h || k > w)
        throw ShapeError("avg_pool_grid: grid " + std::to_string(k) +
                         " exceeds spatial extent " + shape_str(f.shape()));
    auto edge = [k](std::size_t extent, std::size_t i) { return i * extent / k; };
    std::vector<T> out(c * k * k, T(0));
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t gi = 0; gi < k; ++gi)
            for (std::size_t gj = 0; gj < k; ++gj) {
                const std::size_t r0 = edge(h, gi), r1 = edge(h, gi + 1);
                const std::size_t c0 = edge(w, gj), c1 = edge(w, gj + 1);
                T s = T(0);
                for (std::size_t r = r0; r < r1; ++r)
                    for (std::size_t cc = c0; cc < c1; ++cc)
                        s += f.data()[(ch * h + r) * w + cc];
                out[(ch * k + gi) * k + gj] = s / static_cast<T>((r1 - r0) * (c1 - c0));
            }
    return detail::make_op<T>(
        "avg_pool_grid", {c, k, k}, std::move(out), {f}, [c, h, w, k](TensorNode<T>& nd) {
            auto edge2 = [k](std::size_t extent, std::size_t i) { return i * extent / k; };
            if (auto* g = detail::grad_of(nd.parents[0]))
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t gi = 0; gi < k; ++gi)
                        for (std::size_t gj = 0; gj < k; ++gj) {
                            const std::size_t r0 = edge2(h, gi), r1 = edge2(h, gi + 1);
                            const std::size_t c0 = edge2(w, gj), c1 = edge2(w, gj + 1);
                            const T share = nd.grad[(ch * k + gi) * k + gj] /
                                            static_cast<T>((r1 - r0) * (c1 - c0));
                            for (std::size_t r = r0; r < r1; ++r)
                                for (std::size_t cc = c0; cc < c1; ++cc)
                                    (*g)[(ch * h + r) * w + cc] += share;
                        }
        });
}

namespace detail {

struct LerpWeights {
    std::size_t lo, hi;
    double w_lo, w_hi;
};

inline LerpWeights lerp_axis(std::size_t dst, std::size_t src_extent, std::size_t dst_extent,
                             std::size_t i) {
    (void)dst;
    const double scale = static_cast<double>(src_extent) / static_cast<double>(dst_extent);
    double pos = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (pos < 0.0) pos = 0.0;
    const double mx = static_cast<double>(src_extent - 1);
    if (pos > mx) pos = mx;
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, src_extent - 1);
    const double frac = pos - static_cast<double>(lo);
    return {lo, hi, 1.0 - frac, frac};
}

}  // namespace detail

// Bilinear resample of a CHW map (half-pixel centers).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.ndim() != 3) throw ShapeError("bilinear_resize: expected CHW tensor");
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: empty output");
    std::vector<detail::LerpWeights> rows(out_h), cols(out_w);
    for (std::size_t i = 0; i < out_h; ++i) rows[i] = detail::lerp_axis(0, h, out_h, i);
    for (std::size_t j = 0; j < out_w; ++j) cols[j] = detail::lerp_axis(0, w, out_w, j);
    std::vector<T> out(c * out_h * out_w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* plane = x.data().data() + ch * h * w;
        for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t j = 0; j < out_w; ++j) {
                const auto& ri = rows[i];
                const auto& cj = cols[j];
                const double v = ri.w_lo * (cj.w_lo * plane[ri.lo * w + cj.lo] +
                                            cj.w_hi * plane[ri.lo * w + cj.hi]) +
                                 ri.w_hi * (cj.w_lo * plane[ri.hi * w + cj.lo] +
                                            cj.w_hi * plane[ri.hi * w + cj.hi]);
                out[(ch * out_h + i) * out_w + j] = static_cast<T>(v);
            }
    }
    return detail::make_op<T>(
        "bilinear_resize", {c, out_h, out_w}, std::move(out), {x},
        [c, h, w, out_h, out_w, rows, cols](TensorNode<T>& nd) {
            if (auto* g = detail::grad_of(nd.parents[0]))
                for (std::size_t ch = 0; ch < c; ++ch) {
                    T* gp = g->data() + ch * h * w;
                    for (std::size_t i = 0; i < out_h; ++i)
                        for (std::size_t j = 0; j < out_w; ++j) {
                            const auto& ri = rows[i];
                            const auto& cj = cols[j];
                            const T go = nd.grad[(ch * out_h + i) * out_w + j];
                            gp[ri.lo * w + cj.lo] += static_cast<T>(ri.w_lo * cj.w_lo) * go;
                            gp[ri.lo * w + cj.hi] += static_cast<T>(ri.w_lo * cj.w_hi) * go;
                            gp[ri.hi * w + cj.lo] += static_cast<T>(ri.w_hi * cj.w_lo) * go;
                            gp[ri.hi * w + cj.hi] += static_cast<T>(ri.w_hi * cj.w_hi) * go;
                        }
                }
        });
}

// Direct 3x3-style convolution, CHW layout, zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    if (x.ndim() != 3 || weight.ndim() != 4)
        throw ShapeError("conv2d: want CHW input and OIKK weight");
    const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const std::size_t cout = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
    if (weight.shape()[1] != cin)
        throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                         " vs weight " + std::to_string(weight.shape()[1]));
    if (bias.size() != cout) throw ShapeError("conv2d: bias width mismatch");
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<T> out(cout * oh * ow);
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    for (std::size_t co = 0; co < cout; ++co) {
        const T b = bias.data()[co];
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                T acc = b;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const T* plane = xd + ci * h * w;
                    const T* ker = wd + (co * cin + ci) * kh * kw;
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const std::ptrdiff_t yi =
                            static_cast<std::ptrdiff_t>(i * stride + ky) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::ptrdiff_t xi =
                                static_cast<std::ptrdiff_t>(j * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(w)) continue;
                            acc += ker[ky * kw + kx] * plane[yi * w + xi];
                        }
                    }
                }
                out[(co * oh + i) * ow + j] = acc;
            }
    }
    return detail::make_op<T>(
        "conv2d", {cout, oh, ow}, std::move(out), {x, weight, bias},
        [cin, h, w, cout, kh, kw, oh, ow, stride, pad](TensorNode<T>& nd) {
            const auto& xd2 = nd.parents[0]->data;
            const auto& wd2 = nd.parents[1]->data;
            auto* gx = detail::grad_of(nd.parents[0]);
            auto* gw = detail::grad_of(nd.parents[1]);
            auto* gb = detail::grad_of(nd.parents[2]);
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const T go = nd.grad[(co * oh + i) * ow + j];
                        if (go == T(0)) continue;
                        if (gb) (*gb)[co] += go;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            const std::size_t wbase = (co * cin + ci) * kh * kw;
                            const std::size_t xbase = ci * h * w;
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const std::ptrdiff_t yi =
                                    static_cast<std::ptrdiff_t>(i * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const std::ptrdiff_t xi =
                                        static_cast<std::ptrdiff_t>(j * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(w))
                                        continue;
                                    const std::size_t xoff = xbase + yi * w + xi;
                                    const std::size_t woff = wbase + ky * kw + kx;
                                    if (gx) (*gx)[xoff] += go * wd2[woff];
                                    if (gw) (*gw)[woff] += go * xd2[xoff];
                                }
                            }
                        }
                    }
        });
}

// Per-proposal weighted mean of features under logistic mask weights.
// features: [d x h x w], mask_logits: [N x h x w] -> [N x d].
// A mask whose total weight is below 1e-6 falls back to the unweighted
// global average (and contributes no gradient to its logits).
template <typename T>
Tensor<T> masked_mean_pool(const Tensor<T>& features, const Tensor<T>& mask_logits) {
    if (features.ndim() != 3 || mask_logits.ndim() != 3)
        throw ShapeError("masked_mean_pool: want [d x h x w] and [N x h x w]");
    const std::size_t d = features.shape()[0], h = features.shape()[1], w = features.shape()[2];
    if (mask_logits.shape()[1] != h || mask_logits.shape()[2] != w)
        throw ShapeError("masked_mean_pool: spatial extents differ: " +
                         shape_str(features.shape()) + " vs " + shape_str(mask_logits.shape()));
    const std::size_t n = mask_logits.shape()[0], hw = h * w;
    constexpr double kEmpty = 1e-6;

    std::vector<T> weights(n * hw);
    std::vector<T> sums(n, T(0));
    std::vector<char> fallback(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        T s = T(0);
        for (std::size_t p = 0; p < hw; ++p) {
            const T x = mask_logits.data()[i * hw + p];
            const T sg = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                   : std::exp(x) / (T(1) + std::exp(x));
            weights[i * hw + p] = sg;
            s += sg;
        }
        sums[i] = s;
        fallback[i] = s < static_cast<T>(kEmpty) ? 1 : 0;
    }
    std::vector<T> out(n * d, T(0));
    const T* fd = features.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        if (fallback[i]) {
            for (std::size_t ch = 0; ch < d; ++ch) {
                T s = T(0);
                for (std::size_t p = 0; p < hw; ++p) s += fd[ch * hw + p];
                out[i * d + ch] = s / static_cast<T>(hw);
            }
        } else {
            const T inv = T(1) / sums[i];
            for (std::size_t ch = 0; ch < d; ++ch) {
                T s = T(0);
                const T* plane = fd + ch * hw;
                const T* wrow = weights.data() + i * hw;
                for (std::size_t p = 0; p < hw; ++p) s += wrow[p] * plane[p];
                out[i * d + ch] = s * inv;
            }
        }
    }
    return detail::make_op<T>(
        "masked_mean_pool", {n, d}, std::move(out), {features, mask_logits},
        [d, hw, n, weights, sums, fallback](TensorNode<T>& nd) {
            const auto& fd2 = nd.parents[0]->data;
            auto* gf = detail::grad_of(nd.parents[0]);
            auto* gm = detail::grad_of(nd.parents[1]);
            for (std::size_t i = 0; i < n; ++i) {
                const T* dv = nd.grad.data() + i * d;
                const T* vi = nd.data.data() + i * d;
                if (fallback[i]) {
                    if (gf) {
                        const T inv = T(1) / static_cast<T>(hw);
                        for (std::size_t ch = 0; ch < d; ++ch)
                            for (std::size_t p = 0; p < hw; ++p)
                                (*gf)[ch * hw + p] += dv[ch] * inv;
                    }
                    continue;
                }
                const T inv = T(1) / sums[i];
                const T* wrow = weights.data() + i * hw;
                if (gf)
                    for (std::size_t ch = 0; ch < d; ++ch) {
                        const T dch = dv[ch] * inv;
                        for (std::size_t p = 0; p < hw; ++p)
                            (*gf)[ch * hw + p] += dch * wrow[p];
                    }
                if (gm)
                    for (std::size_t p = 0; p < hw; ++p) {
                        T acc = T(0);
                        for (std::size_t ch = 0; ch < d; ++ch)
                            acc += dv[ch] * (fd2[ch * hw + p] - vi[ch]);
                        (*gm)[i * hw + p] += wrow[p] * (T(1) - wrow[p]) * acc * inv;
                    }
            }
        });
}

}  // namespace ovseg
