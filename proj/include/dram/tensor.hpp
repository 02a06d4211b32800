#pragma once

// Dense tensor with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a graph node. Operations that receive at
// least one input requiring gradients record a backward closure; backward()
// on a scalar result topologically orders the recorded graph and pushes
// gradients to every leaf that requires them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dram {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const Node&)> backward;

    bool is_leaf() const { return !backward; }

    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T = double>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        validate(shape);
        node_->value.assign(static_cast<std::size_t>(dram::numel(shape)), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        validate(shape);
        if (static_cast<std::int64_t>(values.size()) != dram::numel(shape))
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values do not fill shape " + to_string(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    std::span<const T> values() const { return node_->value; }
    // Direct write access is for parameters and test fixtures; mutating a
    // value that an existing graph saved invalidates that graph's gradients.
    std::span<T> mutable_values() { return node_->value; }
    T operator[](std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) {
        if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be set on leaves");
        node_->requires_grad = on;
    }
    bool is_leaf() const { return node_->is_leaf(); }
    const char* op_name() const { return node_->op; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    Tensor reshape(Shape new_shape) const;

    void backward() const;

    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

   private:
    static void validate(const Shape& shape) {
        for (auto e : shape)
            if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }

    std::shared_ptr<Node<T>> node_;
};

// Builds the result node of an operation. The backward closure receives the
// result node (whose grad is populated) and must accumulate into its inputs'
// grad buffers; it is dropped when no input requires gradients.
template <typename T, typename Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> inputs, Backward&& backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool any = false;
    for (const auto& in : inputs) any = any || in->requires_grad;
    if (any) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward = std::forward<Backward>(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got shape " + to_string(shape()));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS; each node is emitted once.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node<T>* child = n->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior gradients are recomputed from scratch; leaf gradients accumulate.
    for (auto* n : order)
        if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
    node_->grad_buffer()[0] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->is_leaf()) (*it)->backward(**it);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
    if (dram::numel(new_shape) != numel())
        throw ShapeError("reshape " + to_string(shape()) + " -> " + to_string(new_shape));
    auto in = node_;
    return make_result<T>("reshape", std::move(new_shape), in->value, {in}, [in](const Node<T>& self) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise and reduction operations

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto na = a.node(), nb = b.node();
    return make_result<T>("add", a.shape(), std::move(out), {na, nb}, [na, nb](const Node<T>& self) {
        for (auto* n : {na.get(), nb.get()}) {
            if (!n->requires_grad) continue;
            auto& g = n->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    auto na = a.node(), nb = b.node();
    return make_result<T>("sub", a.shape(), std::move(out), {na, nb}, [na, nb](const Node<T>& self) {
        if (na->requires_grad) {
            auto& g = na->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (nb->requires_grad) {
            auto& g = nb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    auto av = a.values(), bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto na = a.node(), nb = b.node();
    return make_result<T>("mul", a.shape(), std::move(out), {na, nb}, [na, nb](const Node<T>& self) {
        if (na->requires_grad) {
            auto& g = na->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb->value[i];
        }
        if (nb->requires_grad) {
            auto& g = nb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na->value[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= factor;
    auto na = a.node();
    return make_result<T>("scale", a.shape(), std::move(out), {na}, [na, factor](const Node<T>& self) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.values().begin(), x.values().end());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    auto nx = x.node();
    return make_result<T>("relu", x.shape(), std::move(out), {nx}, [nx](const Node<T>& self) {
        auto& g = nx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (nx->value[i] > T(0)) g[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.values().size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        // Branches keep exp() from overflowing for large |x|.
        const T v = xv[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    auto nx = x.node();
    return make_result<T>("sigmoid", x.shape(), std::move(out), {nx}, [nx](const Node<T>& self) {
        auto& g = nx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T y = self.value[i];
            g[i] += self.grad[i] * y * (T(1) - y);
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    auto xv = x.values();
    T total = std::accumulate(xv.begin(), xv.end(), T(0));
    auto nx = x.node();
    return make_result<T>("sum", Shape{1}, std::vector<T>{total}, {nx}, [nx](const Node<T>& self) {
        auto& g = nx->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Softmax along `axis` with the maximum subtracted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for shape " + to_string(x.shape()));
    std::int64_t outer = 1, inner = 1;
    const std::int64_t len = x.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    auto xv = x.values();
    std::vector<T> out(xv.size());
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T mx = xv[base];
            for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
            T z = 0;
            for (std::int64_t k = 0; k < len; ++k) {
                out[base + k * inner] = std::exp(xv[base + k * inner] - mx);
                z += out[base + k * inner];
            }
            for (std::int64_t k = 0; k < len; ++k) out[base + k * inner] /= z;
        }

    auto nx = x.node();
    return make_result<T>("softmax", x.shape(), std::move(out), {nx},
                          [nx, outer, inner, len](const Node<T>& self) {
                              auto& g = nx->grad_buffer();
                              for (std::int64_t o = 0; o < outer; ++o)
                                  for (std::int64_t in = 0; in < inner; ++in) {
                                      const std::int64_t base = o * len * inner + in;
                                      T dot = 0;
                                      for (std::int64_t k = 0; k < len; ++k)
                                          dot += self.grad[base + k * inner] * self.value[base + k * inner];
                                      for (std::int64_t k = 0; k < len; ++k) {
                                          const auto idx = base + k * inner;
                                          g[idx] += self.value[idx] * (self.grad[idx] - dot);
                                      }
                                  }
                          });
}

// Concatenation of two tensors along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
    if (a.rank() != b.rank() || axis >= a.rank())
        throw ShapeError("concat: incompatible ranks or axis for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    for (std::size_t i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw ShapeError("concat: extent mismatch on axis " + std::to_string(i) + ": " + to_string(a.shape()) +
                             " vs " + to_string(b.shape()));
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::int64_t ca = a.dim(axis) * inner, cb = b.dim(axis) * inner;

    Shape shape = a.shape();
    shape[axis] += b.dim(axis);
    std::vector<T> out(static_cast<std::size_t>(outer * (ca + cb)));
    auto av = a.values(), bv = b.values();
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(av.begin() + o * ca, ca, out.begin() + o * (ca + cb));
        std::copy_n(bv.begin() + o * cb, cb, out.begin() + o * (ca + cb) + ca);
    }
    auto na = a.node(), nb = b.node();
    return make_result<T>("concat", std::move(shape), std::move(out), {na, nb},
                          [na, nb, outer, ca, cb](const Node<T>& self) {
                              for (std::int64_t o = 0; o < outer; ++o) {
                                  const T* src = self.grad.data() + o * (ca + cb);
                                  if (na->requires_grad) {
                                      T* g = na->grad_buffer().data() + o * ca;
                                      for (std::int64_t i = 0; i < ca; ++i) g[i] += src[i];
                                  }
                                  if (nb->requires_grad) {
                                      T* g = nb->grad_buffer().data() + o * cb;
                                      for (std::int64_t i = 0; i < cb; ++i) g[i] += src[ca + i];
                                  }
                              }
                          });
}

}  // namespace dram
