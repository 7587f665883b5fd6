#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "faceflow/common.hpp"

namespace faceflow {

// Thread-local autograd switch. Ops record a backward graph only while
// enabled; evaluation passes run inside a NoGradGuard and build nothing.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {

template <class S>
struct TensorImpl {
    std::vector<int> shape;
    std::vector<S> values;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backward_fn;  // null for leaves

    int64_t numel() const { return static_cast<int64_t>(values.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), S(0));
    }

    // Accumulates g into this node's gradient; no-op for non-grad tensors so
    // a tensor with requires_grad=false can never pick up a gradient.
    void accumulate(const S* g, int64_t n) {
        if (!requires_grad) return;
        ensure_grad();
        S* dst = grad.data();
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
    }
};

}  // namespace detail

// Dense row-major tensor handle with reverse-mode autodiff. Value semantics:
// copying a Tensor copies the handle, not the storage. The scalar type is a
// template parameter; training uses float, gradient checking uses double.
template <class S>
class Tensor {
  public:
    using Impl = detail::TensorImpl<S>;
    std::shared_ptr<Impl> impl;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Impl> i) : impl(std::move(i)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(std::vector<int> shape, S value, bool requires_grad = false) {
        auto impl = std::make_shared<Impl>();
        impl->values.assign(static_cast<size_t>(numel_of(shape)), value);
        impl->shape = std::move(shape);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor from(std::vector<int> shape, std::vector<S> values, bool requires_grad = false) {
        if (numel_of(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values do not fill shape " + shape_str(shape));
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->values = std::move(values);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    template <class Rng>
    static Tensor uniform(std::vector<int> shape, Rng& rng, S lo, S hi, bool requires_grad = false) {
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        auto t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl->values) v = static_cast<S>(dist(rng));
        return t;
    }

    bool defined() const { return impl != nullptr; }
    const std::vector<int>& shape() const { return impl->shape; }
    int rank() const { return static_cast<int>(impl->shape.size()); }
    int dim(int i) const { return impl->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return impl->numel(); }

    S* data() { return impl->values.data(); }
    const S* data() const { return impl->values.data(); }
    std::vector<S>& values() { return impl->values; }
    const std::vector<S>& values() const { return impl->values; }

    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
        return impl->values[0];
    }

    bool requires_grad() const { return impl->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        impl->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !impl->grad.empty(); }
    std::vector<S>& grad() {
        impl->ensure_grad();
        return impl->grad;
    }
    const std::vector<S>& grad() const {
        const_cast<Impl*>(impl.get())->ensure_grad();
        return impl->grad;
    }
    void zero_grad() {
        if (!impl->grad.empty()) std::fill(impl->grad.begin(), impl->grad.end(), S(0));
    }

    // Reverse topological traversal from a scalar loss. Repeated calls
    // accumulate into existing gradients.
    void backward() const {
        if (numel() != 1) throw ValueError("backward: loss must be a scalar, got shape " + shape_str(shape()));
        Impl* root = impl.get();
        if (!root->requires_grad) return;

        std::vector<Impl*> topo;
        std::unordered_set<Impl*> visited;
        struct Frame {
            Impl* node;
            size_t next;
        };
        std::vector<Frame> stack;
        stack.push_back({root, 0});
        visited.insert(root);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.node->parents.size()) {
                Impl* p = f.node->parents[f.next++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                topo.push_back(f.node);
                stack.pop_back();
            }
        }

        root->ensure_grad();
        root->grad[0] += S(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn();
        }
    }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {

// Builds the output node of an op: allocates values, and if autograd is
// active wires parents plus the backward closure produced by make_backward.
// make_backward receives the raw output impl (valid for the graph lifetime).
template <class S, class MakeBackward>
Tensor<S> make_op_node(std::vector<int> shape, std::vector<S> values,
                       std::vector<std::shared_ptr<TensorImpl<S>>> parents,
                       MakeBackward make_backward) {
    auto out = Tensor<S>::from(std::move(shape), std::move(values));
    bool any_grad = false;
    for (auto& p : parents)
        if (p->requires_grad) any_grad = true;
    if (grad_enabled() && any_grad) {
        out.impl->requires_grad = true;
        out.impl->parents = std::move(parents);
        out.impl->backward_fn = make_backward(out.impl.get());
    }
    return out;
}

}  // namespace detail

}  // namespace faceflow
