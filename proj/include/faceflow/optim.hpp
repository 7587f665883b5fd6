#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "faceflow/tensor.hpp"

namespace faceflow {

// A named trainable tensor. All parameters require gradients.
template <class S>
struct Parameter {
    std::string name;
    Tensor<S> value;

    Parameter() = default;
    Parameter(std::string n, Tensor<S> v) : name(std::move(n)), value(std::move(v)) {
        value.set_requires_grad(true);
    }
};

namespace detail {

template <class S>
void require_grads(const std::vector<Parameter<S>*>& params, const char* op) {
    for (auto* p : params)
        if (!p->value.has_grad())
            throw StateError(std::string(op) + ": parameter '" + p->name + "' has no gradient");
}

}  // namespace detail

// SGD with classical momentum: v <- mu*v + g, w <- w - lr*v.
// Gradients are zeroed after each step.
template <class S>
struct Sgd {
    S lr;
    S momentum;
    std::vector<std::vector<S>> velocity;

    Sgd(S lr_, S momentum_) : lr(lr_), momentum(momentum_) {}

    void step(const std::vector<Parameter<S>*>& params) {
        detail::require_grads(params, "sgd_step");
        if (velocity.empty()) {
            velocity.reserve(params.size());
            for (auto* p : params) velocity.emplace_back(static_cast<size_t>(p->value.numel()), S(0));
        }
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i]->value;
            auto& v = velocity[i];
            const std::vector<S>& g = p.grad();
            S* w = p.data();
            for (size_t j = 0; j < v.size(); ++j) {
                v[j] = momentum * v[j] + g[j];
                w[j] -= lr * v[j];
            }
            p.zero_grad();
        }
    }
};

// Bias-corrected Adam.
template <class S>
struct Adam {
    S lr;
    S beta1;
    S beta2;
    S eps;
    int64_t t = 0;
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;

    Adam(S lr_, S beta1_ = S(0.9), S beta2_ = S(0.999), S eps_ = S(1e-8))
        : lr(lr_), beta1(beta1_), beta2(beta2_), eps(eps_) {}

    void step(const std::vector<Parameter<S>*>& params) {
        detail::require_grads(params, "adam_step");
        if (m.empty()) {
            m.reserve(params.size());
            v.reserve(params.size());
            for (auto* p : params) {
                m.emplace_back(static_cast<size_t>(p->value.numel()), S(0));
                v.emplace_back(static_cast<size_t>(p->value.numel()), S(0));
            }
        }
        ++t;
        const S bc1 = S(1) - std::pow(beta1, static_cast<S>(t));
        const S bc2 = S(1) - std::pow(beta2, static_cast<S>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i]->value;
            const std::vector<S>& g = p.grad();
            S* w = p.data();
            for (size_t j = 0; j < m[i].size(); ++j) {
                m[i][j] = beta1 * m[i][j] + (S(1) - beta1) * g[j];
                v[i][j] = beta2 * v[i][j] + (S(1) - beta2) * g[j] * g[j];
                const S mhat = m[i][j] / bc1;
                const S vhat = v[i][j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
            p.zero_grad();
        }
    }
};

}  // namespace faceflow
