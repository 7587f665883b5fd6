#pragma once

#include <random>
#include <string>
#include <vector>

#include "faceflow/ops.hpp"
#include "faceflow/tensor.hpp"

namespace faceflow {

// Central finite differences against the analytic backward pass. The loss
// function must rebuild its graph from the current tensor values on every
// call; the numeric side never touches backward(), so the two routes stay
// independent.
struct GradCheckReport {
    double max_abs_diff = 0;
    double max_rel_err = 0;
    int n_checked = 0;
    bool pass = true;
    std::string worst;  // "param[i]: analytic=?, numeric=?"
};

namespace detail {

inline bool grads_agree(double analytic, double numeric, double rtol, double atol) {
    const double diff = std::abs(analytic - numeric);
    return diff <= atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
}

}  // namespace detail

// Checks d(loss)/d(checked[j]) for the element indices listed per tensor.
// `elements` holds (tensor index, flat element index) pairs.
template <class S, class LossFn>
GradCheckReport gradcheck_elements(LossFn&& loss_fn, const std::vector<Tensor<S>*>& checked,
                                   const std::vector<std::pair<int, int64_t>>& elements,
                                   double h = 1e-5, double rtol = 1e-3, double atol = 0.0) {
    if (atol == 0.0) atol = rtol * 1e-2;
    for (auto* t : checked) t->zero_grad();
    {
        Tensor<S> loss = loss_fn();
        loss.backward();
    }
    std::vector<std::vector<S>> analytic;
    analytic.reserve(checked.size());
    for (auto* t : checked) analytic.push_back(t->grad());
    for (auto* t : checked) t->zero_grad();

    GradCheckReport rep;
    NoGradGuard ng;
    for (auto [ti, ei] : elements) {
        S& v = checked[static_cast<size_t>(ti)]->values()[static_cast<size_t>(ei)];
        const S saved = v;
        v = saved + static_cast<S>(h);
        const double f_plus = static_cast<double>(loss_fn().item());
        v = saved - static_cast<S>(h);
        const double f_minus = static_cast<double>(loss_fn().item());
        v = saved;
        const double numeric = (f_plus - f_minus) / (2 * h);
        const double a = static_cast<double>(analytic[static_cast<size_t>(ti)][static_cast<size_t>(ei)]);
        const double diff = std::abs(a - numeric);
        const double rel = diff / std::max({std::abs(a), std::abs(numeric), 1e-12});
        ++rep.n_checked;
        if (diff > rep.max_abs_diff) rep.max_abs_diff = diff;
        if (!detail::grads_agree(a, numeric, rtol, atol)) {
            rep.pass = false;
            if (rel > rep.max_rel_err)
                rep.worst = "tensor " + std::to_string(ti) + " elem " + std::to_string(ei) +
                            ": analytic=" + fmt_real(a) + " numeric=" + fmt_real(numeric);
        }
        if (rel > rep.max_rel_err) rep.max_rel_err = rel;
    }
    return rep;
}

// Checks every element of every listed tensor (use for small op-level tests).
template <class S, class LossFn>
GradCheckReport gradcheck_all(LossFn&& loss_fn, const std::vector<Tensor<S>*>& checked, double h = 1e-5,
                              double rtol = 1e-3, double atol = 0.0) {
    std::vector<std::pair<int, int64_t>> elements;
    for (size_t t = 0; t < checked.size(); ++t)
        for (int64_t i = 0; i < checked[t]->numel(); ++i) elements.emplace_back(static_cast<int>(t), i);
    return gradcheck_elements(loss_fn, checked, elements, h, rtol, atol);
}

// Samples n (tensor, element) pairs uniformly over all listed tensors.
template <class S, class LossFn>
GradCheckReport gradcheck_sampled(LossFn&& loss_fn, const std::vector<Tensor<S>*>& checked, int n,
                                  std::mt19937_64& rng, double h = 1e-5, double rtol = 1e-3,
                                  double atol = 0.0) {
    int64_t total = 0;
    for (auto* t : checked) total += t->numel();
    std::vector<std::pair<int, int64_t>> elements;
    std::uniform_int_distribution<int64_t> dist(0, total - 1);
    for (int i = 0; i < n; ++i) {
        int64_t flat = dist(rng);
        for (size_t t = 0; t < checked.size(); ++t) {
            if (flat < checked[t]->numel()) {
                elements.emplace_back(static_cast<int>(t), flat);
                break;
            }
            flat -= checked[t]->numel();
        }
    }
    return gradcheck_elements(loss_fn, checked, elements, h, rtol, atol);
}

}  // namespace faceflow
