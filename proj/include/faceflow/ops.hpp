#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "faceflow/blas.hpp"
#include "faceflow/tensor.hpp"

namespace faceflow {

namespace detail {

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Elementwise unary op. BwdF(x, y, g) returns the input-gradient contribution.
template <class S, class FwdF, class BwdF>
Tensor<S> map_unary(const Tensor<S>& a, FwdF fwd, BwdF bwd) {
    const int64_t n = a.numel();
    std::vector<S> out(static_cast<size_t>(n));
    const S* x = a.data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(x[i]);
    auto ai = a.impl;
    return make_op_node<S>(a.shape(), std::move(out), {ai}, [ai, bwd](TensorImpl<S>* self) {
        return [ai, bwd, self]() {
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            const int64_t n = self->numel();
            const S* x = ai->values.data();
            const S* y = self->values.data();
            const S* g = self->grad.data();
            S* gx = ai->grad.data();
            for (int64_t i = 0; i < n; ++i) gx[i] += bwd(x[i], y[i], g[i]);
        };
    });
}

// Elementwise binary op over identically shaped tensors.
template <class S, class FwdF, class BwdA, class BwdB>
Tensor<S> map_binary(const Tensor<S>& a, const Tensor<S>& b, const char* name, FwdF fwd, BwdA bwd_a,
                     BwdB bwd_b) {
    check_same_shape(a, b, name);
    const int64_t n = a.numel();
    std::vector<S> out(static_cast<size_t>(n));
    const S* xa = a.data();
    const S* xb = b.data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(xa[i], xb[i]);
    auto ai = a.impl;
    auto bi = b.impl;
    return make_op_node<S>(a.shape(), std::move(out), {ai, bi}, [ai, bi, bwd_a, bwd_b](TensorImpl<S>* self) {
        return [ai, bi, bwd_a, bwd_b, self]() {
            const int64_t n = self->numel();
            const S* g = self->grad.data();
            const S* xa = ai->values.data();
            const S* xb = bi->values.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                S* gx = ai->grad.data();
                for (int64_t i = 0; i < n; ++i) gx[i] += bwd_a(xa[i], xb[i], g[i]);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                S* gx = bi->grad.data();
                for (int64_t i = 0; i < n; ++i) gx[i] += bwd_b(xa[i], xb[i], g[i]);
            }
        };
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::map_binary(
        a, b, "add", [](S x, S y) { return x + y; }, [](S, S, S g) { return g; },
        [](S, S, S g) { return g; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::map_binary(
        a, b, "sub", [](S x, S y) { return x - y; }, [](S, S, S g) { return g; },
        [](S, S, S g) { return -g; });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::map_binary(
        a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y, S g) { return g * y; },
        [](S x, S, S g) { return g * x; });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::map_binary(
        a, b, "div", [](S x, S y) { return x / y; }, [](S, S y, S g) { return g / y; },
        [](S x, S y, S g) { return -g * x / (y * y); });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    return detail::map_unary(
        a, [c](S x) { return x + c; }, [](S, S, S g) { return g; });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
    return detail::map_unary(
        a, [c](S x) { return x * c; }, [c](S, S, S g) { return g * c; });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
    return mul_scalar(a, S(-1));
}

template <class S>
Tensor<S> abs(const Tensor<S>& a) {
    // subgradient at 0 is 0
    return detail::map_unary(
        a, [](S x) { return std::abs(x); },
        [](S x, S, S g) { return x > 0 ? g : (x < 0 ? -g : S(0)); });
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
    return detail::map_unary(
        a, [](S x) { return std::exp(x); }, [](S, S y, S g) { return g * y; });
}

template <class S>
Tensor<S> log(const Tensor<S>& a) {
    return detail::map_unary(
        a, [](S x) { return std::log(x); }, [](S x, S, S g) { return g / x; });
}

template <class S>
Tensor<S> tanh(const Tensor<S>& a) {
    return detail::map_unary(
        a, [](S x) { return std::tanh(x); }, [](S, S y, S g) { return g * (S(1) - y * y); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    return detail::map_unary(
        a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
        [](S, S y, S g) { return g * y * (S(1) - y); });
}

template <class S>
Tensor<S> leaky_relu(const Tensor<S>& a, S slope) {
    if (!(slope >= S(0) && slope < S(1)))
        throw ValueError("leaky_relu: slope must be in [0,1), got " + fmt_real(static_cast<double>(slope)));
    return detail::map_unary(
        a, [slope](S x) { return x >= 0 ? x : slope * x; },
        [slope](S x, S, S g) { return x >= 0 ? g : slope * g; });
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
    return add(a, b);
}
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
    return sub(a, b);
}
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) {
    return mul(a, b);
}
template <class S>
Tensor<S> operator*(const Tensor<S>& a, S c) {
    return mul_scalar(a, c);
}
template <class S>
Tensor<S> operator*(S c, const Tensor<S>& a) {
    return mul_scalar(a, c);
}

// ---------------------------------------------------------------------------
// Reductions and indexing

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
    S acc = 0;
    const S* x = a.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    auto ai = a.impl;
    return detail::make_op_node<S>({1}, {acc}, {ai}, [ai](detail::TensorImpl<S>* self) {
        return [ai, self]() {
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            const S g = self->grad[0];
            for (auto& v : ai->grad) v += g;
        };
    });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
    const int64_t n = a.numel();
    return mul_scalar(sum(a), S(1) / static_cast<S>(n));
}

// Mean over all trailing dimensions, one value per row of dim 0.
template <class S>
Tensor<S> per_sample_mean(const Tensor<S>& a) {
    if (a.rank() < 1) throw ShapeError("per_sample_mean: rank-0 tensor");
    const int B = a.dim(0);
    const int64_t m = a.numel() / B;
    std::vector<S> out(static_cast<size_t>(B));
    const S* x = a.data();
    for (int b = 0; b < B; ++b) {
        S acc = 0;
        const S* row = x + b * m;
        for (int64_t i = 0; i < m; ++i) acc += row[i];
        out[static_cast<size_t>(b)] = acc / static_cast<S>(m);
    }
    auto ai = a.impl;
    return detail::make_op_node<S>({B}, std::move(out), {ai}, [ai, B, m](detail::TensorImpl<S>* self) {
        return [ai, B, m, self]() {
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const S g = self->grad[static_cast<size_t>(b)] / static_cast<S>(m);
                S* dst = ai->grad.data() + b * m;
                for (int64_t i = 0; i < m; ++i) dst[i] += g;
            }
        };
    });
}

// Gathers rows of a 1-D tensor. Backward scatter-adds.
template <class S>
Tensor<S> gather(const Tensor<S>& a, const std::vector<int>& indices) {
    if (a.rank() != 1) throw ShapeError("gather: expected rank-1 tensor, got " + shape_str(a.shape()));
    if (indices.empty()) throw ValueError("gather: empty index list");
    const int n = a.dim(0);
    std::vector<S> out(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= n)
            throw ValueError("gather: index " + std::to_string(indices[i]) + " out of range [0," +
                             std::to_string(n) + ")");
        out[i] = a.data()[indices[i]];
    }
    auto ai = a.impl;
    auto idx = indices;
    return detail::make_op_node<S>({static_cast<int>(indices.size())}, std::move(out), {ai},
                                   [ai, idx](detail::TensorImpl<S>* self) {
                                       return [ai, idx, self]() {
                                           if (!ai->requires_grad) return;
                                           ai->ensure_grad();
                                           for (size_t i = 0; i < idx.size(); ++i)
                                               ai->grad[static_cast<size_t>(idx[i])] += self->grad[i];
                                       };
                                   });
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> new_shape) {
    if (numel_of(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    auto ai = a.impl;
    std::vector<S> vals = a.values();
    return detail::make_op_node<S>(std::move(new_shape), std::move(vals), {ai},
                                   [ai](detail::TensorImpl<S>* self) {
                                       return [ai, self]() {
                                           if (!ai->requires_grad) return;
                                           ai->accumulate(self->grad.data(), self->numel());
                                       };
                                   });
}

// Concatenation along dim 1 of two rank-2 tensors [B,Da] ++ [B,Db].
template <class S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw ShapeError("concat_cols: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int B = a.dim(0), Da = a.dim(1), Db = b.dim(1);
    std::vector<S> out(static_cast<size_t>(B) * (Da + Db));
    for (int r = 0; r < B; ++r) {
        std::copy_n(a.data() + static_cast<int64_t>(r) * Da, Da, out.data() + static_cast<int64_t>(r) * (Da + Db));
        std::copy_n(b.data() + static_cast<int64_t>(r) * Db, Db,
                    out.data() + static_cast<int64_t>(r) * (Da + Db) + Da);
    }
    auto ai = a.impl;
    auto bi = b.impl;
    return detail::make_op_node<S>({B, Da + Db}, std::move(out), {ai, bi},
                                   [ai, bi, B, Da, Db](detail::TensorImpl<S>* self) {
                                       return [ai, bi, B, Da, Db, self]() {
                                           for (int r = 0; r < B; ++r) {
                                               const S* g = self->grad.data() + static_cast<int64_t>(r) * (Da + Db);
                                               if (ai->requires_grad) {
                                                   ai->ensure_grad();
                                                   S* ga = ai->grad.data() + static_cast<int64_t>(r) * Da;
                                                   for (int i = 0; i < Da; ++i) ga[i] += g[i];
                                               }
                                               if (bi->requires_grad) {
                                                   bi->ensure_grad();
                                                   S* gb = bi->grad.data() + static_cast<int64_t>(r) * Db;
                                                   for (int i = 0; i < Db; ++i) gb[i] += g[Da + i];
                                               }
                                           }
                                       };
                                   });
}

// ---------------------------------------------------------------------------
// Linear algebra layers

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree, " + std::to_string(a.dim(1)) + " (axis 1 of lhs) vs " +
                         std::to_string(b.dim(0)) + " (axis 0 of rhs)");
    const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<S> out(static_cast<size_t>(M) * N);
    detail::gemm_nn(a.data(), b.data(), out.data(), M, K, N, false);
    auto ai = a.impl;
    auto bi = b.impl;
    return detail::make_op_node<S>({M, N}, std::move(out), {ai, bi},
                                   [ai, bi, M, K, N](detail::TensorImpl<S>* self) {
                                       return [ai, bi, M, K, N, self]() {
                                           const S* g = self->grad.data();
                                           if (ai->requires_grad) {
                                               ai->ensure_grad();
                                               // dA = g * B^T
                                               detail::gemm_nt(g, bi->values.data(), ai->grad.data(), M, N, K, true);
                                           }
                                           if (bi->requires_grad) {
                                               bi->ensure_grad();
                                               // dB = A^T * g
                                               detail::gemm_tn(ai->values.data(), g, bi->grad.data(), K, M, N, true);
                                           }
                                       };
                                   });
}

// x[B,D] * w[D,E] (+ bias[E]). Bias omitted when not provided.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const std::optional<Tensor<S>>& bias = std::nullopt) {
    auto out = matmul(x, w);
    if (!bias) return out;
    const Tensor<S>& b = *bias;
    if (b.rank() != 1 || b.dim(0) != w.dim(1))
        throw ShapeError("linear: bias shape " + shape_str(b.shape()) + " does not match output width " +
                         std::to_string(w.dim(1)));
    const int B = out.dim(0), E = out.dim(1);
    std::vector<S> vals = out.values();
    for (int r = 0; r < B; ++r)
        for (int e = 0; e < E; ++e) vals[static_cast<size_t>(r) * E + e] += b.data()[e];
    auto oi = out.impl;
    auto bi = b.impl;
    return detail::make_op_node<S>({B, E}, std::move(vals), {oi, bi},
                                   [oi, bi, B, E](detail::TensorImpl<S>* self) {
                                       return [oi, bi, B, E, self]() {
                                           const S* g = self->grad.data();
                                           if (oi->requires_grad) oi->accumulate(g, self->numel());
                                           if (bi->requires_grad) {
                                               bi->ensure_grad();
                                               for (int r = 0; r < B; ++r)
                                                   for (int e = 0; e < E; ++e)
                                                       bi->grad[static_cast<size_t>(e)] += g[static_cast<int64_t>(r) * E + e];
                                           }
                                       };
                                   });
}

// ---------------------------------------------------------------------------
// Convolutions

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride, int padding) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv2d: weight must be [K,C,kh,kw], got " + shape_str(w.shape()));
    if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
    if (padding < 0) throw ValueError("conv2d: padding must be >= 0");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C)
        throw ShapeError("conv2d: weight channel axis " + std::to_string(w.dim(1)) +
                         " does not match input channel axis " + std::to_string(C));
    if (bias.rank() != 1 || bias.dim(0) != K)
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(K) + " output channels");
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input " + std::to_string(H + 2 * padding) + "x" +
                         std::to_string(W + 2 * padding));
    const int H2 = (H + 2 * padding - kh) / stride + 1;
    const int W2 = (W + 2 * padding - kw) / stride + 1;
    const int64_t cells = static_cast<int64_t>(H2) * W2;
    const int64_t col_rows = static_cast<int64_t>(C) * kh * kw;

    auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(B) * col_rows * cells);
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b)
        detail::im2col(x.data() + static_cast<int64_t>(b) * C * H * W, C, H, W, kh, kw, stride, padding,
                       H2, W2, cols->data() + static_cast<int64_t>(b) * col_rows * cells);

    std::vector<S> out(static_cast<size_t>(B) * K * cells);
    for (int b = 0; b < B; ++b)
        detail::gemm_nn(w.data(), cols->data() + static_cast<int64_t>(b) * col_rows * cells,
                        out.data() + static_cast<int64_t>(b) * K * cells, K, static_cast<int>(col_rows),
                        static_cast<int>(cells), false);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            const S bk = bias.data()[k];
            S* o = out.data() + (static_cast<int64_t>(b) * K + k) * cells;
            for (int64_t i = 0; i < cells; ++i) o[i] += bk;
        }

    auto xi = x.impl;
    auto wi = w.impl;
    auto bi = bias.impl;
    return detail::make_op_node<S>(
        {B, K, H2, W2}, std::move(out), {xi, wi, bi},
        [=](detail::TensorImpl<S>* self) {
            return [=]() {
                const S* g = self->grad.data();
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (int b = 0; b < B; ++b)
                        for (int k = 0; k < K; ++k) {
                            S acc = 0;
                            const S* gk = g + (static_cast<int64_t>(b) * K + k) * cells;
                            for (int64_t i = 0; i < cells; ++i) acc += gk[i];
                            bi->grad[static_cast<size_t>(k)] += acc;
                        }
                }
                if (wi->requires_grad) {
                    wi->ensure_grad();
                    for (int b = 0; b < B; ++b)
                        detail::gemm_nt(g + static_cast<int64_t>(b) * K * cells,
                                        cols->data() + static_cast<int64_t>(b) * col_rows * cells,
                                        wi->grad.data(), K, static_cast<int>(cells),
                                        static_cast<int>(col_rows), true);
                }
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    std::vector<S> gcol(static_cast<size_t>(B) * col_rows * cells);
                    for (int b = 0; b < B; ++b)
                        detail::gemm_tn(wi->values.data(), g + static_cast<int64_t>(b) * K * cells,
                                        gcol.data() + static_cast<int64_t>(b) * col_rows * cells,
                                        static_cast<int>(col_rows), K, static_cast<int>(cells), false);
#pragma omp parallel for schedule(static)
                    for (int b = 0; b < B; ++b)
                        detail::col2im(gcol.data() + static_cast<int64_t>(b) * col_rows * cells, C, H, W,
                                       kh, kw, stride, padding, H2, W2,
                                       xi->grad.data() + static_cast<int64_t>(b) * C * H * W);
                }
            };
        });
}

// Transposed convolution; weight layout [Cin, Cout, kh, kw].
// Output spatial size: (H - 1) * stride - 2 * padding + kh.
template <class S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int stride,
                           int padding) {
    if (x.rank() != 4) throw ShapeError("conv_transpose2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv_transpose2d: weight must be [Cin,Cout,kh,kw], got " + shape_str(w.shape()));
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(0) != C)
        throw ShapeError("conv_transpose2d: weight input axis " + std::to_string(w.dim(0)) +
                         " does not match input channel axis " + std::to_string(C));
    if (bias.rank() != 1 || bias.dim(0) != Cout)
        throw ShapeError("conv_transpose2d: bias shape " + shape_str(bias.shape()) +
                         " does not match " + std::to_string(Cout) + " output channels");
    const int H2 = (H - 1) * stride - 2 * padding + kh;
    const int W2 = (W - 1) * stride - 2 * padding + kw;
    if (H2 < 1 || W2 < 1) throw ShapeError("conv_transpose2d: empty output for input " + shape_str(x.shape()));

    const int64_t cells = static_cast<int64_t>(H) * W;  // grid = input spatial
    const int64_t col_rows = static_cast<int64_t>(Cout) * kh * kw;

    std::vector<S> out(static_cast<size_t>(B) * Cout * H2 * W2, S(0));
    {
        std::vector<S> col(static_cast<size_t>(col_rows) * cells);
        for (int b = 0; b < B; ++b) {
            // col = W^T (viewed [C, Cout*kh*kw]) * x_b [C, H*W]
            detail::gemm_tn(w.data(), x.data() + static_cast<int64_t>(b) * C * cells, col.data(),
                            static_cast<int>(col_rows), C, static_cast<int>(cells), false);
            detail::col2im(col.data(), Cout, H2, W2, kh, kw, stride, padding, H, W,
                           out.data() + static_cast<int64_t>(b) * Cout * H2 * W2);
        }
    }
    const int64_t out_cells = static_cast<int64_t>(H2) * W2;
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < Cout; ++k) {
            const S bk = bias.data()[k];
            S* o = out.data() + (static_cast<int64_t>(b) * Cout + k) * out_cells;
            for (int64_t i = 0; i < out_cells; ++i) o[i] += bk;
        }

    auto xi = x.impl;
    auto wi = w.impl;
    auto bi = bias.impl;
    return detail::make_op_node<S>(
        {B, Cout, H2, W2}, std::move(out), {xi, wi, bi},
        [=](detail::TensorImpl<S>* self) {
            return [=]() {
                const S* g = self->grad.data();
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (int b = 0; b < B; ++b)
                        for (int k = 0; k < Cout; ++k) {
                            S acc = 0;
                            const S* gk = g + (static_cast<int64_t>(b) * Cout + k) * out_cells;
                            for (int64_t i = 0; i < out_cells; ++i) acc += gk[i];
                            bi->grad[static_cast<size_t>(k)] += acc;
                        }
                }
                if (!xi->requires_grad && !wi->requires_grad) return;
                std::vector<S> gcol(static_cast<size_t>(col_rows) * cells);
                for (int b = 0; b < B; ++b) {
                    detail::im2col(g + static_cast<int64_t>(b) * Cout * out_cells, Cout, H2, W2, kh, kw,
                                   stride, padding, H, W, gcol.data());
                    if (xi->requires_grad) {
                        xi->ensure_grad();
                        // dx_b [C, HW] = W [C, Cout*kh*kw] * gcol
                        detail::gemm_nn(wi->values.data(), gcol.data(),
                                        xi->grad.data() + static_cast<int64_t>(b) * C * cells, C,
                                        static_cast<int>(col_rows), static_cast<int>(cells), true);
                    }
                    if (wi->requires_grad) {
                        wi->ensure_grad();
                        // dW [C, Cout*kh*kw] = x_b [C, HW] * gcol^T
                        detail::gemm_nt(xi->values.data() + static_cast<int64_t>(b) * C * cells, gcol.data(),
                                        wi->grad.data(), C, static_cast<int>(cells),
                                        static_cast<int>(col_rows), true);
                    }
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Batch normalization (rank-2 activations [B,D])

template <class S>
struct RunningStats {
    std::vector<S> mean;
    std::vector<S> var;
    explicit RunningStats(int d = 0) : mean(static_cast<size_t>(d), S(0)), var(static_cast<size_t>(d), S(1)) {}
};

template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     RunningStats<S>& stats, bool training, S momentum = S(0.1), S eps = S(1e-5)) {
    if (x.rank() != 2) throw ShapeError("batch_norm: expected [B,D] input, got " + shape_str(x.shape()));
    const int B = x.dim(0), D = x.dim(1);
    if (gamma.numel() != D || beta.numel() != D)
        throw ShapeError("batch_norm: gamma/beta length must equal feature axis " + std::to_string(D));
    if (static_cast<int>(stats.mean.size()) != D)
        throw ShapeError("batch_norm: running stats sized " + std::to_string(stats.mean.size()) +
                         " for feature axis " + std::to_string(D));
    if (training && B < 2)
        throw ValueError("batch_norm: degenerate batch of size " + std::to_string(B) + " in train mode");

    std::vector<S> xhat(static_cast<size_t>(B) * D);
    std::vector<S> inv_std(static_cast<size_t>(D));
    const S* xv = x.data();

    if (training) {
        for (int d = 0; d < D; ++d) {
            S m = 0;
            for (int b = 0; b < B; ++b) m += xv[static_cast<int64_t>(b) * D + d];
            m /= static_cast<S>(B);
            S var = 0;
            for (int b = 0; b < B; ++b) {
                const S c = xv[static_cast<int64_t>(b) * D + d] - m;
                var += c * c;
            }
            var /= static_cast<S>(B);
            const S istd = S(1) / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(d)] = istd;
            for (int b = 0; b < B; ++b)
                xhat[static_cast<int64_t>(b) * D + d] = (xv[static_cast<int64_t>(b) * D + d] - m) * istd;
            stats.mean[static_cast<size_t>(d)] = (S(1) - momentum) * stats.mean[static_cast<size_t>(d)] + momentum * m;
            const S unbiased = B > 1 ? var * static_cast<S>(B) / static_cast<S>(B - 1) : var;
            stats.var[static_cast<size_t>(d)] = (S(1) - momentum) * stats.var[static_cast<size_t>(d)] + momentum * unbiased;
        }
    } else {
        for (int d = 0; d < D; ++d) {
            const S istd = S(1) / std::sqrt(stats.var[static_cast<size_t>(d)] + eps);
            inv_std[static_cast<size_t>(d)] = istd;
            for (int b = 0; b < B; ++b)
                xhat[static_cast<int64_t>(b) * D + d] =
                    (xv[static_cast<int64_t>(b) * D + d] - stats.mean[static_cast<size_t>(d)]) * istd;
        }
    }

    std::vector<S> out(static_cast<size_t>(B) * D);
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d)
            out[static_cast<int64_t>(b) * D + d] =
                gamma.data()[d] * xhat[static_cast<int64_t>(b) * D + d] + beta.data()[d];

    auto xi = x.impl;
    auto gi = gamma.impl;
    auto bi = beta.impl;
    auto xhat_keep = std::make_shared<std::vector<S>>(std::move(xhat));
    auto istd_keep = std::make_shared<std::vector<S>>(std::move(inv_std));
    return detail::make_op_node<S>(
        {B, D}, std::move(out), {xi, gi, bi},
        [=](detail::TensorImpl<S>* self) {
            return [=]() {
                const S* g = self->grad.data();
                const auto& xh = *xhat_keep;
                if (gi->requires_grad) {
                    gi->ensure_grad();
                    for (int d = 0; d < D; ++d) {
                        S acc = 0;
                        for (int b = 0; b < B; ++b)
                            acc += g[static_cast<int64_t>(b) * D + d] * xh[static_cast<int64_t>(b) * D + d];
                        gi->grad[static_cast<size_t>(d)] += acc;
                    }
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (int d = 0; d < D; ++d) {
                        S acc = 0;
                        for (int b = 0; b < B; ++b) acc += g[static_cast<int64_t>(b) * D + d];
                        bi->grad[static_cast<size_t>(d)] += acc;
                    }
                }
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    if (training) {
                        for (int d = 0; d < D; ++d) {
                            S sum_g = 0, sum_gx = 0;
                            for (int b = 0; b < B; ++b) {
                                sum_g += g[static_cast<int64_t>(b) * D + d];
                                sum_gx += g[static_cast<int64_t>(b) * D + d] * xh[static_cast<int64_t>(b) * D + d];
                            }
                            const S scale = gamma.data()[d] * (*istd_keep)[static_cast<size_t>(d)] / static_cast<S>(B);
                            for (int b = 0; b < B; ++b) {
                                const int64_t i = static_cast<int64_t>(b) * D + d;
                                xi->grad[static_cast<size_t>(i)] +=
                                    scale * (static_cast<S>(B) * g[i] - sum_g - xh[i] * sum_gx);
                            }
                        }
                    } else {
                        for (int d = 0; d < D; ++d) {
                            const S scale = gamma.data()[d] * (*istd_keep)[static_cast<size_t>(d)];
                            for (int b = 0; b < B; ++b) {
                                const int64_t i = static_cast<int64_t>(b) * D + d;
                                xi->grad[static_cast<size_t>(i)] += scale * g[i];
                            }
                        }
                    }
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Bilinear warping

// Samples source[B,C,H,W] at per-pixel offsets flow[B,2,H,W]. Offsets are in
// normalized coordinates: (-1,-1) and (+1,+1) are the corner pixel centers,
// so one unit of flow equals (size-1)/2 pixels. Out-of-range coordinates
// clamp to the border. Differentiable in both the source and the flow.
template <class S>
Tensor<S> grid_sample(const Tensor<S>& source, const Tensor<S>& flow) {
    if (source.rank() != 4) throw ShapeError("grid_sample: source must be [B,C,H,W], got " + shape_str(source.shape()));
    if (flow.rank() != 4 || flow.dim(1) != 2)
        throw ShapeError("grid_sample: flow must be [B,2,H,W], got " + shape_str(flow.shape()));
    const int B = source.dim(0), C = source.dim(1), H = source.dim(2), W = source.dim(3);
    if (flow.dim(0) != B || flow.dim(2) != H || flow.dim(3) != W)
        throw ShapeError("grid_sample: flow " + shape_str(flow.shape()) + " does not match source " +
                         shape_str(source.shape()));

    const int64_t plane = static_cast<int64_t>(H) * W;
    const S sx_scale = static_cast<S>(W - 1) / S(2);
    const S sy_scale = static_cast<S>(H - 1) / S(2);
    std::vector<S> out(static_cast<size_t>(B) * C * plane);

    const S* src = source.data();
    const S* fl = flow.data();
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        const S* fx = fl + static_cast<int64_t>(b) * 2 * plane;
        const S* fy = fx + plane;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const int64_t p = static_cast<int64_t>(y) * W + x;
                const S sx = static_cast<S>(x) + fx[p] * sx_scale;
                const S sy = static_cast<S>(y) + fy[p] * sy_scale;
                const S cx = std::min(std::max(sx, S(0)), static_cast<S>(W - 1));
                const S cy = std::min(std::max(sy, S(0)), static_cast<S>(H - 1));
                const int x0 = static_cast<int>(std::floor(cx));
                const int y0 = static_cast<int>(std::floor(cy));
                const int x1 = std::min(x0 + 1, W - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const S wx = cx - static_cast<S>(x0);
                const S wy = cy - static_cast<S>(y0);
                for (int c = 0; c < C; ++c) {
                    const S* plane_src = src + (static_cast<int64_t>(b) * C + c) * plane;
                    const S v00 = plane_src[static_cast<int64_t>(y0) * W + x0];
                    const S v01 = plane_src[static_cast<int64_t>(y0) * W + x1];
                    const S v10 = plane_src[static_cast<int64_t>(y1) * W + x0];
                    const S v11 = plane_src[static_cast<int64_t>(y1) * W + x1];
                    out[(static_cast<int64_t>(b) * C + c) * plane + p] =
                        (S(1) - wy) * ((S(1) - wx) * v00 + wx * v01) + wy * ((S(1) - wx) * v10 + wx * v11);
                }
            }
        }
    }

    auto si = source.impl;
    auto fi = flow.impl;
    return detail::make_op_node<S>(
        {B, C, H, W}, std::move(out), {si, fi},
        [=](detail::TensorImpl<S>* self) {
            return [=]() {
                if (si->requires_grad) si->ensure_grad();
                if (fi->requires_grad) fi->ensure_grad();
                const S* g = self->grad.data();
                const S* src2 = si->values.data();
                const S* fl2 = fi->values.data();
#pragma omp parallel for schedule(static)
                for (int b = 0; b < B; ++b) {
                    const S* fx = fl2 + static_cast<int64_t>(b) * 2 * plane;
                    const S* fy = fx + plane;
                    for (int y = 0; y < H; ++y) {
                        for (int x = 0; x < W; ++x) {
                            const int64_t p = static_cast<int64_t>(y) * W + x;
                            const S sx = static_cast<S>(x) + fx[p] * sx_scale;
                            const S sy = static_cast<S>(y) + fy[p] * sy_scale;
                            const bool in_x = sx >= S(0) && sx <= static_cast<S>(W - 1);
                            const bool in_y = sy >= S(0) && sy <= static_cast<S>(H - 1);
                            const S cx = std::min(std::max(sx, S(0)), static_cast<S>(W - 1));
                            const S cy = std::min(std::max(sy, S(0)), static_cast<S>(H - 1));
                            const int x0 = static_cast<int>(std::floor(cx));
                            const int y0 = static_cast<int>(std::floor(cy));
                            const int x1 = std::min(x0 + 1, W - 1);
                            const int y1 = std::min(y0 + 1, H - 1);
                            const S wx = cx - static_cast<S>(x0);
                            const S wy = cy - static_cast<S>(y0);
                            S d_cx = 0, d_cy = 0;
                            for (int c = 0; c < C; ++c) {
                                const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                                const S go = g[base + p];
                                if (go == S(0)) continue;
                                const S v00 = src2[base + static_cast<int64_t>(y0) * W + x0];
                                const S v01 = src2[base + static_cast<int64_t>(y0) * W + x1];
                                const S v10 = src2[base + static_cast<int64_t>(y1) * W + x0];
                                const S v11 = src2[base + static_cast<int64_t>(y1) * W + x1];
                                if (si->requires_grad) {
                                    S* gs = si->grad.data() + base;
                                    gs[static_cast<int64_t>(y0) * W + x0] += go * (S(1) - wy) * (S(1) - wx);
                                    gs[static_cast<int64_t>(y0) * W + x1] += go * (S(1) - wy) * wx;
                                    gs[static_cast<int64_t>(y1) * W + x0] += go * wy * (S(1) - wx);
                                    gs[static_cast<int64_t>(y1) * W + x1] += go * wy * wx;
                                }
                                d_cx += go * ((S(1) - wy) * (v01 - v00) + wy * (v11 - v10));
                                d_cy += go * ((S(1) - wx) * (v10 - v00) + wx * (v11 - v01));
                            }
                            if (fi->requires_grad) {
                                S* gf = fi->grad.data() + static_cast<int64_t>(b) * 2 * plane;
                                if (in_x) gf[p] += d_cx * sx_scale;
                                if (in_y) gf[plane + p] += d_cy * sy_scale;
                            }
                        }
                    }
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Losses

// Mean absolute difference. Subgradient at exact ties is 0.
template <class S>
Tensor<S> l1_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    detail::check_same_shape(pred, target, "l1_loss");
    return mean(abs(sub(pred, target)));
}

template <class S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    detail::check_same_shape(pred, target, "mse_loss");
    auto d = sub(pred, target);
    return mean(mul(d, d));
}

// Pixelwise softmax over a list of same-shaped confidence maps. The max is
// subtracted as a constant for overflow safety, which leaves both the value
// and the gradient of the softmax unchanged. A single map short-circuits to
// a constant all-ones weight.
template <class S>
std::vector<Tensor<S>> softmax_weights(const std::vector<Tensor<S>>& values) {
    if (values.empty()) throw ValueError("softmax_weights: empty input list");
    for (size_t i = 1; i < values.size(); ++i)
        detail::check_same_shape(values[0], values[i], "softmax_weights");
    if (values.size() == 1) return {Tensor<S>::filled(values[0].shape(), S(1))};

    const int64_t n = values[0].numel();
    std::vector<S> maxv(static_cast<size_t>(n), -std::numeric_limits<S>::infinity());
    for (const auto& t : values) {
        const S* x = t.data();
        for (int64_t i = 0; i < n; ++i) maxv[static_cast<size_t>(i)] = std::max(maxv[static_cast<size_t>(i)], x[i]);
    }
    Tensor<S> max_const = Tensor<S>::from(values[0].shape(), std::move(maxv));

    std::vector<Tensor<S>> exps;
    exps.reserve(values.size());
    for (const auto& t : values) exps.push_back(exp(sub(t, max_const)));
    Tensor<S> denom = exps[0];
    for (size_t i = 1; i < exps.size(); ++i) denom = add(denom, exps[i]);
    std::vector<Tensor<S>> weights;
    weights.reserve(values.size());
    for (const auto& e : exps) weights.push_back(div(e, denom));
    return weights;
}

// Multiplies every channel of img[B,C,H,W] by map[B,1,H,W].
template <class S>
Tensor<S> scale_channels(const Tensor<S>& img, const Tensor<S>& map) {
    if (img.rank() != 4 || map.rank() != 4 || map.dim(1) != 1)
        throw ShapeError("scale_channels: expected img [B,C,H,W] and map [B,1,H,W], got " +
                         shape_str(img.shape()) + " and " + shape_str(map.shape()));
    if (img.dim(0) != map.dim(0) || img.dim(2) != map.dim(2) || img.dim(3) != map.dim(3))
        throw ShapeError("scale_channels: map " + shape_str(map.shape()) + " does not match img " +
                         shape_str(img.shape()));
    const int B = img.dim(0), C = img.dim(1);
    const int64_t plane = static_cast<int64_t>(img.dim(2)) * img.dim(3);
    std::vector<S> out(static_cast<size_t>(img.numel()));
    for (int b = 0; b < B; ++b) {
        const S* m = map.data() + static_cast<int64_t>(b) * plane;
        for (int c = 0; c < C; ++c) {
            const S* x = img.data() + (static_cast<int64_t>(b) * C + c) * plane;
            S* o = out.data() + (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) o[i] = x[i] * m[i];
        }
    }
    auto ii = img.impl;
    auto mi = map.impl;
    return detail::make_op_node<S>(
        img.shape(), std::move(out), {ii, mi}, [=](detail::TensorImpl<S>* self) {
            return [=]() {
                const S* g = self->grad.data();
                if (ii->requires_grad) {
                    ii->ensure_grad();
                    for (int b = 0; b < B; ++b) {
                        const S* m = mi->values.data() + static_cast<int64_t>(b) * plane;
                        for (int c = 0; c < C; ++c) {
                            const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                            for (int64_t i = 0; i < plane; ++i) ii->grad[static_cast<size_t>(base + i)] += g[base + i] * m[i];
                        }
                    }
                }
                if (mi->requires_grad) {
                    mi->ensure_grad();
                    for (int b = 0; b < B; ++b) {
                        S* gm = mi->grad.data() + static_cast<int64_t>(b) * plane;
                        for (int c = 0; c < C; ++c) {
                            const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                            const S* x = ii->values.data() + base;
                            for (int64_t i = 0; i < plane; ++i) gm[i] += g[base + i] * x[i];
                        }
                    }
                }
            };
        });
}

// Class-weighted softmax cross-entropy over logits [B,K] with integer labels.
// Weighted mean uses the sum-of-weights normalizer, so equal weights reduce
// exactly to the unweighted mean.
template <class S>
Tensor<S> cross_entropy_loss(const Tensor<S>& logits, const std::vector<int>& labels,
                             const std::vector<S>& class_weights = {}) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [B,K], got " + shape_str(logits.shape()));
    const int B = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != B)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(B));
    if (!class_weights.empty() && static_cast<int>(class_weights.size()) != K)
        throw ShapeError("cross_entropy: class weight list length " + std::to_string(class_weights.size()) +
                         " does not match " + std::to_string(K) + " classes");
    for (int b = 0; b < B; ++b)
        if (labels[static_cast<size_t>(b)] < 0 || labels[static_cast<size_t>(b)] >= K)
            throw ValueError("cross_entropy: label " + std::to_string(labels[static_cast<size_t>(b)]) +
                             " out of range [0," + std::to_string(K) + ")");

    auto softmax = std::make_shared<std::vector<S>>(static_cast<size_t>(B) * K);
    S total = 0, weight_sum = 0;
    const S* x = logits.data();
    for (int b = 0; b < B; ++b) {
        const S* row = x + static_cast<int64_t>(b) * K;
        S m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        S denom = 0;
        for (int k = 0; k < K; ++k) denom += std::exp(row[k] - m);
        const int y = labels[static_cast<size_t>(b)];
        const S w = class_weights.empty() ? S(1) : class_weights[static_cast<size_t>(y)];
        total += w * (std::log(denom) - (row[y] - m));
        weight_sum += w;
        for (int k = 0; k < K; ++k)
            (*softmax)[static_cast<int64_t>(b) * K + k] = std::exp(row[k] - m) / denom;
    }
    const S value = total / weight_sum;

    auto li = logits.impl;
    auto labels_keep = std::make_shared<std::vector<int>>(labels);
    auto weights_keep = std::make_shared<std::vector<S>>(class_weights);
    return detail::make_op_node<S>(
        {1}, {value}, {li}, [=](detail::TensorImpl<S>* self) {
            return [=]() {
                if (!li->requires_grad) return;
                li->ensure_grad();
                const S g = self->grad[0];
                for (int b = 0; b < B; ++b) {
                    const int y = (*labels_keep)[static_cast<size_t>(b)];
                    const S w = weights_keep->empty() ? S(1) : (*weights_keep)[static_cast<size_t>(y)];
                    for (int k = 0; k < K; ++k) {
                        const S p = (*softmax)[static_cast<int64_t>(b) * K + k];
                        const S delta = k == y ? S(1) : S(0);
                        li->grad[static_cast<size_t>(static_cast<int64_t>(b) * K + k)] +=
                            g * w * (p - delta) / weight_sum;
                    }
                }
            };
        });
}

// Per-label binary cross-entropy with optional positive-class re-weighting,
// averaged over batch x labels.
template <class S>
Tensor<S> bce_with_logits_loss(const Tensor<S>& logits, const Tensor<S>& targets,
                               const std::vector<S>& pos_weights = {}) {
    detail::check_same_shape(logits, targets, "bce_with_logits");
    if (logits.rank() != 2) throw ShapeError("bce_with_logits: expected [B,K] logits, got " + shape_str(logits.shape()));
    const int B = logits.dim(0), K = logits.dim(1);
    if (!pos_weights.empty() && static_cast<int>(pos_weights.size()) != K)
        throw ShapeError("bce_with_logits: pos weight list length " + std::to_string(pos_weights.size()) +
                         " does not match " + std::to_string(K) + " labels");

    auto softplus = [](S v) {  // log(1 + e^v), overflow safe
        return v > S(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    };
    const S* x = logits.data();
    const S* t = targets.data();
    S total = 0;
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            const int64_t i = static_cast<int64_t>(b) * K + k;
            const S pw = pos_weights.empty() ? S(1) : pos_weights[static_cast<size_t>(k)];
            total += t[i] * pw * softplus(-x[i]) + (S(1) - t[i]) * softplus(x[i]);
        }
    const int64_t n = static_cast<int64_t>(B) * K;
    const S value = total / static_cast<S>(n);

    auto li = logits.impl;
    auto ti = targets.impl;
    auto pw_keep = std::make_shared<std::vector<S>>(pos_weights);
    return detail::make_op_node<S>(
        {1}, {value}, {li, ti}, [=](detail::TensorImpl<S>* self) {
            return [=]() {
                if (!li->requires_grad) return;
                li->ensure_grad();
                const S g = self->grad[0] / static_cast<S>(n);
                const S* xv = li->values.data();
                const S* tv = ti->values.data();
                for (int b = 0; b < B; ++b)
                    for (int k = 0; k < K; ++k) {
                        const int64_t i = static_cast<int64_t>(b) * K + k;
                        const S pw = pw_keep->empty() ? S(1) : (*pw_keep)[static_cast<size_t>(k)];
                        const S sig = S(1) / (S(1) + std::exp(-xv[i]));
                        li->grad[static_cast<size_t>(i)] += g * (-tv[i] * pw * (S(1) - sig) + (S(1) - tv[i]) * sig);
                    }
            };
        });
}

}  // namespace faceflow
