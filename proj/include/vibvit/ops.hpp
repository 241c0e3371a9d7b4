// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Each op computes its value eagerly and records a
// closure that maps the output gradient onto its inputs' gradients.
// Broadcasting is limited to the two forms the model needs: a trailing bias
// vector (add_bias) and a per-group bias (add_group_bias).
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vibvit/errors.hpp"
#include "vibvit/tape.hpp"
#include "vibvit/tensor.hpp"

namespace vibvit::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using CVecMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

inline void require(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

inline void same_shape(const Shape& a, const Shape& b, const char* op) {
    require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
Tape<T>& tape_of(Var<T> a) {
    return *a.tape;
}

// Strided copy for axis permutation. out.shape[i] = in.shape[perm[i]].
template <class T>
void permute_copy(const T* src, const Shape& in_shape, const std::vector<std::size_t>& perm, T* dst,
                  bool accumulate) {
    const std::size_t rank = in_shape.size();
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
    Shape out_shape(rank);
    std::vector<std::size_t> step(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in_shape[perm[i]];
        step[i] = in_stride[perm[i]];
    }
    const std::size_t total = shape_numel(in_shape);
    if (total == 0) return;
    const std::size_t inner = rank ? out_shape[rank - 1] : 1;
    const std::size_t inner_step = rank ? step[rank - 1] : 1;
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src_off = 0;
    for (std::size_t o = 0; o < total; o += inner) {
        const T* s = src + src_off;
        T* d = dst + o;
        if (accumulate) {
            for (std::size_t j = 0; j < inner; ++j) d[j] += s[j * inner_step];
        } else {
            for (std::size_t j = 0; j < inner; ++j) d[j] = s[j * inner_step];
        }
        // advance all but the innermost axis
        for (std::size_t ax = rank - 1; ax-- > 0;) {
            ++idx[ax];
            src_off += step[ax];
            if (idx[ax] < out_shape[ax]) break;
            src_off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

// out[j] += sum over rows of g[r, j], accumulated row by row. Eigen's
// colwise().sum() changes association with buffer alignment.
template <class T>
void column_sums_into(const T* g, std::size_t rows, std::size_t n, T* out) {
    std::vector<T> acc(n, T(0));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) acc[j] += g[r * n + j];
    for (std::size_t j = 0; j < n; ++j) out[j] += acc[j];
}

inline std::vector<std::size_t> inverse_perm(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return inv;
}

}  // namespace detail

/// (m..., k) x (k, n) -> (m..., n). Leading axes of `a` are flattened into rows.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    using namespace detail;
    auto& tape = tape_of(a);
    const auto& av = a.value();
    const auto& bv = b.value();
    require(av.rank() >= 2 && bv.rank() == 2, "matmul: expects rank>=2 lhs and rank-2 rhs, got " +
                                                  shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    const std::size_t k = av.shape().back();
    require(k == bv.dim(0), "matmul: inner extents differ " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const std::size_t m = av.size() / k;
    const std::size_t n = bv.dim(1);
    Shape out_shape = av.shape();
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    Map<T>(out.raw(), m, n).noalias() = CMap<T>(av.raw(), m, k) * CMap<T>(bv.raw(), k, n);
    return tape.record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, m, k, n](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        CMap<T> G(g.raw(), m, n);
        if (t.requires_grad(ia)) {
            Map<T>(t.grad_ref(ia).raw(), m, k).noalias() += G * CMap<T>(t.value(ib).raw(), k, n).transpose();
        }
        if (t.requires_grad(ib)) {
            Map<T>(t.grad_ref(ib).raw(), k, n).noalias() += CMap<T>(t.value(ia).raw(), m, k).transpose() * G;
        }
    });
}

/// Batched product over a leading group axis: (G,m,k) x (G,k,n) -> (G,m,n).
/// With `transpose_b`, b is (G,n,k) and its last two axes are swapped.
template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
    using namespace detail;
    auto& tape = tape_of(a);
    const auto& av = a.value();
    const auto& bv = b.value();
    require(av.rank() == 3 && bv.rank() == 3, "bmm: expects rank-3 operands");
    const std::size_t G = av.dim(0), m = av.dim(1), k = av.dim(2);
    require(bv.dim(0) == G, "bmm: group extents differ");
    const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
    const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
    require(bk == k, "bmm: inner extents differ " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    Tensor<T> out(Shape{G, m, n});
    for (std::size_t g = 0; g < G; ++g) {
        CMap<T> A(av.raw() + g * m * k, m, k);
        Map<T> C(out.raw() + g * m * n, m, n);
        if (transpose_b) {
            C.noalias() = A * CMap<T>(bv.raw() + g * n * k, n, k).transpose();
        } else {
            C.noalias() = A * CMap<T>(bv.raw() + g * k * n, k, n);
        }
    }
    return tape.record(std::move(out), {a.id, b.id},
                       [ia = a.id, ib = b.id, G, m, k, n, transpose_b](Tape<T>& t, std::size_t self) {
                           const auto& g = *t.grad_if(self);
                           const bool ga = t.requires_grad(ia), gb = t.requires_grad(ib);
                           const T* A = t.value(ia).raw();
                           const T* B = t.value(ib).raw();
                           T* dA = ga ? t.grad_ref(ia).raw() : nullptr;
                           T* dB = gb ? t.grad_ref(ib).raw() : nullptr;
                           for (std::size_t q = 0; q < G; ++q) {
                               CMap<T> Gq(g.raw() + q * m * n, m, n);
                               CMap<T> Aq(A + q * m * k, m, k);
                               if (transpose_b) {
                                   CMap<T> Bq(B + q * n * k, n, k);
                                   if (ga) Map<T>(dA + q * m * k, m, k).noalias() += Gq * Bq;
                                   if (gb) Map<T>(dB + q * n * k, n, k).noalias() += Gq.transpose() * Aq;
                               } else {
                                   CMap<T> Bq(B + q * k * n, k, n);
                                   if (ga) Map<T>(dA + q * m * k, m, k).noalias() += Gq * Bq.transpose();
                                   if (gb) Map<T>(dB + q * k * n, k, n).noalias() += Aq.transpose() * Gq;
                               }
                           }
                       });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    using namespace detail;
    same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    VecMap<T>(out.raw(), out.size()) += CVecMap<T>(b.value().raw(), out.size());
    return tape_of(a).record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        for (std::size_t in : {ia, ib}) {
            if (t.requires_grad(in)) VecMap<T>(t.grad_ref(in).raw(), g.size()) += CVecMap<T>(g.raw(), g.size());
        }
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    using namespace detail;
    same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out = a.value();
    VecMap<T>(out.raw(), out.size()) -= CVecMap<T>(b.value().raw(), out.size());
    return tape_of(a).record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        if (t.requires_grad(ia)) VecMap<T>(t.grad_ref(ia).raw(), g.size()) += CVecMap<T>(g.raw(), g.size());
        if (t.requires_grad(ib)) VecMap<T>(t.grad_ref(ib).raw(), g.size()) -= CVecMap<T>(g.raw(), g.size());
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    using namespace detail;
    same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out = a.value();
    VecMap<T>(out.raw(), out.size()) *= CVecMap<T>(b.value().raw(), out.size());
    return tape_of(a).record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        CVecMap<T> G(g.raw(), g.size());
        if (t.requires_grad(ia)) {
            VecMap<T>(t.grad_ref(ia).raw(), g.size()) += G * CVecMap<T>(t.value(ib).raw(), g.size());
        }
        if (t.requires_grad(ib)) {
            VecMap<T>(t.grad_ref(ib).raw(), g.size()) += G * CVecMap<T>(t.value(ia).raw(), g.size());
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
    using namespace detail;
    Tensor<T> out = a.value();
    VecMap<T>(out.raw(), out.size()) *= c;
    return tape_of(a).record(std::move(out), {a.id}, [ia = a.id, c](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        VecMap<T>(t.grad_ref(ia).raw(), g.size()) += c * CVecMap<T>(g.raw(), g.size());
    });
}

template <class T>
Var<T> exp(Var<T> a) {
    using namespace detail;
    Tensor<T> out = a.value();
    // scalar std::exp: Eigen's packet exp rounds differently from its scalar
    // tail, which would make results depend on buffer alignment
    for (auto& v : out.data()) v = std::exp(v);
    return tape_of(a).record(std::move(out), {a.id}, [ia = a.id](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        VecMap<T>(t.grad_ref(ia).raw(), g.size()) +=
            CVecMap<T>(g.raw(), g.size()) * CVecMap<T>(t.value(self).raw(), g.size());
    });
}

/// Clamp to [lo, hi]; the gradient passes only where the input was inside the interval.
template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v = std::clamp(v, lo, hi);
    return detail::tape_of(a).record(std::move(out), {a.id}, [ia = a.id, lo, hi](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        const auto& x = t.value(ia);
        auto& dx = t.grad_ref(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] >= lo && x[i] <= hi) dx[i] += g[i];
        }
    });
}

namespace detail {
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <class T>
inline constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
template <class T>
inline constexpr T kGeluA = T(0.044715);
}  // namespace detail

template <class T>
T gelu_scalar(T x) {
    using detail::kGeluA;
    using detail::kGeluC;
    return T(0.5) * x * (T(1) + std::tanh(kGeluC<T> * (x + kGeluA<T> * x * x * x)));
}

template <class T>
Var<T> gelu(Var<T> a) {
    using detail::kGeluA;
    using detail::kGeluC;
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v = gelu_scalar(v);
    return detail::tape_of(a).record(std::move(out), {a.id}, [ia = a.id](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        const auto& x = t.value(ia);
        auto& dx = t.grad_ref(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T xi = x[i];
            const T u = kGeluC<T> * (xi + kGeluA<T> * xi * xi * xi);
            const T th = std::tanh(u);
            const T du = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * xi * xi);
            dx[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * xi * (T(1) - th * th) * du);
        }
    });
}

/// Numerically stabilized softmax along `axis`.
template <class T>
Var<T> softmax(Var<T> a, std::size_t axis) {
    const auto& x = a.value();
    detail::require(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    const std::size_t n = x.dim(axis);
    detail::require(n > 0, "softmax: empty reduction axis");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor<T> out(x.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
            T s = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const T e = std::exp(x[base + j * inner] - mx);
                out[base + j * inner] = e;
                s += e;
            }
            const T inv = T(1) / s;
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
        }
    }
    return detail::tape_of(a).record(std::move(out), {a.id},
                                     [ia = a.id, outer, n, inner](Tape<T>& t, std::size_t self) {
                                         const auto& g = *t.grad_if(self);
                                         const auto& y = t.value(self);
                                         auto& dx = t.grad_ref(ia);
                                         for (std::size_t o = 0; o < outer; ++o) {
                                             for (std::size_t in = 0; in < inner; ++in) {
                                                 const std::size_t base = o * n * inner + in;
                                                 T dot = 0;
                                                 for (std::size_t j = 0; j < n; ++j) {
                                                     dot += g[base + j * inner] * y[base + j * inner];
                                                 }
                                                 for (std::size_t j = 0; j < n; ++j) {
                                                     const std::size_t p = base + j * inner;
                                                     dx[p] += y[p] * (g[p] - dot);
                                                 }
                                             }
                                         }
                                     });
}

/// Normalize the last axis to zero mean / unit variance, then scale by `gain` and shift by `bias`.
template <class T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps = T(1e-6)) {
    const auto& x = a.value();
    detail::require(x.rank() >= 1, "layer_norm: rank-0 input");
    const std::size_t d = x.shape().back();
    detail::require(gain.value().size() == d && bias.value().size() == d && gain.value().rank() == 1 &&
                        bias.value().rank() == 1,
                    "layer_norm: gain/bias must be vectors of length " + std::to_string(d));
    const std::size_t rows = d ? x.size() / d : 0;
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.size());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = x.raw() + r * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= T(d);
        const T rs = T(1) / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const T xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gv[j] + bv[j];
        }
    }
    return detail::tape_of(a).record(
        std::move(out), {a.id, gain.id, bias.id},
        [ia = a.id, ig = gain.id, ib = bias.id, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
            Tape<T>& t, std::size_t self) {
            const auto& g = *t.grad_if(self);
            if (t.requires_grad(ig)) {
                auto& dg = t.grad_ref(ig);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * xhat[r * d + j];
            }
            if (t.requires_grad(ib)) {
                auto& db = t.grad_ref(ib);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
            }
            if (t.requires_grad(ia)) {
                const auto& gv = t.value(ig);
                auto& dx = t.grad_ref(ia);
                for (std::size_t r = 0; r < rows; ++r) {
                    T m1 = 0, m2 = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = g[r * d + j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xhat[r * d + j];
                    }
                    m1 /= T(d);
                    m2 /= T(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = g[r * d + j] * gv[j];
                        dx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                    }
                }
            }
        });
}

/// x[..., n] + b[n]
template <class T>
Var<T> add_bias(Var<T> x, Var<T> b) {
    const auto& xv = x.value();
    const auto& bv = b.value();
    detail::require(bv.rank() == 1 && xv.rank() >= 1 && xv.shape().back() == bv.size(),
                    "add_bias: bias " + shape_str(bv.shape()) + " does not match trailing axis of " +
                        shape_str(xv.shape()));
    const std::size_t n = bv.size();
    const std::size_t rows = n ? xv.size() / n : 0;
    Tensor<T> out = xv;
    detail::Map<T>(out.raw(), rows, n).rowwise() += detail::CMap<T>(bv.raw(), 1, n).row(0);
    return detail::tape_of(x).record(std::move(out), {x.id, b.id},
                                     [ix = x.id, ib = b.id, rows, n](Tape<T>& t, std::size_t self) {
                                         const auto& g = *t.grad_if(self);
                                         detail::CMap<T> G(g.raw(), rows, n);
                                         if (t.requires_grad(ix)) {
                                             detail::Map<T>(t.grad_ref(ix).raw(), rows, n) += G;
                                         }
                                         if (t.requires_grad(ib)) {
                                             detail::column_sums_into(g.raw(), rows, n, t.grad_ref(ib).raw());
                                         }
                                     });
}

/// x[G, M, n] + b[G, n], one bias row per group.
template <class T>
Var<T> add_group_bias(Var<T> x, Var<T> b) {
    const auto& xv = x.value();
    const auto& bv = b.value();
    detail::require(xv.rank() == 3 && bv.rank() == 2 && bv.dim(0) == xv.dim(0) && bv.dim(1) == xv.dim(2),
                    "add_group_bias: bias " + shape_str(bv.shape()) + " incompatible with " + shape_str(xv.shape()));
    const std::size_t G = xv.dim(0), M = xv.dim(1), n = xv.dim(2);
    Tensor<T> out = xv;
    for (std::size_t q = 0; q < G; ++q) {
        detail::Map<T>(out.raw() + q * M * n, M, n).rowwise() += detail::CMap<T>(bv.raw() + q * n, 1, n).row(0);
    }
    return detail::tape_of(x).record(
        std::move(out), {x.id, b.id}, [ix = x.id, ib = b.id, G, M, n](Tape<T>& t, std::size_t self) {
            const auto& g = *t.grad_if(self);
            if (t.requires_grad(ix)) {
                detail::VecMap<T>(t.grad_ref(ix).raw(), g.size()) += detail::CVecMap<T>(g.raw(), g.size());
            }
            if (t.requires_grad(ib)) {
                auto& db = t.grad_ref(ib);
                for (std::size_t q = 0; q < G; ++q) detail::column_sums_into(g.raw() + q * M * n, M, n, db.raw() + q * n);
            }
        });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return detail::tape_of(a).record(std::move(out), {a.id}, [ia = a.id](Tape<T>& t, std::size_t self) {
        const auto& g = *t.grad_if(self);
        detail::VecMap<T>(t.grad_ref(ia).raw(), g.size()) += detail::CVecMap<T>(g.raw(), g.size());
    });
}

/// Reorder axes: output axis i is input axis perm[i].
template <class T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm) {
    const auto& x = a.value();
    detail::require(perm.size() == x.rank(), "permute: permutation rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t p : perm) {
        detail::require(p < perm.size() && !seen[p], "permute: not a permutation");
        seen[p] = true;
    }
    Shape out_shape(x.rank());
    for (std::size_t i = 0; i < x.rank(); ++i) out_shape[i] = x.dim(perm[i]);
    Tensor<T> out(out_shape);
    detail::permute_copy(x.raw(), x.shape(), perm, out.raw(), false);
    return detail::tape_of(a).record(std::move(out), {a.id},
                                     [ia = a.id, inv = detail::inverse_perm(perm)](Tape<T>& t, std::size_t self) {
                                         const auto& g = *t.grad_if(self);
                                         detail::permute_copy(g.raw(), g.shape(), inv, t.grad_ref(ia).raw(), true);
                                     });
}

/// Stack equally shaped tensors along a new leading axis.
template <class T>
Var<T> stack(const std::vector<Var<T>>& parts) {
    detail::require(!parts.empty(), "stack: no inputs");
    const Shape& s0 = parts.front().shape();
    const std::size_t each = shape_numel(s0);
    Shape out_shape{parts.size()};
    out_shape.insert(out_shape.end(), s0.begin(), s0.end());
    Tensor<T> out(out_shape);
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        detail::same_shape(parts[i].shape(), s0, "stack");
        std::copy_n(parts[i].value().raw(), each, out.raw() + i * each);
        ids.push_back(parts[i].id);
    }
    return detail::tape_of(parts.front())
        .record(std::move(out), ids, [ids, each](Tape<T>& t, std::size_t self) {
            const auto& g = *t.grad_if(self);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (!t.requires_grad(ids[i])) continue;
                detail::VecMap<T>(t.grad_ref(ids[i]).raw(), each) += detail::CVecMap<T>(g.raw() + i * each, each);
            }
        });
}

/// Columns [begin, end) of the last axis.
template <class T>
Var<T> slice_last(Var<T> a, std::size_t begin, std::size_t end) {
    const auto& x = a.value();
    detail::require(x.rank() >= 1 && begin <= end && end <= x.shape().back(), "slice_last: bad range");
    const std::size_t n = x.shape().back();
    const std::size_t w = end - begin;
    const std::size_t rows = n ? x.size() / n : 0;
    Shape out_shape = x.shape();
    out_shape.back() = w;
    Tensor<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.raw() + r * n + begin, w, out.raw() + r * w);
    return detail::tape_of(a).record(std::move(out), {a.id},
                                     [ia = a.id, rows, n, w, begin](Tape<T>& t, std::size_t self) {
                                         const auto& g = *t.grad_if(self);
                                         auto& dx = t.grad_ref(ia);
                                         for (std::size_t r = 0; r < rows; ++r)
                                             for (std::size_t j = 0; j < w; ++j) dx[r * n + begin + j] += g[r * w + j];
                                     });
}

template <class T>
Var<T> sum(Var<T> a) {
    const auto& x = a.value();
    T s = 0;
    for (T v : x.data()) s += v;
    return detail::tape_of(a).record(Tensor<T>::scalar(s), {a.id}, [ia = a.id](Tape<T>& t, std::size_t self) {
        const T g = t.grad_if(self)->item();
        auto& dx = t.grad_ref(ia);
        for (auto& v : dx.data()) v += g;
    });
}

template <class T>
Var<T> mean(Var<T> a) {
    const std::size_t n = a.value().size();
    detail::require(n > 0, "mean: empty tensor");
    return scale(sum(a), T(1) / T(n));
}

/// Mean over one axis; that axis is removed from the shape.
template <class T>
Var<T> mean_axis(Var<T> a, std::size_t axis) {
    const auto& x = a.value();
    detail::require(axis < x.rank() && x.dim(axis) > 0, "mean_axis: invalid axis");
    std::size_t outer = 1, inner = 1;
    const std::size_t n = x.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor<T> out(out_shape);
    const T inv = T(1) / T(n);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] += x[(o * n + j) * inner + in];
    for (auto& v : out.data()) v *= inv;
    return detail::tape_of(a).record(std::move(out), {a.id},
                                     [ia = a.id, outer, n, inner, inv](Tape<T>& t, std::size_t self) {
                                         const auto& g = *t.grad_if(self);
                                         auto& dx = t.grad_ref(ia);
                                         for (std::size_t o = 0; o < outer; ++o)
                                             for (std::size_t j = 0; j < n; ++j)
                                                 for (std::size_t in = 0; in < inner; ++in)
                                                     dx[(o * n + j) * inner + in] += g[o * inner + in] * inv;
                                     });
}

/// Per-row cross-entropy of logits[B, C] against integer labels; returns [B].
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
    const auto& x = logits.value();
    detail::require(x.rank() == 2 && x.dim(0) == labels.size(), "cross_entropy: logits must be [batch, classes]");
    const std::size_t B = x.dim(0), C = x.dim(1);
    Tensor<T> out(Shape{B});
    std::vector<T> prob(B * C);
    std::vector<int> lab(labels.begin(), labels.end());
    for (std::size_t b = 0; b < B; ++b) {
        if (lab[b] < 0 || static_cast<std::size_t>(lab[b]) >= C) throw UsageError("cross_entropy: label out of range");
        const T* row = x.raw() + b * C;
        const T mx = *std::max_element(row, row + C);
        T s = 0;
        for (std::size_t c = 0; c < C; ++c) {
            prob[b * C + c] = std::exp(row[c] - mx);
            s += prob[b * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) prob[b * C + c] /= s;
        out[b] = -(row[lab[b]] - mx - std::log(s));
    }
    return detail::tape_of(logits).record(
        std::move(out), {logits.id},
        [il = logits.id, B, C, prob = std::move(prob), lab = std::move(lab)](Tape<T>& t, std::size_t self) {
            const auto& g = *t.grad_if(self);
            auto& dx = t.grad_ref(il);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t c = 0; c < C; ++c) {
                    const T onehot = static_cast<int>(c) == lab[b] ? T(1) : T(0);
                    dx[b * C + c] += g[b] * (prob[b * C + c] - onehot);
                }
            }
        });
}

/// Elementwise KL( N(mu, exp(log_sigma)^2) || N(0, 1) ) in nats.
template <class T>
Var<T> gaussian_kl(Var<T> mu, Var<T> log_sigma) {
    detail::same_shape(mu.shape(), log_sigma.shape(), "gaussian_kl");
    const auto& m = mu.value();
    const auto& ls = log_sigma.value();
    Tensor<T> out(m.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = T(0.5) * (m[i] * m[i] + std::exp(T(2) * ls[i]) - T(1) - T(2) * ls[i]);
    }
    return detail::tape_of(mu).record(std::move(out), {mu.id, log_sigma.id},
                                      [im = mu.id, is = log_sigma.id](Tape<T>& t, std::size_t self) {
                                          const auto& g = *t.grad_if(self);
                                          if (t.requires_grad(im)) {
                                              const auto& m = t.value(im);
                                              auto& dm = t.grad_ref(im);
                                              for (std::size_t i = 0; i < g.size(); ++i) dm[i] += g[i] * m[i];
                                          }
                                          if (t.requires_grad(is)) {
                                              const auto& ls = t.value(is);
                                              auto& ds = t.grad_ref(is);
                                              for (std::size_t i = 0; i < g.size(); ++i)
                                                  ds[i] += g[i] * (std::exp(T(2) * ls[i]) - T(1));
                                          }
                                      });
}

}  // namespace vibvit::ops
