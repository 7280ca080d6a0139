#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fedlora/tensor.hpp"

// Differentiable primitives. Broadcasting is deliberately restricted to
// leading-dimension expansion: the second operand's shape must be a suffix of
// the first operand's shape. Gradients for the broadcast operand are
// sum-reduced over the leading dimensions.

namespace fedlora::ad {

namespace detail {

inline Tape* result_tape(std::initializer_list<const Tensor*> inputs, const char* op) {
    Tape* tape = nullptr;
    for (const Tensor* in : inputs) {
        if (!in->defined() || !in->requires_grad()) continue;
        Tape* t = in->tape();
        if (t == nullptr) continue;
        if (!t->recording()) return nullptr;
        if (tape != nullptr && tape != t)
            throw ContractError(std::string(op) + ": inputs belong to different tapes");
        tape = t;
    }
    return tape;
}

inline void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite output");
}

inline Tensor result(const char* op, Tape* tape, Shape shape, std::vector<double> value) {
    check_finite(op, value);
    return Tensor::make(std::move(shape), std::move(value), tape != nullptr, tape);
}

// True when b's shape is a suffix of a's shape (equal shapes included).
inline bool is_suffix_shape(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with leading-dim broadcast of the right operand.

namespace detail {

enum class BinOp { kAdd, kSub, kMul };

inline Tensor binary(const char* name, BinOp kind, const Tensor& a, const Tensor& b) {
    if (!is_suffix_shape(a.shape(), b.shape()))
        throw ShapeError(std::string(name) + ": shape " + shape_str(b.shape()) +
                         " does not broadcast over " + shape_str(a.shape()));
    const std::size_t nb = b.numel();
    const std::size_t lead = nb == 0 ? 0 : a.numel() / nb;
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t l = 0; l < lead; ++l) {
        const std::size_t base = l * nb;
        switch (kind) {
            case BinOp::kAdd:
                for (std::size_t i = 0; i < nb; ++i) out[base + i] = av[base + i] + bv[i];
                break;
            case BinOp::kSub:
                for (std::size_t i = 0; i < nb; ++i) out[base + i] = av[base + i] - bv[i];
                break;
            case BinOp::kMul:
                for (std::size_t i = 0; i < nb; ++i) out[base + i] = av[base + i] * bv[i];
                break;
        }
    }
    Tape* tape = result_tape({&a, &b}, name);
    Tensor res = result(name, tape, a.shape(), std::move(out));
    if (tape) {
        Tensor ta = a, tb = b;
        tape->record([ta, tb, res, kind, lead, nb]() mutable {
            const auto& go = res.grad();
            if (go.empty()) return;
            if (ta.requires_grad()) {
                auto& ga = ta.grad_buffer();
                if (kind == BinOp::kMul) {
                    const auto& bv = tb.data();
                    for (std::size_t l = 0; l < lead; ++l)
                        for (std::size_t i = 0; i < nb; ++i) ga[l * nb + i] += go[l * nb + i] * bv[i];
                } else {
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                }
            }
            if (tb.requires_grad()) {
                auto& gb = tb.grad_buffer();
                const auto& av = ta.data();
                for (std::size_t l = 0; l < lead; ++l) {
                    const std::size_t base = l * nb;
                    switch (kind) {
                        case BinOp::kAdd:
                            for (std::size_t i = 0; i < nb; ++i) gb[i] += go[base + i];
                            break;
                        case BinOp::kSub:
                            for (std::size_t i = 0; i < nb; ++i) gb[i] -= go[base + i];
                            break;
                        case BinOp::kMul:
                            for (std::size_t i = 0; i < nb; ++i) gb[i] += go[base + i] * av[base + i];
                            break;
                    }
                }
            }
        });
    }
    return res;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary("add", detail::BinOp::kAdd, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary("sub", detail::BinOp::kSub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary("mul", detail::BinOp::kMul, a, b); }

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    Tape* tape = detail::result_tape({&a}, "scale");
    Tensor res = detail::result("scale", tape, a.shape(), std::move(out));
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res, s]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// Matrix products.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = &out[i * n];
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = av[i * k + kk];
            const double* brow = &bv[kk * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    Tape* tape = detail::result_tape({&a, &b}, "matmul");
    Tensor res = detail::result("matmul", tape, {m, n}, std::move(out));
    if (tape) {
        Tensor ta = a, tb = b;
        tape->record([ta, tb, res, m, k, n]() mutable {
            const auto& go = res.grad();
            if (go.empty()) return;
            if (ta.requires_grad()) {
                auto& ga = ta.grad_buffer();
                const auto& bv = tb.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = go[i * n + j];
                        const double* brow = &bv[j];
                        for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += g * brow[kk * n];
                    }
            }
            if (tb.requires_grad()) {
                auto& gb = tb.grad_buffer();
                const auto& av = ta.data();
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double aik = av[i * k + kk];
                        const double* grow = &go[i * n];
                        double* gbrow = &gb[kk * n];
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
            }
        });
    }
    return res;
}

// Per-sample matrix product: [B,m,k] x [B,k,n] -> [B,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(bs * m * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t s = 0; s < bs; ++s) {
        const double* as = &av[s * m * k];
        const double* bsp = &bv[s * k * n];
        double* os = &out[s * m * n];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = as[i * k + kk];
                for (std::size_t j = 0; j < n; ++j) os[i * n + j] += aik * bsp[kk * n + j];
            }
    }
    Tape* tape = detail::result_tape({&a, &b}, "bmm");
    Tensor res = detail::result("bmm", tape, {bs, m, n}, std::move(out));
    if (tape) {
        Tensor ta = a, tb = b;
        tape->record([ta, tb, res, bs, m, k, n]() mutable {
            const auto& go = res.grad();
            if (go.empty()) return;
            const auto& av = ta.data();
            const auto& bv = tb.data();
            for (std::size_t s = 0; s < bs; ++s) {
                const double* gos = &go[s * m * n];
                if (ta.requires_grad()) {
                    auto& ga = ta.grad_buffer();
                    const double* bsp = &bv[s * k * n];
                    double* gas = &ga[s * m * k];
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const double g = gos[i * n + j];
                            for (std::size_t kk = 0; kk < k; ++kk) gas[i * k + kk] += g * bsp[kk * n + j];
                        }
                }
                if (tb.requires_grad()) {
                    auto& gb = tb.grad_buffer();
                    const double* as = &av[s * m * k];
                    double* gbs = &gb[s * k * n];
                    for (std::size_t kk = 0; kk < k; ++kk)
                        for (std::size_t i = 0; i < m; ++i) {
                            const double aik = as[i * k + kk];
                            for (std::size_t j = 0; j < n; ++j) gbs[kk * n + j] += aik * gos[i * n + j];
                        }
                }
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// Layout ops.

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    Tape* tape = detail::result_tape({&a}, "reshape");
    Tensor res = detail::result("reshape", tape, std::move(new_shape), a.data());
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        });
    }
    return res;
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    const std::size_t r = a.rank();
    if (axes.size() != r) throw ShapeError("permute: axes rank mismatch for " + shape_str(a.shape()));
    std::vector<bool> seen(r, false);
    for (std::size_t ax : axes) {
        if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axis list");
        seen[ax] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(axes[i]);

    std::vector<std::size_t> in_strides(r, 1), out_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
    for (std::size_t i = r; i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];

    // out index (i0..ir-1) reads input at sum(i_j * in_strides[axes[j]])
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    std::vector<std::size_t> src_of(a.numel());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < out.size(); ++o) {
        std::size_t src = 0;
        for (std::size_t j = 0; j < r; ++j) src += idx[j] * in_strides[axes[j]];
        out[o] = av[src];
        src_of[o] = src;
        for (std::size_t j = r; j-- > 0;) {
            if (++idx[j] < out_shape[j]) break;
            idx[j] = 0;
        }
    }
    Tape* tape = detail::result_tape({&a}, "permute");
    Tensor res = detail::result("permute", tape, std::move(out_shape), std::move(out));
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res, src_of = std::move(src_of)]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            for (std::size_t o = 0; o < go.size(); ++o) ga[src_of[o]] += go[o];
        });
    }
    return res;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= a.rank() || begin > end || end > a.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] = end - begin;
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    const std::size_t in_axis = a.dim(axis), out_axis = end - begin;

    std::vector<double> out(outer * out_axis * inner);
    const auto& av = a.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t x = 0; x < out_axis; ++x)
            std::copy_n(&av[(o * in_axis + begin + x) * inner], inner, &out[(o * out_axis + x) * inner]);

    Tape* tape = detail::result_tape({&a}, "slice");
    Tensor res = detail::result("slice", tape, std::move(out_shape), std::move(out));
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res, outer, inner, in_axis, out_axis, begin]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t x = 0; x < out_axis; ++x) {
                    const double* src = &go[(o * out_axis + x) * inner];
                    double* dst = &ga[(o * in_axis + begin + x) * inner];
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
        });
    }
    return res;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < ref.size(); ++i)
            if (i != axis && p.dim(i) != ref[i])
                throw ShapeError("concat: shape " + shape_str(p.shape()) + " incompatible with " + shape_str(ref));
        axis_total += p.dim(axis);
    }
    Shape out_shape = ref;
    out_shape[axis] = axis_total;
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];

    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t pa = p.dim(axis);
        const auto& pv = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(&pv[o * pa * inner], pa * inner, &out[(o * axis_total + offset) * inner]);
        offset += pa;
    }
    std::vector<const Tensor*> ptrs;
    for (const Tensor& p : parts) ptrs.push_back(&p);
    Tape* tape = nullptr;
    for (const Tensor* p : ptrs) {
        Tape* t = detail::result_tape({p}, "concat");
        if (t) {
            if (tape && tape != t) throw ContractError("concat: inputs belong to different tapes");
            tape = t;
        }
    }
    Tensor res = detail::result("concat", tape, std::move(out_shape), std::move(out));
    if (tape) {
        std::vector<Tensor> held = parts;
        tape->record([held = std::move(held), res, outer, inner, axis, axis_total]() mutable {
            const auto& go = res.grad();
            if (go.empty()) return;
            std::size_t offset = 0;
            for (Tensor& p : held) {
                const std::size_t pa = p.shape()[axis];
                if (p.requires_grad()) {
                    auto& gp = p.grad_buffer();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = &go[(o * axis_total + offset) * inner];
                        double* dst = &gp[o * pa * inner];
                        for (std::size_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += pa;
            }
        });
    }
    return res;
}

// Embedding-style row gather: table [V,D], indices -> [n,D].
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank-2, got " + shape_str(table.shape()));
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (std::size_t idx : indices)
        if (idx >= v) throw ContractError("gather_rows: index " + std::to_string(idx) + " out of range");
    std::vector<double> out(indices.size() * d);
    const auto& tv = table.data();
    for (std::size_t i = 0; i < indices.size(); ++i) std::copy_n(&tv[indices[i] * d], d, &out[i * d]);
    Tape* tape = detail::result_tape({&table}, "gather_rows");
    Tensor res = detail::result("gather_rows", tape, {indices.size(), d}, std::move(out));
    if (tape) {
        Tensor tt = table;
        tape->record([tt, res, indices, d]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !tt.requires_grad()) return;
            auto& gt = tt.grad_buffer();
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) gt[indices[i] * d + j] += go[i * d + j];
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// Nonlinearities.

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    Tape* tape = detail::result_tape({&a}, "relu");
    Tensor res = detail::result("relu", tape, a.shape(), std::move(out));
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            const auto& av = ta.data();
            for (std::size_t i = 0; i < go.size(); ++i)
                if (av[i] > 0.0) ga[i] += go[i];
        });
    }
    return res;
}

// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
inline Tensor gelu(const Tensor& a) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * 0.5 * (1.0 + std::erf(av[i] * kInvSqrt2));
    Tape* tape = detail::result_tape({&a}, "gelu");
    Tensor res = detail::result("gelu", tape, a.shape(), std::move(out));
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            const auto& av = ta.data();
            for (std::size_t i = 0; i < go.size(); ++i) {
                const double x = av[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                ga[i] += go[i] * (cdf + x * pdf);
            }
        });
    }
    return res;
}

// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
    if (a.rank() == 0) throw ShapeError("softmax: rank-0 input");
    const std::size_t d = a.dim(a.rank() - 1);
    const std::size_t rows = a.numel() / d;
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &av[r * d];
        double* y = &out[r * d];
        double mx = x[0];
        for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
        double total = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            total += y[i];
        }
        for (std::size_t i = 0; i < d; ++i) y[i] /= total;
    }
    Tape* tape = detail::result_tape({&a}, "softmax");
    Tensor res = detail::result("softmax", tape, a.shape(), std::move(out));
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res, rows, d]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            const auto& y = res.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = &y[r * d];
                const double* gr = &go[r * d];
                double dot = 0.0;
                for (std::size_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
                for (std::size_t i = 0; i < d; ++i) ga[r * d + i] += (gr[i] - dot) * yr[i];
            }
        });
    }
    return res;
}

// Layer normalization over the last axis with learnable gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if (x.rank() == 0) throw ShapeError("layer_norm: rank-0 input");
    const std::size_t d = x.dim(x.rank() - 1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " must be [" + std::to_string(d) + "]");
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &xv[r * d];
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = xr[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (xr[i] - mean) * inv;
            xhat[r * d + i] = h;
            out[r * d + i] = gv[i] * h + bv[i];
        }
    }
    Tape* tape = detail::result_tape({&x, &gain, &bias}, "layer_norm");
    Tensor res = detail::result("layer_norm", tape, x.shape(), std::move(out));
    if (tape) {
        Tensor tx = x, tg = gain, tb = bias;
        tape->record([tx, tg, tb, res, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
            const auto& go = res.grad();
            if (go.empty()) return;
            const auto& gv = tg.data();
            if (tg.requires_grad()) {
                auto& gg = tg.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) gg[i] += go[r * d + i] * xhat[r * d + i];
            }
            if (tb.requires_grad()) {
                auto& gb = tb.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) gb[i] += go[r * d + i];
            }
            if (tx.requires_grad()) {
                auto& gx = tx.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = go[r * d + i] * gv[i];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[r * d + i];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = go[r * d + i] * gv[i];
                        gx[r * d + i] += inv_std[r] * (dxh - mean_dxhat - xhat[r * d + i] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// Reductions and losses.

inline Tensor sum_all(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    Tape* tape = detail::result_tape({&a}, "sum");
    Tensor res = detail::result("sum", tape, {}, {total});
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            const double g = go[0];
            for (double& v : ga) v += g;
        });
    }
    return res;
}

inline Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    double total = 0.0;
    for (double v : a.data()) total += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tape* tape = detail::result_tape({&a}, "mean");
    Tensor res = detail::result("mean", tape, {}, {total * inv});
    if (tape) {
        Tensor ta = a;
        tape->record([ta, res, inv]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !ta.requires_grad()) return;
            auto& ga = ta.grad_buffer();
            const double g = go[0] * inv;
            for (double& v : ga) v += g;
        });
    }
    return res;
}

// Per-sample cross entropy from raw logits: [B,C] with integer labels -> [B].
inline Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [batch,classes], got " + shape_str(logits.shape()));
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(b));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
    std::vector<double> out(b);
    std::vector<double> probs(b * c);
    const auto& lv = logits.data();
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = &lv[i * c];
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(row[j] - mx);
            total += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= total;
        out[i] = std::log(total) + mx - row[static_cast<std::size_t>(labels[i])];
    }
    Tape* tape = detail::result_tape({&logits}, "cross_entropy");
    Tensor res = detail::result("cross_entropy", tape, {b}, std::move(out));
    if (tape) {
        Tensor tl = logits;
        tape->record([tl, res, labels, b, c, probs = std::move(probs)]() mutable {
            const auto& go = res.grad();
            if (go.empty() || !tl.requires_grad()) return;
            auto& gl = tl.grad_buffer();
            for (std::size_t i = 0; i < b; ++i) {
                const double g = go[i];
                if (g == 0.0) continue;
                for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * probs[i * c + j];
                gl[i * c + static_cast<std::size_t>(labels[i])] -= g;
            }
        });
    }
    return res;
}

// Squared L2 distance between same-shape tensors, reduced to a scalar.
inline Tensor squared_distance(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("squared_distance: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto& av = a.data();
    const auto& bv = b.data();
    double total = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double dd = av[i] - bv[i];
        total += dd * dd;
    }
    Tape* tape = detail::result_tape({&a, &b}, "squared_distance");
    Tensor res = detail::result("squared_distance", tape, {}, {total});
    if (tape) {
        Tensor ta = a, tb = b;
        tape->record([ta, tb, res]() mutable {
            const auto& go = res.grad();
            if (go.empty()) return;
            const double g = 2.0 * go[0];
            const auto& av = ta.data();
            const auto& bv = tb.data();
            if (ta.requires_grad()) {
                auto& ga = ta.grad_buffer();
                for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
            }
            if (tb.requires_grad()) {
                auto& gb = tb.grad_buffer();
                for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// Convenience composite: y = x W^T + b for weight stored [out,in].

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add(matmul(x, transpose(weight)), bias);
}

}  // namespace fedlora::ad
