#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "jotr/tensor.hpp"

// Reverse-mode op set: matmul, elementwise arithmetic, exp/log/pow,
// sigmoid/tanh/clamp, concat/slice/gather, sum/mean, softmax, layer norm,
// l2-normalize, transpose, reshape. Convolutions and interpolation ops live
// with the modules that own them and follow the same recording pattern.

namespace jotr {

namespace detail {

// C[m,n] += A[m,k] B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T B[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Broadcast-lite: identical shapes, a one-element operand, or equal ranks
// where each axis extent matches or is 1.
inline Dims broadcast_dims(const Dims& a, const Dims& b) {
    if (a == b) return a;
    if (numel(a) == 1) return b;
    if (numel(b) == 1) return a;
    if (a.size() != b.size())
        throw ShapeError("broadcast: rank mismatch " + dims_str(a) + " vs " + dims_str(b));
    Dims out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || a[i] == 1 || b[i] == 1)
            out[i] = std::max(a[i], b[i]);
        else
            throw ShapeError("broadcast: incompatible " + dims_str(a) + " vs " + dims_str(b));
    }
    return out;
}

// Row-major strides with 0 on broadcast axes, aligned to `out` extents.
inline std::vector<std::size_t> broadcast_strides(const Dims& in, const Dims& out) {
    std::vector<std::size_t> s(out.size(), 0);
    if (numel(in) == 1) return s;
    std::size_t stride = 1;
    for (std::size_t k = out.size(); k-- > 0;) {
        s[k] = (in[k] == 1) ? 0 : stride;
        stride *= in[k];
    }
    return s;
}

template <typename F>
void for_each_bcast(const Dims& od, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& fn) {
    const std::size_t total = numel(od);
    const std::size_t r = od.size();
    std::vector<std::size_t> ix(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < total; ++o) {
        fn(o, ia, ib);
        for (std::size_t k = r; k-- > 0;) {
            ++ix[k];
            ia += sa[k];
            ib += sb[k];
            if (ix[k] < od[k]) break;
            ia -= sa[k] * od[k];
            ib -= sb[k] * od[k];
            ix[k] = 0;
            if (k == 0) break;
        }
    }
}

// Generic elementwise binary op. FwdFn: y = f(a,b). GradA/GradB: local
// partials as functions of (a, b, y).
template <typename T, typename FwdFn, typename GradA, typename GradB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdFn f, GradA dfda, GradB dfdb) {
    const Dims od = broadcast_dims(a.dims(), b.dims());
    Tensor<T> out = make_result<T>(od, a, b);
    const auto sa = broadcast_strides(a.dims(), od);
    const auto sb = broadcast_strides(b.dims(), od);

    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (a.dims() == b.dims()) {
        for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i], pb[i]);
    } else {
        for_each_bcast(od, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            po[o] = f(pa[ia], pb[ib]);
        });
    }

    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, od, sa, sb, dfda, dfdb]() {
            if (on->grad.empty()) return;
            const bool need_a = an->requires_grad;
            const bool need_b = bn->requires_grad;
            if (need_a) an->ensure_grad();
            if (need_b) bn->ensure_grad();
            const T* pa = an->val.data();
            const T* pb = bn->val.data();
            const T* py = on->val.data();
            const T* pg = on->grad.data();
            for_each_bcast(od, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                const T g = pg[o];
                if (need_a) an->grad[ia] += g * dfda(pa[ia], pb[ib], py[o]);
                if (need_b) bn->grad[ib] += g * dfdb(pa[ia], pb[ib], py[o]);
            });
        });
    }
    return out;
}

// Elementwise unary op with partial expressed in terms of (x, y).
template <typename T, typename FwdFn, typename GradFn>
Tensor<T> unary_op(const Tensor<T>& x, FwdFn f, GradFn dfdx) {
    Tensor<T> out = make_result<T>(x.dims(), x);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) po[i] = f(px[i]);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on, dfdx]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->val.size(); ++i)
                xn->grad[i] += on->grad[i] * dfdx(xn->val[i], on->val[i]);
        });
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary_op(
        x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    return detail::unary_op(
        x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T> Tensor<T> neg(const Tensor<T>& x) { return mul_scalar(x, T(-1)); }

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T c) { return mul_scalar(a, c); }
template <typename T> Tensor<T> operator*(T c, const Tensor<T>& a) { return mul_scalar(a, c); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T c) { return add_scalar(a, c); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// transcendental / shaping nonlinearity

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& x, T exponent) {
    return detail::unary_op(
        x, [exponent](T v) { return std::pow(v, exponent); },
        [exponent](T v, T) { return exponent * std::pow(v, exponent - T(1)); });
}

// x^e with a learnable scalar exponent; gradient flows into both base and
// exponent. Bases must be nonnegative; d/de at base 0 is taken as 0 (the
// e > 0 limit).
template <typename T>
Tensor<T> pow(const Tensor<T>& x, const Tensor<T>& exponent) {
    if (exponent.size() != 1) throw ShapeError("pow: exponent must be a scalar tensor");
    const T e = exponent.value();
    Tensor<T> out = detail::make_result<T>(x.dims(), x, exponent);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) po[i] = std::pow(px[i], e);
    if (out.requires_grad()) {
        auto xn = x.node(), en = exponent.node(), on = out.node();
        Tape<T>::current()->record([xn, en, on, e]() {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < xn->val.size(); ++i)
                    xn->grad[i] += on->grad[i] * e * std::pow(xn->val[i], e - T(1));
            }
            if (en->requires_grad) {
                en->ensure_grad();
                T acc(0);
                for (std::size_t i = 0; i < xn->val.size(); ++i) {
                    const T base = xn->val[i];
                    if (base > T(0)) acc += on->grad[i] * on->val[i] * std::log(base);
                }
                en->grad[0] += acc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_op(
        x,
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T ev = std::exp(v);
            return ev / (T(1) + ev);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// tanh-form gelu; smooth, so finite-difference checks stay clean.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    const T k = T(0.7978845608028654); // sqrt(2/pi)
    Tensor<T> inner = mul_scalar(add(x, mul_scalar(mul(mul(x, x), x), T(0.044715))), k);
    return mul_scalar(mul(x, add_scalar(tanh(inner), T(1))), T(0.5));
}

// Pass-through gradient inside [lo, hi], zero outside.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return detail::unary_op(
        x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + dims_str(a.dims()) + " and " +
                         dims_str(b.dims()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner extents differ, " + dims_str(a.dims()) + " x " +
                         dims_str(b.dims()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = detail::make_result<T>({m, n}, a, b);
    detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::current()->record([an, bn, on, m, k, n]() {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nt(on->grad.data(), bn->val.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(an->val.data(), on->grad.data(), bn->grad.data(), k, m, n);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + dims_str(x.dims()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor<T> out = detail::make_result<T>({n, m}, x);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on, m, n]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xn->grad[i * n + j] += on->grad[j * m + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Dims dims) {
    if (numel(dims) != x.size())
        throw ShapeError("reshape: " + dims_str(x.dims()) + " -> " + dims_str(dims));
    Tensor<T> out = detail::make_result<T>(dims, x);
    std::copy(x.data(), x.data() + x.size(), out.data());
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->val.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// concat / slice / gather

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Dims& d0 = parts[0].dims();
    if (axis >= d0.size()) throw ShapeError("concat: axis out of range");
    Dims od = d0;
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        const Dims& d = p.dims();
        if (d.size() != d0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < d.size(); ++i)
            if (i != axis && d[i] != d0[i]) throw ShapeError("concat: extent mismatch on axis " + std::to_string(i));
        axis_total += d[axis];
    }
    od[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= od[i];
    for (std::size_t i = axis + 1; i < od.size(); ++i) inner *= od[i];

    Tensor<T> out = Tensor<T>::zeros(od);
    bool any_rg = false;
    for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
    out.set_requires_grad(any_rg && Tape<T>::recording());

    T* po = out.data();
    const std::size_t out_row = axis_total * inner;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t span = p.dims()[axis] * inner;
        const T* pp = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(pp + o * span, pp + (o + 1) * span, po + o * out_row + offset);
        offset += span;
    }

    if (out.requires_grad()) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        std::vector<std::size_t> spans;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            spans.push_back(p.dims()[axis] * inner);
        }
        auto on = out.node();
        Tape<T>::current()->record([nodes, spans, on, outer, out_row]() {
            if (on->grad.empty()) return;
            std::size_t offset = 0;
            for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
                auto& nd = nodes[idx];
                const std::size_t span = spans[idx];
                if (nd->requires_grad) {
                    nd->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < span; ++i)
                            nd->grad[o * span + i] += on->grad[o * out_row + offset + i];
                }
                offset += span;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    const Dims& d = x.dims();
    if (axis >= d.size() || start + len > d[axis])
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of " + dims_str(d));
    Dims od = d;
    od[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= d[i];
    for (std::size_t i = axis + 1; i < d.size(); ++i) inner *= d[i];

    Tensor<T> out = detail::make_result<T>(od, x);
    const T* px = x.data();
    T* po = out.data();
    const std::size_t in_row = d[axis] * inner;
    const std::size_t out_row = len * inner;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(px + o * in_row + start * inner, px + o * in_row + (start + len) * inner,
                  po + o * out_row);

    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on, outer, inner, in_row, out_row, start]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < out_row; ++i)
                    xn->grad[o * in_row + start * inner + i] += on->grad[o * out_row + i];
        });
    }
    return out;
}

// Row gather along axis 0; repeated indices accumulate in backward.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
    if (x.rank() == 0) throw ShapeError("gather: rank-0 input");
    const std::size_t rows = x.dim(0);
    const std::size_t row = x.size() / rows;
    for (auto i : indices)
        if (i >= rows) throw ShapeError("gather: index " + std::to_string(i) + " out of " + std::to_string(rows));
    Dims od = x.dims();
    od[0] = indices.size();
    Tensor<T> out = detail::make_result<T>(od, x);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy(px + indices[r] * row, px + (indices[r] + 1) * row, po + r * row);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on, indices, row]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < indices.size(); ++r)
                for (std::size_t i = 0; i < row; ++i)
                    xn->grad[indices[r] * row + i] += on->grad[r * row + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    Tensor<T> out = detail::make_result<T>({1}, x);
    T acc(0);
    const T* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += px[i];
    out.data()[0] = acc;
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const T g = on->grad[0];
            for (auto& v : xn->grad) v += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return mul_scalar(sum(x), T(1) / T(x.size()));
}

// Reduction over one axis, keeping it with extent 1 so results broadcast
// back against the input.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
    const Dims& d = x.dims();
    if (axis >= d.size()) throw ShapeError("sum_axis: axis out of range");
    Dims od = d;
    od[axis] = 1;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= d[i];
    for (std::size_t i = axis + 1; i < d.size(); ++i) inner *= d[i];
    const std::size_t n = d[axis];

    Tensor<T> out = detail::make_result<T>(od, x);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t i = 0; i < inner; ++i)
                po[o * inner + i] += px[(o * n + a) * inner + i];

    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on, outer, inner, n]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t a = 0; a < n; ++a)
                    for (std::size_t i = 0; i < inner; ++i)
                        xn->grad[(o * n + a) * inner + i] += on->grad[o * inner + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
    return mul_scalar(sum_axis(x, axis), T(1) / T(x.dim(axis)));
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::fabs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// ---------------------------------------------------------------------------
// softmax / normalization

// Softmax along `axis` with max subtraction per lane.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const Dims& d = x.dims();
    if (axis >= d.size()) throw ShapeError("softmax: axis out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= d[i];
    for (std::size_t i = axis + 1; i < d.size(); ++i) inner *= d[i];
    const std::size_t n = d[axis];

    Tensor<T> out = detail::make_result<T>(d, x);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T mx = px[base];
            for (std::size_t a = 1; a < n; ++a) mx = std::max(mx, px[base + a * inner]);
            T denom(0);
            for (std::size_t a = 0; a < n; ++a) {
                const T e = std::exp(px[base + a * inner] - mx);
                po[base + a * inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::size_t a = 0; a < n; ++a) po[base + a * inner] *= inv;
        }
    }

    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on, outer, inner, n]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * n * inner + i;
                    T dot(0);
                    for (std::size_t a = 0; a < n; ++a)
                        dot += on->grad[base + a * inner] * on->val[base + a * inner];
                    for (std::size_t a = 0; a < n; ++a) {
                        const std::size_t k = base + a * inner;
                        xn->grad[k] += on->val[k] * (on->grad[k] - dot);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T> Tensor<T> softmax(const Tensor<T>& x) { return softmax(x, x.rank() - 1); }

// Layer normalization over the last axis with elementwise gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const std::size_t c = x.dim(x.rank() - 1);
    if (gain.size() != c || bias.size() != c)
        throw ShapeError("layer_norm: gain/bias must have " + std::to_string(c) + " entries");
    const std::size_t lanes = x.size() / c;

    Tensor<T> out = detail::make_result<T>(x.dims(), x, gain, bias);
    std::vector<T> inv_sigma(lanes), mu(lanes);
    const T* px = x.data();
    const T* pg = gain.data();
    const T* pb = bias.data();
    T* po = out.data();
    for (std::size_t l = 0; l < lanes; ++l) {
        const T* row = px + l * c;
        T m(0);
        for (std::size_t i = 0; i < c; ++i) m += row[i];
        m /= T(c);
        T var(0);
        for (std::size_t i = 0; i < c; ++i) {
            const T d = row[i] - m;
            var += d * d;
        }
        var /= T(c);
        const T is = T(1) / std::sqrt(var + eps);
        mu[l] = m;
        inv_sigma[l] = is;
        for (std::size_t i = 0; i < c; ++i) po[l * c + i] = (row[i] - m) * is * pg[i] + pb[i];
    }

    if (out.requires_grad()) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        Tape<T>::current()->record([xn, gn, bn, on, lanes, c, mu, inv_sigma]() {
            if (on->grad.empty()) return;
            const bool need_x = xn->requires_grad;
            const bool need_g = gn->requires_grad;
            const bool need_b = bn->requires_grad;
            if (need_x) xn->ensure_grad();
            if (need_g) gn->ensure_grad();
            if (need_b) bn->ensure_grad();
            for (std::size_t l = 0; l < lanes; ++l) {
                const T* row = xn->val.data() + l * c;
                const T* gout = on->grad.data() + l * c;
                const T is = inv_sigma[l];
                const T m = mu[l];
                // xhat = (x - mu) * is;  dxhat = dy * gain
                T mean_dxhat(0), mean_dxhat_xhat(0);
                for (std::size_t i = 0; i < c; ++i) {
                    const T xhat = (row[i] - m) * is;
                    const T dxhat = gout[i] * gn->val[i];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                    if (need_g) gn->grad[i] += gout[i] * xhat;
                    if (need_b) bn->grad[i] += gout[i];
                }
                mean_dxhat /= T(c);
                mean_dxhat_xhat /= T(c);
                if (need_x) {
                    for (std::size_t i = 0; i < c; ++i) {
                        const T xhat = (row[i] - m) * is;
                        const T dxhat = gout[i] * gn->val[i];
                        xn->grad[l * c + i] += is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// Unit-norm rows over the last axis; the eps floor keeps the zero vector
// finite.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
    const std::size_t c = x.dim(x.rank() - 1);
    const std::size_t lanes = x.size() / c;
    Tensor<T> out = detail::make_result<T>(x.dims(), x);
    std::vector<T> norms(lanes);
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t l = 0; l < lanes; ++l) {
        T sq(0);
        for (std::size_t i = 0; i < c; ++i) sq += px[l * c + i] * px[l * c + i];
        const T n = std::max(std::sqrt(sq), eps);
        norms[l] = n;
        for (std::size_t i = 0; i < c; ++i) po[l * c + i] = px[l * c + i] / n;
    }
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        Tape<T>::current()->record([xn, on, lanes, c, norms, eps]() {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t l = 0; l < lanes; ++l) {
                const T n = norms[l];
                if (n <= eps) {
                    for (std::size_t i = 0; i < c; ++i)
                        xn->grad[l * c + i] += on->grad[l * c + i] / eps;
                    continue;
                }
                T dot(0);
                for (std::size_t i = 0; i < c; ++i)
                    dot += on->grad[l * c + i] * on->val[l * c + i];
                for (std::size_t i = 0; i < c; ++i)
                    xn->grad[l * c + i] += (on->grad[l * c + i] - on->val[l * c + i] * dot) / n;
            }
        });
    }
    return out;
}

} // namespace jotr
