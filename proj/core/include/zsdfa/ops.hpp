#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "zsdfa/blas.hpp"
#include "zsdfa/tensor.hpp"

// Reverse-mode operator set. Every op returns a fresh tensor; when a tape is
// active and any input is gradient-tracked, a backward rule is recorded.
// Reductions accumulate in a fixed row-major order, except where noted
// (sorted-order batch reductions, which make batch losses exactly invariant
// under row permutations).

namespace zsdfa {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank2(const Tensor<T>& a, const char* op) {
    if (a.rank() != 2)
        throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " +
                         shape_str(a.shape()));
}

/// Sums values in ascending order of value. Used for cross-sample reductions
/// so the result depends only on the multiset of inputs.
template <typename T>
T sorted_sum(std::vector<T> values) {
    for (const T v : values)
        if (std::isnan(v)) return std::numeric_limits<T>::quiet_NaN();
    std::sort(values.begin(), values.end());
    T acc = T(0);
    for (const T v : values) acc += v;
    return acc;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto o = out.raw();
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    detail::check_finite(out, "add");
    if (detail::should_record<T>({&a, &b})) {
        out.set_requires_grad();
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::active()->record([an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto o = out.raw();
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
    detail::check_finite(out, "sub");
    if (detail::should_record<T>({&a, &b})) {
        out.set_requires_grad();
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::active()->record([an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto o = out.raw();
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
    detail::check_finite(out, "mul");
    if (detail::should_record<T>({&a, &b})) {
        out.set_requires_grad();
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::active()->record([an, bn, on] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += on->grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i)
                    bn->grad[i] += on->grad[i] * an->data[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto o = out.raw();
    const auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * c;
    detail::check_finite(out, "scale");
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad();
        auto an = a.node(), on = out.node();
        Tape<T>::active()->record([an, on, c] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto o = out.raw();
    const auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + c;
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad();
        auto an = a.node(), on = out.node();
        Tape<T>::active()->record([an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

/// y = x * s with a learnable scalar s (shape [1]).
template <typename T>
Tensor<T> mul_scalar_t(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.size() != 1)
        throw ShapeError("mul_scalar_t: scalar operand has shape " + shape_str(s.shape()));
    const T sv = s.at(0);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto o = out.raw();
    const auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * sv;
    detail::check_finite(out, "mul_scalar_t");
    if (detail::should_record<T>({&a, &s})) {
        out.set_requires_grad();
        auto an = a.node(), sn = s.node(), on = out.node();
        Tape<T>::active()->record([an, sn, on, sv] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += on->grad[i] * sv;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                T acc = T(0);
                for (std::size_t i = 0; i < on->grad.size(); ++i)
                    acc += on->grad[i] * an->data[i];
                sn->grad[0] += acc;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Dfn>
Tensor<T> unary_op(const Tensor<T>& a, const char* name, Fwd fwd, Dfn dfn) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto o = out.raw();
    const auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i]);
    check_finite(out, name);
    if (should_record<T>({&a})) {
        out.set_requires_grad();
        auto an = a.node(), on = out.node();
        Tape<T>::active()->record([an, on, dfn] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * dfn(an->data[i], on->data[i]);
        });
    }
    return out;
}

} // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary_op(
        a, "relu", [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
    return detail::unary_op(
        a, "clamp_min", [floor](T x) { return x > floor ? x : floor; },
        [floor](T x, T) { return x > floor ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(0.7071067811865475244);
    constexpr T inv_sqrt2pi = T(0.3989422804014326779);
    return detail::unary_op(
        a, "gelu",
        [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [=](T x, T) {
            return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) +
                   x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary_op(
        a, "sigmoid",
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary_op(
        a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::unary_op(
        a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
    return detail::unary_op(
        a, "sqrt", [](T x) { return std::sqrt(x); },
        [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& a) {
    return detail::unary_op(
        a, "reciprocal", [](T x) { return T(1) / x; },
        [](T, T y) { return -y * y; });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void matmul_shapes(const Tensor<T>& a, const Tensor<T>& b, bool tb, const char* op,
                   int& m, int& k, int& n) {
    require_rank2(a, op);
    require_rank2(b, op);
    m = a.dim(0);
    k = a.dim(1);
    const int bk = tb ? b.dim(1) : b.dim(0);
    n = tb ? b.dim(0) : b.dim(1);
    if (k != bk)
        throw ShapeError(std::string(op) + ": inner dimensions disagree, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

} // namespace detail

/// C[m x n] = A[m x k] * B[k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    int m, k, n;
    detail::matmul_shapes(a, b, false, "matmul", m, k, n);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    gemm<T>(false, false, m, n, k, T(1), a.data().data(), b.data().data(), T(0),
            out.raw().data());
    detail::check_finite(out, "matmul");
    if (detail::should_record<T>({&a, &b})) {
        out.set_requires_grad();
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::active()->record([an, bn, on, m, k, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();  // dA += dC * B^T
                gemm<T>(false, true, m, k, n, T(1), on->grad.data(), bn->data.data(),
                        T(1), an->grad.data());
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB += A^T * dC
                gemm<T>(true, false, k, n, m, T(1), an->data.data(), on->grad.data(),
                        T(1), bn->grad.data());
            }
        });
    }
    return out;
}

/// C[m x n] = A[m x k] * B[n x k]^T.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    int m, k, n;
    detail::matmul_shapes(a, b, true, "matmul_nt", m, k, n);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    gemm<T>(false, true, m, n, k, T(1), a.data().data(), b.data().data(), T(0),
            out.raw().data());
    detail::check_finite(out, "matmul_nt");
    if (detail::should_record<T>({&a, &b})) {
        out.set_requires_grad();
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<T>::active()->record([an, bn, on, m, k, n] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();  // dA += dC * B
                gemm<T>(false, false, m, k, n, T(1), on->grad.data(), bn->data.data(),
                        T(1), an->grad.data());
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB += dC^T * A
                gemm<T>(true, false, n, k, m, T(1), on->grad.data(), an->data.data(),
                        T(1), bn->grad.data());
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank2(a, "transpose");
    const int m = a.dim(0), n = a.dim(1);
    Tensor<T> out = Tensor<T>::zeros({n, m});
    auto o = out.raw();
    const auto x = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) o[static_cast<std::size_t>(j) * m + i] = x[static_cast<std::size_t>(i) * n + j];
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad();
        auto an = a.node(), on = out.node();
        Tape<T>::active()->record([an, on, m, n] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    an->grad[static_cast<std::size_t>(i) * n + j] +=
                        on->grad[static_cast<std::size_t>(j) * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (valid padding, cross-correlation)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(std::span<const T> x, int cin, int h, int w, int kh, int kw, int stride,
            int oh, int ow, std::vector<T>& cols) {
    // cols is (cin*kh*kw) x (oh*ow), row-major.
    const std::size_t positions = static_cast<std::size_t>(oh) * ow;
    cols.assign(static_cast<std::size_t>(cin) * kh * kw * positions, T(0));
    std::size_t row = 0;
    for (int c = 0; c < cin; ++c) {
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx, ++row) {
                T* dst = cols.data() + row * positions;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + dy;
                    const T* src = x.data() + (static_cast<std::size_t>(c) * h + iy) * w + dx;
                    for (int ox = 0; ox < ow; ++ox) dst[static_cast<std::size_t>(oy) * ow + ox] = src[ox * stride];
                }
            }
        }
    }
}

} // namespace detail

/// x: [cin x h x w], kernels: [cout x cin x k x k], stride >= 1, valid padding.
/// Cross-correlation (no kernel flip); output [cout x oh x ow].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, int stride) {
    if (x.rank() != 3)
        throw ShapeError("conv2d: input must be [cin x h x w], got " + shape_str(x.shape()));
    if (kernels.rank() != 4)
        throw ShapeError("conv2d: kernels must be [cout x cin x k x k], got " +
                         shape_str(kernels.shape()));
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    if (kernels.dim(1) != cin)
        throw ShapeError("conv2d: kernel channels " + shape_str(kernels.shape()) +
                         " do not match input " + shape_str(x.shape()));
    if (kh > h || kw > w)
        throw ShapeError("conv2d: kernel " + shape_str(kernels.shape()) +
                         " larger than input " + shape_str(x.shape()));
    const int oh = (h - kh) / stride + 1;
    const int ow = (w - kw) / stride + 1;
    const int ckk = cin * kh * kw;
    const int positions = oh * ow;

    std::vector<T> cols;
    detail::im2col<T>(x.data(), cin, h, w, kh, kw, stride, oh, ow, cols);
    Tensor<T> out = Tensor<T>::zeros({cout, oh, ow});
    gemm<T>(false, false, cout, positions, ckk, T(1), kernels.data().data(),
            cols.data(), T(0), out.raw().data());
    detail::check_finite(out, "conv2d");

    if (detail::should_record<T>({&x, &kernels})) {
        out.set_requires_grad();
        auto xn = x.node(), kn = kernels.node(), on = out.node();
        Tape<T>::active()->record([xn, kn, on, cin, h, w, kh, kw, stride, oh, ow, cout,
                                   ckk, positions] {
            if (on->grad.empty()) return;
            std::vector<T> cols2;
            detail::im2col<T>(std::span<const T>(xn->data), cin, h, w, kh, kw, stride,
                              oh, ow, cols2);
            if (kn->requires_grad) {
                kn->ensure_grad();  // dK += dOut * cols^T
                gemm<T>(false, true, cout, ckk, positions, T(1), on->grad.data(),
                        cols2.data(), T(1), kn->grad.data());
            }
            if (xn->requires_grad) {
                xn->ensure_grad();  // dcols = K^T * dOut, then scatter (col2im)
                std::vector<T> dcols(static_cast<std::size_t>(ckk) * positions);
                gemm<T>(true, false, ckk, positions, cout, T(1), kn->data.data(),
                        on->grad.data(), T(0), dcols.data());
                std::size_t row = 0;
                for (int c = 0; c < cin; ++c)
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx, ++row) {
                            const T* src = dcols.data() + row * positions;
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy * stride + dy;
                                T* dst = xn->grad.data() +
                                         (static_cast<std::size_t>(c) * h + iy) * w + dx;
                                for (int ox = 0; ox < ow; ++ox)
                                    dst[ox * stride] += src[static_cast<std::size_t>(oy) * ow + ox];
                            }
                        }
            }
        });
    }
    return out;
}

/// x: [c x h x w] plus a per-channel bias [c].
template <typename T>
Tensor<T> channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0))
        throw ShapeError("channel_bias: got " + shape_str(x.shape()) + " and " +
                         shape_str(bias.shape()));
    const int c = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto o = out.raw();
    const auto xd = x.data(), bd = bias.data();
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) o[ch * plane + i] = xd[ch * plane + i] + bd[ch];
    if (detail::should_record<T>({&x, &bias})) {
        out.set_requires_grad();
        auto xn = x.node(), bn = bias.node(), on = out.node();
        Tape<T>::active()->record([xn, bn, on, c, plane] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int ch = 0; ch < c; ++ch) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < plane; ++i) acc += on->grad[ch * plane + i];
                    bn->grad[ch] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

/// Normalizes the last axis of x[m x d] to zero mean / unit variance, then
/// applies the affine gamma/beta (both [d]). eps guards zero variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    detail::require_rank2(x, "layer_norm");
    const int m = x.dim(0), d = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto o = out.raw();
    const auto xd = x.data(), g = gamma.data(), bt = beta.data();
    std::vector<T> xhat(static_cast<std::size_t>(m) * d), inv_std(m);
    for (int i = 0; i < m; ++i) {
        const T* row = xd.data() + static_cast<std::size_t>(i) * d;
        T mean = T(0);
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < d; ++j) {
            const T xh = (row[j] - mean) * is;
            xhat[static_cast<std::size_t>(i) * d + j] = xh;
            o[static_cast<std::size_t>(i) * d + j] = g[j] * xh + bt[j];
        }
    }
    detail::check_finite(out, "layer_norm");
    if (detail::should_record<T>({&x, &gamma, &beta})) {
        out.set_requires_grad();
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        Tape<T>::active()->record([xn, gn, bn, on, m, d, xhat = std::move(xhat),
                                   inv_std = std::move(inv_std)] {
            if (on->grad.empty()) return;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int j = 0; j < d; ++j) {
                    T acc = T(0);
                    for (int i = 0; i < m; ++i)
                        acc += on->grad[static_cast<std::size_t>(i) * d + j] *
                               xhat[static_cast<std::size_t>(i) * d + j];
                    gn->grad[j] += acc;
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int j = 0; j < d; ++j) {
                    T acc = T(0);
                    for (int i = 0; i < m; ++i) acc += on->grad[static_cast<std::size_t>(i) * d + j];
                    bn->grad[j] += acc;
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
                    for (int j = 0; j < d; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                        const T dxh = on->grad[idx] * gn->data[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[idx];
                    }
                    mean_dxhat /= T(d);
                    mean_dxhat_xhat /= T(d);
                    for (int j = 0; j < d; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                        const T dxh = on->grad[idx] * gn->data[j];
                        xn->grad[idx] +=
                            inv_std[i] * (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

/// Row-wise softmax with max subtraction. The denominator is accumulated in
/// sorted value order, which makes row values invariant under permutations of
/// the row's entries (used by the batch-level contrastive losses).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    detail::require_rank2(x, "softmax_rows");
    const int m = x.dim(0), n = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto o = out.raw();
    const auto xd = x.data();
    std::vector<T> expv(n);
    for (int i = 0; i < m; ++i) {
        const T* row = xd.data() + static_cast<std::size_t>(i) * n;
        T mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        for (int j = 0; j < n; ++j) expv[j] = std::exp(row[j] - mx);
        const T denom = detail::sorted_sum<T>(expv);
        for (int j = 0; j < n; ++j) o[static_cast<std::size_t>(i) * n + j] = expv[j] / denom;
    }
    detail::check_finite(out, "softmax_rows");
    if (detail::should_record<T>({&x})) {
        out.set_requires_grad();
        auto xn = x.node(), on = out.node();
        Tape<T>::active()->record([xn, on, m, n] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * n;
                T dot = T(0);
                for (int j = 0; j < n; ++j) dot += on->grad[off + j] * on->data[off + j];
                for (int j = 0; j < n; ++j)
                    xn->grad[off + j] += on->data[off + j] * (on->grad[off + j] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (const T v : a.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad();
        auto an = a.node(), on = out.node();
        Tape<T>::active()->record([an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (auto& g : an->grad) g += on->grad[0];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Row sums of x[m x n] -> [m x 1].
template <typename T>
Tensor<T> rowsum(const Tensor<T>& x) {
    detail::require_rank2(x, "rowsum");
    const int m = x.dim(0), n = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, 1});
    auto o = out.raw();
    const auto xd = x.data();
    for (int i = 0; i < m; ++i) {
        T acc = T(0);
        for (int j = 0; j < n; ++j) acc += xd[static_cast<std::size_t>(i) * n + j];
        o[i] = acc;
    }
    if (detail::should_record<T>({&x})) {
        out.set_requires_grad();
        auto xn = x.node(), on = out.node();
        Tape<T>::active()->record([xn, on, m, n] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    xn->grad[static_cast<std::size_t>(i) * n + j] += on->grad[i];
        });
    }
    return out;
}

/// Column means of x[m x n] -> [1 x n].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
    detail::require_rank2(x, "mean_rows");
    const int m = x.dim(0), n = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({1, n});
    auto o = out.raw();
    const auto xd = x.data();
    for (int j = 0; j < n; ++j) {
        T acc = T(0);
        for (int i = 0; i < m; ++i) acc += xd[static_cast<std::size_t>(i) * n + j];
        o[j] = acc / T(m);
    }
    if (detail::should_record<T>({&x})) {
        out.set_requires_grad();
        auto xn = x.node(), on = out.node();
        Tape<T>::active()->record([xn, on, m, n] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    xn->grad[static_cast<std::size_t>(i) * n + j] += on->grad[j] / T(m);
        });
    }
    return out;
}

/// Sums a collection of scalar tensors in ascending value order, so the
/// result is exactly invariant under permutations of the collection.
template <typename T>
Tensor<T> sum_scalars_sorted(const std::vector<Tensor<T>>& terms) {
    if (terms.empty()) return Tensor<T>::scalar(T(0));
    std::vector<T> values;
    values.reserve(terms.size());
    bool track = false;
    for (const auto& t : terms) {
        values.push_back(t.value());
        track = track || t.requires_grad();
    }
    Tensor<T> out = Tensor<T>::scalar(detail::sorted_sum<T>(values));
    if (track && Tape<T>::active()) {
        out.set_requires_grad();
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        nodes.reserve(terms.size());
        for (const auto& t : terms) nodes.push_back(t.node());
        auto on = out.node();
        Tape<T>::active()->record([nodes = std::move(nodes), on] {
            if (on->grad.empty()) return;
            for (const auto& nn : nodes) {
                if (!nn->requires_grad) continue;
                nn->ensure_grad();
                nn->grad[0] += on->grad[0];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_scalars_sorted(const std::vector<Tensor<T>>& terms) {
    if (terms.empty()) throw ContractError("mean_scalars_sorted: empty collection");
    return scale(sum_scalars_sorted(terms), T(1) / static_cast<T>(terms.size()));
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
    if (Tensor<T>::count(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    Tensor<T> out = Tensor<T>::from(std::move(shape),
                                    std::vector<T>(a.data().begin(), a.data().end()));
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad();
        auto an = a.node(), on = out.node();
        Tape<T>::active()->record([an, on] {
            if (on->grad.empty()) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> row_slice(const Tensor<T>& x, int r0, int rows) {
    detail::require_rank2(x, "row_slice");
    const int m = x.dim(0), n = x.dim(1);
    if (r0 < 0 || rows <= 0 || r0 + rows > m)
        throw ShapeError("row_slice: rows [" + std::to_string(r0) + ", " +
                         std::to_string(r0 + rows) + ") out of " + shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::zeros({rows, n});
    auto o = out.raw();
    const auto xd = x.data();
    std::copy_n(xd.data() + static_cast<std::size_t>(r0) * n,
                static_cast<std::size_t>(rows) * n, o.data());
    if (detail::should_record<T>({&x})) {
        out.set_requires_grad();
        auto xn = x.node(), on = out.node();
        Tape<T>::active()->record([xn, on, r0, rows, n] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * n; ++i)
                xn->grad[static_cast<std::size_t>(r0) * n + i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> col_slice(const Tensor<T>& x, int c0, int cols) {
    detail::require_rank2(x, "col_slice");
    const int m = x.dim(0), n = x.dim(1);
    if (c0 < 0 || cols <= 0 || c0 + cols > n)
        throw ShapeError("col_slice: cols [" + std::to_string(c0) + ", " +
                         std::to_string(c0 + cols) + ") out of " + shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, cols});
    auto o = out.raw();
    const auto xd = x.data();
    for (int i = 0; i < m; ++i)
        std::copy_n(xd.data() + static_cast<std::size_t>(i) * n + c0, cols,
                    o.data() + static_cast<std::size_t>(i) * cols);
    if (detail::should_record<T>({&x})) {
        out.set_requires_grad();
        auto xn = x.node(), on = out.node();
        Tape<T>::active()->record([xn, on, m, n, c0, cols] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < cols; ++j)
                    xn->grad[static_cast<std::size_t>(i) * n + c0 + j] +=
                        on->grad[static_cast<std::size_t>(i) * cols + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty collection");
    const int n = parts.front().rank() == 2 ? parts.front().dim(1)
                                            : static_cast<int>(parts.front().size());
    int total_rows = 0;
    bool track = false;
    for (const auto& p : parts) {
        const int rows = p.rank() == 2 ? p.dim(0) : 1;
        const int cols = p.rank() == 2 ? p.dim(1) : static_cast<int>(p.size());
        if (cols != n)
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
        total_rows += rows;
        track = track || p.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({total_rows, n});
    auto o = out.raw();
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data().data(), p.size(), o.data() + off);
        off += p.size();
    }
    if (track && Tape<T>::active()) {
        out.set_requires_grad();
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        auto on = out.node();
        Tape<T>::active()->record([nodes = std::move(nodes), on] {
            if (on->grad.empty()) return;
            std::size_t off2 = 0;
            for (const auto& nn : nodes) {
                if (nn->requires_grad) {
                    nn->ensure_grad();
                    for (std::size_t i = 0; i < nn->data.size(); ++i)
                        nn->grad[i] += on->grad[off2 + i];
                }
                off2 += nn->data.size();
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty collection");
    const int m = parts.front().dim(0);
    int total_cols = 0;
    bool track = false;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.dim(0) != m)
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        total_cols += p.dim(1);
        track = track || p.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({m, total_cols});
    auto o = out.raw();
    int c0 = 0;
    for (const auto& p : parts) {
        const int cols = p.dim(1);
        for (int i = 0; i < m; ++i)
            std::copy_n(p.data().data() + static_cast<std::size_t>(i) * cols, cols,
                        o.data() + static_cast<std::size_t>(i) * total_cols + c0);
        c0 += cols;
    }
    if (track && Tape<T>::active()) {
        out.set_requires_grad();
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        std::vector<int> widths;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            widths.push_back(p.dim(1));
        }
        auto on = out.node();
        Tape<T>::active()->record([nodes = std::move(nodes), widths = std::move(widths), on,
                                   m, total_cols] {
            if (on->grad.empty()) return;
            int c = 0;
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                const int cols = widths[p];
                if (nodes[p]->requires_grad) {
                    nodes[p]->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < cols; ++j)
                            nodes[p]->grad[static_cast<std::size_t>(i) * cols + j] +=
                                on->grad[static_cast<std::size_t>(i) * total_cols + c + j];
                }
                c += cols;
            }
        });
    }
    return out;
}

/// [c x h x w] feature map -> [h*w x c] token matrix (one token per spatial
/// position).
template <typename T>
Tensor<T> spatial_tokens(const Tensor<T>& x) {
    if (x.rank() != 3)
        throw ShapeError("spatial_tokens: expected [c x h x w], got " + shape_str(x.shape()));
    const int c = x.dim(0);
    const int hw = x.dim(1) * x.dim(2);
    Tensor<T> out = Tensor<T>::zeros({hw, c});
    auto o = out.raw();
    const auto xd = x.data();
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p)
            o[static_cast<std::size_t>(p) * c + ch] = xd[static_cast<std::size_t>(ch) * hw + p];
    if (detail::should_record<T>({&x})) {
        out.set_requires_grad();
        auto xn = x.node(), on = out.node();
        Tape<T>::active()->record([xn, on, c, hw] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    xn->grad[static_cast<std::size_t>(ch) * hw + p] +=
                        on->grad[static_cast<std::size_t>(p) * c + ch];
        });
    }
    return out;
}

/// Embedding lookup: rows of table[v x d] selected by ids -> [ids.size() x d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
    detail::require_rank2(table, "gather_rows");
    const int v = table.dim(0), d = table.dim(1);
    for (std::size_t k = 0; k < ids.size(); ++k)
        if (ids[k] < 0 || ids[k] >= v)
            throw DataError("gather_rows: id " + std::to_string(ids[k]) + " at position " +
                            std::to_string(k) + " outside table " + shape_str(table.shape()));
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(ids.size()), d});
    auto o = out.raw();
    const auto td = table.data();
    for (std::size_t k = 0; k < ids.size(); ++k)
        std::copy_n(td.data() + static_cast<std::size_t>(ids[k]) * d, d,
                    o.data() + k * d);
    if (detail::should_record<T>({&table})) {
        out.set_requires_grad();
        auto tn = table.node(), on = out.node();
        std::vector<int> idv(ids.begin(), ids.end());
        Tape<T>::active()->record([tn, on, idv = std::move(idv), d] {
            if (on->grad.empty()) return;
            tn->ensure_grad();
            for (std::size_t k = 0; k < idv.size(); ++k)
                for (int j = 0; j < d; ++j)
                    tn->grad[static_cast<std::size_t>(idv[k]) * d + j] += on->grad[k * d + j];
        });
    }
    return out;
}

/// Diagonal of x[b x b] -> [b x 1].
template <typename T>
Tensor<T> diag(const Tensor<T>& x) {
    detail::require_rank2(x, "diag");
    if (x.dim(0) != x.dim(1))
        throw ShapeError("diag: expected a square matrix, got " + shape_str(x.shape()));
    const int b = x.dim(0);
    Tensor<T> out = Tensor<T>::zeros({b, 1});
    auto o = out.raw();
    const auto xd = x.data();
    for (int i = 0; i < b; ++i) o[i] = xd[static_cast<std::size_t>(i) * b + i];
    if (detail::should_record<T>({&x})) {
        out.set_requires_grad();
        auto xn = x.node(), on = out.node();
        Tape<T>::active()->record([xn, on, b] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (int i = 0; i < b; ++i)
                xn->grad[static_cast<std::size_t>(i) * b + i] += on->grad[i];
        });
    }
    return out;
}

/// y[i, j] = x[i, j] * s[i] with s shaped [m x 1].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s) {
    detail::require_rank2(x, "scale_rows");
    const int m = x.dim(0), n = x.dim(1);
    if (s.rank() != 2 || s.dim(0) != m || s.dim(1) != 1)
        throw ShapeError("scale_rows: scale must be [m x 1], got " + shape_str(s.shape()));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto o = out.raw();
    const auto xd = x.data(), sd = s.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            o[static_cast<std::size_t>(i) * n + j] = xd[static_cast<std::size_t>(i) * n + j] * sd[i];
    detail::check_finite(out, "scale_rows");
    if (detail::should_record<T>({&x, &s})) {
        out.set_requires_grad();
        auto xn = x.node(), sn = s.node(), on = out.node();
        Tape<T>::active()->record([xn, sn, on, m, n] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        xn->grad[static_cast<std::size_t>(i) * n + j] +=
                            on->grad[static_cast<std::size_t>(i) * n + j] * sn->data[i];
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    T acc = T(0);
                    for (int j = 0; j < n; ++j)
                        acc += on->grad[static_cast<std::size_t>(i) * n + j] *
                               xn->data[static_cast<std::size_t>(i) * n + j];
                    sn->grad[i] += acc;
                }
            }
        });
    }
    return out;
}

/// y[i, j] = x[i, j] + b[0, j] with b shaped [1 x n] (per-column affine).
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    detail::require_rank2(x, "add_rowvec");
    const int m = x.dim(0), n = x.dim(1);
    if (b.rank() != 2 || b.dim(0) != 1 || b.dim(1) != n)
        throw ShapeError("add_rowvec: bias must be [1 x n], got " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto o = out.raw();
    const auto xd = x.data(), bd = b.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            o[static_cast<std::size_t>(i) * n + j] = xd[static_cast<std::size_t>(i) * n + j] + bd[j];
    if (detail::should_record<T>({&x, &b})) {
        out.set_requires_grad();
        auto xn = x.node(), bn = b.node(), on = out.node();
        Tape<T>::active()->record([xn, bn, on, m, n] {
            if (on->grad.empty()) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int j = 0; j < n; ++j) {
                    T acc = T(0);
                    for (int i = 0; i < m; ++i) acc += on->grad[static_cast<std::size_t>(i) * n + j];
                    bn->grad[j] += acc;
                }
            }
        });
    }
    return out;
}

/// Cuts the gradient link: returns a value copy that never tracks gradients.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
    return Tensor<T>::from(a.shape(), std::vector<T>(a.data().begin(), a.data().end()));
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Central-difference check of d f / d x against the taped gradient.
/// f must be a pure scalar function of x. Checks the coordinates listed in
/// `coords` (all coordinates when empty). Returns the maximum over checked
/// coordinates of |ga - gn| / max(1e-8, |ga| + |gn|).
template <typename F>
double finite_diff_check(F&& f, Tensor<double> x, double eps = 1e-5,
                         std::vector<std::size_t> coords = {}) {
    x.set_requires_grad(true);
    x.drop_grad();
    std::vector<double> analytic;
    {
        Tape<double> tape;
        Tensor<double> loss = f(x);
        if (loss.size() != 1)
            throw ContractError("finite_diff_check: f must return a scalar");
        tape.backward(loss);
        analytic.assign(x.grad().begin(), x.grad().end());
    }
    if (coords.empty()) {
        coords.resize(x.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    }
    double worst = 0.0;
    for (std::size_t i : coords) {
        Tensor<double> xp = Tensor<double>::from(
            x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
        Tensor<double> xm = Tensor<double>::from(
            x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
        xp.raw()[i] += eps;
        xm.raw()[i] -= eps;
        const double fp = f(xp).value();
        const double fm = f(xm).value();
        const double numeric = (fp - fm) / (2.0 * eps);
        const double ga = analytic[i];
        if (std::isnan(numeric) || std::isnan(ga))
            throw NumericError("finite_diff_check: NaN at coordinate " + std::to_string(i));
        const double err = std::abs(ga - numeric) / std::max(1e-8, std::abs(ga) + std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace zsdfa
