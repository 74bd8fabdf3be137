// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "specopd/common.hpp"
#include "specopd/rng.hpp"

namespace specopd {

template <typename T>
concept ScalarType = std::is_same_v<T, float> || std::is_same_v<T, double>;

/// Dense row-major tensor. Holds all learnable parameters and activations.
template <ScalarType T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;
    bool requires_grad{false};

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    }
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        require(data.size() == static_cast<size_t>(numel_of(shape)),
                "Tensor: data length does not match shape product");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int e : s) {
            require(e >= 0, "Tensor: negative extent");
            n *= e;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool empty() const { return data.empty(); }

    int rows() const {
        require(shape.size() == 2, "Tensor::rows: not a matrix");
        return shape[0];
    }
    int cols() const {
        require(shape.size() == 2, "Tensor::cols: not a matrix");
        return shape[1];
    }

    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    T at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    std::span<T> row(int r) {
        const int c = cols();
        return {data.data() + static_cast<size_t>(r) * c, static_cast<size_t>(c)};
    }
    std::span<const T> row(int r) const {
        const int c = cols();
        return {data.data() + static_cast<size_t>(r) * c, static_cast<size_t>(c)};
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int> s, RngStream& rng, T stddev) {
        Tensor t(std::move(s));
        for (auto& x : t.data) {
            x = static_cast<T>(rng.next_gaussian()) * stddev;
        }
        return t;
    }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    void check_finite(const char* where) const {
        if (!all_finite()) {
            fail(std::string("non-finite value produced in ") + where);
        }
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

// ---------------------------------------------------------------------------
// kernels: shared low-level math used by both the inference path and the tape
// ---------------------------------------------------------------------------
namespace kern {

template <ScalarType T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <ScalarType T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// out(+)= a [m×k] · b [k×n]
template <ScalarType T>
void gemm_nn(T* out, const T* a, const T* b, int m, int k, int n, bool accumulate) {
    MatMap<T> o(out, m, n);
    ConstMatMap<T> ma(a, m, k), mb(b, k, n);
    if (accumulate) {
        o.noalias() += ma * mb;
    } else {
        o.noalias() = ma * mb;
    }
}

/// out(+)= a [m×k] · b [n×k]ᵀ
template <ScalarType T>
void gemm_nt(T* out, const T* a, const T* b, int m, int k, int n, bool accumulate) {
    MatMap<T> o(out, m, n);
    ConstMatMap<T> ma(a, m, k), mb(b, n, k);
    if (accumulate) {
        o.noalias() += ma * mb.transpose();
    } else {
        o.noalias() = ma * mb.transpose();
    }
}

/// out(+)= a [k×m]ᵀ · b [k×n]
template <ScalarType T>
void gemm_tn(T* out, const T* a, const T* b, int m, int k, int n, bool accumulate) {
    MatMap<T> o(out, m, n);
    ConstMatMap<T> ma(a, k, m), mb(b, k, n);
    if (accumulate) {
        o.noalias() += ma.transpose() * mb;
    } else {
        o.noalias() = ma.transpose() * mb;
    }
}

constexpr double kRmsEps = 1e-5;

/// y = x * gain / rms(x), rms over the row. Returns 1/rms for reuse in backward.
template <ScalarType T>
T rms_norm_row(std::span<const T> x, std::span<const T> gain, std::span<T> y) {
    require(!x.empty(), "rms_norm: zero-length axis");
    double ss = 0.0;
    for (T v : x) {
        ss += static_cast<double>(v) * v;
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps));
    for (size_t i = 0; i < x.size(); ++i) {
        y[i] = x[i] * inv * gain[i];
    }
    return inv;
}

/// Max-subtracted softmax over one row; writes probabilities in place-safe way.
template <ScalarType T>
void softmax_row(std::span<const T> z, std::span<T> p) {
    T m = z[0];
    for (T v : z) {
        m = std::max(m, v);
    }
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        const double e = std::exp(static_cast<double>(z[i] - m));
        p[i] = static_cast<T>(e);
        sum += e;
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (auto& v : p) {
        v *= inv;
    }
}

/// log softmax over one row (max-subtracted).
template <ScalarType T>
void log_softmax_row(std::span<const T> z, std::span<T> out) {
    T m = z[0];
    for (T v : z) {
        m = std::max(m, v);
    }
    double sum = 0.0;
    for (T v : z) {
        sum += std::exp(static_cast<double>(v - m));
    }
    const T lse = m + static_cast<T>(std::log(sum));
    for (size_t i = 0; i < z.size(); ++i) {
        out[i] = z[i] - lse;
    }
}

template <ScalarType T>
T logsumexp_row(std::span<const T> z) {
    T m = z[0];
    for (T v : z) {
        m = std::max(m, v);
    }
    double sum = 0.0;
    for (T v : z) {
        sum += std::exp(static_cast<double>(v - m));
    }
    return m + static_cast<T>(std::log(sum));
}

/// Rotary position embedding applied in place to one row laid out as
/// [n_heads × head_dim]; pairs (2i, 2i+1) within each head rotate by
/// pos · base^(-2i/head_dim).
template <ScalarType T>
void rotary_row(std::span<T> x, int n_heads, int head_dim, int pos, double base = 10000.0) {
    for (int h = 0; h < n_heads; ++h) {
        T* v = x.data() + static_cast<size_t>(h) * head_dim;
        for (int i = 0; i + 1 < head_dim; i += 2) {
            const double theta =
                static_cast<double>(pos) * std::pow(base, -static_cast<double>(i) / head_dim);
            const T c = static_cast<T>(std::cos(theta));
            const T s = static_cast<T>(std::sin(theta));
            const T x0 = v[i], x1 = v[i + 1];
            v[i] = x0 * c - x1 * s;
            v[i + 1] = x0 * s + x1 * c;
        }
    }
}

/// Inverse rotation (used by the tape backward).
template <ScalarType T>
void rotary_row_inverse(std::span<T> x, int n_heads, int head_dim, int pos,
                        double base = 10000.0) {
    rotary_row(x, n_heads, head_dim, -pos, base);
}

template <ScalarType T>
T silu(T x) {
    const T s = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
    return x * s;
}

template <ScalarType T>
T silu_grad(T x) {
    const T s = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
    return s * (T(1) + x * (T(1) - s));
}

} // namespace kern
} // namespace specopd
