#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "deepthink/tensor.hpp"

// Dense float32 primitives. All functions are pure.
namespace dt::kernels {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got " + shape_str(t.shape()));
    }
}

}  // namespace detail

// [m x k] . [k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul lhs");
    detail::require_rank(b, 2, "matmul rhs");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Tensor out({m, n});
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        float* orow = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float s = pa[i * k + p];
            if (s == 0.0f) continue;
            const float* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
        }
    }
    return out;
}

// [m x k] . [n x k]^T -> [m x n], optionally only for rows [row_begin, m).
inline Tensor matmul_bt(const Tensor& a, const Tensor& b, std::size_t row_begin = 0) {
    detail::require_rank(a, 2, "matmul_bt lhs");
    detail::require_rank(b, 2, "matmul_bt rhs");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_bt shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    if (row_begin >= m) throw DimensionError("matmul_bt row_begin out of range");
    Tensor out({m - row_begin, n});
    for (std::size_t i = row_begin; i < m; ++i) {
        auto arow = a.row(i);
        auto orow = out.row(i - row_begin);
        for (std::size_t j = 0; j < n; ++j) {
            auto brow = b.row(j);
            float acc = 0.0f;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            orow[j] = acc;
        }
    }
    return out;
}

// Adds a [n] bias to every row of an [m x n] tensor in place.
inline void add_row_bias(Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 2, "add_row_bias");
    if (bias.size() != x.dim(1)) {
        throw DimensionError("bias " + shape_str(bias.shape()) + " for " + shape_str(x.shape()));
    }
    for (std::size_t i = 0; i < x.dim(0); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
    }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " + " +
                             shape_str(b.shape()));
    }
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

// Row-wise softmax with max subtraction; the normalizer accumulates in double.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_rank(x, 2, "softmax_rows");
    Tensor out = x;
    for (std::size_t i = 0; i < out.dim(0); ++i) {
        auto r = out.row(i);
        const float mx = *std::max_element(r.begin(), r.end());
        double sum = 0.0;
        for (float& v : r) {
            v = std::exp(v - mx);
            sum += v;
        }
        const double inv = 1.0 / sum;
        for (float& v : r) v = static_cast<float>(v * inv);
    }
    return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    detail::require_rank(x, 2, "layer_norm");
    if (!(eps > 0.0f)) throw ConfigError("layer_norm eps must be positive");
    const std::size_t d = x.dim(1);
    if (gain.size() != d || bias.size() != d) {
        throw DimensionError("layer_norm params " + shape_str(gain.shape()) + "/" +
                             shape_str(bias.shape()) + " for " + shape_str(x.shape()));
    }
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.dim(0); ++i) {
        auto in = x.row(i);
        double mean = 0.0;
        for (float v : in) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (float v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        auto o = out.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            o[j] = static_cast<float>((in[j] - mean) * inv) * gain[j] + bias[j];
        }
    }
    return out;
}

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline float gelu(float x) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

inline Tensor gelu(const Tensor& x) {
    Tensor out = x;
    for (float& v : out.data()) v = gelu(v);
    return out;
}

}  // namespace dt::kernels
