#pragma once

#include "filab/model.hpp"

#include <cmath>
#include <span>

namespace filab::ops {

inline constexpr float kNormEps = 1e-5f;

/// Normalizes each row of `x` into `y` and returns the per-row reciprocal
/// standard deviation (used by the backward pass). A zero row maps to zero
/// under both norm kinds.
inline void norm_rows(NormKind kind, const Matrix& x, std::span<const float> gain, Matrix& y, std::vector<float>* rstd_out = nullptr,
                      std::vector<float>* mean_out = nullptr) {
    const std::size_t n = x.cols;
    y = Matrix(x.rows, n);
    if (rstd_out) rstd_out->assign(x.rows, 0.0f);
    if (mean_out) mean_out->assign(x.rows, 0.0f);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const auto xr = x.row(r);
        auto yr = y.row(r);
        float mean = 0.0f;
        if (kind == NormKind::layer) {
            for (float v : xr) mean += v;
            mean /= static_cast<float>(n);
        }
        float ss = 0.0f;
        for (float v : xr) {
            const float c = v - mean;
            ss += c * c;
        }
        const float rstd = 1.0f / std::sqrt(ss / static_cast<float>(n) + kNormEps);
        for (std::size_t i = 0; i < n; ++i) {
            yr[i] = (xr[i] - mean) * rstd * gain[i];
        }
        if (rstd_out) (*rstd_out)[r] = rstd;
        if (mean_out) (*mean_out)[r] = mean;
    }
}

inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

inline float gelu(float x) {
    return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + 0.044715f * x * x * x)));
}

inline float gelu_grad(float x) {
    const float u = kGeluC * (x + 0.044715f * x * x * x);
    const float t = std::tanh(u);
    const float du = kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

/// Causal softmax attention pattern for one head from [T x d_head] queries
/// and keys. Entries above the diagonal are exactly zero.
inline void causal_attention(const Matrix& q, const Matrix& k, Matrix& pattern) {
    const std::size_t T = q.rows;
    const std::size_t dh = q.cols;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    pattern = Matrix(T, T);
    for (std::size_t t = 0; t < T; ++t) {
        auto prow = pattern.row(t);
        const auto qt = q.row(t);
        float mx = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
            const auto ks = k.row(s);
            float dot = 0.0f;
            for (std::size_t i = 0; i < dh; ++i) dot += qt[i] * ks[i];
            prow[s] = dot * scale;
            mx = std::max(mx, prow[s]);
        }
        double sum = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
            prow[s] = std::exp(prow[s] - mx);
            sum += prow[s];
        }
        for (std::size_t s = 0; s <= t; ++s) prow[s] = static_cast<float>(prow[s] / sum);
    }
}

/// z = pattern * v restricted to the causal triangle.
inline void apply_pattern(const Matrix& pattern, const Matrix& v, Matrix& z) {
    const std::size_t T = pattern.rows;
    const std::size_t dh = v.cols;
    z = Matrix(T, dh);
    for (std::size_t t = 0; t < T; ++t) {
        auto zt = z.row(t);
        const auto prow = pattern.row(t);
        for (std::size_t s = 0; s <= t; ++s) {
            const float p = prow[s];
            const auto vs = v.row(s);
            for (std::size_t i = 0; i < dh; ++i) zt[i] += p * vs[i];
        }
    }
}

}  // namespace filab::ops
