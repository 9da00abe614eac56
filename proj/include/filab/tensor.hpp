#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace filab {

/// Base class for every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree with the model configuration or with each other.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A weight file, CSV or JSON input does not follow its documented layout.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A token id, position, layer or head index is outside the valid range.
class RangeError : public Error {
public:
    using Error::Error;
};

/// Row-major dense matrix of 32-bit reals.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

    [[nodiscard]] std::size_t size() const { return data.size(); }
    [[nodiscard]] bool empty() const { return data.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    [[nodiscard]] std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    bool operator==(const Matrix&) const = default;
};

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMajor>;
using CMapMat = Eigen::Map<const RowMajor>;
using StridedMap = Eigen::Map<RowMajor, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMajor, 0, Eigen::OuterStride<>>;

inline MapMat as_eigen(Matrix& m) { return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)}; }
inline CMapMat as_eigen(const Matrix& m) {
    return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

/// View of columns [c0, c0 + n) of a row-major matrix.
inline StridedMap col_block(Matrix& m, std::size_t c0, std::size_t n) {
    return {m.data.data() + c0, static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(n),
            Eigen::OuterStride<>(static_cast<Eigen::Index>(m.cols))};
}
inline CStridedMap col_block(const Matrix& m, std::size_t c0, std::size_t n) {
    return {m.data.data() + c0, static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(n),
            Eigen::OuterStride<>(static_cast<Eigen::Index>(m.cols))};
}

/// View of rows [r0, r0 + n) of a row-major matrix.
inline MapMat row_block(Matrix& m, std::size_t r0, std::size_t n) {
    return {m.data.data() + r0 * m.cols, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m.cols)};
}
inline CMapMat row_block(const Matrix& m, std::size_t r0, std::size_t n) {
    return {m.data.data() + r0 * m.cols, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m.cols)};
}

inline float max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) {
        throw ShapeError("max_abs_diff: shape mismatch");
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

inline bool all_finite(std::span<const float> xs) {
    return std::all_of(xs.begin(), xs.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace filab
