#pragma once

#include "filab/tensor.hpp"
#include "filab/tokenizer.hpp"

#include <cmath>
#include <span>

namespace filab {

/// Base and contrast logit differences are too close to normalize by.
class DegeneratePair : public Error {
public:
    using Error::Error;
};

inline constexpr double kDegenerateEps = 1e-6;

/// F = logit[y_base] - logit[y_cont] for one position's logits.
inline double logit_diff(std::span<const float> logits, TokenId y_base, TokenId y_cont) {
    if (y_base == y_cont) throw DegeneratePair("logit_diff: y_base == y_cont");
    const auto n = static_cast<TokenId>(logits.size());
    if (y_base < 0 || y_base >= n || y_cont < 0 || y_cont >= n) throw RangeError("logit_diff: token outside the logit vector");
    return static_cast<double>(logits[static_cast<std::size_t>(y_base)]) - static_cast<double>(logits[static_cast<std::size_t>(y_cont)]);
}

inline void check_nondegenerate(double f_cont, double f_base) {
    if (std::abs(f_cont - f_base) < kDegenerateEps) {
        throw DegeneratePair("degenerate pair: |F(M,x_cont) - F(M,x_base)| < 1e-6");
    }
}

/// r = (F(M',x_cont) - F(M,x_cont)) / (F(M,x_cont) - F(M,x_base)).
inline double relative_logit_diff(double f_patched, double f_cont, double f_base) {
    check_nondegenerate(f_cont, f_base);
    return (f_patched - f_cont) / (f_cont - f_base);
}

/// r' = 1 + r = (F(M',x_cont) - F(M,x_base)) / (F(M,x_cont) - F(M,x_base)).
inline double activation_patch_ratio(double f_patched, double f_cont, double f_base) {
    check_nondegenerate(f_cont, f_base);
    return (f_patched - f_base) / (f_cont - f_base);
}

/// Percentage of the model's base-vs-contrast gap recovered by a circuit:
/// (F(M,x_base) - F(C,x_cont)) / (F(M,x_base) - F(M,x_cont)) * 100.
inline double faithfulness_percent(double f_base, double f_cont, double f_circuit) {
    check_nondegenerate(f_cont, f_base);
    return (f_base - f_circuit) / (f_base - f_cont) * 100.0;
}

}  // namespace filab
