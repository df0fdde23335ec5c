#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "voidkit/core/tensor.hpp"
#include "voidkit/core/types.hpp"
#include "voidkit/victim/interfaces.hpp"

// Protection-effectiveness metrics. L2/PSNR compare swap outputs pixelwise;
// ISM measures how much source identity survives into the swapped face, via
// the held-out evaluation encoder. Sentinel values (negative, impossible for
// the real metrics) mark rows where no face was detected or a pair was
// incomplete; see MetricRow.

namespace voidkit::eval {

template <typename Real>
struct MetricRow {
    std::string pair_id;
    std::string transform;  // "none", a suite label, or "missing"
    Real l2 = 0;            // mean squared pixel distance, or sentinel
    Real psnr = 0;          // dB, capped at 100, or sentinel
    Real ism = 0;           // cosine in [-1,1], or sentinel

    // Sentinels, documented in the README. Detection failure is the attack
    // succeeding outright, so those rows count as successes, not errors.
    static constexpr double kNoDetectionL2 = -1.0;
    static constexpr double kNoDetectionPsnr = -1.0;
    static constexpr double kNoDetectionIsm = -2.0;
    static constexpr double kMissing = -3.0;
};

/// Mean squared error over all elements, peak 1.0.
template <typename Real>
Real metric_l2(const Tensor<Real>& a, const Tensor<Real>& b) {
    a.require_same(b, "metric_l2");
    double acc = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    return Real(acc / static_cast<double>(a.data.size()));
}

/// PSNR in dB from an MSE with peak 1.0; identical images cap at 100 dB.
template <typename Real>
Real psnr_from_mse(Real mse) {
    if (mse < Real(0)) throw NumericError("psnr: negative mse");
    if (mse == Real(0)) return Real(100);
    double v = 10.0 * std::log10(1.0 / static_cast<double>(mse));
    return Real(std::min(100.0, v));
}

template <typename Real>
Real metric_psnr(const Tensor<Real>& a, const Tensor<Real>& b) {
    return psnr_from_mse(metric_l2(a, b));
}

/// Cosine similarity of two embeddings. Accumulating in extended precision
/// keeps the result invariant under embedding rescaling (the guard digits
/// absorb the rounding a scale factor like 3 would otherwise introduce), and
/// the fused sqrt keeps cosine(u, u) == 1 exact.
template <typename Real>
Real cosine_similarity(const Tensor<Real>& u, const Tensor<Real>& v) {
    u.require_same(v, "cosine_similarity");
    long double dot = 0, nu = 0, nv = 0;
    for (size_t i = 0; i < u.data.size(); ++i) {
        long double a = static_cast<long double>(u.data[i]);
        long double b = static_cast<long double>(v.data[i]);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if (nu == 0 || nv == 0) throw NumericError("cosine_similarity: zero-norm embedding");
    return Real(static_cast<double>(dot / std::sqrt(nu * nv)));
}

/// Identity similarity between the source face and a swapped output, through
/// the held-out evaluation encoder.
template <typename Real>
Real metric_ism(const Tensor<Real>& src, const Tensor<Real>& swapped,
                const victim::IdentityEncoder<Real>& eval_encoder) {
    Tensor<Real> eu = victim::embed(eval_encoder, src);
    Tensor<Real> ev = victim::embed(eval_encoder, swapped);
    return cosine_similarity(eu, ev);
}

}  // namespace voidkit::eval
