#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "voidkit/core/image.hpp"
#include "voidkit/core/types.hpp"
#include "voidkit/victim/interfaces.hpp"

// The perceptual-adaptive strategy: a per-pixel sensitivity map of the
// current adversarial image, binarized at a quantile, smoothed into the
// step-scale map P that modulates the signed latent update.

namespace voidkit::opt {

struct AdaptiveConfig {
    double q = 0.5;       // quantile for binarization
    double gamma = 0.3;   // step-strength floor in sensitive regions
    double sigma = 3.0;   // smoothing std in pixels
    bool enabled = true;

    AdaptiveConfig() = default;
    AdaptiveConfig(double q_, double gamma_, double sigma_, bool enabled_)
        : q(q_), gamma(gamma_), sigma(sigma_), enabled(enabled_) {
        validate();
    }

    void validate() const {
        if (!(q > 0.0 && q < 1.0)) throw ConfigError("adaptive: q must lie strictly in (0,1)");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("adaptive: gamma must lie in [0,1]");
        if (!(sigma > 0.0)) throw ConfigError("adaptive: sigma must be positive");
    }
};

/// Quantile with linear interpolation between order statistics: position
/// q*(n-1) in the sorted values.
template <typename Real>
Real quantile_linear(std::vector<Real> values, double q) {
    if (values.empty()) throw NumericError("quantile of an empty set");
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("quantile position must lie strictly in (0,1)");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= values.size()) return values.back();
    return static_cast<Real>(values[lo] + static_cast<Real>(frac) * (values[lo + 1] - values[lo]));
}

/// S = 1 - perceptual distance map of the current (projected) adversarial
/// image against the source; all-ones at zero distance, lower where the
/// image is already visibly distorted.
template <typename Real>
SpatialMask<Real> perceptual_step_map(const victim::PerceptualMetric<Real>& metric,
                                      const Tensor<Real>& x_current, const Tensor<Real>& x_src) {
    auto [scalar, map] = metric.distance(x_current, x_src);
    (void)scalar;
    Tensor<Real> s(map.shape);
    for (size_t i = 0; i < map.data.size(); ++i) s.data[i] = Real(1) - map.data[i];
    return SpatialMask<Real>(MaskKind::perceptual_smooth, std::move(s));
}

/// M = 1 where S strictly exceeds its q-quantile. A constant map has nothing
/// strictly above the quantile, so it binarizes to all zeros.
template <typename Real>
SpatialMask<Real> binarize_quantile(const SpatialMask<Real>& s, double q) {
    const Real thr = quantile_linear(s.values.data, q);
    Tensor<Real> m(s.values.shape);
    for (size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = s.values.data[i] > thr ? Real(1) : Real(0);
    return SpatialMask<Real>(MaskKind::perceptual_binary, std::move(m));
}

/// P = G_sigma(M + gamma(1-M)): lift the floor to gamma, then smooth with a
/// unit-sum truncated Gaussian. Every value stays inside [gamma, 1].
template <typename Real>
SpatialMask<Real> smooth_map(const SpatialMask<Real>& m, double gamma, double sigma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("adaptive: gamma must lie in [0,1]");
    Tensor<Real> lifted(m.values.shape);
    for (size_t i = 0; i < lifted.data.size(); ++i)
        lifted.data[i] = m.values.data[i] + static_cast<Real>(gamma) * (Real(1) - m.values.data[i]);
    Tensor<Real> p = gaussian_blur(lifted, sigma);
    // a unit-sum kernel keeps convex bounds; clamp away float dust so the
    // documented [gamma, 1] range is exact
    for (auto& v : p.data) v = std::clamp(v, static_cast<Real>(gamma), Real(1));
    return SpatialMask<Real>(MaskKind::perceptual_smooth, std::move(p));
}

}  // namespace voidkit::opt
