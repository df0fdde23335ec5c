#pragma once

#include <string>
#include <utility>

#include "voidkit/core/tensor.hpp"

namespace voidkit {

/// L-infinity attack budget in unit-interval pixel scale.
/// iterations == 0 is the degenerate "no update" run (output is the
/// projected codec round-trip of the source).
struct PerturbationBudget {
    double epsilon;
    double alpha;
    int iterations;

    PerturbationBudget(double eps, double a, int iters)
        : epsilon(eps), alpha(a), iterations(iters) {
        if (!(alpha > 0.0)) throw ConfigError("budget: alpha must be > 0");
        if (!(alpha <= epsilon)) throw ConfigError("budget: alpha must be <= epsilon");
        if (iterations < 0) throw ConfigError("budget: iterations must be >= 0");
    }

    static PerturbationBudget defaults() { return {12.0 / 255.0, 1.0 / 255.0, 30}; }
};

/// Signed coefficients of the combined objective. The optimizer ascends the
/// weighted sum, so the negative weights drive their terms down and the
/// positive weights drive theirs up.
struct LossWeights {
    double lambda_loc;
    double lambda_id;
    double lambda_attn;
    double lambda_feat;

    LossWeights(double loc, double id, double attn, double feat)
        : lambda_loc(loc), lambda_id(id), lambda_attn(attn), lambda_feat(feat) {
        if (!(lambda_loc < 0.0)) throw ConfigError("weights: lambda_loc must be negative");
        if (!(lambda_id < 0.0)) throw ConfigError("weights: lambda_id must be negative");
        if (!(lambda_attn > 0.0)) throw ConfigError("weights: lambda_attn must be positive");
        if (!(lambda_feat > 0.0)) throw ConfigError("weights: lambda_feat must be positive");
    }

    static LossWeights defaults() { return {-1.0, -1.0, 0.01, 0.01}; }
};

enum class MaskKind { anchor, semantic, cam, perceptual_binary, perceptual_smooth };

inline const char* mask_kind_name(MaskKind k) {
    switch (k) {
        case MaskKind::anchor: return "anchor";
        case MaskKind::semantic: return "semantic";
        case MaskKind::cam: return "cam";
        case MaskKind::perceptual_binary: return "perceptual-binary";
        case MaskKind::perceptual_smooth: return "perceptual-smooth";
    }
    return "?";
}

/// Spatial weighting field in [0,1]. Anchor masks are rank-1 (one entry per
/// detector anchor); all other kinds are rank-2 (H,W).
template <typename Real>
struct SpatialMask {
    MaskKind kind = MaskKind::semantic;
    Tensor<Real> values;

    SpatialMask() = default;
    SpatialMask(MaskKind k, Tensor<Real> v) : kind(k), values(std::move(v)) { validate(); }

    void validate() const {
        bool binary = kind == MaskKind::anchor || kind == MaskKind::perceptual_binary;
        for (Real v : values.data) {
            if (!(v >= Real(0) && v <= Real(1)))
                throw NumericError(std::string("mask values outside [0,1] for kind ") +
                                   mask_kind_name(kind));
            if (binary && v != Real(0) && v != Real(1))
                throw NumericError(std::string("non-binary value in mask of kind ") +
                                   mask_kind_name(kind));
        }
    }
};

template <typename Real>
struct EmbeddingVector {
    Tensor<Real> data;  // rank 1
    std::string source_encoder;
};

}  // namespace voidkit
