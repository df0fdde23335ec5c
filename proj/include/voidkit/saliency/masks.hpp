#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "voidkit/core/image.hpp"
#include "voidkit/core/types.hpp"
#include "voidkit/victim/interfaces.hpp"

// Confinement masks. All masks are computed once on the clean source image
// at run start and frozen: the anchor-confidence mask that localizes the
// detector attack, the semantic parsing mask and CAM heatmap that confine
// feature-space distortion, and their per-layer downsampled variants.

namespace voidkit::saliency {

/// Binary anchor-confidence mask: 1 where the face probability strictly
/// exceeds tau_p. Evaluated on the clean source, never on the adversarial
/// image.
template <typename Real>
SpatialMask<Real> anchor_mask(const victim::DetectorOutput<Real>& det, double tau_p) {
    if (!(tau_p > 0.0 && tau_p < 1.0)) throw ConfigError("tau_p must lie in (0,1)");
    Tensor<Real> m(det.face_probs.shape);
    for (size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = det.face_probs.data[i] > static_cast<Real>(tau_p) ? Real(1) : Real(0);
    return SpatialMask<Real>(MaskKind::anchor, std::move(m));
}

/// Layer-CAM heatmap over the encoder's last spatial activation. The scalar
/// target is the squared L2 norm of the embedding; per-channel gradients are
/// rectified, weighted against the activations, summed over channels,
/// rectified again, bilinearly upsampled to image resolution, and finally
/// peak-normalized so the maximum is exactly 1 whenever any response is
/// positive.
template <typename Real>
SpatialMask<Real> cam_mask(const victim::IdentityEncoder<Real>& encoder, const Tensor<Real>& img) {
    require_image(img);
    ad::Tape<Real> tape;
    ad::Var x = tape.input(img);
    auto [e, A] = encoder.embed_with_activation_on(tape, x);
    const std::vector<int>& ashape = tape.value(A).shape;
    if (ashape.size() != 3 || ashape[0] < 1 || ashape[1] < 1)
        throw ConfigError("encoder '" + encoder.id() + "' exposes no spatial activation for CAM");
    ad::Var s = tape.sum_sq(e);
    tape.backward(s);

    const Tensor<Real>& act = tape.value(A);
    const Tensor<Real>& grad = tape.grad(A);
    const int h = ashape[0], w = ashape[1], c = ashape[2];
    Tensor<Real> plane({h, w});
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            Real acc = 0;
            for (int ch = 0; ch < c; ++ch) {
                Real g = grad.at(y, xx, ch);
                if (g > Real(0)) acc += g * act.at(y, xx, ch);
            }
            plane.at(y, xx) = acc > Real(0) ? acc : Real(0);
        }

    Tensor<Real> up = resample_bilinear(plane, img.dim(0), img.dim(1));
    Real peak = 0;
    for (Real v : up.data) peak = std::max(peak, v);
    if (peak > Real(0))
        for (Real& v : up.data) v /= peak;
    return SpatialMask<Real>(MaskKind::cam, std::move(up));
}

/// Area-averaging downsample of a mask plane. Averaging is a convex
/// combination, so values stay in [0,1] and the operation is linear in the
/// mask.
template <typename Real>
SpatialMask<Real> downsample_mask(const SpatialMask<Real>& mask, int th, int tw) {
    if (th <= 0 || tw <= 0) throw ConfigError("downsample_mask: target dims must be positive");
    if (mask.values.rank() != 2) throw ShapeError("downsample_mask expects a rank-2 mask");
    Tensor<Real> v = resample_area(mask.values, th, tw);
    MaskKind kind = mask.kind;
    // averaging breaks binariness, so a resized binary perceptual mask comes
    // back as its smooth counterpart
    if (kind == MaskKind::perceptual_binary && !(th == mask.values.dim(0) && tw == mask.values.dim(1)))
        kind = MaskKind::perceptual_smooth;
    return SpatialMask<Real>(kind, std::move(v));
}

/// All masks for one protection run, frozen at initialization.
template <typename Real>
struct MaskSet {
    SpatialMask<Real> anchor;    // (J), binary
    SpatialMask<Real> semantic;  // image resolution
    SpatialMask<Real> cam;       // image resolution
    std::map<std::string, SpatialMask<Real>> semantic_by_layer;
    std::map<std::string, SpatialMask<Real>> cam_by_layer;
    bool loc_enabled = true;  // false when no anchor clears tau_p

    const SpatialMask<Real>& layer_mask(const std::string& layer_id, MaskKind kind) const {
        const auto& table = kind == MaskKind::cam ? cam_by_layer : semantic_by_layer;
        auto it = table.find(layer_id);
        if (it == table.end())
            throw ConfigError("no downsampled mask stored for layer '" + layer_id + "'");
        return it->second;
    }
};

/// Layer resolutions the mask set must match, discovered from tap shapes.
struct LayerResolution {
    std::string layer_id;
    int h = 0, w = 0;
};

template <typename Real>
MaskSet<Real> build_mask_set(const victim::VictimBundle<Real>& bundle, const Tensor<Real>& x_src,
                             double tau_p, const std::vector<LayerResolution>& layers) {
    bundle.validate();
    require_image(x_src);
    MaskSet<Real> set;
    victim::DetectorOutput<Real> det = victim::detect(*bundle.detector, x_src);
    set.anchor = anchor_mask(det, tau_p);
    set.loc_enabled = false;
    for (Real v : set.anchor.values.data)
        if (v != Real(0)) {
            set.loc_enabled = true;
            break;
        }
    set.semantic = bundle.parser->parse(x_src);
    set.cam = cam_mask(*bundle.attack_encoders.front(), x_src);
    for (const auto& lr : layers) {
        set.semantic_by_layer.emplace(lr.layer_id, downsample_mask(set.semantic, lr.h, lr.w));
        set.cam_by_layer.emplace(lr.layer_id, downsample_mask(set.cam, lr.h, lr.w));
    }
    return set;
}

}  // namespace voidkit::saliency
