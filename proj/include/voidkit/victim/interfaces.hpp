#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "voidkit/ad/tape.hpp"
#include "voidkit/core/image.hpp"
#include "voidkit/core/rng.hpp"
#include "voidkit/core/tensor.hpp"
#include "voidkit/core/types.hpp"

// Abstract contracts for every external model the losses touch. The bundled
// implementations (surrogate.hpp) are deterministic desk-scale stand-ins;
// adapters for real detectors/encoders/backbones live out of tree and only
// need to satisfy these interfaces. Differentiable operations are expressed
// as tape builders: the caller owns the tape, passes the image variable in,
// and receives output variables wired for reverse mode.

namespace voidkit::victim {

template <typename Real>
struct DetectorOutput {
    Tensor<Real> face_probs;   // (J), each in [0,1]
    Tensor<Real> reg_offsets;  // (J,4) as [dx, dy, dw, dh]

    void validate(int anchors) const {
        if (face_probs.rank() != 1 || face_probs.dim(0) != anchors)
            throw ShapeError("detector probs must have one entry per anchor");
        if (reg_offsets.rank() != 2 || reg_offsets.dim(0) != anchors || reg_offsets.dim(1) != 4)
            throw ShapeError("detector offsets must be (anchors, 4)");
        if (!face_probs.all_finite() || !reg_offsets.all_finite())
            throw NumericError("detector produced non-finite outputs");
        for (Real p : face_probs.data)
            if (!(p >= Real(0) && p <= Real(1))) throw NumericError("detector prob outside [0,1]");
    }
};

/// On-tape attention tap: key/value projections of the conditioning tokens
/// at one cross-attention layer.
struct AttentionTap {
    std::string layer_id;
    ad::Var K;  // (tokens, d)
    ad::Var V;  // (tokens, d)
};

/// On-tape intermediate feature map at a tapped backbone layer.
struct FeatureTap {
    std::string layer_id;
    ad::Var fmap;  // (H_l, W_l, C_l)
};

/// Frozen (plain tensor) forms used for the cached source side of each loss.
template <typename Real>
struct AttentionTapValue {
    std::string layer_id;
    Tensor<Real> K;
    Tensor<Real> V;
};

template <typename Real>
struct FeatureTapValue {
    std::string layer_id;
    Tensor<Real> fmap;
};

template <typename Real>
class FaceDetector {
public:
    virtual ~FaceDetector() = default;
    virtual int anchor_count() const = 0;
    virtual int image_size() const = 0;
    /// Returns (probs (J), offsets (J,4)) wired on the caller's tape.
    virtual std::pair<ad::Var, ad::Var> detect_on(ad::Tape<Real>& tape, ad::Var img) const = 0;
    /// Pixel box for one anchor given its regression offsets:
    /// (center_y, center_x, height, width) in image coordinates.
    virtual std::array<double, 4> anchor_box(int anchor, const Tensor<Real>& offsets) const = 0;
};

template <typename Real>
class IdentityEncoder {
public:
    virtual ~IdentityEncoder() = default;
    virtual const std::string& id() const = 0;
    virtual int dim() const = 0;
    virtual int image_size() const = 0;
    virtual ad::Var embed_on(ad::Tape<Real>& tape, ad::Var img) const = 0;
    /// Embedding plus the last spatial activation (H,W,C), for Layer-CAM.
    virtual std::pair<ad::Var, ad::Var> embed_with_activation_on(ad::Tape<Real>& tape,
                                                                 ad::Var img) const = 0;
};

template <typename Real>
class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual int image_size() const = 0;
    virtual std::vector<int> latent_shape() const = 0;  // (H/f, W/f, c)
    virtual Tensor<Real> encode(const Tensor<Real>& img) const = 0;
    /// Decode wired on a tape; output clamped to [0,1] with a true clamp
    /// gradient (zero where clipped).
    virtual ad::Var decode_on(ad::Tape<Real>& tape, ad::Var z) const = 0;
};

template <typename Real>
class GenerativeBackbone {
public:
    virtual ~GenerativeBackbone() = default;
    virtual int timesteps() const = 0;
    virtual std::vector<std::string> attention_layers() const = 0;  // tap set
    virtual std::vector<std::string> feature_layers() const = 0;    // {down, up}

    struct Taps {
        std::vector<AttentionTap> attention;
        std::vector<FeatureTap> features;
    };
    /// One conditioned forward pass at (noisy latent, timestep); all taps are
    /// differentiable with respect to cond_img.
    virtual Taps taps_on(ad::Tape<Real>& tape, ad::Var cond_img, const Tensor<Real>& noisy_latent,
                         int timestep) const = 0;

    /// Forward-noise a clean latent to timestep t (DDPM-style schedule).
    virtual Tensor<Real> noise_latent(const Tensor<Real>& z0, int timestep, Pcg32& rng) const = 0;

    /// Evaluation-only single generation pass: output latent conditioned on
    /// cond_img, mixing identity into the noisy target latent.
    virtual Tensor<Real> generate(const Tensor<Real>& cond_img, const Tensor<Real>& noisy_latent,
                                  int timestep) const = 0;

    /// Evaluation-only render of the identity the generator extracts from
    /// cond_img, in image space (the conditioning pathway inverted).
    virtual Tensor<Real> render_identity(const Tensor<Real>& cond_img) const = 0;
};

template <typename Real>
class PerceptualMetric {
public:
    virtual ~PerceptualMetric() = default;
    /// (scalar, per-pixel map in [0,1]); scalar is the spatial mean of the
    /// map; zero map iff a == b; symmetric in its arguments.
    virtual std::pair<Real, Tensor<Real>> distance(const Tensor<Real>& a,
                                                   const Tensor<Real>& b) const = 0;
};

template <typename Real>
class FaceParser {
public:
    virtual ~FaceParser() = default;
    virtual SpatialMask<Real> parse(const Tensor<Real>& img) const = 0;  // kind=semantic, binary
};

/// Everything a protection run needs, read-only after construction and safe
/// to share across worker threads.
template <typename Real>
struct VictimBundle {
    std::shared_ptr<FaceDetector<Real>> detector;
    std::vector<std::shared_ptr<IdentityEncoder<Real>>> attack_encoders;
    std::shared_ptr<IdentityEncoder<Real>> eval_encoder;
    std::shared_ptr<GenerativeBackbone<Real>> backbone;
    std::shared_ptr<LatentCodec<Real>> codec;
    std::shared_ptr<PerceptualMetric<Real>> perceptual;
    std::shared_ptr<FaceParser<Real>> parser;
    uint64_t seed = 0;

    void validate() const {
        if (!detector || !backbone || !codec || !perceptual || !parser)
            throw ConfigError("bundle: missing component");
        if (attack_encoders.empty()) throw ConfigError("bundle: need at least one attack encoder");
        if (!eval_encoder) throw ConfigError("bundle: need an evaluation encoder");
        for (const auto& e : attack_encoders)
            if (e->id() == eval_encoder->id())
                throw ConfigError("bundle: evaluation encoder must be held out of the attack ensemble");
    }
};

// ---- plain (non-tape) conveniences ----------------------------------------

template <typename Real>
DetectorOutput<Real> detect(const FaceDetector<Real>& det, const Tensor<Real>& img) {
    ad::Tape<Real> tape;
    ad::Var x = tape.input(img);
    auto [probs, offs] = det.detect_on(tape, x);
    DetectorOutput<Real> out{tape.value(probs), tape.value(offs)};
    out.validate(det.anchor_count());
    return out;
}

template <typename Real>
Tensor<Real> embed(const IdentityEncoder<Real>& enc, const Tensor<Real>& img) {
    ad::Tape<Real> tape;
    ad::Var x = tape.input(img);
    ad::Var e = enc.embed_on(tape, x);
    Tensor<Real> v = tape.value(e);
    if (!v.all_finite()) throw NumericError("encoder produced non-finite embedding");
    return v;
}

template <typename Real>
Tensor<Real> decode_latent(const LatentCodec<Real>& codec, const Tensor<Real>& z) {
    if (!z.all_finite()) throw NumericError("decode: non-finite latent");
    ad::Tape<Real> tape;
    ad::Var zv = tape.input(z);
    ad::Var img = codec.decode_on(tape, zv);
    return tape.value(img);
}

/// Frozen-value taps for a fixed conditioning image (the cached source side).
template <typename Real>
std::pair<std::vector<AttentionTapValue<Real>>, std::vector<FeatureTapValue<Real>>> tap_values(
    const GenerativeBackbone<Real>& bb, const Tensor<Real>& cond_img,
    const Tensor<Real>& noisy_latent, int timestep) {
    ad::Tape<Real> tape;
    ad::Var c = tape.input(cond_img);
    auto taps = bb.taps_on(tape, c, noisy_latent, timestep);
    std::vector<AttentionTapValue<Real>> at;
    std::vector<FeatureTapValue<Real>> ft;
    at.reserve(taps.attention.size());
    ft.reserve(taps.features.size());
    for (const auto& t : taps.attention) at.push_back({t.layer_id, tape.value(t.K), tape.value(t.V)});
    for (const auto& t : taps.features) ft.push_back({t.layer_id, tape.value(t.fmap)});
    return {std::move(at), std::move(ft)};
}

}  // namespace voidkit::victim
