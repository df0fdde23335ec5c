#pragma once

#include <string>
#include <utility>
#include <vector>

#include "voidkit/ad/tape.hpp"
#include "voidkit/core/types.hpp"
#include "voidkit/saliency/masks.hpp"
#include "voidkit/victim/interfaces.hpp"

// The four adversarial loss terms and their signed combination. Every term
// is assembled on a gradient tape against source-side values that are
// computed once per run and frozen, so re-evaluating at the same point is
// bit-identical and the only gradient path runs through the adversarial
// image.

namespace voidkit::losses {

template <typename Real>
struct LossReport {
    Real l_loc = 0, l_id = 0, l_attn = 0, l_feat = 0, l_total = 0;
    bool loc_enabled = true, id_enabled = true, attn_enabled = true, feat_enabled = true;
};

struct TermFlags {
    bool loc = true, id = true, attn = true, feat = true;
};

/// The per-iteration denoising context: one noisy latent and its timestep,
/// shared verbatim between the adversarial and source tap evaluations.
template <typename Real>
struct TapContext {
    Tensor<Real> noisy_latent;
    int timestep = 0;
};

// ---- individual terms on a tape ---------------------------------------------

/// Localization-distraction term exp(-||(offsets_adv - offsets_src) (x) M||_2).
/// The anchor mask broadcasts across the four regression channels.
template <typename Real>
ad::Var loss_loc_on(ad::Tape<Real>& tape, ad::Var offsets_adv, const Tensor<Real>& offsets_src,
                    const SpatialMask<Real>& anchor) {
    if (anchor.kind != MaskKind::anchor) throw ConfigError("loss_loc needs an anchor-kind mask");
    ad::Var diff = tape.sub_const(offsets_adv, offsets_src);
    ad::Var masked = tape.mul_mask(diff, anchor.values);
    return tape.exp_(tape.neg(tape.l2norm(masked)));
}

/// Identity-erasure term for one encoder:
/// D_cos(e_adv, e_null) + max(0, m - D_cos(e_adv, e_src)).
template <typename Real>
ad::Var loss_id_single_on(ad::Tape<Real>& tape, ad::Var e_adv, const Tensor<Real>& e_src,
                          const Tensor<Real>& e_null, Real margin) {
    ad::Var d_null = ad::cosine_distance_const(tape, e_adv, e_null);
    ad::Var d_src = ad::cosine_distance_const(tape, e_adv, e_src);
    ad::Var hinge = tape.relu(tape.sub_const(tape.neg(d_src), Tensor<Real>({1}, -margin)));
    return tape.add(d_null, hinge);
}

/// Attention-disruption term: sum over layers of Frobenius norms of the
/// key and value deviations.
template <typename Real>
ad::Var loss_attn_on(ad::Tape<Real>& tape, const std::vector<victim::AttentionTap>& adv,
                     const std::vector<victim::AttentionTapValue<Real>>& src) {
    if (adv.size() != src.size()) throw ConfigError("attention tap layer count mismatch");
    std::vector<ad::Var> parts;
    for (size_t i = 0; i < adv.size(); ++i) {
        if (adv[i].layer_id != src[i].layer_id)
            throw ConfigError("attention tap layer mismatch: '" + adv[i].layer_id + "' vs '" +
                              src[i].layer_id + "'");
        parts.push_back(tape.l2norm(tape.sub_const(adv[i].K, src[i].K)));
        parts.push_back(tape.l2norm(tape.sub_const(adv[i].V, src[i].V)));
    }
    std::vector<Real> ones(parts.size(), Real(1));
    return tape.weighted_sum(parts, ones);
}

/// Feature-corruption term: per layer and per confinement mask (semantic and
/// CAM, downsampled to the layer resolution), the Frobenius norm of the
/// masked feature deviation.
template <typename Real>
ad::Var loss_feat_on(ad::Tape<Real>& tape, const std::vector<victim::FeatureTap>& adv,
                     const std::vector<victim::FeatureTapValue<Real>>& src,
                     const saliency::MaskSet<Real>& masks) {
    if (adv.size() != src.size()) throw ConfigError("feature tap layer count mismatch");
    std::vector<ad::Var> parts;
    for (size_t i = 0; i < adv.size(); ++i) {
        if (adv[i].layer_id != src[i].layer_id)
            throw ConfigError("feature tap layer mismatch: '" + adv[i].layer_id + "' vs '" +
                              src[i].layer_id + "'");
        ad::Var diff = tape.sub_const(adv[i].fmap, src[i].fmap);
        for (MaskKind kind : {MaskKind::semantic, MaskKind::cam}) {
            const SpatialMask<Real>& m = masks.layer_mask(adv[i].layer_id, kind);
            parts.push_back(tape.l2norm(tape.mul_mask(diff, m.values)));
        }
    }
    std::vector<Real> ones(parts.size(), Real(1));
    return tape.weighted_sum(parts, ones);
}

/// Signed weighted combination over the enabled terms.
template <typename Real>
ad::Var loss_total_on(ad::Tape<Real>& tape, ad::Var l_loc, ad::Var l_id, ad::Var l_attn,
                      ad::Var l_feat, const LossWeights& weights, const TermFlags& flags) {
    std::vector<ad::Var> parts;
    std::vector<Real> coeffs;
    if (flags.loc) {
        parts.push_back(l_loc);
        coeffs.push_back(static_cast<Real>(weights.lambda_loc));
    }
    if (flags.id) {
        parts.push_back(l_id);
        coeffs.push_back(static_cast<Real>(weights.lambda_id));
    }
    if (flags.attn) {
        parts.push_back(l_attn);
        coeffs.push_back(static_cast<Real>(weights.lambda_attn));
    }
    if (flags.feat) {
        parts.push_back(l_feat);
        coeffs.push_back(static_cast<Real>(weights.lambda_feat));
    }
    if (parts.empty()) return tape.input(Tensor<Real>({1}, Real(0)));
    return tape.weighted_sum(parts, coeffs);
}

// ---- full evaluator -----------------------------------------------------------

/// Owns every frozen source-side quantity for one protection run: detector
/// offsets on the source, embeddings of the source and the null (raw black)
/// image under every attack encoder, context-independent key/value taps,
/// per-context source feature taps, and the mask set.
template <typename Real>
class LossEvaluator {
public:
    LossEvaluator(victim::VictimBundle<Real> bundle, Tensor<Real> x_src, LossWeights weights,
                  double margin, double tau_p)
        : bundle_(std::move(bundle)), x_src_(std::move(x_src)), weights_(weights),
          margin_(static_cast<Real>(margin)) {
        if (!(margin > 0.0 && margin < 2.0)) throw ConfigError("identity margin must lie in (0,2)");
        bundle_.validate();
        require_image(x_src_);

        // source-side detector offsets
        victim::DetectorOutput<Real> det = victim::detect(*bundle_.detector, x_src_);
        offsets_src_ = det.reg_offsets;

        // shape discovery + context-independent key/value caches, using the
        // clean encode as a stand-in latent (K/V never see it)
        Tensor<Real> z0 = bundle_.codec->encode(x_src_);
        auto [att_src, feat_probe] = victim::tap_values(*bundle_.backbone, x_src_, z0, 0);
        attn_src_ = std::move(att_src);
        std::vector<saliency::LayerResolution> layers;
        for (const auto& f : feat_probe)
            layers.push_back({f.layer_id, f.fmap.dim(0), f.fmap.dim(1)});

        masks_ = saliency::build_mask_set(bundle_, x_src_, tau_p, layers);

        // encoder caches: source and null embeddings per attack encoder; the
        // null image is raw pixel zeros, never passed through the codec
        Tensor<Real> null_img({x_src_.dim(0), x_src_.dim(1), 3}, Real(0));
        for (const auto& enc : bundle_.attack_encoders) {
            e_src_.push_back(victim::embed(*enc, x_src_));
            e_null_.push_back(victim::embed(*enc, null_img));
        }
    }

    const saliency::MaskSet<Real>& masks() const { return masks_; }
    const victim::VictimBundle<Real>& bundle() const { return bundle_; }
    const Tensor<Real>& source() const { return x_src_; }
    const LossWeights& weights() const { return weights_; }
    void set_term_flags(const TermFlags& f) { flags_ = f; }

    /// Fix the denoising context for subsequent evaluations and cache the
    /// source-side feature taps under it.
    void set_context(TapContext<Real> ctx) {
        auto [att, feats] = victim::tap_values(*bundle_.backbone, x_src_, ctx.noisy_latent, ctx.timestep);
        (void)att;  // context-independent, already cached
        feat_src_ = std::move(feats);
        ctx_ = std::move(ctx);
        has_context_ = true;
    }

    const TapContext<Real>& context() const {
        if (!has_context_) throw ConfigError("loss evaluator has no denoising context set");
        return ctx_;
    }

    struct TapeReport {
        ad::Var total;
        LossReport<Real> values;
    };

    /// Assemble the total loss on the caller's tape against the adversarial
    /// image variable (already decoded and projected by the caller).
    TapeReport evaluate_on(ad::Tape<Real>& tape, ad::Var x_adv) {
        if (!has_context_) throw ConfigError("loss evaluator has no denoising context set");
        TermFlags eff = flags_;
        eff.loc = eff.loc && masks_.loc_enabled;

        ad::Var zero = tape.input(Tensor<Real>({1}, Real(0)));
        ad::Var l_loc = zero, l_id = zero, l_attn = zero, l_feat = zero;

        if (eff.loc) {
            auto [probs, offsets] = bundle_.detector->detect_on(tape, x_adv);
            (void)probs;
            l_loc = loss_loc_on(tape, offsets, offsets_src_, masks_.anchor);
        }
        if (eff.id) {
            std::vector<ad::Var> per_enc;
            for (size_t k = 0; k < bundle_.attack_encoders.size(); ++k) {
                ad::Var e = bundle_.attack_encoders[k]->embed_on(tape, x_adv);
                per_enc.push_back(loss_id_single_on(tape, e, e_src_[k], e_null_[k], margin_));
            }
            std::vector<Real> mean_w(per_enc.size(), Real(1) / Real(per_enc.size()));
            l_id = tape.weighted_sum(per_enc, mean_w);
        }
        if (eff.attn || eff.feat) {
            auto taps = bundle_.backbone->taps_on(tape, x_adv, ctx_.noisy_latent, ctx_.timestep);
            if (eff.attn) l_attn = loss_attn_on(tape, taps.attention, attn_src_);
            if (eff.feat) l_feat = loss_feat_on(tape, taps.features, feat_src_, masks_);
        }

        TapeReport rep;
        rep.total = loss_total_on(tape, l_loc, l_id, l_attn, l_feat, weights_, eff);
        rep.values.l_loc = eff.loc ? tape.scalar(l_loc) : Real(0);
        rep.values.l_id = eff.id ? tape.scalar(l_id) : Real(0);
        rep.values.l_attn = eff.attn ? tape.scalar(l_attn) : Real(0);
        rep.values.l_feat = eff.feat ? tape.scalar(l_feat) : Real(0);
        rep.values.l_total = tape.scalar(rep.total);
        rep.values.loc_enabled = eff.loc;
        rep.values.id_enabled = eff.id;
        rep.values.attn_enabled = eff.attn;
        rep.values.feat_enabled = eff.feat;
        return rep;
    }

    /// Plain evaluation at a concrete image (identity-case suites, logging).
    LossReport<Real> evaluate_image(const Tensor<Real>& x_adv) {
        ad::Tape<Real> tape;
        ad::Var x = tape.input(x_adv);
        return evaluate_on(tape, x).values;
    }

private:
    victim::VictimBundle<Real> bundle_;
    Tensor<Real> x_src_;
    LossWeights weights_;
    Real margin_;
    TermFlags flags_;
    saliency::MaskSet<Real> masks_;
    Tensor<Real> offsets_src_;
    std::vector<Tensor<Real>> e_src_, e_null_;
    std::vector<victim::AttentionTapValue<Real>> attn_src_;
    std::vector<victim::FeatureTapValue<Real>> feat_src_;
    TapContext<Real> ctx_;
    bool has_context_ = false;
};

// ---- gradient through the full chain -------------------------------------------

template <typename Real>
struct TotalGradient {
    Tensor<Real> grad;  // shaped like the latent
    LossReport<Real> report;
};

/// Exact reverse-mode gradient of the total loss with respect to the latent,
/// composed through decode, the pixel-space budget projection, and every
/// model tap. The budget clamp backpropagates straight-through, matching the
/// optimizer's projected update; pass a wide budget to make the chain exactly
/// differentiable for finite-difference checks.
template <typename Real>
TotalGradient<Real> grad_total(const Tensor<Real>& z_adv, LossEvaluator<Real>& evaluator,
                               const PerturbationBudget& budget) {
    const Tensor<Real>& src = evaluator.source();
    Tensor<Real> lo(src.shape), hi(src.shape);
    for (size_t i = 0; i < src.data.size(); ++i) {
        lo.data[i] = std::max(Real(0), src.data[i] - static_cast<Real>(budget.epsilon));
        hi.data[i] = std::min(Real(1), src.data[i] + static_cast<Real>(budget.epsilon));
    }

    ad::Tape<Real> tape;
    ad::Var z = tape.input(z_adv);
    ad::Var decoded = evaluator.bundle().codec->decode_on(tape, z);
    ad::Var x_adv = tape.clamp_box_st(decoded, lo, hi);
    auto rep = evaluator.evaluate_on(tape, x_adv);

    auto check_term = [&](Real v, const char* name) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite loss term ") + name);
    };
    check_term(rep.values.l_loc, "l_loc");
    check_term(rep.values.l_id, "l_id");
    check_term(rep.values.l_attn, "l_attn");
    check_term(rep.values.l_feat, "l_feat");
    check_term(rep.values.l_total, "l_total");

    tape.backward(rep.total);
    TotalGradient<Real> out;
    out.grad = tape.grad(z);
    out.report = rep.values;
    if (!out.grad.all_finite()) throw NumericError("non-finite gradient of l_total");
    return out;
}

}  // namespace voidkit::losses
