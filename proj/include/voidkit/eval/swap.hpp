#pragma once

#include <optional>
#include <string>
#include <vector>

#include "voidkit/core/image.hpp"
#include "voidkit/core/rng.hpp"
#include "voidkit/eval/metrics.hpp"
#include "voidkit/eval/transforms.hpp"
#include "voidkit/victim/interfaces.hpp"

// Surrogate end-to-end face swap and the scoring harness around it. The swap
// follows the staged identity pathway every swapping system shares: detect
// the source face, crop the top-confidence box, embed the crop as identity
// conditioning, run one conditioned generation pass over the target's noised
// latent, decode, and composite the result into the target frame. The
// composite blends three ingredients, the way swap pipelines blend a
// generated face back into the scene: the target frame as structural base,
// the rendered identity carrier (the conditioning pathway made visible), and
// the high-frequency texture of the decoded generation. Identity reaches the
// output only through the conditioning pathway, so identity metrics respond
// to conditioning corruption rather than to incidental texture interference.

namespace voidkit::eval {

inline constexpr double kDetectionThreshold = 0.5;
inline constexpr double kTargetMix = 0.15;    // target-frame weight
inline constexpr double kIdentityMix = 0.70;  // identity-carrier weight
inline constexpr double kTextureMix = 0.15;   // generated-texture weight
inline constexpr double kTextureSigma = 3.0;  // blur radius separating texture

namespace edetail {

template <typename Real>
Tensor<Real> blur_channels(const Tensor<Real>& img, double sigma) {
    const int h = img.dim(0), w = img.dim(1);
    Tensor<Real> out = img;
    for (int c = 0; c < 3; ++c) {
        Tensor<Real> plane({h, w});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) plane.at(y, x) = img.at(y, x, c);
        plane = gaussian_blur(plane, sigma);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(y, x, c) = plane.at(y, x);
    }
    return out;
}

}  // namespace edetail

/// One swap. Empty result means no face cleared the detection threshold in
/// `source` — for a protected input that is the attack's intended outcome.
template <typename Real>
std::optional<Tensor<Real>> swap_face(const victim::VictimBundle<Real>& bundle,
                                      const Tensor<Real>& source, const Tensor<Real>& target,
                                      const Tensor<Real>& noisy_target_latent, int timestep) {
    victim::DetectorOutput<Real> det = victim::detect(*bundle.detector, source);
    int best = 0;
    for (int j = 1; j < det.face_probs.dim(0); ++j)
        if (det.face_probs.data[static_cast<size_t>(j)] >
            det.face_probs.data[static_cast<size_t>(best)])
            best = j;
    if (!(static_cast<double>(det.face_probs.data[static_cast<size_t>(best)]) >=
          kDetectionThreshold))
        return std::nullopt;

    auto box = bundle.detector->anchor_box(best, det.reg_offsets);
    const int s = bundle.codec->image_size();
    Tensor<Real> crop = crop_resize_bilinear(source, box[0], box[1], box[2], box[3], s, s);

    Tensor<Real> out_latent = bundle.backbone->generate(crop, noisy_target_latent, timestep);
    Tensor<Real> generated = victim::decode_latent(*bundle.codec, out_latent);
    Tensor<Real> carrier = bundle.backbone->render_identity(crop);
    Tensor<Real> smooth = edetail::blur_channels(generated, kTextureSigma);

    Tensor<Real> out = generated;
    for (size_t i = 0; i < out.data.size(); ++i) {
        double texture =
            0.5 + static_cast<double>(generated.data[i]) - static_cast<double>(smooth.data[i]);
        out.data[i] = Real(kTargetMix * static_cast<double>(target.data[i]) +
                           kIdentityMix * static_cast<double>(carrier.data[i]) +
                           kTextureMix * texture);
    }
    return clamp01(out);
}

/// Score one protected/clean source pair against each target: swap the clean
/// source once, then swap the protected source untransformed and under every
/// robustness transform, all against the same noised target latent. L2/PSNR
/// compare the two swap outputs; ISM compares the clean source identity with
/// the protected swap through the held-out evaluation encoder.
///
/// Sentinels: detection failure on the protected input yields a success row
/// (l2 = psnr = -1, ism = -2); a failed transform codec yields l2 = psnr =
/// ism = -3 under that transform's label.
template <typename Real>
std::vector<MetricRow<Real>> swap_and_score(const Tensor<Real>& src_protected,
                                            const Tensor<Real>& src_clean,
                                            const std::vector<Tensor<Real>>& targets,
                                            const victim::VictimBundle<Real>& bundle,
                                            const std::string& pair_id, uint64_t seed) {
    std::vector<MetricRow<Real>> rows;
    for (size_t k = 0; k < targets.size(); ++k) {
        std::string row_id =
            targets.size() == 1 ? pair_id : pair_id + ".t" + std::to_string(k);

        // one noised target latent per (pair, target), shared by the clean
        // swap and every protected variant so conditioning is the only
        // difference; drawn from a stream named by the row so row order and
        // batch composition cannot change results
        Pcg32 rng = stream_for(seed, "swap:" + row_id);
        const int t = bundle.backbone->timesteps() / 2;
        Tensor<Real> noisy =
            bundle.backbone->noise_latent(bundle.codec->encode(targets[k]), t, rng);

        auto clean_swap = swap_face(bundle, src_clean, targets[k], noisy, t);
        if (!clean_swap)
            throw NumericError("no face detected in the clean source of pair " + row_id);

        auto score = [&](const std::string& label, const Tensor<Real>& variant) {
            MetricRow<Real> row;
            row.pair_id = row_id;
            row.transform = label;
            auto prot_swap = swap_face(bundle, variant, targets[k], noisy, t);
            if (!prot_swap) {
                row.l2 = Real(MetricRow<Real>::kNoDetectionL2);
                row.psnr = Real(MetricRow<Real>::kNoDetectionPsnr);
                row.ism = Real(MetricRow<Real>::kNoDetectionIsm);
            } else {
                row.l2 = metric_l2(*clean_swap, *prot_swap);
                row.psnr = psnr_from_mse(row.l2);
                row.ism = metric_ism(src_clean, *prot_swap, *bundle.eval_encoder);
            }
            rows.push_back(std::move(row));
        };

        score("none", src_protected);
        for (const auto& tr : transform_suite(src_protected)) {
            if (!tr.ok) {
                MetricRow<Real> row;
                row.pair_id = row_id;
                row.transform = tr.label;
                row.l2 = Real(MetricRow<Real>::kMissing);
                row.psnr = Real(MetricRow<Real>::kMissing);
                row.ism = Real(MetricRow<Real>::kMissing);
                rows.push_back(std::move(row));
                continue;
            }
            score(tr.label, tr.image);
        }
    }
    return rows;
}

}  // namespace voidkit::eval
