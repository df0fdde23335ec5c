#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "voidkit/core/image.hpp"
#include "voidkit/core/rng.hpp"
#include "voidkit/losses/losses.hpp"
#include "voidkit/opt/adaptive.hpp"
#include "voidkit/saliency/masks.hpp"
#include "voidkit/victim/interfaces.hpp"

// Projected signed-gradient ascent in latent space. The latent is free; the
// perturbation budget is enforced in pixel space by clamping the decoded
// image into the L-inf ball around the source, and that projected image is
// what every loss, every perceptual map, and the final output see.

namespace voidkit::opt {

struct ProtectOptions {
    PerturbationBudget budget{12.0 / 255.0, 1.0 / 255.0, 30};
    LossWeights weights = LossWeights::defaults();
    AdaptiveConfig adaptive;
    double margin = 0.6;
    double tau_p = 0.5;
    uint64_t seed = 0;
    int fixed_timestep = -1;       // -1: redraw uniformly per iteration
    bool lpips_on_projected = true;  // sensitivity map input: projected decode vs raw decode
    bool record_p_history = false;
};

template <typename Real>
struct IterationRow {
    int iteration = 0;
    losses::LossReport<Real> losses;
};

template <typename Real>
struct RunState {
    Tensor<Real> z;           // adversarial latent
    int iteration = 0;
    Pcg32 context_rng{0};     // sole entropy source of the run
    losses::TapContext<Real> comparison_context;  // frozen first context
    Tensor<Real> z0_src;      // encode(x_src), the noising base
};

template <typename Real>
struct ProtectResult {
    Tensor<Real> image;                       // byte-aligned protected image
    std::vector<IterationRow<Real>> run_log;  // rows 0..N (row N = final state)
    std::vector<Tensor<Real>> p_history;      // optional, latent-resolution P
    std::vector<std::string> warnings;
    int iterations_completed = 0;
    int linf_deviation_bytes = 0;
    double wall_ms = 0.0;
    bool aborted = false;
};

/// One denoising context: a timestep (fixed or drawn uniformly) and a
/// forward-noised copy of the clean source latent.
template <typename Real>
losses::TapContext<Real> draw_context(const victim::GenerativeBackbone<Real>& backbone,
                                      const Tensor<Real>& z0_src, Pcg32& rng, int fixed_timestep) {
    int t;
    if (fixed_timestep >= 0) {
        if (fixed_timestep >= backbone.timesteps())
            throw ConfigError("fixed timestep out of the bundle's range");
        t = fixed_timestep;
    } else {
        t = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(backbone.timesteps())));
    }
    return {backbone.noise_latent(z0_src, t, rng), t};
}

/// z' = z + alpha * P (x) sign(grad), with the latent-resolution step map P
/// broadcast across channels. sign(0) = 0, so coordinates with exactly zero
/// gradient hold still.
template <typename Real>
Tensor<Real> update_latent(const Tensor<Real>& z, const Tensor<Real>& grad, const Tensor<Real>& p,
                           double alpha) {
    z.require_same(grad, "update_latent");
    if (z.rank() != 3) throw ShapeError("update_latent expects an (h,w,c) latent");
    if (p.rank() != 2 || p.dim(0) != z.dim(0) || p.dim(1) != z.dim(1))
        throw ShapeError("step map resolution must match the latent");
    Tensor<Real> out(z.shape);
    const int h = z.dim(0), w = z.dim(1), c = z.dim(2);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Real scale = static_cast<Real>(alpha) * p.at(y, x);
            for (int ch = 0; ch < c; ++ch) {
                Real g = grad.at(y, x, ch);
                Real s = g > Real(0) ? Real(1) : (g < Real(0) ? Real(-1) : Real(0));
                out.at(y, x, ch) = z.at(y, x, ch) + scale * s;
            }
        }
    return out;
}

/// Decode and project into the budget box around the source.
template <typename Real>
Tensor<Real> projected_decode(const victim::LatentCodec<Real>& codec, const Tensor<Real>& z,
                              const Tensor<Real>& x_src, double epsilon) {
    return project_linf(victim::decode_latent(codec, z), x_src, static_cast<Real>(epsilon));
}

template <typename Real>
int byte_linf(const Tensor<Real>& a, const Tensor<Real>& b) {
    int worst = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        int da = static_cast<int>(std::lround(std::clamp(a.data[i], Real(0), Real(1)) * Real(255)));
        int db = static_cast<int>(std::lround(std::clamp(b.data[i], Real(0), Real(1)) * Real(255)));
        worst = std::max(worst, std::abs(da - db));
    }
    return worst;
}

/// Full protection run: N projected signed-ascent steps from the clean
/// encode. Row i of the run log holds the losses at z_i under that
/// iteration's denoising context; the final row (iteration = N) re-evaluates
/// the finished image under the first context, so first and last rows are
/// directly comparable.
template <typename Real>
ProtectResult<Real> protect(const Tensor<Real>& x_src, const victim::VictimBundle<Real>& bundle,
                            const ProtectOptions& options) {
    const auto t_start = std::chrono::steady_clock::now();
    options.adaptive.validate();
    require_image(x_src);

    ProtectResult<Real> result;
    losses::LossEvaluator<Real> evaluator(bundle, x_src, options.weights, options.margin,
                                          options.tau_p);
    if (!evaluator.masks().loc_enabled)
        result.warnings.push_back("no anchor cleared tau_p; localization term disabled");

    RunState<Real> run;
    run.z0_src = bundle.codec->encode(x_src);
    run.z = run.z0_src;
    run.context_rng = stream_for(options.seed, "protect-context");

    const auto lshape = bundle.codec->latent_shape();
    Tensor<Real> p_ones({lshape[0], lshape[1]}, Real(1));
    bool constant_map_logged = false;

    for (run.iteration = 0; run.iteration < options.budget.iterations; ++run.iteration) {
        losses::TapContext<Real> ctx =
            draw_context(*bundle.backbone, run.z0_src, run.context_rng, options.fixed_timestep);
        if (run.iteration == 0) run.comparison_context = ctx;
        evaluator.set_context(ctx);

        losses::TotalGradient<Real> gt;
        try {
            gt = losses::grad_total(run.z, evaluator, options.budget);
        } catch (const NumericError& e) {
            result.warnings.push_back(std::string("aborted at iteration ") +
                                      std::to_string(run.iteration) + ": " + e.what());
            result.aborted = true;
            break;
        }
        result.run_log.push_back({run.iteration, gt.report});

        Tensor<Real> p = p_ones;
        if (options.adaptive.enabled) {
            Tensor<Real> x_cur =
                options.lpips_on_projected
                    ? projected_decode(*bundle.codec, run.z, x_src, options.budget.epsilon)
                    : victim::decode_latent(*bundle.codec, run.z);
            SpatialMask<Real> s = perceptual_step_map(*bundle.perceptual, x_cur, x_src);
            SpatialMask<Real> m = binarize_quantile(s, options.adaptive.q);
            bool all_zero = true;
            for (Real v : m.values.data)
                if (v != Real(0)) {
                    all_zero = false;
                    break;
                }
            if (all_zero && !constant_map_logged) {
                result.warnings.push_back("sensitivity map constant at iteration " +
                                          std::to_string(run.iteration) +
                                          "; step map floors at gamma");
                constant_map_logged = true;
            }
            SpatialMask<Real> pm =
                smooth_map(m, options.adaptive.gamma, options.adaptive.sigma);
            SpatialMask<Real> plat = saliency::downsample_mask(pm, lshape[0], lshape[1]);
            p = plat.values;
        }
        if (options.record_p_history) result.p_history.push_back(p);

        run.z = update_latent(run.z, gt.grad, p, options.budget.alpha);
        ++result.iterations_completed;
    }

    // final state: project, byte-align, and close the log under the first
    // context so initial and final rows share a denoising context
    Tensor<Real> x_final = projected_decode(*bundle.codec, run.z, x_src, options.budget.epsilon);
    if (result.iterations_completed > 0 && !result.aborted) {
        evaluator.set_context(run.comparison_context);
        result.run_log.push_back({options.budget.iterations, evaluator.evaluate_image(x_final)});
    } else if (options.budget.iterations == 0) {
        losses::TapContext<Real> ctx =
            draw_context(*bundle.backbone, run.z0_src, run.context_rng, options.fixed_timestep);
        evaluator.set_context(ctx);
        result.run_log.push_back({0, evaluator.evaluate_image(x_final)});
    }

    result.image = byte_align(x_final);
    result.linf_deviation_bytes = byte_linf(result.image, x_src);
    result.wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t_start)
                         .count();
    return result;
}

}  // namespace voidkit::opt
