#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "voidkit/opt/adaptive.hpp"
#include "voidkit/opt/protect.hpp"
#include "voidkit/synth/faces.hpp"
#include "voidkit/victim/surrogate.hpp"

using namespace voidkit;
using namespace voidkit::opt;

TEST_CASE("linear-interpolation quantile against hand values") {
    std::vector<double> s = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    // position 0.5*(10-1) = 4.5 -> midpoint of 0.5 and 0.6
    REQUIRE(quantile_linear(s, 0.5) == Catch::Approx(0.55).epsilon(1e-12));
    REQUIRE(quantile_linear(s, 0.25) == Catch::Approx(0.325).epsilon(1e-12));
    CHECK_THROWS_AS(quantile_linear(s, 0.0), ConfigError);
    CHECK_THROWS_AS(quantile_linear(s, 1.0), ConfigError);
    CHECK_THROWS_AS(quantile_linear(std::vector<double>{}, 0.5), NumericError);
}

TEST_CASE("quantile binarization keeps strictly-greater values") {
    Tensor<double> v({2, 5});
    v.data = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    SpatialMask<double> s(MaskKind::perceptual_smooth, v);
    SpatialMask<double> m = binarize_quantile(s, 0.5);
    REQUIRE(m.kind == MaskKind::perceptual_binary);
    int ones = 0;
    for (size_t i = 0; i < m.values.data.size(); ++i) {
        REQUIRE(m.values.data[i] == (v.data[i] > 0.55 ? 1.0 : 0.0));
        ones += m.values.data[i] != 0.0;
    }
    REQUIRE(ones == 5);

    // near-zero quantile: everything except the minimum survives
    SpatialMask<double> m0 = binarize_quantile(s, 1e-9);
    int zeros = 0;
    for (double x : m0.values.data) zeros += x == 0.0;
    REQUIRE(zeros == 1);
    REQUIRE(m0.values.data[0] == 0.0);

    // constant maps binarize to all zeros
    Tensor<double> c({3, 3}, 0.7);
    SpatialMask<double> mc = binarize_quantile(SpatialMask<double>(MaskKind::perceptual_smooth, c), 0.5);
    for (double x : mc.values.data) REQUIRE(x == 0.0);
}

TEST_CASE("quantile matches an independently computed sort oracle on 1000 values") {
    Pcg32 g(808);
    std::vector<double> vals(1000);
    for (auto& v : vals) v = g.uniform(0.0, 1.0);
    for (double q : {0.1, 0.37, 0.5, 0.9}) {
        std::vector<double> sorted = vals;
        std::sort(sorted.begin(), sorted.end());
        double pos = q * 999.0;
        size_t lo = static_cast<size_t>(pos);
        double oracle = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
        REQUIRE(quantile_linear(vals, q) == oracle);  // bitwise: same arithmetic, independent code
    }
}

TEST_CASE("perceptual step map is all ones at the source and anti-monotone in distance") {
    auto b = victim::make_surrogate_bundle<double>(40);
    Tensor<double> x = synth::make_face(60);
    SpatialMask<double> s = perceptual_step_map(*b.perceptual, x, x);
    for (double v : s.values.data) REQUIRE(v == 1.0);

    Tensor<double> y = synth::make_face(61);
    SpatialMask<double> sy = perceptual_step_map(*b.perceptual, y, x);
    auto [d, map] = b.perceptual->distance(y, x);
    (void)d;
    for (long i = 0; i < map.numel(); ++i) {
        REQUIRE(sy.values.data[static_cast<size_t>(i)] ==
                1.0 - map.data[static_cast<size_t>(i)]);
        REQUIRE(sy.values.data[static_cast<size_t>(i)] >= 0.0);
        REQUIRE(sy.values.data[static_cast<size_t>(i)] <= 1.0);
    }
}

TEST_CASE("smoothed step map stays inside [gamma, 1]") {
    const double gamma = 0.3;
    Tensor<double> ones({16, 16}, 1.0);
    SpatialMask<double> p1 = smooth_map(SpatialMask<double>(MaskKind::perceptual_binary, ones), gamma, 3.0);
    for (double v : p1.values.data) REQUIRE(v == Catch::Approx(1.0).margin(1e-12));

    Tensor<double> zeros({16, 16});
    SpatialMask<double> p0 = smooth_map(SpatialMask<double>(MaskKind::perceptual_binary, zeros), gamma, 3.0);
    for (double v : p0.values.data) REQUIRE(v == Catch::Approx(gamma).margin(1e-12));

    Pcg32 g(21);
    Tensor<double> rnd({16, 16});
    for (auto& v : rnd.data) v = g.uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;
    SpatialMask<double> pr = smooth_map(SpatialMask<double>(MaskKind::perceptual_binary, rnd), gamma, 3.0);
    for (double v : pr.values.data) {
        REQUIRE(v >= gamma);
        REQUIRE(v <= 1.0);
    }
    // smoothing must actually mix neighborhoods: interior values strictly between
    bool mixed = false;
    for (double v : pr.values.data) mixed = mixed || (v > gamma + 1e-6 && v < 1.0 - 1e-6);
    REQUIRE(mixed);
}

TEST_CASE("adaptive config validation") {
    CHECK_THROWS_AS(AdaptiveConfig(0.0, 0.3, 3.0, true), ConfigError);
    CHECK_THROWS_AS(AdaptiveConfig(1.0, 0.3, 3.0, true), ConfigError);
    CHECK_THROWS_AS(AdaptiveConfig(0.5, -0.1, 3.0, true), ConfigError);
    CHECK_THROWS_AS(AdaptiveConfig(0.5, 1.1, 3.0, true), ConfigError);
    CHECK_THROWS_AS(AdaptiveConfig(0.5, 0.3, 0.0, true), ConfigError);
    AdaptiveConfig ok;  // defaults validate
    ok.validate();
}

TEST_CASE("latent update moves each coordinate by exactly alpha times the step map") {
    Tensor<double> z({2, 2, 2}, 1.0);
    Tensor<double> grad({2, 2, 2});
    grad.data = {3.0, -0.5, 0.0, 2.0, -1.0, 0.0, 4.0, -4.0};
    Tensor<double> p({2, 2});
    p.data = {1.0, 0.5, 0.3, 1.0};
    const double alpha = 1.0 / 255.0;

    Tensor<double> out = update_latent(z, grad, p, alpha);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x)
            for (int c = 0; c < 2; ++c) {
                double g = grad.at(y, x, c);
                double expect = 1.0 + alpha * p.at(y, x) * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0));
                REQUIRE(out.at(y, x, c) == expect);
            }

    // zero step size leaves the latent untouched (the update itself is pure;
    // run budgets require alpha > 0 separately)
    Tensor<double> frozen = update_latent(z, grad, p, 0.0);
    REQUIRE(frozen.data == z.data);

    Tensor<double> bad({3, 3});
    CHECK_THROWS_AS(update_latent(z, grad, bad, alpha), ShapeError);
}

TEST_CASE("an all-ones step map reduces the update to plain signed ascent") {
    Pcg32 g(5001);
    Tensor<double> z({8, 8, 4}), grad({8, 8, 4});
    for (auto& v : z.data) v = g.normal();
    for (auto& v : grad.data) v = g.normal();
    Tensor<double> ones({8, 8}, 1.0);
    Tensor<double> a = update_latent(z, grad, ones, 1.0 / 255.0);
    for (size_t i = 0; i < z.data.size(); ++i) {
        double s = grad.data[i] > 0 ? 1.0 : (grad.data[i] < 0 ? -1.0 : 0.0);
        REQUIRE(a.data[i] == z.data[i] + (1.0 / 255.0) * s);  // bitwise
    }
}

TEST_CASE("context drawing honors fixed timesteps and the bundle range") {
    auto b = victim::make_surrogate_bundle<double>(50);
    Tensor<double> z0 = b.codec->encode(synth::make_face(70));
    Pcg32 r1 = stream_for(1, "ctx");
    auto ctx = draw_context(*b.backbone, z0, r1, 4);
    REQUIRE(ctx.timestep == 4);
    Pcg32 r2 = stream_for(1, "ctx");
    auto ctx2 = draw_context(*b.backbone, z0, r2, 4);
    REQUIRE(ctx.noisy_latent.data == ctx2.noisy_latent.data);

    Pcg32 r3 = stream_for(2, "ctx");
    CHECK_THROWS_AS(draw_context(*b.backbone, z0, r3, 10), ConfigError);

    // uniform draws stay in range
    Pcg32 r4 = stream_for(3, "ctx");
    for (int i = 0; i < 50; ++i) {
        auto c = draw_context(*b.backbone, z0, r4, -1);
        REQUIRE(c.timestep >= 0);
        REQUIRE(c.timestep < b.backbone->timesteps());
    }
}

TEST_CASE("projected decode never leaves the budget box") {
    auto b = victim::make_surrogate_bundle<double>(51);
    Tensor<double> src = synth::make_face(71);
    Pcg32 g(5002);
    Tensor<double> z = b.codec->encode(src);
    for (auto& v : z.data) v += g.uniform(-0.5, 0.5);
    const double eps = 12.0 / 255.0;
    Tensor<double> x = projected_decode(*b.codec, z, src, eps);
    for (size_t i = 0; i < x.data.size(); ++i) {
        REQUIRE(std::abs(x.data[i] - src.data[i]) <= eps + 1e-15);
        REQUIRE(x.data[i] >= 0.0);
        REQUIRE(x.data[i] <= 1.0);
    }
}

TEST_CASE("zero-iteration protection is the quantized projected codec round trip") {
    auto b = victim::make_surrogate_bundle<double>(52);
    Tensor<double> src = synth::make_face(72);
    ProtectOptions opt;
    opt.budget = PerturbationBudget(12.0 / 255.0, 1.0 / 255.0, 0);
    opt.seed = 9;
    ProtectResult<double> res = protect(src, b, opt);

    Tensor<double> expect =
        byte_align(projected_decode(*b.codec, b.codec->encode(src), src, 12.0 / 255.0));
    REQUIRE(res.image.data == expect.data);
    REQUIRE(res.iterations_completed == 0);
    REQUIRE(res.run_log.size() == 1);
    REQUIRE(res.run_log[0].iteration == 0);
    REQUIRE(res.linf_deviation_bytes <= 12);
}

TEST_CASE("protection is deterministic for a fixed seed") {
    auto b = victim::make_surrogate_bundle<double>(53);
    Tensor<double> src = synth::make_face(73);
    ProtectOptions opt;
    opt.budget = PerturbationBudget(12.0 / 255.0, 1.0 / 255.0, 4);
    opt.seed = 77;
    ProtectResult<double> r1 = protect(src, b, opt);
    ProtectResult<double> r2 = protect(src, b, opt);
    REQUIRE(r1.image.data == r2.image.data);
    REQUIRE(r1.run_log.size() == r2.run_log.size());
    for (size_t i = 0; i < r1.run_log.size(); ++i)
        REQUIRE(r1.run_log[i].losses.l_total == r2.run_log[i].losses.l_total);

    ProtectOptions other = opt;
    other.seed = 78;
    ProtectResult<double> r3 = protect(src, b, other);
    REQUIRE(r1.image.data != r3.image.data);  // the context stream matters
}

TEST_CASE("disabling adaptation reproduces plain signed ascent bit for bit") {
    auto b = victim::make_surrogate_bundle<double>(54);
    Tensor<double> src = synth::make_face(74);
    const int iters = 5;
    ProtectOptions opt;
    opt.budget = PerturbationBudget(12.0 / 255.0, 1.0 / 255.0, iters);
    opt.adaptive.enabled = false;
    opt.seed = 55;
    ProtectResult<double> res = protect(src, b, opt);

    // manual replay of the plain-ascent recurrence with the same streams
    losses::LossEvaluator<double> ev(b, src, opt.weights, opt.margin, opt.tau_p);
    Tensor<double> z0 = b.codec->encode(src);
    Tensor<double> z = z0;
    Pcg32 rng = stream_for(opt.seed, "protect-context");
    losses::TapContext<double> first;
    for (int i = 0; i < iters; ++i) {
        auto ctx = draw_context(*b.backbone, z0, rng, -1);
        if (i == 0) first = ctx;
        ev.set_context(ctx);
        auto gt = losses::grad_total(z, ev, opt.budget);
        REQUIRE(gt.report.l_total == res.run_log[static_cast<size_t>(i)].losses.l_total);
        for (size_t j = 0; j < z.data.size(); ++j) {
            double g = gt.grad.data[j];
            z.data[j] += (1.0 / 255.0) * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0));
        }
    }
    Tensor<double> manual = byte_align(projected_decode(*b.codec, z, src, opt.budget.epsilon));
    REQUIRE(res.image.data == manual.data);
}

TEST_CASE("protection increases the total loss and records the step maps") {
    auto b = victim::make_surrogate_bundle<double>(56);
    Tensor<double> src = synth::make_face(76);
    ProtectOptions opt;
    opt.seed = 12;
    opt.record_p_history = true;
    ProtectResult<double> res = protect(src, b, opt);

    REQUIRE(res.iterations_completed == 30);
    REQUIRE(res.run_log.size() == 31);
    REQUIRE(res.run_log.front().iteration == 0);
    REQUIRE(res.run_log.back().iteration == 30);
    double initial = res.run_log.front().losses.l_total;
    double final_total = res.run_log.back().losses.l_total;
    std::printf("calib: protect l_total initial=%.6f final=%.6f (bytes linf=%d)\n", initial,
                final_total, res.linf_deviation_bytes);
    REQUIRE(final_total > initial);
    REQUIRE(res.linf_deviation_bytes <= 12);
    REQUIRE_FALSE(res.aborted);

    REQUIRE(res.p_history.size() == 30);
    for (const auto& p : res.p_history) {
        REQUIRE(p.shape == std::vector<int>{8, 8});
        for (double v : p.data) {
            REQUIRE(v >= opt.adaptive.gamma);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("unreachable anchors only warn; fixed-timestep mode runs") {
    auto b = victim::make_surrogate_bundle<double>(57);
    Tensor<double> src = synth::make_face(77);
    ProtectOptions opt;
    opt.budget = PerturbationBudget(12.0 / 255.0, 1.0 / 255.0, 2);
    opt.tau_p = 0.999999;
    opt.fixed_timestep = 6;
    opt.seed = 3;
    ProtectResult<double> res = protect(src, b, opt);
    REQUIRE(res.iterations_completed == 2);
    REQUIRE_FALSE(res.warnings.empty());
    bool mentions_anchor = false;
    for (const auto& w : res.warnings)
        mentions_anchor = mentions_anchor || w.find("anchor") != std::string::npos;
    REQUIRE(mentions_anchor);
}
