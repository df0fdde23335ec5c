#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "support/finite_diff.hpp"
#include "voidkit/losses/losses.hpp"
#include "voidkit/synth/faces.hpp"
#include "voidkit/victim/surrogate.hpp"

using namespace voidkit;
using namespace voidkit::losses;

namespace {

double cos_distance(const Tensor<double>& a, const Tensor<double>& b) {
    double d = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        d += a.data[i] * b.data[i];
        na += a.data[i] * a.data[i];
        nb += b.data[i] * b.data[i];
    }
    return 1.0 - d / std::sqrt(na * nb);
}

LossEvaluator<double> make_evaluator(uint64_t bundle_seed, uint64_t face_seed,
                                     LossWeights w = LossWeights::defaults()) {
    auto bundle = victim::make_surrogate_bundle<double>(bundle_seed);
    Tensor<double> src = synth::make_face(face_seed);
    LossEvaluator<double> ev(bundle, src, w, 0.6, 0.5);
    Tensor<double> z0 = bundle.codec->encode(src);
    Pcg32 g = stream_for(bundle_seed, "test-context");
    TapContext<double> ctx{bundle.backbone->noise_latent(z0, 3, g), 3};
    ev.set_context(std::move(ctx));
    return ev;
}

}  // namespace

TEST_CASE("localization term: hand oracle exp(-5)") {
    ad::Tape<double> tape;
    Tensor<double> adv({2, 4});
    adv.at(0, 0) = 3.0;
    adv.at(0, 1) = 4.0;  // masked diff has norm exactly 5
    adv.at(1, 2) = 100.0;  // masked out
    Tensor<double> src({2, 4});
    Tensor<double> mvals({2});
    mvals.data = {1.0, 0.0};
    SpatialMask<double> anchor(MaskKind::anchor, mvals);

    ad::Var off = tape.input(adv);
    ad::Var l = loss_loc_on(tape, off, src, anchor);
    REQUIRE(tape.scalar(l) == Catch::Approx(std::exp(-5.0)).epsilon(1e-12));
    REQUIRE(tape.scalar(l) == Catch::Approx(6.7379469990855e-3).epsilon(1e-9));
}

TEST_CASE("localization term equals one when offsets match") {
    ad::Tape<double> tape;
    Tensor<double> off({3, 4});
    off.at(0, 0) = 1.25;
    Tensor<double> mvals({3}, 1.0);
    ad::Var v = tape.input(off);
    ad::Var l = loss_loc_on(tape, v, off, SpatialMask<double>(MaskKind::anchor, mvals));
    REQUIRE(tape.scalar(l) == 1.0);
}

TEST_CASE("localization term rejects non-anchor masks") {
    ad::Tape<double> tape;
    Tensor<double> off({2, 4});
    ad::Var v = tape.input(off);
    Tensor<double> mvals({2}, 1.0);
    CHECK_THROWS_AS(loss_loc_on(tape, v, off, SpatialMask<double>(MaskKind::cam, mvals)),
                    ConfigError);
}

TEST_CASE("identity term: orthogonal embeddings and perfect erasure") {
    // e_null = (1,0): distance to itself 0; e_src = (0,1): distance 1 >= margin
    ad::Tape<double> tape;
    Tensor<double> e_null({2});
    e_null.data = {1.0, 0.0};
    Tensor<double> e_src({2});
    e_src.data = {0.0, 1.0};
    ad::Var adv = tape.input(e_null);
    ad::Var l = loss_id_single_on(tape, adv, e_src, e_null, 0.6);
    REQUIRE(tape.scalar(l) == Catch::Approx(0.0).margin(1e-15));

    // and at the source itself the hinge saturates at exactly m
    ad::Tape<double> t2;
    ad::Var adv2 = t2.input(e_src);
    ad::Var l2 = loss_id_single_on(t2, adv2, e_src, e_null, 0.6);
    REQUIRE(t2.scalar(l2) == Catch::Approx(1.0 + 0.6).epsilon(1e-12));  // D_cos(src,null)=1
}

TEST_CASE("identity term raises on zero-norm embeddings") {
    ad::Tape<double> tape;
    Tensor<double> zero({3});
    Tensor<double> ref({3}, 1.0);
    ad::Var z = tape.input(zero);
    CHECK_THROWS_AS(loss_id_single_on(tape, z, ref, ref, 0.6), NumericError);
}

TEST_CASE("attention term: Frobenius hand oracle and symmetry") {
    ad::Tape<double> tape;
    Tensor<double> ones({2, 2}, 1.0);
    Tensor<double> zeros({2, 2});
    std::vector<victim::AttentionTapValue<double>> src(1);
    src[0].layer_id = "attn1";
    src[0].K = zeros;
    src[0].V = zeros;
    std::vector<victim::AttentionTap> adv(1);
    adv[0].layer_id = "attn1";
    adv[0].K = tape.input(ones);
    adv[0].V = tape.input(zeros);
    ad::Var l = loss_attn_on(tape, adv, src);
    REQUIRE(tape.scalar(l) == Catch::Approx(2.0).epsilon(1e-12));  // sqrt(4*1)

    // symmetric in (adv, src)
    ad::Tape<double> t2;
    std::vector<victim::AttentionTapValue<double>> src2(1);
    src2[0].layer_id = "attn1";
    src2[0].K = ones;
    src2[0].V = zeros;
    std::vector<victim::AttentionTap> adv2(1);
    adv2[0].layer_id = "attn1";
    adv2[0].K = t2.input(zeros);
    adv2[0].V = t2.input(zeros);
    REQUIRE(t2.scalar(loss_attn_on(t2, adv2, src2)) == Catch::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("attention term rejects layer mismatches") {
    ad::Tape<double> tape;
    Tensor<double> z({2, 2});
    std::vector<victim::AttentionTapValue<double>> src(1);
    src[0].layer_id = "attn1";
    src[0].K = z;
    src[0].V = z;
    std::vector<victim::AttentionTap> adv(1);
    adv[0].layer_id = "attn2";
    adv[0].K = tape.input(z);
    adv[0].V = tape.input(z);
    CHECK_THROWS_AS(loss_attn_on(tape, adv, src), ConfigError);
    std::vector<victim::AttentionTapValue<double>> empty;
    CHECK_THROWS_AS(loss_attn_on(tape, adv, empty), ConfigError);
}

TEST_CASE("feature term: masked Frobenius hand oracle") {
    // diff = constant 2 over a (2,2,1) map, mask of ones -> sqrt(4*4) = 4
    ad::Tape<double> tape;
    Tensor<double> fsrc({2, 2, 1});
    Tensor<double> fadv({2, 2, 1}, 2.0);
    std::vector<victim::FeatureTapValue<double>> src(1);
    src[0].layer_id = "down1";
    src[0].fmap = fsrc;
    std::vector<victim::FeatureTap> adv(1);
    adv[0].layer_id = "down1";
    adv[0].fmap = tape.input(fadv);

    saliency::MaskSet<double> masks;
    Tensor<double> ones({2, 2}, 1.0);
    Tensor<double> zeros({2, 2});
    masks.semantic_by_layer.emplace("down1", SpatialMask<double>(MaskKind::semantic, ones));
    masks.cam_by_layer.emplace("down1", SpatialMask<double>(MaskKind::cam, zeros));
    ad::Var l = loss_feat_on(tape, adv, src, masks);
    REQUIRE(tape.scalar(l) == Catch::Approx(4.0).epsilon(1e-12));

    // annihilating masks kill the term regardless of the diff
    saliency::MaskSet<double> dead;
    dead.semantic_by_layer.emplace("down1", SpatialMask<double>(MaskKind::semantic, zeros));
    dead.cam_by_layer.emplace("down1", SpatialMask<double>(MaskKind::cam, zeros));
    ad::Tape<double> t2;
    adv[0].fmap = t2.input(fadv);
    REQUIRE(t2.scalar(loss_feat_on(t2, adv, src, dead)) == 0.0);
}

TEST_CASE("total loss is the signed dot product with the weight vector") {
    ad::Tape<double> tape;
    auto c = [&](double v) { return tape.input(Tensor<double>({1}, v)); };
    LossWeights w(-1.0, -1.0, 1.0, 1.0);
    ad::Var total = loss_total_on(tape, c(1.0), c(2.0), c(3.0), c(4.0), w, TermFlags{});
    REQUIRE(tape.scalar(total) == Catch::Approx(4.0).epsilon(1e-12));

    ad::Var zero_case = loss_total_on(tape, c(0.0), c(0.0), c(0.0), c(0.0), w, TermFlags{});
    REQUIRE(tape.scalar(zero_case) == 0.0);

    TermFlags no_attn;
    no_attn.attn = false;
    ad::Var dropped = loss_total_on(tape, c(1.0), c(2.0), c(3.0), c(4.0), w, no_attn);
    REQUIRE(tape.scalar(dropped) == Catch::Approx(1.0).epsilon(1e-12));  // -1-2+4
}

TEST_CASE("identity case: evaluating the loss at the source image") {
    for (uint64_t seed : {3u, 4u}) {
        auto ev = make_evaluator(seed, seed + 10);
        LossReport<double> rep = ev.evaluate_image(ev.source());
        REQUIRE(rep.l_loc == Catch::Approx(1.0).margin(1e-9));
        REQUIRE(rep.l_attn == Catch::Approx(0.0).margin(1e-9));
        REQUIRE(rep.l_feat == Catch::Approx(0.0).margin(1e-9));

        // the hinge saturates exactly at the margin, so l_id minus the mean
        // null distance equals m
        auto bundle = victim::make_surrogate_bundle<double>(seed);
        Tensor<double> src = synth::make_face(seed + 10);
        Tensor<double> null_img({64, 64, 3}, 0.0);
        double mean_null = 0;
        for (const auto& enc : bundle.attack_encoders)
            mean_null += cos_distance(victim::embed(*enc, src), victim::embed(*enc, null_img));
        mean_null /= static_cast<double>(bundle.attack_encoders.size());
        REQUIRE(rep.l_id - mean_null == Catch::Approx(0.6).margin(1e-9));
    }
}

TEST_CASE("loss terms stay in their documented ranges at perturbed points") {
    auto ev = make_evaluator(7, 20);
    Pcg32 g(900);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor<double> x = ev.source();
        for (auto& v : x.data) v = std::clamp(v + g.uniform(-12.0 / 255, 12.0 / 255), 0.0, 1.0);
        LossReport<double> rep = ev.evaluate_image(x);
        REQUIRE(rep.l_loc > 0.0);
        REQUIRE(rep.l_loc <= 1.0);
        REQUIRE(rep.l_id >= 0.0);
        REQUIRE(rep.l_id <= 2.0 + 0.6);
        REQUIRE(rep.l_attn >= 0.0);
        REQUIRE(rep.l_feat >= 0.0);
        double expect = -1.0 * rep.l_loc - 1.0 * rep.l_id + 0.01 * rep.l_attn + 0.01 * rep.l_feat;
        REQUIRE(rep.l_total == Catch::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("re-evaluation at the same point is bit-identical") {
    auto ev = make_evaluator(9, 31);
    Tensor<double> x = ev.source();
    Pcg32 g(901);
    for (auto& v : x.data) v = std::clamp(v + g.uniform(-0.04, 0.04), 0.0, 1.0);
    LossReport<double> a = ev.evaluate_image(x);
    LossReport<double> b = ev.evaluate_image(x);
    REQUIRE(a.l_loc == b.l_loc);
    REQUIRE(a.l_id == b.l_id);
    REQUIRE(a.l_attn == b.l_attn);
    REQUIRE(a.l_feat == b.l_feat);
    REQUIRE(a.l_total == b.l_total);

    auto ev2 = make_evaluator(9, 31);
    LossReport<double> c = ev2.evaluate_image(x);
    REQUIRE(a.l_total == c.l_total);
}

TEST_CASE("evaluator refuses to run without a denoising context") {
    auto bundle = victim::make_surrogate_bundle<double>(2);
    Tensor<double> src = synth::make_face(2);
    LossEvaluator<double> ev(bundle, src, LossWeights::defaults(), 0.6, 0.5);
    CHECK_THROWS_AS(ev.evaluate_image(src), ConfigError);
    CHECK_THROWS_AS(ev.context(), ConfigError);
    CHECK_THROWS_AS(
        LossEvaluator<double>(bundle, src, LossWeights::defaults(), 0.0, 0.5), ConfigError);
    CHECK_THROWS_AS(
        LossEvaluator<double>(bundle, src, LossWeights::defaults(), 2.0, 0.5), ConfigError);
}

TEST_CASE("an unreachable anchor threshold disables the localization term") {
    auto bundle = victim::make_surrogate_bundle<double>(5);
    Tensor<double> src = synth::make_face(5);
    LossEvaluator<double> ev(bundle, src, LossWeights::defaults(), 0.6, 0.999999);
    Tensor<double> z0 = bundle.codec->encode(src);
    Pcg32 g(44);
    ev.set_context({bundle.backbone->noise_latent(z0, 1, g), 1});
    LossReport<double> rep = ev.evaluate_image(src);
    REQUIRE_FALSE(rep.loc_enabled);
    REQUIRE(rep.l_loc == 0.0);
    // with l_loc absent the total at the source is -l_id exactly
    REQUIRE(rep.l_total == Catch::Approx(-rep.l_id).margin(1e-12));
}

TEST_CASE("latent gradient of the total loss matches finite differences") {
    auto ev = make_evaluator(11, 40);
    Tensor<double> z = ev.bundle().codec->encode(ev.source());
    Pcg32 g(902);
    for (auto& v : z.data) v += g.uniform(-0.05, 0.05);  // random perturbed point

    // wide budget: the straight-through clamp never binds, so the chain is
    // exactly differentiable
    PerturbationBudget wide(10.0, 0.5, 30);
    auto analytic = grad_total(z, ev, wide);
    REQUIRE(analytic.grad.shape == z.shape);
    REQUIRE(analytic.grad.all_finite());

    auto eval_at = [&](const Tensor<double>& zp) {
        ad::Tape<double> tape;
        ad::Var zv = tape.input(zp);
        ad::Var dec = ev.bundle().codec->decode_on(tape, zv);
        // same wide box as grad_total
        Tensor<double> lo(ev.source().shape), hi(ev.source().shape);
        for (size_t i = 0; i < lo.data.size(); ++i) {
            lo.data[i] = std::max(0.0, ev.source().data[i] - 10.0);
            hi.data[i] = std::min(1.0, ev.source().data[i] + 10.0);
        }
        ad::Var x = tape.clamp_box_st(dec, lo, hi);
        return ev.evaluate_on(tape, x).values.l_total;
    };

    Pcg32 pick(903);
    const double step = 1e-4;
    double max_rel = 0;
    for (int probe = 0; probe < 20; ++probe) {
        long i = static_cast<long>(pick.uniform_int(static_cast<uint32_t>(z.numel())));
        Tensor<double> zp = z, zm = z;
        zp.data[static_cast<size_t>(i)] += step;
        zm.data[static_cast<size_t>(i)] -= step;
        double fd = (eval_at(zp) - eval_at(zm)) / (2 * step);
        double re = testing::rel_error(fd, analytic.grad.data[static_cast<size_t>(i)]);
        max_rel = std::max(max_rel, re);
    }
    std::printf("calib: latent-gradient fd max rel err = %.3e\n", max_rel);
    REQUIRE(max_rel < 1e-2);
}

TEST_CASE("gradient is insensitive to the weight of a disabled term") {
    auto bundle = victim::make_surrogate_bundle<double>(13);
    Tensor<double> src = synth::make_face(33);
    Tensor<double> z0 = bundle.codec->encode(src);
    Pcg32 g(904);
    TapContext<double> ctx{bundle.backbone->noise_latent(z0, 2, g), 2};

    auto grad_with = [&](double lambda_feat) {
        LossEvaluator<double> ev(bundle, src, LossWeights(-1.0, -1.0, 0.01, lambda_feat), 0.6, 0.5);
        ev.set_context(ctx);
        TermFlags f;
        f.feat = false;
        ev.set_term_flags(f);
        return grad_total(z0, ev, PerturbationBudget(10.0, 0.5, 30)).grad;
    };
    Tensor<double> g1 = grad_with(0.01);
    Tensor<double> g2 = grad_with(0.9);
    REQUIRE(g1.data == g2.data);
}

TEST_CASE("gradient under the real budget stays finite and latent shaped") {
    auto ev = make_evaluator(17, 50);
    Tensor<double> z = ev.bundle().codec->encode(ev.source());
    auto out = grad_total(z, ev, PerturbationBudget(12.0 / 255, 1.0 / 255, 30));
    REQUIRE(out.grad.shape == std::vector<int>{8, 8, 4});
    REQUIRE(out.grad.all_finite());
    REQUIRE(std::isfinite(out.report.l_total));
}
