#pragma once

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "voidkit/core/image.hpp"
#include "voidkit/core/rng.hpp"
#include "voidkit/victim/interfaces.hpp"

// Desk-scale surrogate victim models. All weights are drawn once from named
// seed streams and frozen; nothing here trains. The networks are small but
// structurally faithful: anchored detection with offset regression, an
// identity-encoder ensemble sharing a low-frequency stem (so that attacking
// one encoder transfers to a held-out one), a latent codec whose decoder is
// differentiable, a conditioned backbone with cross-attention key/value taps
// and two feature taps, a multi-scale perceptual map, and a geometric face
// parser.

namespace voidkit::victim {

namespace sdetail {

template <typename Real>
Tensor<Real> randn(Pcg32& g, std::vector<int> shape, double stddev) {
    Tensor<Real> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<Real>(g.normal() * stddev);
    return t;
}

template <typename Real>
Tensor<Real> randu(Pcg32& g, std::vector<int> shape, double lo, double hi) {
    Tensor<Real> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<Real>(g.uniform(lo, hi));
    return t;
}

/// Orthonormalize the rows of a (n, m) matrix in place (modified Gram-Schmidt,
/// two passes). Requires n <= m and almost-surely independent random rows.
template <typename Real>
void orthonormalize_rows(Tensor<Real>& M) {
    const int n = M.dim(0), m = M.dim(1);
    for (int pass = 0; pass < 2; ++pass) {
        for (int i = 0; i < n; ++i) {
            Real* ri = &M.data[static_cast<size_t>(i) * m];
            for (int j = 0; j < i; ++j) {
                const Real* rj = &M.data[static_cast<size_t>(j) * m];
                Real d = 0;
                for (int k = 0; k < m; ++k) d += ri[k] * rj[k];
                for (int k = 0; k < m; ++k) ri[k] -= d * rj[k];
            }
            Real norm = 0;
            for (int k = 0; k < m; ++k) norm += ri[k] * ri[k];
            norm = std::sqrt(norm);
            if (!(norm > Real(1e-8))) throw NumericError("degenerate basis during orthonormalization");
            for (int k = 0; k < m; ++k) ri[k] /= norm;
        }
    }
}

/// Plain (non-tape) NHWC convolution for evaluation-only paths.
template <typename Real>
Tensor<Real> conv2d_plain(const Tensor<Real>& x, const Tensor<Real>& kernel,
                          const Tensor<Real>& bias, int stride, int pad) {
    const int H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
    const int kh = kernel.dim(0), kw = kernel.dim(1), Cout = kernel.dim(3);
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    Tensor<Real> out({OH, OW, Cout});
    for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
            Real* op = &out.data[(static_cast<size_t>(oy) * OW + ox) * Cout];
            if (bias.numel() > 0)
                for (int oc = 0; oc < Cout; ++oc) op[oc] = bias.data[static_cast<size_t>(oc)];
            for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= W) continue;
                    const Real* xp = &x.data[(static_cast<size_t>(iy) * W + ix) * Cin];
                    const Real* kp = &kernel.data[((static_cast<size_t>(ky) * kw + kx) * Cin) * Cout];
                    for (int ic = 0; ic < Cin; ++ic)
                        for (int oc = 0; oc < Cout; ++oc)
                            op[oc] += xp[ic] * kp[static_cast<size_t>(ic) * Cout + oc];
                }
            }
        }
    return out;
}

constexpr int kImageSize = 64;

}  // namespace sdetail

// ---- identity encoders -----------------------------------------------------

/// Ensemble geometry: every encoder shares one orthonormal low-frequency
/// stem L (rows are smooth image patterns), then adds a small per-encoder
/// convolutional branch and applies a per-encoder orthogonal rotation.
/// Rotations preserve cosine similarity, so identity directions learned by
/// attacking one encoder transfer to held-out ones; the conv branch keeps the
/// encoders genuinely distinct and gives Layer-CAM a spatial activation.
template <typename Real>
struct EncoderStem {
    Tensor<Real> L;  // (dim, size*size*3), orthonormal rows

    static std::shared_ptr<EncoderStem> build(uint64_t seed, int dim, int size) {
        auto stem = std::make_shared<EncoderStem>();
        stem->L = Tensor<Real>({dim, size * size * 3});
        Pcg32 g = stream_for(seed, "encoder-stem");
        for (int k = 0; k < dim; ++k) {
            // a coarse random pattern, upsampled so the row is low-frequency
            Tensor<Real> coarse({8, 8, 3});
            for (auto& v : coarse.data) v = static_cast<Real>(g.normal());
            Tensor<Real> fine = resample_bilinear(coarse, size, size);
            // zero-mean rows: embeddings respond to contrast patterns, not
            // brightness, so cosine geometry between faces stays non-degenerate
            // and a small pixel budget can actually rotate an embedding
            Real mean = 0;
            for (long i = 0; i < fine.numel(); ++i) mean += fine.data[static_cast<size_t>(i)];
            mean /= static_cast<Real>(fine.numel());
            for (long i = 0; i < fine.numel(); ++i)
                stem->L.data[static_cast<size_t>(k) * fine.numel() + i] =
                    fine.data[static_cast<size_t>(i)] - mean;
        }
        sdetail::orthonormalize_rows(stem->L);
        return stem;
    }
};

template <typename Real>
class SurrogateEncoder final : public IdentityEncoder<Real> {
public:
    SurrogateEncoder(uint64_t bundle_seed, std::string id, int dim,
                     std::shared_ptr<EncoderStem<Real>> stem)
        : id_(std::move(id)), dim_(dim), stem_(std::move(stem)) {
        Pcg32 g = stream_for(bundle_seed, "encoder-" + id_);
        k1_ = sdetail::randn<Real>(g, {3, 3, 3, 8}, 1.2 / std::sqrt(27.0));
        b1_ = sdetail::randu<Real>(g, {8}, -0.25, 0.25);
        k2_ = sdetail::randn<Real>(g, {3, 3, 8, 16}, 1.2 / std::sqrt(72.0));
        b2_ = sdetail::randu<Real>(g, {16}, -0.25, 0.25);
        Wg_ = sdetail::randn<Real>(g, {dim_, 16}, 0.8 / std::sqrt(16.0));
        bg_ = sdetail::randu<Real>(g, {dim_}, -0.2, 0.2);
        R_ = sdetail::randn<Real>(g, {dim_, dim_}, 1.0);
        sdetail::orthonormalize_rows(R_);
    }

    const std::string& id() const override { return id_; }
    int dim() const override { return dim_; }
    int image_size() const override { return sdetail::kImageSize; }

    ad::Var embed_on(ad::Tape<Real>& tape, ad::Var img) const override {
        return embed_with_activation_on(tape, img).first;
    }

    std::pair<ad::Var, ad::Var> embed_with_activation_on(ad::Tape<Real>& tape,
                                                         ad::Var img) const override {
        const int n = sdetail::kImageSize;
        if (tape.value(img).shape != std::vector<int>{n, n, 3})
            throw ShapeError("encoder expects a (64,64,3) image");
        // low-frequency stem term
        ad::Var flat = tape.reshape(img, {n * n * 3});
        ad::Var stem = tape.matmul_const_l(stem_->L, flat);  // (dim)
        // convolutional branch; A is the last spatial activation (8,8,16)
        ad::Var h1 = tape.relu(tape.conv2d(img, k1_, b1_, 2, 1));  // 32x32x8
        ad::Var h1p = tape.avgpool(h1, 2);                         // 16x16x8
        ad::Var A = tape.tanh_(tape.conv2d(h1p, k2_, b2_, 2, 1));  // 8x8x16
        ad::Var gap = tape.global_avg_channels(A);                 // (16)
        ad::Var branch = tape.add_const(tape.matmul_const_l(Wg_, gap), bg_);
        ad::Var pre = tape.add(stem, tape.scale(branch, kBranchGain));
        ad::Var e = tape.matmul_const_l(R_, pre);
        return {e, A};
    }

    /// The rotation and stem are exposed for the surrogate backbone, which
    /// inverts its own conditioning encoder when rendering identity.
    const Tensor<Real>& rotation() const { return R_; }
    const EncoderStem<Real>& stem() const { return *stem_; }

    static constexpr Real kBranchGain = Real(0.15);

private:
    std::string id_;
    int dim_;
    std::shared_ptr<EncoderStem<Real>> stem_;
    Tensor<Real> k1_, b1_, k2_, b2_, Wg_, bg_, R_;
};

// ---- detector ---------------------------------------------------------------

/// Anchored face detector on an 8x8 grid of 8px cells (J = 64). The
/// probability head combines a convolutional logit with a local-contrast
/// channel (per-cell luminance standard deviation), which guarantees a
/// responding anchor on any face-like image: faces have dark compact
/// features on smooth skin, i.e. high local contrast.
template <typename Real>
class SurrogateDetector final : public FaceDetector<Real> {
public:
    explicit SurrogateDetector(uint64_t bundle_seed) {
        Pcg32 g = stream_for(bundle_seed, "detector");
        k1_ = sdetail::randn<Real>(g, {3, 3, 3, 8}, 1.2 / std::sqrt(27.0));
        b1_ = sdetail::randu<Real>(g, {8}, -0.25, 0.25);
        k2_ = sdetail::randn<Real>(g, {3, 3, 8, 12}, 1.2 / std::sqrt(72.0));
        b2_ = sdetail::randu<Real>(g, {12}, -0.25, 0.25);
        kp_ = sdetail::randn<Real>(g, {1, 1, 12, 1}, 0.5 / std::sqrt(12.0));
        bp_ = sdetail::randu<Real>(g, {1}, -0.1, 0.1);
        ko_ = sdetail::randn<Real>(g, {1, 1, 12, 4}, 0.5 / std::sqrt(12.0));
        bo_ = sdetail::randu<Real>(g, {4}, -0.05, 0.05);
    }

    int anchor_count() const override { return 64; }
    int image_size() const override { return sdetail::kImageSize; }

    std::pair<ad::Var, ad::Var> detect_on(ad::Tape<Real>& tape, ad::Var img) const override {
        const int n = sdetail::kImageSize;
        if (tape.value(img).shape != std::vector<int>{n, n, 3})
            throw ShapeError("detector expects a (64,64,3) image");
        ad::Var h1 = tape.relu(tape.conv2d(img, k1_, b1_, 2, 1));  // 32x32x8
        ad::Var h1p = tape.avgpool(h1, 2);                         // 16x16x8
        ad::Var feat = tape.tanh_(tape.conv2d(h1p, k2_, b2_, 2, 1));  // 8x8x12

        // local-contrast channel: per-cell std of the channel-mean image
        ad::Var lum = tape.expand_plane(tape.channel_mean(img));     // 64x64x1
        ad::Var mu = tape.avgpool(lum, 8);                           // 8x8x1
        ad::Var mu2 = tape.avgpool(tape.square(lum), 8);             // 8x8x1
        ad::Var var = tape.sub(mu2, tape.square(mu));
        ad::Var sd = tape.sqrt_(tape.offset(var, Real(1e-6)));       // 8x8x1

        ad::Var logit_conv = tape.conv2d(feat, kp_, bp_, 1, 0);      // 8x8x1
        ad::Var logits = tape.add(tape.scale(logit_conv, Real(0.5)),
                                  tape.offset(tape.scale(sd, kContrastGain), kContrastBias));
        ad::Var probs = tape.reshape(tape.sigmoid_(logits), {64});
        ad::Var offsets = tape.reshape(tape.conv2d(feat, ko_, bo_, 1, 0), {64, 4});
        return {probs, offsets};
    }

    std::array<double, 4> anchor_box(int anchor, const Tensor<Real>& offsets) const override {
        if (anchor < 0 || anchor >= 64) throw ConfigError("anchor index out of range");
        const int r = anchor / 8, c = anchor % 8;
        const double dx = offsets.at(anchor, 0), dy = offsets.at(anchor, 1);
        const double dw = offsets.at(anchor, 2), dh = offsets.at(anchor, 3);
        double cy = (r + 0.5) * 8.0 + 6.0 * std::tanh(dy);
        double cx = (c + 0.5) * 8.0 + 6.0 * std::tanh(dx);
        double h = 44.0 * (1.0 + 0.35 * std::tanh(dh));
        double w = 36.0 * (1.0 + 0.35 * std::tanh(dw));
        return {cy, cx, h, w};
    }

    static constexpr Real kContrastGain = Real(40);
    static constexpr Real kContrastBias = Real(-2);

private:
    Tensor<Real> k1_, b1_, k2_, b2_, kp_, bp_, ko_, bo_;
};

// ---- latent codec -----------------------------------------------------------

/// Latent: 8x8x4. Encode = orthonormal 3->4 channel lift of the 8x area
/// average; decode = transpose channel mix + bilinear upsample + a small
/// seeded texture head, clamped to [0,1]. Because the channel mix has
/// orthonormal columns, decode(encode(x)) reduces to upsample(downsample(x))
/// plus texture, which keeps round-trip PSNR high on smooth images.
template <typename Real>
class SurrogateCodec final : public LatentCodec<Real> {
public:
    explicit SurrogateCodec(uint64_t bundle_seed) {
        Pcg32 g = stream_for(bundle_seed, "codec");
        Tensor<Real> Qt = sdetail::randn<Real>(g, {3, 4}, 1.0);  // rows orthonormalized
        sdetail::orthonormalize_rows(Qt);
        // store Q (4,3) with orthonormal columns, plus the decode kernel Q as (1,1,4,3)
        Q_ = Tensor<Real>({4, 3});
        dec_mix_ = Tensor<Real>({1, 1, 4, 3});
        for (int i = 0; i < 4; ++i)
            for (int o = 0; o < 3; ++o) {
                Real v = Qt.at(o, i);
                Q_.at(i, o) = v;
                dec_mix_.data[static_cast<size_t>(i) * 3 + o] = v;
            }
        ktex_ = sdetail::randn<Real>(g, {3, 3, 4, 3}, 1.0 / std::sqrt(36.0));
    }

    int image_size() const override { return sdetail::kImageSize; }
    std::vector<int> latent_shape() const override { return {8, 8, 4}; }

    Tensor<Real> encode(const Tensor<Real>& img) const override {
        require_image(img);
        if (img.dim(0) != sdetail::kImageSize || img.dim(1) != sdetail::kImageSize)
            throw ShapeError("codec expects a (64,64,3) image");
        Tensor<Real> down = resample_area(img, 8, 8);
        Tensor<Real> z({8, 8, 4});
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                for (int i = 0; i < 4; ++i) {
                    Real acc = 0;
                    for (int o = 0; o < 3; ++o) acc += Q_.at(i, o) * down.at(y, x, o);
                    z.at(y, x, i) = acc;
                }
        return z;
    }

    ad::Var decode_on(ad::Tape<Real>& tape, ad::Var z) const override {
        if (tape.value(z).shape != latent_shape()) throw ShapeError("decode expects an (8,8,4) latent");
        if (!tape.value(z).all_finite()) throw NumericError("decode: non-finite latent");
        ad::Var rgb8 = tape.conv2d(z, dec_mix_, Tensor<Real>(), 1, 0);   // 8x8x3
        ad::Var base = tape.upsample_bilinear(rgb8, 8);                  // 64x64x3
        ad::Var zup = tape.upsample_bilinear(z, 8);                      // 64x64x4
        ad::Var tex = tape.conv2d(zup, ktex_, Tensor<Real>(), 1, 1);     // 64x64x3
        return tape.clamp01(tape.add(base, tape.scale(tex, kTexGain)));
    }

    static constexpr Real kTexGain = Real(0.04);

private:
    Tensor<Real> Q_;        // (4,3): z = Q * rgb per latent cell
    Tensor<Real> dec_mix_;  // (1,1,4,3) conv form of Q^T
    Tensor<Real> ktex_;
};

// ---- generative backbone ----------------------------------------------------

/// Conditioned denoiser stand-in. The conditioning image is embedded by the
/// backbone's own encoder, expanded into 4 tokens, and injected through two
/// cross-attention layers (key/value taps) while the latent path runs
/// conv / pool / upsample blocks (feature taps at the first down block and
/// the last up block).
template <typename Real>
class SurrogateBackbone final : public GenerativeBackbone<Real> {
public:
    using Taps = typename GenerativeBackbone<Real>::Taps;

    SurrogateBackbone(uint64_t bundle_seed, std::shared_ptr<SurrogateEncoder<Real>> cond_encoder)
        : cond_(std::move(cond_encoder)) {
        Pcg32 g = stream_for(bundle_seed, "backbone");
        const int d = cond_->dim();
        Wtok_ = sdetail::randn<Real>(g, {64, d}, 1.0 / std::sqrt(static_cast<double>(d)));
        btok_ = sdetail::randu<Real>(g, {64}, -0.2, 0.2);
        kz_ = sdetail::randn<Real>(g, {3, 3, 4, 16}, 1.2 / std::sqrt(36.0));
        bz_ = sdetail::randu<Real>(g, {16}, -0.2, 0.2);
        Wq1_ = sdetail::randn<Real>(g, {16, 16}, 0.25);
        Wk1_ = sdetail::randn<Real>(g, {16, 16}, 0.25);
        Wv1_ = sdetail::randn<Real>(g, {16, 16}, 0.25);
        Wo1_ = sdetail::randn<Real>(g, {16, 16}, 0.25);
        kmid_ = sdetail::randn<Real>(g, {3, 3, 16, 16}, 1.0 / std::sqrt(144.0));
        bmid_ = sdetail::randu<Real>(g, {16}, -0.2, 0.2);
        kup_ = sdetail::randn<Real>(g, {3, 3, 16, 12}, 1.0 / std::sqrt(144.0));
        bup_ = sdetail::randu<Real>(g, {12}, -0.2, 0.2);
        Wq2_ = sdetail::randn<Real>(g, {12, 16}, 0.25);
        Wk2_ = sdetail::randn<Real>(g, {16, 16}, 0.25);
        Wv2_ = sdetail::randn<Real>(g, {16, 16}, 0.25);
        Wo2_ = sdetail::randn<Real>(g, {16, 12}, 0.25);
        kout_ = sdetail::randn<Real>(g, {1, 1, 12, 4}, 0.5 / std::sqrt(12.0));
        bout_ = sdetail::randu<Real>(g, {4}, -0.05, 0.05);

        // DDPM-style schedule over 10 steps
        betas_.resize(kTimesteps);
        alpha_bar_.resize(kTimesteps);
        double ab = 1.0;
        for (int t = 0; t < kTimesteps; ++t) {
            betas_[t] = 0.03 + (0.22 - 0.03) * t / (kTimesteps - 1);
            ab *= 1.0 - betas_[t];
            alpha_bar_[t] = ab;
        }
    }

    int timesteps() const override { return kTimesteps; }
    std::vector<std::string> attention_layers() const override { return {"attn1", "attn2"}; }
    std::vector<std::string> feature_layers() const override { return {"down1", "up1"}; }

    Taps taps_on(ad::Tape<Real>& tape, ad::Var cond_img, const Tensor<Real>& noisy_latent,
                 int timestep) const override {
        auto full = forward_full(tape, cond_img, noisy_latent, timestep);
        return std::move(full.taps);
    }

    Tensor<Real> noise_latent(const Tensor<Real>& z0, int timestep, Pcg32& rng) const override {
        check_timestep(timestep);
        if (z0.shape != std::vector<int>{8, 8, 4}) throw ShapeError("noise_latent expects (8,8,4)");
        const Real a = static_cast<Real>(std::sqrt(alpha_bar_[static_cast<size_t>(timestep)]));
        const Real b = static_cast<Real>(std::sqrt(1.0 - alpha_bar_[static_cast<size_t>(timestep)]));
        Tensor<Real> zt(z0.shape);
        for (size_t i = 0; i < zt.data.size(); ++i)
            zt.data[i] = a * z0.data[i] + b * static_cast<Real>(rng.normal());
        return zt;
    }

    Tensor<Real> generate(const Tensor<Real>& cond_img, const Tensor<Real>& noisy_latent,
                          int timestep) const override {
        ad::Tape<Real> tape;
        ad::Var c = tape.input(cond_img);
        auto full = forward_full(tape, c, noisy_latent, timestep);
        Tensor<Real> out = tape.value(full.out_latent);
        // rescale to the incoming latent's magnitude (standard diffusion
        // latent rescaling): conditioning steers content, not energy, so
        // downstream decode magnitudes are comparable across conditionings
        Real n_in = 0, n_out = 0;
        for (Real v : noisy_latent.data) n_in += v * v;
        for (Real v : out.data) n_out += v * v;
        if (n_out > Real(0))
            for (auto& v : out.data) v *= std::sqrt(n_in / n_out);
        return out;
    }

    Tensor<Real> render_identity(const Tensor<Real>& cond_img) const override {
        Tensor<Real> c = embed(*cond_, cond_img);
        // undo the conditioning encoder's rotation, then project back through
        // the shared stem: rows of L are an orthonormal basis, so L^T (R^T c)
        // recovers the low-frequency image component the embedding carries
        const Tensor<Real>& R = cond_->rotation();
        const Tensor<Real>& L = cond_->stem().L;
        const int d = cond_->dim();
        Tensor<Real> w({d});
        for (int i = 0; i < d; ++i) {
            Real acc = 0;
            for (int k = 0; k < d; ++k) acc += R.at(k, i) * c.data[static_cast<size_t>(k)];
            w.data[static_cast<size_t>(i)] = acc;
        }
        const int n = sdetail::kImageSize;
        Tensor<Real> img({n, n, 3});
        for (int k = 0; k < d; ++k) {
            const Real wk = w.data[static_cast<size_t>(k)];
            const Real* row = &L.data[static_cast<size_t>(k) * img.numel()];
            for (long i = 0; i < img.numel(); ++i) img.data[static_cast<size_t>(i)] += wk * row[i];
        }
        for (auto& v : img.data) v = std::clamp(Real(0.5) + kRenderGain * v, Real(0), Real(1));
        return img;
    }

    const SurrogateEncoder<Real>& conditioning_encoder() const { return *cond_; }

    static constexpr int kTimesteps = 10;
    static constexpr Real kRenderGain = Real(2.5);

private:
    struct FullForward {
        Taps taps;
        ad::Var out_latent;
    };

    void check_timestep(int t) const {
        if (t < 0 || t >= kTimesteps) throw ConfigError("timestep out of range [0,10)");
    }

    FullForward forward_full(ad::Tape<Real>& tape, ad::Var cond_img,
                             const Tensor<Real>& noisy_latent, int timestep) const {
        check_timestep(timestep);
        if (noisy_latent.shape != std::vector<int>{8, 8, 4})
            throw ShapeError("backbone expects an (8,8,4) noisy latent");
        if (!noisy_latent.all_finite()) throw NumericError("backbone: non-finite noisy latent");

        // conditioning tokens from the backbone's own encoder
        ad::Var c = cond_->embed_on(tape, cond_img);
        ad::Var tokens = tape.reshape(tape.add_const(tape.matmul_const_l(Wtok_, c), btok_), {4, 16});

        ad::Var zt = tape.input(noisy_latent);
        ad::Var h0 = tape.tanh_(tape.add_const(tape.conv2d(zt, kz_, bz_, 1, 1),
                                               timestep_bias(8, 8, 16, timestep)));
        ad::Var down1 = tape.avgpool(h0, 2);  // 4x4x16, first feature tap

        // cross-attention at 4x4
        ad::Var K1 = tape.matmul_const_r(tokens, Wk1_);  // (4,16)
        ad::Var V1 = tape.matmul_const_r(tokens, Wv1_);
        ad::Var Q1 = tape.matmul_const_r(tape.reshape(down1, {16, 16}), Wq1_);
        ad::Var S1 = tape.softmax_rows(tape.scale(tape.matmul_nt(Q1, K1), Real(0.25)));
        ad::Var A1 = tape.matmul_const_r(tape.matmul(S1, V1), Wo1_);
        ad::Var h1 = tape.add(down1, tape.reshape(A1, {4, 4, 16}));

        ad::Var h2 = tape.tanh_(tape.conv2d(h1, kmid_, bmid_, 1, 1));   // 4x4x16
        ad::Var up = tape.upsample_bilinear(h2, 2);                      // 8x8x16
        ad::Var h3 = tape.tanh_(tape.conv2d(up, kup_, bup_, 1, 1));      // 8x8x12, last up tap

        // cross-attention at 8x8
        ad::Var K2 = tape.matmul_const_r(tokens, Wk2_);
        ad::Var V2 = tape.matmul_const_r(tokens, Wv2_);
        ad::Var Q2 = tape.matmul_const_r(tape.reshape(h3, {64, 12}), Wq2_);
        ad::Var S2 = tape.softmax_rows(tape.scale(tape.matmul_nt(Q2, K2), Real(0.25)));
        ad::Var A2 = tape.matmul_const_r(tape.matmul(S2, V2), Wo2_);
        ad::Var h3b = tape.add(h3, tape.reshape(A2, {8, 8, 12}));

        ad::Var out = tape.add(tape.conv2d(h3b, kout_, bout_, 1, 0), tape.scale(zt, Real(0.5)));

        FullForward f;
        f.taps.attention.push_back({"attn1", K1, V1});
        f.taps.attention.push_back({"attn2", K2, V2});
        f.taps.features.push_back({"down1", down1});
        f.taps.features.push_back({"up1", h3});
        f.out_latent = out;
        return f;
    }

    Tensor<Real> timestep_bias(int h, int w, int ch, int t) const {
        // sinusoidal embedding broadcast as per-channel bias
        Tensor<Real> bias({h, w, ch});
        for (int c = 0; c < ch; ++c) {
            double freq = std::pow(100.0, static_cast<double>(c / 2) / (ch / 2));
            double v = (c % 2 == 0) ? std::sin(t / freq * 4.0) : std::cos(t / freq * 4.0);
            Real rv = static_cast<Real>(0.3 * v);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) bias.at(y, x, c) = rv;
        }
        return bias;
    }

    std::shared_ptr<SurrogateEncoder<Real>> cond_;
    Tensor<Real> Wtok_, btok_, kz_, bz_;
    Tensor<Real> Wq1_, Wk1_, Wv1_, Wo1_, kmid_, bmid_, kup_, bup_;
    Tensor<Real> Wq2_, Wk2_, Wv2_, Wo2_, kout_, bout_;
    std::vector<double> betas_, alpha_bar_;
};

// ---- perceptual metric --------------------------------------------------------

/// Multi-scale feature distance with a per-pixel map. Features are seeded
/// 3x3 convs at three scales; squared feature differences are averaged over
/// channels, upsampled to image resolution, summed, and squashed through
/// tanh into [0,1).
template <typename Real>
class SurrogatePerceptual final : public PerceptualMetric<Real> {
public:
    explicit SurrogatePerceptual(uint64_t bundle_seed) {
        Pcg32 g = stream_for(bundle_seed, "perceptual");
        for (int s = 0; s < 3; ++s) {
            k_[s] = sdetail::randn<Real>(g, {3, 3, 3, 6}, 1.4 / std::sqrt(27.0));
            b_[s] = sdetail::randu<Real>(g, {6}, -0.2, 0.2);
        }
    }

    std::pair<Real, Tensor<Real>> distance(const Tensor<Real>& a,
                                           const Tensor<Real>& b) const override {
        require_image(a);
        a.require_same(b, "perceptual distance");
        const int n = a.dim(0);
        Tensor<Real> acc({n, n});
        int scale = 1;
        for (int s = 0; s < 3; ++s) {
            Tensor<Real> as = scale == 1 ? a : resample_area(a, n / scale, n / scale);
            Tensor<Real> bs = scale == 1 ? b : resample_area(b, n / scale, n / scale);
            Tensor<Real> fa = sdetail::conv2d_plain(as, k_[s], b_[s], 1, 1);
            Tensor<Real> fb = sdetail::conv2d_plain(bs, k_[s], b_[s], 1, 1);
            const int hs = fa.dim(0), ws = fa.dim(1), cs = fa.dim(2);
            Tensor<Real> d({hs, ws});
            for (int y = 0; y < hs; ++y)
                for (int x = 0; x < ws; ++x) {
                    Real m = 0;
                    for (int c = 0; c < cs; ++c) {
                        Real dv = std::tanh(fa.at(y, x, c)) - std::tanh(fb.at(y, x, c));
                        m += dv * dv;
                    }
                    d.at(y, x) = m / Real(cs);
                }
            Tensor<Real> dup = scale == 1 ? d : upsample_plane(d, n);
            acc += dup;
            scale *= 2;
        }
        Tensor<Real> map({n, n});
        Real mean = 0;
        for (long i = 0; i < acc.numel(); ++i) {
            Real v = std::tanh(kMapGain * acc.data[static_cast<size_t>(i)]);
            map.data[static_cast<size_t>(i)] = v;
            mean += v;
        }
        mean /= Real(acc.numel());
        return {mean, std::move(map)};
    }

    static constexpr Real kMapGain = Real(60);

private:
    static Tensor<Real> upsample_plane(const Tensor<Real>& p, int n) {
        Tensor<Real> p3({p.dim(0), p.dim(1), 1});
        p3.data = p.data;
        // route through the shared bilinear resampler to keep one sampling rule
        Tensor<Real> img({p.dim(0), p.dim(1), 3});
        for (int y = 0; y < p.dim(0); ++y)
            for (int x = 0; x < p.dim(1); ++x)
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = p.at(y, x);
        Tensor<Real> up = resample_bilinear(img, n, n);
        Tensor<Real> out({n, n});
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) out.at(y, x) = up.at(y, x, 0);
        return out;
    }

    Tensor<Real> k_[3], b_[3];
};

// ---- face parser --------------------------------------------------------------

/// Geometric stand-in for a parsing network: biometric components are the
/// dark compact regions inside the central face ellipse, thresholded
/// relative to local statistics.
template <typename Real>
class SurrogateParser final : public FaceParser<Real> {
public:
    SpatialMask<Real> parse(const Tensor<Real>& img) const override {
        require_image(img);
        const int h = img.dim(0), w = img.dim(1);
        Tensor<Real> lum = luminance(img);
        const double cy = h / 2.0, cx = w / 2.0;
        const double ry = 0.42 * h, rx = 0.33 * w;
        double mean = 0, m2 = 0;
        long count = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double dy = (y - cy) / ry, dx = (x - cx) / rx;
                if (dy * dy + dx * dx <= 1.0) {
                    mean += lum.at(y, x);
                    m2 += lum.at(y, x) * lum.at(y, x);
                    ++count;
                }
            }
        Tensor<Real> mask({h, w}, Real(0));
        if (count > 0) {
            mean /= count;
            double var = std::max(0.0, m2 / count - mean * mean);
            double thr = mean - std::max(0.5 * std::sqrt(var), 0.03);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double dy = (y - cy) / ry, dx = (x - cx) / rx;
                    if (dy * dy + dx * dx <= 1.0 && lum.at(y, x) < thr) mask.at(y, x) = Real(1);
                }
        }
        return SpatialMask<Real>(MaskKind::semantic, std::move(mask));
    }
};

// ---- bundle assembly ------------------------------------------------------------

template <typename Real>
VictimBundle<Real> make_surrogate_bundle(uint64_t seed, int attack_encoder_count = 2,
                                         int embedding_dim = 32) {
    if (attack_encoder_count < 1) throw ConfigError("bundle needs at least one attack encoder");
    auto stem = EncoderStem<Real>::build(seed, embedding_dim, sdetail::kImageSize);
    VictimBundle<Real> b;
    b.seed = seed;
    b.detector = std::make_shared<SurrogateDetector<Real>>(seed);
    for (int k = 0; k < attack_encoder_count; ++k)
        b.attack_encoders.push_back(std::make_shared<SurrogateEncoder<Real>>(
            seed, "attack" + std::to_string(k), embedding_dim, stem));
    b.eval_encoder = std::make_shared<SurrogateEncoder<Real>>(seed, "eval", embedding_dim, stem);
    auto cond = std::make_shared<SurrogateEncoder<Real>>(seed, "cond", embedding_dim, stem);
    b.backbone = std::make_shared<SurrogateBackbone<Real>>(seed, cond);
    b.codec = std::make_shared<SurrogateCodec<Real>>(seed);
    b.perceptual = std::make_shared<SurrogatePerceptual<Real>>(seed);
    b.parser = std::make_shared<SurrogateParser<Real>>();
    b.validate();
    return b;
}

}  // namespace voidkit::victim
