#pragma once

#include <algorithm>
#include <cmath>

#include "voidkit/core/image.hpp"
#include "voidkit/core/rng.hpp"
#include "voidkit/core/tensor.hpp"

// Procedural face-like test images. These are not meant to look human; they
// reproduce the structure the surrogate victim models key on: a large skin
// ellipse on a plain background with dark compact components (brows, eyes,
// nostrils, mouth) inside it. Every parameter is jittered from the seed so a
// corpus has per-image variety while staying byte-deterministic.

namespace voidkit::synth {

struct FaceParams {
    double cy, cx;          // face center
    double ry, rx;          // face radii
    double skin_r, skin_g, skin_b;
    double bg_top, bg_bot;  // background vertical gradient endpoints
    double eye_dy, eye_dx;  // eye offsets from center
    double eye_r;
    double brow_drop;       // how dark the brows/features are
    double mouth_w, mouth_h;
    double tilt;            // slight feature tilt, radians
};

inline FaceParams face_params(uint64_t seed) {
    Pcg32 g = stream_for(seed, "synth-face");
    FaceParams p;
    p.cy = 32.0 + g.uniform(-3.0, 3.0);
    p.cx = 32.0 + g.uniform(-3.0, 3.0);
    p.ry = 22.0 + g.uniform(-2.5, 2.5);
    p.rx = 17.0 + g.uniform(-2.0, 2.0);
    p.skin_r = 0.78 + g.uniform(-0.12, 0.10);
    p.skin_g = 0.62 + g.uniform(-0.12, 0.10);
    p.skin_b = 0.50 + g.uniform(-0.12, 0.10);
    p.bg_top = 0.30 + g.uniform(-0.1, 0.15);
    p.bg_bot = 0.45 + g.uniform(-0.1, 0.15);
    p.eye_dy = 6.5 + g.uniform(-1.0, 1.0);
    p.eye_dx = 7.0 + g.uniform(-1.0, 1.0);
    p.eye_r = 2.4 + g.uniform(-0.4, 0.5);
    p.brow_drop = 0.38 + g.uniform(-0.06, 0.08);
    p.mouth_w = 7.5 + g.uniform(-1.2, 1.5);
    p.mouth_h = 2.2 + g.uniform(-0.4, 0.6);
    p.tilt = g.uniform(-0.06, 0.06);
    return p;
}

namespace detail {
inline double smooth_in(double d) {
    // d <= 0 inside, >= 1 outside; returns coverage in [0,1] with a soft edge
    return std::clamp(1.0 - d, 0.0, 1.0);
}
}  // namespace detail

/// Render a 64x64 RGB face in [0,1], byte-aligned so file round trips are
/// exact from the start.
template <typename Real = double>
Tensor<Real> make_face(uint64_t seed, int size = 64) {
    FaceParams p = face_params(seed);
    const double s = size / 64.0;  // all parameters are tuned at 64px
    Tensor<double> img({size, size, 3});

    auto ellipse = [](double y, double x, double cy, double cx, double ry, double rx) {
        double dy = (y - cy) / ry, dx = (x - cx) / rx;
        return dy * dy + dx * dx;  // <= 1 inside
    };
    const double ct = std::cos(p.tilt), st = std::sin(p.tilt);

    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double fy = y / s, fx = x / s;
            // background gradient
            double tbg = fy / 64.0;
            double r = p.bg_top + (p.bg_bot - p.bg_top) * tbg;
            double gch = r * 0.95;
            double b = r * 1.08;

            // face ellipse with shading toward the rim
            double df = ellipse(fy, fx, p.cy, p.cx, p.ry, p.rx);
            if (df < 1.0) {
                double shade = 1.0 - 0.18 * df;
                r = p.skin_r * shade;
                gch = p.skin_g * shade;
                b = p.skin_b * shade;

                // feature coordinates rotated by the tilt around the center
                double uy = (fy - p.cy) * ct - (fx - p.cx) * st;
                double ux = (fy - p.cy) * st + (fx - p.cx) * ct;

                double dark = 0.0;
                // eyes
                for (int sgn : {-1, 1}) {
                    double de = ellipse(uy, ux, -p.eye_dy + 4.0, sgn * p.eye_dx, p.eye_r, p.eye_r * 1.4);
                    dark = std::max(dark, detail::smooth_in(de) * 0.9);
                    // brows above the eyes
                    double db = ellipse(uy, ux, -p.eye_dy - 0.5, sgn * p.eye_dx, 0.9, p.eye_r * 1.8);
                    dark = std::max(dark, detail::smooth_in(db) * 0.7);
                }
                // nostrils
                for (int sgn : {-1, 1}) {
                    double dn = ellipse(uy, ux, 3.5, sgn * 1.8, 0.9, 0.9);
                    dark = std::max(dark, detail::smooth_in(dn) * 0.55);
                }
                // mouth
                double dm = ellipse(uy, ux, 9.0, 0.0, p.mouth_h, p.mouth_w);
                dark = std::max(dark, detail::smooth_in(dm) * 0.75);

                double drop = p.brow_drop * dark;
                r = std::max(0.05, r - drop);
                gch = std::max(0.04, gch - drop * 1.05);
                b = std::max(0.04, b - drop * 1.0);
            }
            img.at(y, x, 0) = std::clamp(r, 0.0, 1.0);
            img.at(y, x, 1) = std::clamp(gch, 0.0, 1.0);
            img.at(y, x, 2) = std::clamp(b, 0.0, 1.0);
        }
    }

    Tensor<double> aligned = byte_align(img);
    if constexpr (std::is_same_v<Real, double>) {
        return aligned;
    } else {
        Tensor<Real> out(aligned.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = static_cast<Real>(aligned.data[i]);
        return out;
    }
}

}  // namespace voidkit::synth
