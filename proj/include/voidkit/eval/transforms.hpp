#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "voidkit/core/image.hpp"
#include "voidkit/core/types.hpp"
#include "voidkit/io/jpeg_io.hpp"

// Lossy operations an adversary might apply to a protected image before
// feeding it to a swap pipeline. Every transform is deterministic given its
// parameters; the suite reports a failed codec as a row-level flag instead of
// aborting the batch.

namespace voidkit::eval {

/// Reduce each channel value to b bits: floor(v * (2^b - 1)) / (2^b - 1).
/// At b = 8 this is the identity on 8-bit-quantized inputs.
template <typename Real>
Tensor<Real> bit_reduce(const Tensor<Real>& img, int bits) {
    if (bits < 1 || bits > 8) throw ConfigError("bit_reduce: depth must be in [1,8]");
    const double scale = static_cast<double>((1 << bits) - 1);
    Tensor<Real> out = img;
    for (auto& v : out.data)
        v = Real(std::floor(static_cast<double>(v) * scale) / scale);
    return out;
}

/// Downscale by factor r (bilinear), then upscale back to the original shape.
template <typename Real>
Tensor<Real> resize_downup(const Tensor<Real>& img, double r) {
    if (!(r > 0.0) || r > 1.0) throw ConfigError("resize_downup: factor must be in (0,1]");
    require_image(img);
    const int h = img.dim(0), w = img.dim(1);
    const int dh = std::max(1, static_cast<int>(std::lround(h * r)));
    const int dw = std::max(1, static_cast<int>(std::lround(w * r)));
    if (dh == h && dw == w) return img;
    Tensor<Real> down = resample_bilinear(img, dh, dw);
    return resample_bilinear(down, h, w);
}

template <typename Real>
struct TransformResult {
    std::string label;
    Tensor<Real> image;
    bool ok = true;
    std::string error;  // set when ok is false; the suite continues
};

/// The robustness suite: JPEG qualities {50,70,90}, bit depths {3,5,8},
/// resize factors {0.5,0.75}. Labels are stable and documented in the README.
template <typename Real>
std::vector<TransformResult<Real>> transform_suite(const Tensor<Real>& img) {
    std::vector<TransformResult<Real>> out;
    auto add = [&](const std::string& label, auto&& fn) {
        TransformResult<Real> r;
        r.label = label;
        try {
            r.image = fn();
        } catch (const std::runtime_error& e) {
            r.ok = false;
            r.error = e.what();
        }
        out.push_back(std::move(r));
    };
    for (int q : {50, 70, 90})
        add("jpeg_q" + std::to_string(q), [&] { return io::jpeg_roundtrip(img, q); });
    for (int b : {3, 5, 8})
        add("bits_" + std::to_string(b), [&] { return bit_reduce(img, b); });
    add("resize_50", [&] { return resize_downup(img, 0.5); });
    add("resize_75", [&] { return resize_downup(img, 0.75); });
    return out;
}

/// Labels in suite order, prefixed by the untransformed row's label.
inline std::vector<std::string> transform_labels() {
    return {"none",   "jpeg_q50", "jpeg_q70", "jpeg_q90", "bits_3",
            "bits_5", "bits_8",   "resize_50", "resize_75"};
}

}  // namespace voidkit::eval
