#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "voidkit/core/tensor.hpp"

namespace voidkit {

/// 8-bit external form of an image or mask plane.
struct ByteImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;  // row-major, channel fastest

    long numel() const { return static_cast<long>(pixels.size()); }
};

template <typename Real>
void require_image(const Tensor<Real>& img) {
    if (img.rank() != 3 || img.dim(2) != 3) throw ShapeError("expected (H,W,3) image tensor");
    if (img.dim(0) < 8 || img.dim(1) < 8) throw ShapeError("image sides must be >= 8");
}

inline uint8_t quantize_value(double v) {
    long k = std::lround(v * 255.0);
    if (k < 0) k = 0;
    if (k > 255) k = 255;
    return static_cast<uint8_t>(k);
}

/// v -> round(v*255). Inverse maps k -> k/255.
template <typename Real>
ByteImage quantize_u8(const Tensor<Real>& img) {
    require_image(img);
    ByteImage out;
    out.height = img.dim(0);
    out.width = img.dim(1);
    out.channels = 3;
    out.pixels.resize(img.data.size());
    for (size_t i = 0; i < img.data.size(); ++i)
        out.pixels[i] = quantize_value(static_cast<double>(img.data[i]));
    return out;
}

template <typename Real>
Tensor<Real> dequantize_u8(const ByteImage& b) {
    Tensor<Real> img({b.height, b.width, b.channels});
    for (size_t i = 0; i < b.pixels.size(); ++i)
        img.data[i] = Real(b.pixels[i]) / Real(255);
    return img;
}

/// Snap to the 8-bit grid: what a PNG round trip does to pixel values.
template <typename Real>
Tensor<Real> byte_align(const Tensor<Real>& img) {
    return dequantize_u8<Real>(quantize_u8(img));
}

/// Elementwise clamp of x into [center - eps, center + eps] intersected
/// with [0,1].
template <typename Real>
Tensor<Real> project_linf(const Tensor<Real>& x, const Tensor<Real>& center, Real epsilon) {
    x.require_same(center, "project_linf");
    Tensor<Real> out = x;
    for (size_t i = 0; i < out.data.size(); ++i) {
        Real lo = std::max(Real(0), center.data[i] - epsilon);
        Real hi = std::min(Real(1), center.data[i] + epsilon);
        out.data[i] = std::min(std::max(out.data[i], lo), hi);
    }
    return out;
}

template <typename Real>
Tensor<Real> clamp01(const Tensor<Real>& x) {
    Tensor<Real> out = x;
    for (auto& v : out.data)
        v = std::min(std::max(v, Real(0)), Real(1));
    return out;
}

// --- resampling ------------------------------------------------------------

/// Area-averaging resample of a single-plane (H,W) or multi-channel (H,W,C)
/// tensor. Exact box overlap, so constants stay constant and total mass is
/// preserved up to the scale factor. Works for any size pair.
template <typename Real>
Tensor<Real> resample_area(const Tensor<Real>& src, int th, int tw) {
    if (th <= 0 || tw <= 0) throw ShapeError("resample_area: target dims must be positive");
    const int sh = src.dim(0), sw = src.dim(1);
    const int ch = src.rank() == 3 ? src.dim(2) : 1;
    std::vector<int> tshape = src.rank() == 3 ? std::vector<int>{th, tw, ch}
                                              : std::vector<int>{th, tw};
    Tensor<Real> out(tshape);
    const double ry = double(sh) / th, rx = double(sw) / tw;
    for (int oy = 0; oy < th; ++oy) {
        double y0 = oy * ry, y1 = (oy + 1) * ry;
        int iy0 = static_cast<int>(std::floor(y0));
        int iy1 = std::min(sh, static_cast<int>(std::ceil(y1)));
        for (int ox = 0; ox < tw; ++ox) {
            double x0 = ox * rx, x1 = (ox + 1) * rx;
            int ix0 = static_cast<int>(std::floor(x0));
            int ix1 = std::min(sw, static_cast<int>(std::ceil(x1)));
            for (int c = 0; c < ch; ++c) {
                double acc = 0.0, area = 0.0;
                for (int iy = iy0; iy < iy1; ++iy) {
                    double wy = std::min(y1, double(iy + 1)) - std::max(y0, double(iy));
                    for (int ix = ix0; ix < ix1; ++ix) {
                        double wx = std::min(x1, double(ix + 1)) - std::max(x0, double(ix));
                        double w = wy * wx;
                        size_t idx = (static_cast<size_t>(iy) * sw + ix) * ch + c;
                        acc += w * static_cast<double>(src.data[idx]);
                        area += w;
                    }
                }
                size_t odx = (static_cast<size_t>(oy) * tw + ox) * ch + c;
                out.data[odx] = Real(acc / area);
            }
        }
    }
    return out;
}

/// Bilinear resample with half-pixel centers; clamped at borders.
template <typename Real>
Tensor<Real> resample_bilinear(const Tensor<Real>& src, int th, int tw) {
    if (th <= 0 || tw <= 0) throw ShapeError("resample_bilinear: target dims must be positive");
    const int sh = src.dim(0), sw = src.dim(1);
    const int ch = src.rank() == 3 ? src.dim(2) : 1;
    std::vector<int> tshape = src.rank() == 3 ? std::vector<int>{th, tw, ch}
                                              : std::vector<int>{th, tw};
    Tensor<Real> out(tshape);
    const double sy = double(sh) / th, sx = double(sw) / tw;
    for (int oy = 0; oy < th; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int ya = std::clamp(y0, 0, sh - 1), yb = std::clamp(y0 + 1, 0, sh - 1);
        for (int ox = 0; ox < tw; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int xa = std::clamp(x0, 0, sw - 1), xb = std::clamp(x0 + 1, 0, sw - 1);
            for (int c = 0; c < ch; ++c) {
                auto px = [&](int y, int x) {
                    return static_cast<double>(src.data[(static_cast<size_t>(y) * sw + x) * ch + c]);
                };
                double top = px(ya, xa) * (1 - wx) + px(ya, xb) * wx;
                double bot = px(yb, xa) * (1 - wx) + px(yb, xb) * wx;
                out.data[(static_cast<size_t>(oy) * tw + ox) * ch + c] = Real(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

/// Crop [y0,y0+h) x [x0,x0+w) with bilinear subpixel sampling, then resample
/// to (out_h, out_w). Coordinates may be fractional; samples are clamped to
/// the image border.
template <typename Real>
Tensor<Real> crop_resize_bilinear(const Tensor<Real>& src, double cy, double cx, double h,
                                  double w, int out_h, int out_w) {
    require_image(src);
    const int sh = src.dim(0), sw = src.dim(1);
    Tensor<Real> out({out_h, out_w, 3});
    for (int oy = 0; oy < out_h; ++oy) {
        double fy = cy - h / 2 + (oy + 0.5) * h / out_h - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int ya = std::clamp(y0, 0, sh - 1), yb = std::clamp(y0 + 1, 0, sh - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            double fx = cx - w / 2 + (ox + 0.5) * w / out_w - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int xa = std::clamp(x0, 0, sw - 1), xb = std::clamp(x0 + 1, 0, sw - 1);
            for (int c = 0; c < 3; ++c) {
                auto px = [&](int y, int x) {
                    return static_cast<double>(src.data[(static_cast<size_t>(y) * sw + x) * 3 + c]);
                };
                double top = px(ya, xa) * (1 - wx) + px(ya, xb) * wx;
                double bot = px(yb, xa) * (1 - wx) + px(yb, xb) * wx;
                out.data[(static_cast<size_t>(oy) * out_w + ox) * 3 + c] =
                    Real(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

/// Separable Gaussian blur, kernel truncated at 3*sigma, unit-sum normalized,
/// reflection padding. Output values stay inside [min(src), max(src)].
template <typename Real>
Tensor<Real> gaussian_blur(const Tensor<Real>& src, double sigma) {
    if (!(sigma > 0)) throw ConfigError("gaussian_blur: sigma must be > 0");
    const int h = src.dim(0), w = src.dim(1);
    if (src.rank() != 2) throw ShapeError("gaussian_blur expects a (H,W) plane");
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double ksum = 0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + radius)] = v;
        ksum += v;
    }
    for (auto& v : k) v /= ksum;

    auto reflect = [](int i, int n) {
        // reflect without repeating the edge sample: n==1 degenerates to 0
        if (n == 1) return 0;
        int period = 2 * n - 2;
        i = ((i % period) + period) % period;
        return i < n ? i : period - i;
    };

    Tensor<Real> tmp({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[static_cast<size_t>(i + radius)] *
                       static_cast<double>(src.at(y, reflect(x + i, w)));
            tmp.at(y, x) = Real(acc);
        }
    Tensor<Real> out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[static_cast<size_t>(i + radius)] *
                       static_cast<double>(tmp.at(reflect(y + i, h), x));
            out.at(y, x) = Real(acc);
        }
    return out;
}

template <typename Real>
Tensor<Real> luminance(const Tensor<Real>& img) {
    require_image(img);
    Tensor<Real> out({img.dim(0), img.dim(1)});
    for (int y = 0; y < img.dim(0); ++y)
        for (int x = 0; x < img.dim(1); ++x)
            out.at(y, x) = Real(0.299) * img.at(y, x, 0) + Real(0.587) * img.at(y, x, 1) +
                           Real(0.114) * img.at(y, x, 2);
    return out;
}

}  // namespace voidkit
