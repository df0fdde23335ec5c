#pragma once

#include <algorithm>
#include <string>

#include "voidkit/io/jpeg_io.hpp"
#include "voidkit/io/png_io.hpp"

// Extension-dispatched image loading into unit-range tensors. PNG is the
// native output format; JPEG is accepted on input.

namespace voidkit::io {

inline std::string lower_ext(const std::string& path) {
    size_t dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext;
}

template <typename Real>
Tensor<Real> read_image_file(const std::string& path) {
    std::string ext = lower_ext(path);
    if (ext == "png") return dequantize_u8<Real>(read_png_file(path));
    if (ext == "jpg" || ext == "jpeg") return dequantize_u8<Real>(read_jpeg_file(path));
    throw ConfigError("unsupported image extension: " + path);
}

template <typename Real>
void write_image_png(const std::string& path, const Tensor<Real>& img) {
    write_png_file(path, quantize_u8(img));
}

}  // namespace voidkit::io
