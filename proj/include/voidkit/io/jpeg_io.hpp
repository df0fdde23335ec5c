#pragma once

#include <csetjmp>
#include <cstdio>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "voidkit/core/image.hpp"
#include "voidkit/core/types.hpp"

// JPEG codec wrappers over libjpeg. The in-memory round trip backs the
// robustness transform suite; file I/O is a convenience for external inputs.
// libjpeg's default error handler calls exit(); these wrappers convert every
// codec failure into a NumericError via setjmp.

namespace voidkit::io {

namespace jdetail {

struct ErrorTrap {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX] = {0};
};

inline void on_error(j_common_ptr cinfo) {
    auto* trap = reinterpret_cast<ErrorTrap*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, trap->message);
    std::longjmp(trap->jump, 1);
}

}  // namespace jdetail

/// Encode an RGB byte image to JPEG bytes at the given quality (1..100).
inline std::vector<unsigned char> jpeg_encode(const ByteImage& img, int quality) {
    if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must be in [1,100]");
    if (img.channels != 3) throw ShapeError("jpeg_encode expects interleaved RGB");

    jdetail::ErrorTrap trap;
    jpeg_compress_struct cinfo;
    cinfo.err = jpeg_std_error(&trap.mgr);
    trap.mgr.error_exit = jdetail::on_error;

    unsigned char* buf = nullptr;
    unsigned long buf_size = 0;
    if (setjmp(trap.jump)) {
        jpeg_destroy_compress(&cinfo);
        if (buf) free(buf);
        throw NumericError(std::string("jpeg encode failed: ") + trap.message);
    }

    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buf, &buf_size);
    cinfo.image_width = static_cast<JDIMENSION>(img.width);
    cinfo.image_height = static_cast<JDIMENSION>(img.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);

    const size_t stride = static_cast<size_t>(img.width) * 3;
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row =
            const_cast<JSAMPROW>(img.pixels.data() + static_cast<size_t>(cinfo.next_scanline) * stride);
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);

    std::vector<unsigned char> out(buf, buf + buf_size);
    free(buf);
    return out;
}

/// Decode JPEG bytes to an interleaved RGB byte image (grayscale upconverted).
inline ByteImage jpeg_decode(const unsigned char* bytes, size_t size) {
    jdetail::ErrorTrap trap;
    jpeg_decompress_struct cinfo;
    cinfo.err = jpeg_std_error(&trap.mgr);
    trap.mgr.error_exit = jdetail::on_error;

    if (setjmp(trap.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw NumericError(std::string("jpeg decode failed: ") + trap.message);
    }

    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes, static_cast<unsigned long>(size));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);

    ByteImage img;
    img.width = static_cast<int>(cinfo.output_width);
    img.height = static_cast<int>(cinfo.output_height);
    img.channels = 3;
    img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
    const size_t stride = static_cast<size_t>(img.width) * 3;
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.pixels.data() + static_cast<size_t>(cinfo.output_scanline) * stride;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

inline ByteImage jpeg_decode(const std::vector<unsigned char>& bytes) {
    return jpeg_decode(bytes.data(), bytes.size());
}

/// Quantize, JPEG-encode at `quality`, decode, dequantize. The lossy
/// round trip the robustness suite applies to protected images.
template <typename Real>
Tensor<Real> jpeg_roundtrip(const Tensor<Real>& img, int quality) {
    std::vector<unsigned char> bytes = jpeg_encode(quantize_u8(img), quality);
    return dequantize_u8<Real>(jpeg_decode(bytes));
}

inline void write_jpeg_file(const std::string& path, const ByteImage& img, int quality) {
    std::vector<unsigned char> bytes = jpeg_encode(img, quality);
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw ConfigError("cannot open for writing: " + path);
    size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (n != bytes.size()) throw ConfigError("short write: " + path);
}

inline ByteImage read_jpeg_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw ConfigError("cannot open: " + path);
    std::fseek(f, 0, SEEK_END);
    long len = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<unsigned char> bytes(static_cast<size_t>(len));
    size_t n = std::fread(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (n != bytes.size()) throw ConfigError("short read: " + path);
    return jpeg_decode(bytes);
}

}  // namespace voidkit::io
