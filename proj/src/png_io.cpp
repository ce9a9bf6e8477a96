#include "codebrain/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace codebrain::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw std::runtime_error("png: " + what + ": " + path);
}

}  // namespace

void write_png_gray16(const std::string& path, const Tensor& img) {
    if (img.ndim() != 2) throw std::invalid_argument("write_png_gray16 expects an (H,W) tensor");
    const int h = img.dim(0), w = img.dim(1);
    if (h <= 0 || w <= 0) throw std::invalid_argument("write_png_gray16: empty image");

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) fail(path, "cannot open for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail(path, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        fail(path, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(path, "write error");
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 16,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    // PNG stores 16-bit samples big-endian; encode rows explicitly.
    std::vector<std::uint8_t> row(static_cast<size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v = img[static_cast<std::int64_t>(y) * w + x];
            v = std::min(1.0, std::max(0.0, v));
            auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
            row[static_cast<size_t>(x) * 2] = static_cast<std::uint8_t>(q >> 8);
            row[static_cast<size_t>(x) * 2 + 1] = static_cast<std::uint8_t>(q & 0xff);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor read_png_gray16(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) fail(path, "cannot open for reading");

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        fail(path, "not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail(path, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        fail(path, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "corrupt or truncated PNG");
    }

    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || depth != 16) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "expected 16-bit grayscale");
    }

    std::vector<std::uint8_t> row(static_cast<size_t>(w) * 2);
    Tensor img({h, w});
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            std::uint16_t q = static_cast<std::uint16_t>(
                (row[static_cast<size_t>(x) * 2] << 8) | row[static_cast<size_t>(x) * 2 + 1]);
            img[static_cast<std::int64_t>(y) * w + x] = static_cast<Real>(q) / 65535.0;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png_rgb8(const std::string& path, const std::vector<std::uint8_t>& rgb, int height,
                    int width) {
    if (static_cast<std::int64_t>(rgb.size()) != 3LL * height * width)
        throw std::invalid_argument("write_png_rgb8: buffer size does not match dimensions");

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) fail(path, "cannot open for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail(path, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        fail(path, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(path, "write error");
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<size_t>(y) * width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace codebrain::io
