#include "cvid/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace cvid {

namespace {

struct FileCloser {
    FILE* fp = nullptr;
    ~FileCloser() {
        if (fp) std::fclose(fp);
    }
};

// Reads any 8/16-bit gray/palette/rgb/rgba PNG normalized to 8-bit rows of
// `channels` (1 or 3) values per pixel.
void read_png(const std::string& path, int channels, std::vector<uint8_t>& pixels, int64_t& h,
              int64_t& w) {
    FileCloser fc;
    fc.fp = std::fopen(path.c_str(), "rb");
    if (!fc.fp) throw std::runtime_error("cannot open png: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    std::vector<png_bytep> rows;
    bool failed = false;
    if (setjmp(png_jmpbuf(png))) failed = true;
    if (!failed) {
        png_init_io(png, fc.fp);
        png_read_info(png, info);

        png_set_strip_16(png);
        png_set_packing(png);
        png_set_expand(png);
        png_set_strip_alpha(png);
        if (channels == 3)
            png_set_gray_to_rgb(png);
        else
            png_set_rgb_to_gray_fixed(png, 1, -1, -1);
        png_read_update_info(png, info);

        h = png_get_image_height(png, info);
        w = png_get_image_width(png, info);
        size_t rowbytes = png_get_rowbytes(png, info);
        if (rowbytes != (size_t)(w * channels)) failed = true;
        if (!failed) {
            pixels.resize((size_t)h * w * channels);
            rows.resize(h);
            for (int64_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * channels;
            png_read_image(png, rows.data());
            png_read_end(png, nullptr);
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    if (failed) throw std::runtime_error("failed to decode png: " + path);
}

void write_png(const std::string& path, int channels, const std::vector<uint8_t>& pixels,
               int64_t h, int64_t w) {
    std::string tmp = path + ".tmp";
    {
        FileCloser fc;
        fc.fp = std::fopen(tmp.c_str(), "wb");
        if (!fc.fp) throw std::runtime_error("cannot open for write: " + tmp);

        png_structp png =
            png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        if (!png) throw std::runtime_error("png_create_write_struct failed");
        png_infop info = png_create_info_struct(png);
        if (!info) {
            png_destroy_write_struct(&png, nullptr);
            throw std::runtime_error("png_create_info_struct failed");
        }
        std::vector<png_bytep> rows(h);
        bool failed = false;
        if (setjmp(png_jmpbuf(png))) failed = true;
        if (!failed) {
            png_init_io(png, fc.fp);
            png_set_IHDR(png, info, (png_uint_32)w, (png_uint_32)h, 8,
                         channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                         PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                         PNG_FILTER_TYPE_DEFAULT);
            png_write_info(png, info);
            for (int64_t y = 0; y < h; ++y)
                rows[y] = const_cast<png_bytep>(pixels.data() + y * w * channels);
            png_write_image(png, rows.data());
            png_write_end(png, nullptr);
        }
        png_destroy_write_struct(&png, &info);
        if (failed) {
            std::remove(tmp.c_str());
            throw std::runtime_error("failed to encode png: " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw std::runtime_error("rename failed for " + path + ": " + ec.message());
    }
}

uint8_t quantize(double v) {
    if (v <= 0.0) return 0;
    if (v >= 1.0) return 255;
    return (uint8_t)std::lround(v * 255.0);
}

}  // namespace

Tensor read_png_gray(const std::string& path) {
    std::vector<uint8_t> px;
    int64_t h = 0, w = 0;
    read_png(path, 1, px, h, w);
    Tensor t({h, w});
    for (int64_t i = 0; i < h * w; ++i) t.data[i] = px[i] / 255.0;
    return t;
}

Tensor read_png_rgb(const std::string& path) {
    std::vector<uint8_t> px;
    int64_t h = 0, w = 0;
    read_png(path, 3, px, h, w);
    Tensor t({3, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                t.data[(c * h + y) * w + x] = px[(y * w + x) * 3 + c] / 255.0;
    return t;
}

void write_png_gray(const std::string& path, const Tensor& img) {
    if (img.ndim() != 2) throw std::invalid_argument("write_png_gray: [H,W] tensor required");
    int64_t h = img.dim(0), w = img.dim(1);
    std::vector<uint8_t> px((size_t)h * w);
    for (int64_t i = 0; i < h * w; ++i) px[i] = quantize(img.data[i]);
    write_png(path, 1, px, h, w);
}

void write_png_rgb(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("write_png_rgb: [3,H,W] tensor required");
    int64_t h = img.dim(1), w = img.dim(2);
    std::vector<uint8_t> px((size_t)h * w * 3);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                px[(y * w + x) * 3 + c] = quantize(img.data[(c * h + y) * w + x]);
    write_png(path, 3, px, h, w);
}

std::string indexed_path(const std::string& dir, const std::string& prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "_%04d.png", i);
    return dir + "/" + prefix + buf;
}

}  // namespace cvid
