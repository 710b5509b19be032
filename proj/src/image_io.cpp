// SPDX-License-Identifier: Apache-2.0
#include "flowcd/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace flowcd {

namespace {

constexpr float kFloMagic = 202021.25f; // spells "PIEH" in little-endian ASCII

unsigned char quantize(double v) {
    const double c = std::min(std::max(v, 0.0), 1.0);
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

void write_png(const std::string& path, const Tensor& img, int channels) {
    const int h = img.size(1), w = img.size(2);
    std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                buf[(static_cast<std::size_t>(y) * w + x) * channels + c] = quantize(img.at(c, y, x));

    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(w);
    pi.height = static_cast<png_uint_32>(h);
    pi.format = channels == 4 ? PNG_FORMAT_RGBA : (channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY);
    if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
        throw IoError("png write failed: " + path + " (" + pi.message + ")");
}

Tensor read_png(const std::string& path, int channels) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str()))
        throw IoError("png read failed: " + path + " (" + pi.message + ")");
    pi.format = channels == 4 ? PNG_FORMAT_RGBA : (channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY);
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr))
        throw IoError("png decode failed: " + path + " (" + pi.message + ")");
    const int h = static_cast<int>(pi.height), w = static_cast<int>(pi.width);
    Tensor out({channels, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                out.at(c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * channels + c] / 255.0;
    return out;
}

} // namespace

void write_png_rgb(const std::string& path, const Tensor& img) {
    if (img.dim() != 3 || img.size(0) != 3) throw ValidationError("write_png_rgb: expects (3,H,W)");
    write_png(path, img, 3);
}

Tensor read_png_rgb(const std::string& path) { return read_png(path, 3); }

void write_png_gray(const std::string& path, const Tensor& img) {
    if (img.dim() != 3 || img.size(0) != 1) throw ValidationError("write_png_gray: expects (1,H,W)");
    write_png(path, img, 1);
}

Tensor read_png_gray(const std::string& path) { return read_png(path, 1); }

void write_png_rgba(const std::string& path, const Tensor& img) {
    if (img.dim() != 3 || img.size(0) != 4) throw ValidationError("write_png_rgba: expects (4,H,W)");
    write_png(path, img, 4);
}

Tensor read_png_rgba(const std::string& path) { return read_png(path, 4); }

void write_flo(const std::string& path, const FlowField& flow) {
    flow.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    const std::int32_t w = flow.width(), h = flow.height();
    f.write(reinterpret_cast<const char*>(&kFloMagic), 4);
    f.write(reinterpret_cast<const char*>(&w), 4);
    f.write(reinterpret_cast<const char*>(&h), 4);
    std::vector<float> row(static_cast<std::size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            row[static_cast<std::size_t>(x) * 2] = static_cast<float>(flow.u(y, x));
            row[static_cast<std::size_t>(x) * 2 + 1] = static_cast<float>(flow.v(y, x));
        }
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
    }
    if (!f) throw IoError("short write: " + path);
}

FlowField read_flo(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    float magic = 0.0f;
    std::int32_t w = 0, h = 0;
    f.read(reinterpret_cast<char*>(&magic), 4);
    f.read(reinterpret_cast<char*>(&w), 4);
    f.read(reinterpret_cast<char*>(&h), 4);
    if (!f || magic != kFloMagic) throw IoError("not a .flo file (bad magic): " + path);
    if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16) throw IoError("implausible .flo dims: " + path);
    FlowField flow = FlowField::zero(h, w);
    std::vector<float> row(static_cast<std::size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
        if (!f) throw IoError("truncated .flo file: " + path);
        for (int x = 0; x < w; ++x) {
            flow.u(y, x) = row[static_cast<std::size_t>(x) * 2];
            flow.v(y, x) = row[static_cast<std::size_t>(x) * 2 + 1];
        }
    }
    return flow;
}

} // namespace flowcd
