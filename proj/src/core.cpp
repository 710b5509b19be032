// SPDX-License-Identifier: Apache-2.0
#include "flowcd/core.hpp"

#include <array>
#include <cmath>

namespace flowcd {

Image::Image(Tensor t) : data(std::move(t)) { validate(); }

Image Image::blank(int height, int width, double fill) {
    Image img;
    img.data = Tensor({3, height, width}, fill);
    img.validate();
    return img;
}

void Image::validate() const {
    if (data.dim() != 3 || data.size(0) != 3) throw ValidationError("image: expected (3,H,W) tensor");
    const int h = height(), w = width();
    if (h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0)
        throw ValidationError("image: dims must be >= 16 and divisible by 8");
    for (long i = 0; i < data.numel(); ++i) {
        const double v = data[i];
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("image: values must lie in [0,1]");
    }
}

FlowField::FlowField(Tensor t) : data(std::move(t)) { validate(); }

FlowField FlowField::zero(int height, int width) {
    FlowField f;
    f.data = Tensor({2, height, width});
    return f;
}

void FlowField::validate() const {
    if (data.dim() != 3 || data.size(0) != 2) throw ValidationError("flow: expected (2,H,W) tensor");
    if (!data.all_finite()) throw ValidationError("flow: non-finite values");
}

ChangeMask::ChangeMask(Tensor t, Kind k) : data(std::move(t)), kind(k) { validate(); }

ChangeMask ChangeMask::zeros(int height, int width, Kind k) {
    ChangeMask m;
    m.data = Tensor({1, height, width});
    m.kind = k;
    return m;
}

void ChangeMask::validate() const {
    if (data.dim() != 3 || data.size(0) != 1) throw ValidationError("mask: expected (1,H,W) tensor");
    for (long i = 0; i < data.numel(); ++i) {
        const double v = data[i];
        if (kind == Kind::ground_truth) {
            if (v != 0.0 && v != 1.0) throw ValidationError("mask: ground truth must be binary");
        } else if (!(v >= 0.0 && v <= 1.0)) {
            throw ValidationError("mask: prediction values must lie in [0,1]");
        }
    }
}

void BitemporalSample::validate() const {
    t0.validate();
    t1.validate();
    flow_label.validate();
    change_label.validate();
    const int h = t0.height(), w = t0.width();
    if (t1.height() != h || t1.width() != w || flow_label.height() != h || flow_label.width() != w ||
        change_label.height() != h || change_label.width() != w)
        throw ValidationError("sample: spatial shapes differ between components");
}

Tensor flow_magnitude(const FlowField& f) {
    f.validate();
    const int h = f.height(), w = f.width();
    Tensor out({1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(0, y, x) = std::hypot(f.u(y, x), f.v(y, x));
    return out;
}

namespace {

// Middlebury color wheel: 55 hues over RY/YG/GC/CB/BM/MR arcs.
struct ColorWheel {
    static constexpr int kCols = 55;
    std::array<std::array<double, 3>, kCols> rgb{};

    ColorWheel() {
        const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
        int k = 0;
        for (int i = 0; i < RY; ++i, ++k) rgb[k] = {1.0, static_cast<double>(i) / RY, 0.0};
        for (int i = 0; i < YG; ++i, ++k) rgb[k] = {1.0 - static_cast<double>(i) / YG, 1.0, 0.0};
        for (int i = 0; i < GC; ++i, ++k) rgb[k] = {0.0, 1.0, static_cast<double>(i) / GC};
        for (int i = 0; i < CB; ++i, ++k) rgb[k] = {0.0, 1.0 - static_cast<double>(i) / CB, 1.0};
        for (int i = 0; i < BM; ++i, ++k) rgb[k] = {static_cast<double>(i) / BM, 0.0, 1.0};
        for (int i = 0; i < MR; ++i, ++k) rgb[k] = {1.0, 0.0, 1.0 - static_cast<double>(i) / MR};
    }
};

const ColorWheel& wheel() {
    static const ColorWheel w;
    return w;
}

} // namespace

FlowColorCode flow_to_color(const FlowField& f, double max_magnitude) {
    f.validate();
    if (max_magnitude < 0.0) throw ValidationError("flow_to_color: max_magnitude must be positive or 0 (auto)");
    const int h = f.height(), w = f.width();
    double max_rad = max_magnitude;
    if (max_rad == 0.0) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) max_rad = std::max(max_rad, std::hypot(f.u(y, x), f.v(y, x)));
        if (max_rad == 0.0) max_rad = 1.0; // all-zero field renders white regardless
    }
    FlowColorCode out;
    out.data = Tensor({3, h, w});
    const auto& cw = wheel();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double u = f.u(y, x), v = f.v(y, x);
            const double rad = std::min(std::hypot(u, v) / max_rad, 1.0);
            const double a = std::atan2(-v, -u) / M_PI; // in [-1,1]
            const double fk = (a + 1.0) / 2.0 * (ColorWheel::kCols - 1);
            const int k0 = static_cast<int>(fk) % ColorWheel::kCols;
            const int k1 = (k0 + 1) % ColorWheel::kCols;
            const double t = fk - std::floor(fk);
            for (int c = 0; c < 3; ++c) {
                const double col = (1.0 - t) * cw.rgb[k0][c] + t * cw.rgb[k1][c];
                out.data.at(c, y, x) = 1.0 - rad * (1.0 - col);
            }
        }
    return out;
}

ChangeMask binarize(const ChangeMask& m, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("binarize: threshold must lie in (0,1)");
    m.validate();
    ChangeMask out = ChangeMask::zeros(m.height(), m.width(), ChangeMask::Kind::ground_truth);
    for (long i = 0; i < m.data.numel(); ++i) out.data[i] = m.data[i] >= threshold ? 1.0 : 0.0;
    return out;
}

} // namespace flowcd
