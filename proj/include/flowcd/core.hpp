// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "flowcd/tensor.hpp"

namespace flowcd {

/// RGB image, values in [0,1], stored planar (3,H,W). Spatial dims must be
/// >= 16 and divisible by 8 so the stride-8 encoders stay well-defined.
struct Image {
    Tensor data;

    Image() = default;
    explicit Image(Tensor t);
    static Image blank(int height, int width, double fill = 0.0);

    int height() const { return data.size(1); }
    int width() const { return data.size(2); }
    double& at(int y, int x, int c) { return data.at(c, y, x); }
    double at(int y, int x, int c) const { return data.at(c, y, x); }

    void validate() const;
};

/// Dense per-pixel displacement, channel 0 horizontal (u), channel 1 vertical (v).
struct FlowField {
    Tensor data; // (2,H,W)

    FlowField() = default;
    explicit FlowField(Tensor t);
    static FlowField zero(int height, int width);

    int height() const { return data.size(1); }
    int width() const { return data.size(2); }
    double& u(int y, int x) { return data.at(0, y, x); }
    double u(int y, int x) const { return data.at(0, y, x); }
    double& v(int y, int x) { return data.at(1, y, x); }
    double v(int y, int x) const { return data.at(1, y, x); }

    void validate() const;
};

struct ChangeMask {
    enum class Kind { ground_truth, prediction };

    Tensor data; // (1,H,W)
    Kind kind = Kind::prediction;

    ChangeMask() = default;
    ChangeMask(Tensor t, Kind k);
    static ChangeMask zeros(int height, int width, Kind k = Kind::ground_truth);

    int height() const { return data.size(1); }
    int width() const { return data.size(2); }
    double& at(int y, int x) { return data.at(0, y, x); }
    double at(int y, int x) const { return data.at(0, y, x); }

    void validate() const;
};

struct BitemporalSample {
    Image t0;
    Image t1;
    FlowField flow_label;
    ChangeMask change_label;
    std::string id;

    void validate() const;
};

/// Direction-to-hue, magnitude-to-saturation color coding; zero flow is white.
struct FlowColorCode {
    Tensor data; // (3,H,W) in [0,1]
};

/// Per-pixel Euclidean magnitude sqrt(u^2+v^2); rejects non-finite fields.
Tensor flow_magnitude(const FlowField& f);

/// Color wheel rendering of a flow field. `max_magnitude <= 0` selects
/// auto-normalization by the field's own maximum; larger magnitudes saturate.
FlowColorCode flow_to_color(const FlowField& f, double max_magnitude = 0.0);

/// Threshold in (0,1); ties (value == threshold) go to 1.
ChangeMask binarize(const ChangeMask& m, double threshold);

} // namespace flowcd
