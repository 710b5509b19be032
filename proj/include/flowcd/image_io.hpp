// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "flowcd/core.hpp"

namespace flowcd {

// 8-bit PNG at the file boundary, real-valued [0,1] in memory.
void write_png_rgb(const std::string& path, const Tensor& img);  // (3,H,W)
Tensor read_png_rgb(const std::string& path);                    // -> (3,H,W)
void write_png_gray(const std::string& path, const Tensor& img); // (1,H,W)
Tensor read_png_gray(const std::string& path);                   // -> (1,H,W)
void write_png_rgba(const std::string& path, const Tensor& img); // (4,H,W)
Tensor read_png_rgba(const std::string& path);                   // -> (4,H,W)

// Middlebury .flo: magic float 202021.25 ("PIEH"), int32 width/height,
// interleaved float32 (u,v) row-major, little-endian.
void write_flo(const std::string& path, const FlowField& flow);
FlowField read_flo(const std::string& path);

} // namespace flowcd
