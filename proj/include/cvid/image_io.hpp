#pragma once

#include <string>

#include "cvid/tensor.hpp"

namespace cvid {

// 8-bit PNG round trips. Values live in [0,1]; writers clamp and quantize to
// the nearest of 256 levels, readers return level/255. Writes go to a temp
// file and rename into place so a failure leaves no partial output.

Tensor read_png_gray(const std::string& path);  // [H, W]
Tensor read_png_rgb(const std::string& path);   // [3, H, W]

void write_png_gray(const std::string& path, const Tensor& img);
void write_png_rgb(const std::string& path, const Tensor& img);

// dir/prefix_{i:04d}.png
std::string indexed_path(const std::string& dir, const std::string& prefix, int i);

}  // namespace cvid
