#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "codebrain/tensor.hpp"

namespace codebrain::io {

// 16-bit grayscale: intensities in [0,1] quantized to 65535 steps.
void write_png_gray16(const std::string& path, const Tensor& img);
Tensor read_png_gray16(const std::string& path);

// 8-bit RGB, rgb.size() == 3*h*w, row-major.
void write_png_rgb8(const std::string& path, const std::vector<std::uint8_t>& rgb, int height,
                    int width);

}  // namespace codebrain::io
