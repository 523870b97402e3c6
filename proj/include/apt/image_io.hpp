#pragma once

#include "apt/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace apt {

struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 3;  // interleaved RGB (or single-channel gray)
  std::vector<uint8_t> pixels;
};

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

// Conversions between [-1,1] planar (C,H,W) tensors and 8-bit images.
ImageU8 to_u8(const Tensor& chw);
Tensor from_u8(const ImageU8& img);

// Tile images (all same shape) into a single (C,H',W') canvas.
Tensor make_grid(const std::vector<Tensor>& images, int cols, int pad = 2, double fill = 1.0);

}  // namespace apt
