#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "stclip/tensor.hpp"

namespace stclip {

// 8-bit interleaved RGB raster.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

// [H × W × 3] tensor with values mapped from [0, 255] to [−1, 1].
Tensor image_to_tensor(const Image& img);

void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);
// Binary graymap (P5) of `gray` in row-major order.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& gray);

}  // namespace stclip
