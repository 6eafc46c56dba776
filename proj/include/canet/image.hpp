#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "canet/tensor.hpp"

namespace canet {

// 8-bit interleaved raster as stored in a portable pixmap.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;  // 1 (P5) or 3 (P6)
  std::uint16_t maxval = 255;
  std::vector<std::uint8_t> pixels;  // row-major, channel-interleaved
};

// Binary P5 (gray) / P6 (RGB) with maxval 255; comments in the header are skipped.
Image decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");
std::vector<std::uint8_t> encode_pnm(const Image& img);
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& img);

// [C×H×W] in [0,1]; gray images are replicated to `channels` planes when channels == 3.
Tensor<float> image_to_tensor(const Image& img, std::size_t channels = 3);
// Inverse of image_to_tensor; values are clamped to [0,1] and rounded.
Image tensor_to_image(const Tensor<float>& t);

// Bilinear resampling of a [C×H×W] image (pixel-centre alignment).
Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w);

// Bilinear resampling of the axis-aligned region [y0, y0+h) × [x0, x0+w)
// (fractional, in source pixels) onto an out×out grid.
Tensor<float> resample_region(const Tensor<float>& img, double y0, double x0, double h, double w,
                              std::size_t out_h, std::size_t out_w);

Tensor<float> center_crop(const Tensor<float>& img, std::size_t out_h, std::size_t out_w);
Tensor<float> flip_horizontal(const Tensor<float>& img);
Tensor<float> flip_vertical(const Tensor<float>& img);

}  // namespace canet
