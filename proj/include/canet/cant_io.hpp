#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "canet/tensor.hpp"

namespace canet {

// "CANT" tensor file: magic, u32 version (1), u32 ndim, u64 extents[ndim],
// then little-endian f32 payload in row-major order.
inline constexpr std::uint32_t kCantVersion = 1;

std::vector<std::uint8_t> encode_cant(const Tensor<float>& t);
Tensor<float> decode_cant(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void write_cant(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_cant(const std::filesystem::path& path);

}  // namespace canet
