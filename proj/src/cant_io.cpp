#include "canet/cant_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace canet {
namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::vector<std::uint8_t>& in, std::size_t& pos, const std::string& origin) {
  if (pos + sizeof(U) > in.size()) throw DataError(origin + ": truncated CANT file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[pos + i]) << (8 * i);
  pos += sizeof(U);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_cant(const Tensor<float>& t) {
  std::vector<std::uint8_t> out{'C', 'A', 'N', 'T'};
  put_le<std::uint32_t>(out, kCantVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_le<std::uint64_t>(out, e);
  out.reserve(out.size() + 4 * t.numel());
  for (float v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor<float> decode_cant(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CANT", 4) != 0) {
    throw DataError(origin + ": missing CANT magic");
  }
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos, origin);
  if (version != kCantVersion) {
    throw DataError(origin + ": unsupported CANT version " + std::to_string(version));
  }
  const auto ndim = get_le<std::uint32_t>(bytes, pos, origin);
  Shape shape(ndim);
  for (auto& e : shape) e = get_le<std::uint64_t>(bytes, pos, origin);
  const std::size_t n = numel_of(shape);
  if (bytes.size() - pos != 4 * n) {
    throw DataError(origin + ": payload size does not match shape " + shape_str(shape));
  }
  std::vector<float> data(n);
  for (auto& v : data) v = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos, origin));
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_cant(const std::filesystem::path& path, const Tensor<float>& t) {
  const auto bytes = encode_cant(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing " + path.string());
}

Tensor<float> read_cant(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open tensor file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_cant(bytes, path.string());
}

}  // namespace canet
