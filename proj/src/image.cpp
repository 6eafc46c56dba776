#include "canet/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "canet/errors.hpp"

namespace canet {
namespace {

struct HeaderReader {
  const std::vector<std::uint8_t>& bytes;
  const std::string& origin;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
      if (++digits > 9) throw DataError(origin + ": pnm " + what + " is too large");
    }
    if (digits == 0) throw DataError(origin + ": pnm header is missing the " + what);
    return v;
  }
};

void check_image_tensor(const Tensor<float>& img, const char* op) {
  if (img.rank() != 3 || img.dim(1) == 0 || img.dim(2) == 0) {
    throw DimensionError(std::string(op) + ": expected a non-empty C×H×W image, got " +
                         shape_str(img.shape()));
  }
}

}  // namespace

Image decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw DataError(origin + ": not a binary P5/P6 portable pixmap");
  }
  HeaderReader r{bytes, origin, 2};
  Image img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  img.width = r.number("width");
  img.height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (img.width == 0 || img.height == 0) throw DataError(origin + ": pnm has zero extent");
  if (maxval == 0 || maxval > 255) {
    throw DataError(origin + ": pnm maxval " + std::to_string(maxval) + " unsupported (1..255)");
  }
  img.maxval = static_cast<std::uint16_t>(maxval);
  if (r.pos >= bytes.size() || !std::isspace(bytes[r.pos])) {
    throw DataError(origin + ": pnm header is not terminated by whitespace");
  }
  ++r.pos;
  const std::size_t need = img.width * img.height * img.channels;
  if (bytes.size() - r.pos < need) {
    throw DataError(origin + ": pnm payload truncated (" + std::to_string(bytes.size() - r.pos) +
                    " of " + std::to_string(need) + " bytes)");
  }
  img.pixels.assign(bytes.begin() + static_cast<long>(r.pos),
                    bytes.begin() + static_cast<long>(r.pos + need));
  return img;
}

std::vector<std::uint8_t> encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("encode_pnm: channels must be 1 or 3");
  if (img.pixels.size() != img.width * img.height * img.channels) {
    throw DataError("encode_pnm: pixel buffer does not match the declared extent");
  }
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" +
                             std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                             std::to_string(img.maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_pnm(bytes, path.string());
}

void write_pnm(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write image " + path.string());
}

Tensor<float> image_to_tensor(const Image& img, std::size_t channels) {
  if (channels != img.channels && !(img.channels == 1 && channels == 3)) {
    throw DataError("image_to_tensor: cannot map " + std::to_string(img.channels) + " channels to " +
                    std::to_string(channels));
  }
  const std::size_t hw = img.width * img.height;
  Tensor<float> t({channels, img.height, img.width});
  const float inv = 1.0f / static_cast<float>(img.maxval);
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t src = img.channels == 1 ? 0 : c;
    for (std::size_t i = 0; i < hw; ++i) {
      t[c * hw + i] = static_cast<float>(img.pixels[i * img.channels + src]) * inv;
    }
  }
  return t;
}

Image tensor_to_image(const Tensor<float>& t) {
  check_image_tensor(t, "tensor_to_image");
  if (t.dim(0) != 1 && t.dim(0) != 3) throw DataError("tensor_to_image: need 1 or 3 channels");
  Image img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  const std::size_t hw = img.width * img.height;
  img.pixels.resize(hw * img.channels);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      const float v = std::clamp(t[c * hw + i], 0.0f, 1.0f);
      img.pixels[i * img.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return img;
}

Tensor<float> resample_region(const Tensor<float>& img, double y0, double x0, double h, double w,
                              std::size_t out_h, std::size_t out_w) {
  check_image_tensor(img, "resample_region");
  if (out_h == 0 || out_w == 0 || !(h > 0) || !(w > 0)) {
    throw ParameterError("resample_region: region and output must be non-empty");
  }
  const std::size_t c = img.dim(0), ih = img.dim(1), iw = img.dim(2);
  Tensor<float> out({c, out_h, out_w});
  // Source coordinate of each output pixel centre, then clamped bilinear taps.
  auto taps = [](double pos, std::size_t n, std::size_t& lo, std::size_t& hi, float& frac) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    lo = static_cast<std::size_t>(std::floor(pos));
    hi = std::min(lo + 1, n - 1);
    frac = static_cast<float>(pos - static_cast<double>(lo));
  };
  std::vector<std::size_t> xl(out_w), xh(out_w);
  std::vector<float> xf(out_w);
  for (std::size_t x = 0; x < out_w; ++x) {
    taps(x0 + (static_cast<double>(x) + 0.5) * w / static_cast<double>(out_w) - 0.5, iw, xl[x], xh[x], xf[x]);
  }
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t yl, yh;
    float yf;
    taps(y0 + (static_cast<double>(y) + 0.5) * h / static_cast<double>(out_h) - 0.5, ih, yl, yh, yf);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* plane = img.data().data() + ch * ih * iw;
      float* dst = out.data().data() + (ch * out_h + y) * out_w;
      for (std::size_t x = 0; x < out_w; ++x) {
        const float top = plane[yl * iw + xl[x]] * (1 - xf[x]) + plane[yl * iw + xh[x]] * xf[x];
        const float bot = plane[yh * iw + xl[x]] * (1 - xf[x]) + plane[yh * iw + xh[x]] * xf[x];
        dst[x] = top * (1 - yf) + bot * yf;
      }
    }
  }
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
  check_image_tensor(img, "resize_bilinear");
  if (img.dim(1) == out_h && img.dim(2) == out_w) return img;
  return resample_region(img, 0, 0, static_cast<double>(img.dim(1)), static_cast<double>(img.dim(2)),
                         out_h, out_w);
}

Tensor<float> center_crop(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
  check_image_tensor(img, "center_crop");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (out_h > h || out_w > w) {
    throw ParameterError("center_crop: crop " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " exceeds image " + shape_str(img.shape()));
  }
  const std::size_t y0 = (h - out_h) / 2, x0 = (w - out_w) / 2;
  Tensor<float> out({c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out_h; ++y)
      std::copy_n(img.data().begin() + static_cast<long>((ch * h + y0 + y) * w + x0), out_w,
                  out.data().begin() + static_cast<long>((ch * out_h + y) * out_w));
  return out;
}

Tensor<float> flip_horizontal(const Tensor<float>& img) {
  check_image_tensor(img, "flip_horizontal");
  Tensor<float> out = img;
  const std::size_t w = img.dim(2), rows = img.dim(0) * img.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.data().subspan(r * w, w);
    std::reverse(row.begin(), row.end());
  }
  return out;
}

Tensor<float> flip_vertical(const Tensor<float>& img) {
  check_image_tensor(img, "flip_vertical");
  Tensor<float> out(img.shape());
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(img.data().begin() + static_cast<long>((ch * h + y) * w), w,
                  out.data().begin() + static_cast<long>((ch * h + h - 1 - y) * w));
  return out;
}

}  // namespace canet
