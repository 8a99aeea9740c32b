#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "calflow/error.hpp"
#include "calflow/image.hpp"

namespace calflow {

/// Byte value written for a float sample: floor(clamp(v, 0, 1) * 255 + 0.5).
template <typename T>
std::uint8_t quantize_u8(T v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

namespace detail {

struct PngImageGuard {
  png_image img;
  PngImageGuard() {
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
  }
  ~PngImageGuard() { png_image_free(&img); }
  PngImageGuard(const PngImageGuard&) = delete;
  PngImageGuard& operator=(const PngImageGuard&) = delete;
};

}  // namespace detail

/// Decodes an 8-bit RGB or grayscale PNG into a 3-channel image in [0,1].
/// Grayscale inputs are replicated into three identical channels.
inline Image load_png(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec))
    detail::fail(ErrorCode::FileNotFound, "no such file: " + path.string());

  detail::PngImageGuard guard;
  png_image& png = guard.img;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    detail::fail(ErrorCode::DecodeFailed,
                 "cannot decode " + path.string() + ": " + png.message);

  if (png.format & PNG_FORMAT_FLAG_LINEAR)
    detail::fail(ErrorCode::UnsupportedBitDepth,
                 path.string() + ": 16-bit PNG is not supported (8-bit only)");
  if (png.format & (PNG_FORMAT_FLAG_COLORMAP | PNG_FORMAT_FLAG_ALPHA))
    detail::fail(ErrorCode::UnsupportedColorType,
                 path.string() + ": only RGB and grayscale PNG are supported");

  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t h = png.height, w = png.width;
  const std::size_t src_channels = gray ? 1 : 3;
  std::vector<std::uint8_t> bytes(h * w * src_channels);
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr))
    detail::fail(ErrorCode::DecodeFailed,
                 "cannot decode " + path.string() + ": " + png.message);

  Image out(3, h, w);
  for (std::size_t c = 0; c < 3; ++c) {
    auto dst = out.plane(c);
    const std::size_t sc = gray ? 0 : c;
    for (std::size_t i = 0; i < h * w; ++i)
      dst[i] = static_cast<float>(bytes[i * src_channels + sc]) / 255.0f;
  }
  return out;
}

struct PngInfo {
  std::size_t width = 0;
  std::size_t height = 0;
};

/// Reads only the header of a PNG file.
inline PngInfo png_info(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec))
    detail::fail(ErrorCode::FileNotFound, "no such file: " + path.string());
  detail::PngImageGuard guard;
  if (!png_image_begin_read_from_file(&guard.img, path.string().c_str()))
    detail::fail(ErrorCode::DecodeFailed,
                 "cannot decode " + path.string() + ": " + guard.img.message);
  return PngInfo{guard.img.width, guard.img.height};
}

/// Writes a 3-channel image as 8-bit RGB. Samples are clamped to [0,1]
/// and quantized with quantize_u8.
template <typename T>
void save_png(const BasicImage<T>& img, const std::filesystem::path& path) {
  detail::require(img.channels() == 3, ErrorCode::ShapeMismatch,
                  "save_png expects 3 channels, got " + std::to_string(img.channels()));
  detail::require(!img.empty(), ErrorCode::EmptyInput, "save_png: empty image");

  const std::size_t n = img.plane_size();
  std::vector<std::uint8_t> bytes(n * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    auto src = img.plane(c);
    for (std::size_t i = 0; i < n; ++i) bytes[i * 3 + c] = quantize_u8(src[i]);
  }

  detail::PngImageGuard guard;
  png_image& png = guard.img;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    detail::fail(ErrorCode::WriteFailed,
                 "cannot write " + path.string() + ": " + png.message);
}

}  // namespace calflow
