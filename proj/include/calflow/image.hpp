#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "calflow/error.hpp"

namespace calflow {

/// Planar (channel-major) float tensor of shape channels x height x width.
///
/// Used for RGB images in the nominal [0,1] range and, with other channel
/// counts, for the intermediate activations of the flow. Element (c, y, x)
/// lives at data[(c * height + y) * width + x], so every channel is one
/// contiguous plane.
template <typename T>
class BasicImage {
 public:
  using value_type = T;

  BasicImage() = default;

  BasicImage(std::size_t channels, std::size_t height, std::size_t width, T fill = T(0))
      : channels_(channels), height_(height), width_(width),
        data_(channels * height * width, fill) {}

  BasicImage(std::size_t channels, std::size_t height, std::size_t width, std::vector<T> data)
      : channels_(channels), height_(height), width_(width), data_(std::move(data)) {
    detail::require(data_.size() == channels_ * height_ * width_, ErrorCode::ShapeMismatch,
                    "image data length " + std::to_string(data_.size()) +
                        " does not match shape " + std::to_string(channels_) + "x" +
                        std::to_string(height_) + "x" + std::to_string(width_));
  }

  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t plane_size() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * height_ + y) * width_ + x];
  }
  const T& operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * height_ + y) * width_ + x];
  }

  std::span<T> plane(std::size_t c) {
    return std::span<T>(data_).subspan(c * plane_size(), plane_size());
  }
  std::span<const T> plane(std::size_t c) const {
    return std::span<const T>(data_).subspan(c * plane_size(), plane_size());
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  bool same_shape(const BasicImage& other) const noexcept {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }

  std::string shape_string() const {
    return std::to_string(channels_) + "x" + std::to_string(height_) + "x" +
           std::to_string(width_);
  }

  friend bool operator==(const BasicImage&, const BasicImage&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> data_;
};

using Image = BasicImage<float>;

template <typename U, typename T>
BasicImage<U> image_cast(const BasicImage<T>& src) {
  std::vector<U> out(src.data().begin(), src.data().end());
  return BasicImage<U>(src.channels(), src.height(), src.width(), std::move(out));
}

template <typename T>
void require_same_shape(const BasicImage<T>& a, const BasicImage<T>& b, const char* what) {
  detail::require(a.same_shape(b), ErrorCode::ShapeMismatch,
                  std::string(what) + ": shapes " + a.shape_string() + " and " +
                      b.shape_string() + " differ");
}

/// Copies the window [top, top+h) x [left, left+w) out of every channel.
template <typename T>
BasicImage<T> crop(const BasicImage<T>& img, std::size_t top, std::size_t left, std::size_t h,
                   std::size_t w) {
  detail::require(h > 0 && w > 0 && top + h <= img.height() && left + w <= img.width(),
                  ErrorCode::OutOfBounds,
                  "crop window (" + std::to_string(top) + "," + std::to_string(left) + "," +
                      std::to_string(h) + "," + std::to_string(w) + ") outside image " +
                      img.shape_string());
  BasicImage<T> out(img.channels(), h, w);
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t y = 0; y < h; ++y) {
      auto src = img.plane(c).subspan((top + y) * img.width() + left, w);
      std::copy(src.begin(), src.end(), out.plane(c).begin() + y * w);
    }
  return out;
}

template <typename T>
BasicImage<T> clamp01(BasicImage<T> img) {
  for (auto& v : img.data()) v = std::clamp(v, T(0), T(1));
  return img;
}

}  // namespace calflow
