#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stainforge/tensor.hpp"

namespace stainforge {

/// Smallest side any patch may have; the narrowest metric window must fit.
inline constexpr int kMinPatchSide = 8;

/// Interleaved row-major image with a fixed channel count. The tag keeps
/// colour encodings from being mixed up at compile time.
template <typename Tag, int Channels>
class Image {
 public:
  static constexpr int kChannels = Channels;

  Image() = default;
  Image(int width, int height, double fill = 0.0)
      : width_(width),
        height_(height),
        data_(static_cast<std::size_t>(width) * height * Channels, fill) {
    if (width <= 0 || height <= 0)
      throw std::invalid_argument("image dimensions must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width_) * height_;
  }

  double& at(int x, int y, int c = 0) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * Channels + c];
  }
  double at(int x, int y, int c = 0) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * Channels + c];
  }

  std::array<double, Channels> pixel(int x, int y) const {
    std::array<double, Channels> p{};
    for (int c = 0; c < Channels; ++c) p[c] = at(x, y, c);
    return p;
  }
  void set_pixel(int x, int y, const std::array<double, Channels>& p) {
    for (int c = 0; c < Channels; ++c) at(x, y, c) = p[c];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_size(const auto& other) const {
    return width_ == other.width() && height_ == other.height();
  }
  bool operator==(const Image&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

struct RgbTag {};
struct GrayTag {};
struct LabTag {};
struct LchTag {};

/// sRGB-encoded colour in [0,1].
using RGBPatch = Image<RgbTag, 3>;
using GrayPatch = Image<GrayTag, 1>;
/// (L, a, b) with L in [0,100].
using LabPatch = Image<LabTag, 3>;
/// (L, C, H) with H in [0, 2pi).
using LChPatch = Image<LchTag, 3>;

/// Throws std::invalid_argument unless every channel is in [0,1] and both
/// sides are at least kMinPatchSide.
void validate(const RGBPatch& img);
void validate(const GrayPatch& img);

/// Uniform patch helper, used mostly by tests and the CLI.
RGBPatch uniform_rgb(int width, int height, std::array<double, 3> rgb);

// Conversions between interleaved images and planar NCHW tensors.
Tensor to_tensor(const RGBPatch& img);
Tensor to_tensor(std::span<const RGBPatch> batch);
Tensor to_tensor(const GrayPatch& img);
RGBPatch rgb_from_tensor(const Tensor& t, int index = 0);
GrayPatch gray_from_tensor(const Tensor& t, int index = 0);
std::vector<RGBPatch> rgb_batch_from_tensor(const Tensor& t);

}  // namespace stainforge
