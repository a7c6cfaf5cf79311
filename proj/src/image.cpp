#include "stainforge/image.hpp"

#include <string>

namespace stainforge {

namespace {

template <typename Img>
void validate_impl(const Img& img, const char* what) {
  if (img.width() < kMinPatchSide || img.height() < kMinPatchSide)
    throw std::invalid_argument(std::string(what) + " is " +
                                std::to_string(img.width()) + "x" +
                                std::to_string(img.height()) +
                                ", minimum side is " +
                                std::to_string(kMinPatchSide));
  for (double v : img.data())
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument(std::string(what) +
                                  " has a channel value outside [0,1]");
}

template <typename Img>
Tensor to_tensor_impl(std::span<const Img> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const int w = batch[0].width(), h = batch[0].height();
  constexpr int kC = Img::kChannels;
  Tensor t({static_cast<int>(batch.size()), kC, h, w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    if (!batch[n].same_size(batch[0]))
      throw std::invalid_argument("batch images differ in size");
    for (int c = 0; c < kC; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          t.at(static_cast<int>(n), c, y, x) = batch[n].at(x, y, c);
  }
  return t;
}

template <typename Img>
Img from_tensor_impl(const Tensor& t, int index) {
  const Shape& s = t.shape();
  if (s.c != Img::kChannels)
    throw std::invalid_argument("tensor channel count does not match image");
  if (index < 0 || index >= s.n) throw std::out_of_range("batch index");
  Img img(s.w, s.h);
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) img.at(x, y, c) = t.at(index, c, y, x);
  return img;
}

}  // namespace

void validate(const RGBPatch& img) { validate_impl(img, "RGB patch"); }
void validate(const GrayPatch& img) { validate_impl(img, "gray patch"); }

RGBPatch uniform_rgb(int width, int height, std::array<double, 3> rgb) {
  RGBPatch img(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) img.set_pixel(x, y, rgb);
  return img;
}

Tensor to_tensor(const RGBPatch& img) {
  return to_tensor_impl<RGBPatch>(std::span<const RGBPatch>(&img, 1));
}
Tensor to_tensor(std::span<const RGBPatch> batch) {
  return to_tensor_impl<RGBPatch>(batch);
}
Tensor to_tensor(const GrayPatch& img) {
  return to_tensor_impl<GrayPatch>(std::span<const GrayPatch>(&img, 1));
}

RGBPatch rgb_from_tensor(const Tensor& t, int index) {
  return from_tensor_impl<RGBPatch>(t, index);
}
GrayPatch gray_from_tensor(const Tensor& t, int index) {
  return from_tensor_impl<GrayPatch>(t, index);
}

std::vector<RGBPatch> rgb_batch_from_tensor(const Tensor& t) {
  std::vector<RGBPatch> out;
  out.reserve(t.shape().n);
  for (int n = 0; n < t.shape().n; ++n) out.push_back(rgb_from_tensor(t, n));
  return out;
}

}  // namespace stainforge
