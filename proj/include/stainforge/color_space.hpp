#pragma once

// Colour encodings used by the metrics and the classical baselines.
//
// Image-level functions are thin wrappers over the differentiable tensor
// versions (operating on (N,3,H,W) sRGB tensors), so the loss functions and
// the reported scores share one implementation.

#include <array>
#include <vector>

#include "stainforge/autograd.hpp"
#include "stainforge/image.hpp"

namespace stainforge {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

inline constexpr Vec3 kWhiteD65{0.95047, 1.0, 1.08883};
/// ITU-R BT.601 luma weights applied to sRGB-encoded values.
inline constexpr Vec3 kLumaWeights{0.299, 0.587, 0.114};

struct ViewingConditions {
  double samples_per_degree = 32.0;
  Vec3 white_point = kWhiteD65;

  void validate() const;
};

/// One sum-of-Gaussians contrast sensitivity kernel. Every component is a
/// separable 2-D Gaussian exp(-(x^2+y^2)/s^2) normalised to unit sum; the
/// component weights sum to one, so the kernel has unit DC gain.
struct CsfKernel {
  struct Component {
    double weight = 0.0;
    std::vector<double> taps;  // 1-D, odd length, unit sum
  };
  std::vector<Component> components;

  /// Dense 2-D kernel (side = longest component), mainly for inspection.
  std::vector<std::vector<double>> dense() const;
};

/// Luminance, red-green and blue-yellow kernels for the given sampling.
std::array<CsfKernel, 3> make_csf_kernels(double samples_per_degree);

// Scalar helpers.
double srgb_to_linear(double c);
double linear_to_srgb(double c);
/// sRGB primaries to XYZ, rows scaled so (1,1,1) maps exactly onto D65.
const Mat3& rgb_to_xyz_matrix();
const Mat3& xyz_to_rgb_matrix();
/// XYZ to the three opponent channels (luminance, red-green, blue-yellow).
const Mat3& xyz_to_opponent_matrix();
const Mat3& opponent_to_xyz_matrix();
Vec3 xyz_to_lab(const Vec3& xyz, const Vec3& white);
Vec3 lab_to_xyz(const Vec3& lab, const Vec3& white);
Vec3 srgb_to_lab(const Vec3& rgb, const Vec3& white = kWhiteD65);
/// Inverse of srgb_to_lab without clipping.
Vec3 lab_to_srgb(const Vec3& lab, const Vec3& white = kWhiteD65);
/// (L, a, b) -> (L, C, H) with H in [0, 2pi); H = 0 when C = 0.
Vec3 lab_to_lch(const Vec3& lab);

// Image-level transforms.
GrayPatch rgb_to_gray(const RGBPatch& img);
LabPatch rgb_to_lab(const RGBPatch& img, const ViewingConditions& vc = {});
LabPatch rgb_to_scielab(const RGBPatch& img, const ViewingConditions& vc = {});
LChPatch lab_to_lch(const LabPatch& img);
/// Clipped back-conversion, used by the baselines.
RGBPatch lab_to_rgb(const LabPatch& img, const ViewingConditions& vc = {});

// Differentiable versions over (N,3,H,W) sRGB tensors.
namespace color {
ad::Var rgb_to_gray(const ad::Var& srgb);
ad::Var srgb_to_linear(const ad::Var& srgb);
ad::Var linear_to_xyz(const ad::Var& linear);
ad::Var xyz_to_lab(const ad::Var& xyz, const Vec3& white);
ad::Var rgb_to_lab(const ad::Var& srgb, const ViewingConditions& vc);
ad::Var rgb_to_scielab(const ad::Var& srgb, const ViewingConditions& vc);
}  // namespace color

}  // namespace stainforge
