#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include "stainforge/color_space.hpp"
#include "stainforge/image.hpp"
#include "stainforge/rng.hpp"

namespace stainforge {

/// Per-channel CIELAB statistics pooled over every pixel of a reference set.
struct LabStats {
  Vec3 mean{};
  Vec3 stddev{};
  void validate() const;  // stddev >= 0 and finite
};

LabStats lab_stats(const RGBPatch& img);
LabStats lab_stats(std::span<const RGBPatch> patches);

/// Per-channel affine map in CIELAB onto `target`. A source channel with
/// sigma below 1e-6 is only mean-shifted. Output clipped to [0,1].
RGBPatch reinhard_normalize(const RGBPatch& src, const LabStats& target);

/// Raised when stain vectors cannot be estimated from the input.
class StainEstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EstimatedStains {
  std::array<Vec3, 2> od{};               // unit-norm columns, nuclear stain first
  std::array<double, 2> max_concentration{};  // 99th percentile per stain
  void validate() const;
};

struct MacenkoOptions {
  double od_threshold = 0.15;     // pixels with smaller OD norm are background
  double angle_percentile = 1.0;  // robust extremes, in percent
  int min_pixels = 100;
};

inline constexpr double kMinTransmittance = 1e-6;

/// Optical density of every pixel, -log(max(linear RGB, 1e-6)).
std::vector<Vec3> optical_density(const RGBPatch& img);

/// Exact two-variable non-negative least squares: argmin_{c >= 0} |[a0 a1] c - b|.
std::array<double, 2> nnls2(const Vec3& a0, const Vec3& a1, const Vec3& b);

/// Stain vectors from the plane of the two largest principal axes of the
/// tissue OD cloud. Columns are ordered by red-channel absorbance.
EstimatedStains macenko_estimate(const RGBPatch& src, const MacenkoOptions& opts = {});
/// Pools the pixels of several patches, e.g. a reference set.
EstimatedStains macenko_estimate(std::span<const RGBPatch> patches,
                                 const MacenkoOptions& opts = {});

/// Non-negative concentrations of each pixel against `stains`, row-major.
std::vector<std::array<double, 2>> stain_concentrations(const RGBPatch& img,
                                                        const std::array<Vec3, 2>& stains);

/// Unmix against `src_stains`, rescale by the percentile ratio and re-render
/// with the target matrix. Output clipped to [0,1].
RGBPatch macenko_normalize(const RGBPatch& src, const EstimatedStains& src_stains,
                           const EstimatedStains& target_stains);

/// k distinct patch indices drawn uniformly, for reference sampling.
std::vector<std::size_t> sample_reference_indices(std::size_t n, int k, Rng& rng);

}  // namespace stainforge
