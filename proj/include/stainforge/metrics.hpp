#pragma once

// Windowed structural similarity (SSIM on luma) and the directional-statistics
// colour similarity (DSCSI on S-CIELAB hue/chroma/lightness), together with the
// reconstruction losses built on them.

#include <span>
#include <vector>

#include "stainforge/autograd.hpp"
#include "stainforge/color_space.hpp"
#include "stainforge/image.hpp"

namespace stainforge {

enum class WindowKind { kGaussian, kUniform };

struct WindowConfig {
  int window_size = 11;
  WindowKind kind = WindowKind::kGaussian;
  double sigma = 1.5;
  int stride = 1;

  void validate() const;
  /// Normalised 1-D taps; the 2-D window is their outer product.
  std::vector<double> taps() const;
};

struct SsimConstants {
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  void validate() const;
};

struct DscsiConfig {
  WindowConfig window{};
  double k_lightness = 9.0;  // (0.03 * 100)^2
  double k_chroma = 9.0;
  double k_hue = 0.01;
  double lambda_chroma = 1.0;
  /// Windows where both mean chromas fall below this are treated as
  /// achromatic: hue and chroma-contrast terms are set to 1.
  double chroma_gate = 2.0;

  void validate() const;
};

struct SimilarityScore {
  double value = 0.0;
};

/// Per-window weighted moments, row-major over window positions.
struct LocalStats {
  int rows = 0;
  int cols = 0;
  std::vector<double> mean_x, mean_y, var_x, var_y, cov_xy;
};

LocalStats local_stats(const GrayPatch& x, const GrayPatch& y,
                       const WindowConfig& w = {});

SimilarityScore ssim(const GrayPatch& x, const GrayPatch& y,
                     const WindowConfig& w = {}, const SsimConstants& k = {});
/// SSIM of the luma images.
SimilarityScore ssim(const RGBPatch& x, const RGBPatch& y,
                     const WindowConfig& w = {}, const SsimConstants& k = {});

struct CircularMean {
  double mean_angle = 0.0;  // [0, 2pi)
  double resultant = 0.0;   // R in [0, 1]
};

/// Weighted circular mean and mean resultant length. Throws when no weight
/// is positive; the mean angle is 0 when R < 1e-12.
CircularMean circular_mean_resultant(std::span<const double> angles,
                                     std::span<const double> weights);

/// Everything DSCSI computes for one image pair. Window maps are row-major.
struct DscsiBreakdown {
  double score = 0.0;
  double chromatic = 0.0;    // S_C
  double achromatic = 0.0;   // S_A
  int rows = 0;
  int cols = 0;
  std::vector<double> hue_mean, hue_dispersion, chroma_mean, chroma_contrast,
      lightness_contrast, lightness_structure;
  std::vector<bool> achromatic_window;
};

SimilarityScore dscsi(const RGBPatch& x, const RGBPatch& y,
                      const DscsiConfig& cfg = {},
                      const ViewingConditions& vc = {});
DscsiBreakdown dscsi_breakdown(const RGBPatch& x, const RGBPatch& y,
                               const DscsiConfig& cfg = {},
                               const ViewingConditions& vc = {});

/// Loss value and its gradient with respect to the reconstruction.
struct LossAndGradient {
  double value = 0.0;
  RGBPatch grad;
};

double reco_loss_ssim(const RGBPatch& x, const RGBPatch& x_hat,
                      const WindowConfig& w = {}, const SsimConstants& k = {});
double reco_loss_dscsi(const RGBPatch& x, const RGBPatch& x_hat,
                       const DscsiConfig& cfg = {},
                       const ViewingConditions& vc = {});
LossAndGradient reco_loss_ssim_grad(const RGBPatch& x, const RGBPatch& x_hat,
                                    const WindowConfig& w = {},
                                    const SsimConstants& k = {});
LossAndGradient reco_loss_dscsi_grad(const RGBPatch& x, const RGBPatch& x_hat,
                                     const DscsiConfig& cfg = {},
                                     const ViewingConditions& vc = {});

// Differentiable forms over (N,C,H,W) tensors.
namespace metric {

struct WindowMoments {
  ad::Var mean_x, mean_y, var_x, var_y, cov_xy;
};

/// x, y: (N,1,H,W). Variances are clamped at zero.
WindowMoments window_moments(const ad::Var& x, const ad::Var& y,
                             const WindowConfig& w);

/// Per-window SSIM map of single-channel inputs.
ad::Var ssim_map(const ad::Var& x, const ad::Var& y, const WindowConfig& w,
                 const SsimConstants& k);
/// Per-sample SSIM of sRGB batches, (N,1,1,1).
ad::Var ssim_rgb(const ad::Var& x, const ad::Var& y, const WindowConfig& w,
                 const SsimConstants& k);

struct DscsiTerms {
  ad::Var score;  // (N,1,1,1)
  ad::Var chromatic, achromatic;
  ad::Var hue_mean, hue_dispersion, chroma_mean, chroma_contrast,
      lightness_contrast, lightness_structure;
  Tensor achromatic_mask;
};

DscsiTerms dscsi_terms(const ad::Var& x, const ad::Var& y,
                       const DscsiConfig& cfg, const ViewingConditions& vc);
/// Per-sample DSCSI of sRGB batches, (N,1,1,1).
ad::Var dscsi_rgb(const ad::Var& x, const ad::Var& y, const DscsiConfig& cfg,
                  const ViewingConditions& vc);

/// Batch-mean reconstruction losses.
ad::Var ssim_loss(const ad::Var& x, const ad::Var& x_hat,
                  const WindowConfig& w, const SsimConstants& k);
ad::Var dscsi_loss(const ad::Var& x, const ad::Var& x_hat,
                   const DscsiConfig& cfg, const ViewingConditions& vc);
ad::Var mse_loss(const ad::Var& x, const ad::Var& x_hat);

}  // namespace metric

}  // namespace stainforge
