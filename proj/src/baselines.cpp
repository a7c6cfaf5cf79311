#include "stainforge/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

namespace stainforge {

namespace {

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

// Linear interpolation between order statistics; sorts in place.
double percentile(std::vector<double>& v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

RGBPatch render_od(int width, int height, const std::vector<Vec3>& od) {
  RGBPatch out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Vec3& o = od[static_cast<std::size_t>(y) * width + x];
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = std::clamp(linear_to_srgb(std::exp(-o[c])), 0.0, 1.0);
    }
  return out;
}

}  // namespace

void LabStats::validate() const {
  for (int c = 0; c < 3; ++c)
    if (!std::isfinite(mean[c]) || !std::isfinite(stddev[c]) || stddev[c] < 0.0)
      throw std::invalid_argument("LabStats needs finite means and non-negative deviations");
}

LabStats lab_stats(const RGBPatch& img) { return lab_stats(std::span<const RGBPatch>(&img, 1)); }

LabStats lab_stats(std::span<const RGBPatch> patches) {
  if (patches.empty()) throw std::invalid_argument("lab_stats needs at least one patch");
  Vec3 sum{}, sum_sq{};
  double n = 0.0;
  // Two passes keep the variance accurate for nearly constant inputs.
  for (const auto& img : patches) {
    validate(img);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) {
        const Vec3 lab = srgb_to_lab({img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)});
        for (int c = 0; c < 3; ++c) sum[c] += lab[c];
        n += 1.0;
      }
  }
  LabStats s;
  for (int c = 0; c < 3; ++c) s.mean[c] = sum[c] / n;
  for (const auto& img : patches)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) {
        const Vec3 lab = srgb_to_lab({img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)});
        for (int c = 0; c < 3; ++c) sum_sq[c] += (lab[c] - s.mean[c]) * (lab[c] - s.mean[c]);
      }
  for (int c = 0; c < 3; ++c) s.stddev[c] = std::sqrt(sum_sq[c] / n);
  return s;
}

RGBPatch reinhard_normalize(const RGBPatch& src, const LabStats& target) {
  validate(src);
  target.validate();
  for (int c = 0; c < 3; ++c)
    if (!(target.stddev[c] > 0.0))
      throw std::invalid_argument("reinhard_normalize needs positive target deviations");
  constexpr double kDegenerateSigma = 1e-6;
  const LabStats s = lab_stats(src);
  RGBPatch out(src.width(), src.height());
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x) {
      Vec3 lab = srgb_to_lab({src.at(x, y, 0), src.at(x, y, 1), src.at(x, y, 2)});
      for (int c = 0; c < 3; ++c) {
        const double gain = s.stddev[c] < kDegenerateSigma ? 1.0 : target.stddev[c] / s.stddev[c];
        lab[c] = (lab[c] - s.mean[c]) * gain + target.mean[c];
      }
      const Vec3 rgb = lab_to_srgb(lab);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = std::clamp(rgb[c], 0.0, 1.0);
    }
  return out;
}

void EstimatedStains::validate() const {
  for (int k = 0; k < 2; ++k) {
    if (std::abs(norm(od[k]) - 1.0) > 1e-9)
      throw std::invalid_argument("stain vectors must be unit-norm");
    if (!(max_concentration[k] > 0.0) || !std::isfinite(max_concentration[k]))
      throw std::invalid_argument("stain concentration percentiles must be positive");
  }
}

std::vector<Vec3> optical_density(const RGBPatch& img) {
  std::vector<Vec3> od(img.pixel_count());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c)
        od[static_cast<std::size_t>(y) * img.width() + x][c] =
            -std::log(std::max(srgb_to_linear(img.at(x, y, c)), kMinTransmittance));
  return od;
}

std::array<double, 2> nnls2(const Vec3& a0, const Vec3& a1, const Vec3& b) {
  const double g00 = dot(a0, a0), g01 = dot(a0, a1), g11 = dot(a1, a1);
  const double r0 = dot(a0, b), r1 = dot(a1, b);
  const double det = g00 * g11 - g01 * g01;
  if (det > 1e-12 * g00 * g11) {
    const double c0 = (g11 * r0 - g01 * r1) / det;
    const double c1 = (g00 * r1 - g01 * r0) / det;
    if (c0 >= 0.0 && c1 >= 0.0) return {c0, c1};
  }
  // The optimum lies on a face of the orthant; the objective is convex, so the
  // best of the one-variable optima (clamped at zero) is the solution.
  const double c0 = g00 > 0.0 ? std::max(0.0, r0 / g00) : 0.0;
  const double c1 = g11 > 0.0 ? std::max(0.0, r1 / g11) : 0.0;
  // |a c - b|^2 - |b|^2 for each candidate.
  const double f0 = c0 * c0 * g00 - 2.0 * c0 * r0;
  const double f1 = c1 * c1 * g11 - 2.0 * c1 * r1;
  return f0 <= f1 ? std::array<double, 2>{c0, 0.0} : std::array<double, 2>{0.0, c1};
}

std::vector<std::array<double, 2>> stain_concentrations(const RGBPatch& img,
                                                        const std::array<Vec3, 2>& stains) {
  const auto od = optical_density(img);
  std::vector<std::array<double, 2>> c(od.size());
  for (std::size_t i = 0; i < od.size(); ++i) c[i] = nnls2(stains[0], stains[1], od[i]);
  return c;
}

EstimatedStains macenko_estimate(const RGBPatch& src, const MacenkoOptions& opts) {
  return macenko_estimate(std::span<const RGBPatch>(&src, 1), opts);
}

EstimatedStains macenko_estimate(std::span<const RGBPatch> patches, const MacenkoOptions& opts) {
  if (patches.empty()) throw std::invalid_argument("macenko_estimate needs at least one patch");
  if (!(opts.od_threshold >= 0.0) || !(opts.angle_percentile >= 0.0) ||
      !(opts.angle_percentile < 50.0))
    throw std::invalid_argument("od_threshold >= 0 and angle_percentile in [0, 50) required");

  std::vector<Vec3> all, tissue;
  for (const auto& img : patches) {
    validate(img);
    for (const Vec3& o : optical_density(img)) {
      all.push_back(o);
      if (norm(o) >= opts.od_threshold) tissue.push_back(o);
    }
  }
  if (tissue.size() < static_cast<std::size_t>(opts.min_pixels))
    throw StainEstimationError("too few tissue pixels: " + std::to_string(tissue.size()) +
                               " above OD " + std::to_string(opts.od_threshold) + ", need " +
                               std::to_string(opts.min_pixels));

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const Vec3& o : tissue) mean += Eigen::Vector3d(o[0], o[1], o[2]);
  mean /= static_cast<double>(tissue.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const Vec3& o : tissue) {
    const Eigen::Vector3d d = Eigen::Vector3d(o[0], o[1], o[2]) - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(tissue.size() - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  // Eigenvalues ascend.
  constexpr double kRankTolerance = 1e-3;
  if (!(eig.eigenvalues()[2] > 0.0) || eig.eigenvalues()[1] < kRankTolerance * eig.eigenvalues()[2])
    throw StainEstimationError("OD cloud is rank-deficient; the input looks single-stained");
  Eigen::Vector3d e1 = eig.eigenvectors().col(2);
  Eigen::Vector3d e2 = eig.eigenvectors().col(1);
  if (e1.sum() < 0.0) e1 = -e1;
  if (e2.sum() < 0.0) e2 = -e2;

  std::vector<double> phi;
  phi.reserve(tissue.size());
  for (const Vec3& o : tissue) {
    const Eigen::Vector3d v(o[0], o[1], o[2]);
    phi.push_back(std::atan2(v.dot(e2), v.dot(e1)));
  }
  const double lo = percentile(phi, opts.angle_percentile);
  const double hi = percentile(phi, 100.0 - opts.angle_percentile);
  auto direction = [&](double a) {
    Eigen::Vector3d v = std::cos(a) * e1 + std::sin(a) * e2;
    if (v.sum() < 0.0) v = -v;
    v.normalize();
    return Vec3{v[0], v[1], v[2]};
  };
  EstimatedStains s;
  s.od = {direction(lo), direction(hi)};
  // Nuclear stain first: it has the larger red-channel absorbance.
  if (s.od[1][0] > s.od[0][0]) std::swap(s.od[0], s.od[1]);

  std::vector<double> c0, c1;
  c0.reserve(all.size());
  c1.reserve(all.size());
  for (const Vec3& o : all) {
    const auto c = nnls2(s.od[0], s.od[1], o);
    c0.push_back(c[0]);
    c1.push_back(c[1]);
  }
  s.max_concentration = {percentile(c0, 99.0), percentile(c1, 99.0)};
  if (!(s.max_concentration[0] > 0.0) || !(s.max_concentration[1] > 0.0))
    throw StainEstimationError("a stain has no appreciable concentration in the input");
  return s;
}

RGBPatch macenko_normalize(const RGBPatch& src, const EstimatedStains& src_stains,
                           const EstimatedStains& target_stains) {
  validate(src);
  src_stains.validate();
  target_stains.validate();
  const auto conc = stain_concentrations(src, src_stains.od);
  std::vector<Vec3> od(conc.size());
  for (std::size_t i = 0; i < conc.size(); ++i)
    for (int k = 0; k < 2; ++k) {
      const double c = conc[i][k] * target_stains.max_concentration[k] /
                       src_stains.max_concentration[k];
      for (int ch = 0; ch < 3; ++ch) od[i][ch] += target_stains.od[k][ch] * c;
    }
  return render_od(src.width(), src.height(), od);
}

std::vector<std::size_t> sample_reference_indices(std::size_t n, int k, Rng& rng) {
  if (k < 1 || static_cast<std::size_t>(k) > n)
    throw std::invalid_argument("cannot draw " + std::to_string(k) + " references from " +
                                std::to_string(n));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (int i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

}  // namespace stainforge
