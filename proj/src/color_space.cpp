#include "stainforge/color_space.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace stainforge {

namespace {

constexpr double kLabDelta = 6.0 / 29.0;
constexpr double kLabDelta3 = kLabDelta * kLabDelta * kLabDelta;

double lab_f(double t) {
  return t > kLabDelta3 ? std::cbrt(t)
                        : t / (3.0 * kLabDelta * kLabDelta) + 4.0 / 29.0;
}

double lab_f_prime(double t) {
  if (t > kLabDelta3) {
    const double c = std::cbrt(t);
    return 1.0 / (3.0 * c * c);
  }
  return 1.0 / (3.0 * kLabDelta * kLabDelta);
}

double lab_f_inv(double f) {
  return f > kLabDelta ? f * f * f
                       : 3.0 * kLabDelta * kLabDelta * (f - 4.0 / 29.0);
}

double srgb_to_linear_prime(double c) {
  if (c <= 0.04045) return 1.0 / 12.92;
  return 2.4 / 1.055 * std::pow((c + 0.055) / 1.055, 1.4);
}

Mat3 invert(const Mat3& m) {
  const double det =
      m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
      m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
      m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  if (std::abs(det) < 1e-15) throw std::logic_error("singular colour matrix");
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

Vec3 mat_vec(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
          m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

Mat3 make_rgb_to_xyz() {
  Mat3 m{{{0.4124564, 0.3575761, 0.1804375},
          {0.2126729, 0.7151522, 0.0721750},
          {0.0193339, 0.1191920, 0.9503041}}};
  for (int r = 0; r < 3; ++r) {
    const double row = m[r][0] + m[r][1] + m[r][2];
    for (int c = 0; c < 3; ++c) m[r][c] *= kWhiteD65[r] / row;
  }
  return m;
}

// Sum-of-Gaussians parameters: (weight, spread in degrees).
struct CsfTerm {
  double weight;
  double spread;
};
const std::vector<CsfTerm> kLumTerms{
    {1.00327, 0.0500}, {0.114416, 0.2250}, {-0.117686, 7.0000}};
const std::vector<CsfTerm> kRgTerms{{0.616725, 0.0685}, {0.383275, 0.8260}};
const std::vector<CsfTerm> kByTerms{{0.567885, 0.0920}, {0.432115, 0.6451}};

CsfKernel build_kernel(const std::vector<CsfTerm>& terms, double spd) {
  // Support is capped at half a degree of visual angle either side.
  const int cap = static_cast<int>(std::ceil(spd / 2.0));
  double weight_sum = 0.0;
  for (const auto& t : terms) weight_sum += t.weight;
  CsfKernel k;
  for (const auto& t : terms) {
    const double s = t.spread * spd;  // exp(-(r/s)^2), sigma = s / sqrt(2)
    const int radius = std::max(
        1, std::min(cap, static_cast<int>(std::ceil(3.0 * s / std::sqrt(2.0)))));
    std::vector<double> taps(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
      taps[i + radius] = std::exp(-(static_cast<double>(i) * i) / (s * s));
      sum += taps[i + radius];
    }
    for (double& v : taps) v /= sum;
    k.components.push_back({t.weight / weight_sum, std::move(taps)});
  }
  return k;
}

}  // namespace

void ViewingConditions::validate() const {
  if (!(samples_per_degree > 0.0))
    throw std::invalid_argument("samples_per_degree must be positive");
  for (double v : white_point)
    if (!(v > 0.0))
      throw std::invalid_argument("white point components must be positive");
}

std::vector<std::vector<double>> CsfKernel::dense() const {
  std::size_t side = 0;
  for (const auto& c : components) side = std::max(side, c.taps.size());
  std::vector<std::vector<double>> out(side, std::vector<double>(side, 0.0));
  for (const auto& c : components) {
    const std::size_t off = (side - c.taps.size()) / 2;
    for (std::size_t y = 0; y < c.taps.size(); ++y)
      for (std::size_t x = 0; x < c.taps.size(); ++x)
        out[y + off][x + off] += c.weight * c.taps[y] * c.taps[x];
  }
  return out;
}

std::array<CsfKernel, 3> make_csf_kernels(double samples_per_degree) {
  if (!(samples_per_degree > 0.0))
    throw std::invalid_argument("samples_per_degree must be positive");
  return {build_kernel(kLumTerms, samples_per_degree),
          build_kernel(kRgTerms, samples_per_degree),
          build_kernel(kByTerms, samples_per_degree)};
}

double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double c) {
  if (c <= 0.0031308) return 12.92 * c;
  // 1.055 p - 0.055 rearranged so that white encodes to exactly 1.
  const double p = std::pow(c, 1.0 / 2.4);
  return p + 0.055 * (p - 1.0);
}

const Mat3& rgb_to_xyz_matrix() {
  static const Mat3 m = make_rgb_to_xyz();
  return m;
}

const Mat3& xyz_to_rgb_matrix() {
  static const Mat3 m = invert(rgb_to_xyz_matrix());
  return m;
}

const Mat3& xyz_to_opponent_matrix() {
  static const Mat3 m{{{0.2787336, 0.7218031, -0.1065520},
                       {-0.4487736, 0.2898056, 0.0771569},
                       {0.0859513, -0.5899859, 0.5011089}}};
  return m;
}

const Mat3& opponent_to_xyz_matrix() {
  static const Mat3 m = invert(xyz_to_opponent_matrix());
  return m;
}

Vec3 xyz_to_lab(const Vec3& xyz, const Vec3& white) {
  const double fx = lab_f(xyz[0] / white[0]);
  const double fy = lab_f(xyz[1] / white[1]);
  const double fz = lab_f(xyz[2] / white[2]);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

Vec3 lab_to_xyz(const Vec3& lab, const Vec3& white) {
  const double fy = (lab[0] + 16.0) / 116.0;
  const double fx = fy + lab[1] / 500.0;
  const double fz = fy - lab[2] / 200.0;
  return {white[0] * lab_f_inv(fx), white[1] * lab_f_inv(fy),
          white[2] * lab_f_inv(fz)};
}

Vec3 srgb_to_lab(const Vec3& rgb, const Vec3& white) {
  const Vec3 lin{srgb_to_linear(rgb[0]), srgb_to_linear(rgb[1]),
                 srgb_to_linear(rgb[2])};
  return xyz_to_lab(mat_vec(rgb_to_xyz_matrix(), lin), white);
}

Vec3 lab_to_srgb(const Vec3& lab, const Vec3& white) {
  const Vec3 lin = mat_vec(xyz_to_rgb_matrix(), lab_to_xyz(lab, white));
  return {linear_to_srgb(lin[0]), linear_to_srgb(lin[1]),
          linear_to_srgb(lin[2])};
}

Vec3 lab_to_lch(const Vec3& lab) {
  const double c = std::hypot(lab[1], lab[2]);
  double h = 0.0;
  if (c > 0.0) {
    h = std::atan2(lab[2], lab[1]);
    if (h < 0.0) h += 2.0 * std::numbers::pi;
    if (h >= 2.0 * std::numbers::pi) h = 0.0;
  }
  return {lab[0], c, h};
}

namespace color {

ad::Var rgb_to_gray(const ad::Var& srgb) {
  const Shape s = srgb.shape();
  if (s.c != 3) throw std::invalid_argument("rgb_to_gray expects 3 channels");
  // Luma is the first row of a channel mix; keep only that channel.
  const Mat3 m{{kLumaWeights, {0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}}};
  return ad::slice_channels(ad::channel_mix(srgb, m), 0, 1);
}

ad::Var srgb_to_linear(const ad::Var& srgb) {
  return ad::map(
      srgb, [](double c) { return stainforge::srgb_to_linear(c); },
      [](double c) { return srgb_to_linear_prime(c); });
}

ad::Var linear_to_xyz(const ad::Var& linear) {
  return ad::channel_mix(linear, rgb_to_xyz_matrix());
}

ad::Var xyz_to_lab(const ad::Var& xyz, const Vec3& white) {
  std::vector<ad::Var> f;
  for (int c = 0; c < 3; ++c) {
    const double wc = white[c];
    f.push_back(ad::map(
        ad::slice_channels(xyz, c, 1),
        [wc](double v) { return lab_f(v / wc); },
        [wc](double v) { return lab_f_prime(v / wc) / wc; }));
  }
  // (fx, fy, fz) -> (L, a, b) is affine.
  const Mat3 m{{{0.0, 116.0, 0.0}, {500.0, -500.0, 0.0}, {0.0, 200.0, -200.0}}};
  const ad::Var lab_no_offset = ad::channel_mix(ad::concat_channels(f), m);
  Tensor offset({lab_no_offset.shape()}, 0.0);
  const std::size_t plane = offset.shape().plane();
  for (int n = 0; n < offset.shape().n; ++n) {
    double* p = offset.data() + offset.index(n, 0, 0, 0);
    std::fill(p, p + plane, -16.0);
  }
  return ad::add(lab_no_offset, ad::constant(std::move(offset)));
}

ad::Var rgb_to_lab(const ad::Var& srgb, const ViewingConditions& vc) {
  vc.validate();
  return xyz_to_lab(linear_to_xyz(srgb_to_linear(srgb)), vc.white_point);
}

ad::Var rgb_to_scielab(const ad::Var& srgb, const ViewingConditions& vc) {
  vc.validate();
  const auto kernels = make_csf_kernels(vc.samples_per_degree);
  const ad::Var opp = ad::channel_mix(linear_to_xyz(srgb_to_linear(srgb)),
                                      xyz_to_opponent_matrix());
  std::vector<ad::Var> filtered;
  for (int c = 0; c < 3; ++c) {
    const ad::Var channel = ad::slice_channels(opp, c, 1);
    ad::Var acc;
    for (const auto& comp : kernels[c].components) {
      ad::Var term = ad::mul_scalar(
          ad::filter_separable(channel, comp.taps, comp.taps,
                               ad::Boundary::kReflect),
          comp.weight);
      acc = acc.defined() ? ad::add(acc, term) : term;
    }
    filtered.push_back(acc);
  }
  const ad::Var xyz =
      ad::channel_mix(ad::concat_channels(filtered), opponent_to_xyz_matrix());
  return xyz_to_lab(xyz, vc.white_point);
}

}  // namespace color

namespace {

LabPatch lab_from_tensor(const Tensor& t) {
  LabPatch out(t.shape().w, t.shape().h);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < t.shape().h; ++y)
      for (int x = 0; x < t.shape().w; ++x) out.at(x, y, c) = t.at(0, c, y, x);
  return out;
}

}  // namespace

GrayPatch rgb_to_gray(const RGBPatch& img) {
  validate(img);
  return gray_from_tensor(
      color::rgb_to_gray(ad::constant(to_tensor(img))).value());
}

LabPatch rgb_to_lab(const RGBPatch& img, const ViewingConditions& vc) {
  validate(img);
  return lab_from_tensor(
      color::rgb_to_lab(ad::constant(to_tensor(img)), vc).value());
}

LabPatch rgb_to_scielab(const RGBPatch& img, const ViewingConditions& vc) {
  validate(img);
  return lab_from_tensor(
      color::rgb_to_scielab(ad::constant(to_tensor(img)), vc).value());
}

LChPatch lab_to_lch(const LabPatch& img) {
  LChPatch out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      out.set_pixel(x, y, lab_to_lch(img.pixel(x, y)));
  return out;
}

RGBPatch lab_to_rgb(const LabPatch& img, const ViewingConditions& vc) {
  vc.validate();
  RGBPatch out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      Vec3 rgb = lab_to_srgb(img.pixel(x, y), vc.white_point);
      for (double& v : rgb) v = std::clamp(v, 0.0, 1.0);
      out.set_pixel(x, y, rgb);
    }
  return out;
}

}  // namespace stainforge
