#include "stainforge/metrics.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace stainforge {

namespace {

constexpr double kChromaEpsilon = 1e-6;

ad::Var clamp_nonnegative(const ad::Var& v) {
  return ad::map(v, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

// sqrt with its derivative bounded near zero, so flat windows do not produce
// infinite gradients.
ad::Var safe_sqrt(const ad::Var& v) {
  return ad::map(
      v, [](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; },
      [](double x) { return 0.5 / std::sqrt(x > 1e-12 ? x : 1e-12); });
}

// (2uv + k) / (u^2 + v^2 + k) given the squares explicitly.
ad::Var ratio_term(const ad::Var& u, const ad::Var& v, const ad::Var& u2,
                   const ad::Var& v2, double k) {
  const ad::Var num = ad::add_scalar(ad::mul_scalar(ad::mul(u, v), 2.0), k);
  const ad::Var den = ad::add_scalar(ad::add(u2, v2), k);
  return ad::div(num, den);
}

void check_pair(const Shape& a, const Shape& b, int window) {
  if (!(a == b))
    throw std::invalid_argument("image dimensions differ: " + a.str() +
                                " vs " + b.str());
  if (a.h < window || a.w < window)
    throw std::invalid_argument("patch " + std::to_string(a.w) + "x" +
                                std::to_string(a.h) +
                                " is smaller than the " +
                                std::to_string(window) + "-pixel window");
}

std::vector<double> flatten(const ad::Var& v) {
  return {v.value().span().begin(), v.value().span().end()};
}

}  // namespace

void WindowConfig::validate() const {
  if (window_size < 3 || window_size % 2 == 0)
    throw std::invalid_argument("window_size must be odd and >= 3");
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  if (kind == WindowKind::kGaussian && !(sigma > 0.0))
    throw std::invalid_argument("window sigma must be positive");
}

std::vector<double> WindowConfig::taps() const {
  validate();
  std::vector<double> t(window_size);
  const int r = window_size / 2;
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    t[i + r] = kind == WindowKind::kUniform
                   ? 1.0
                   : std::exp(-0.5 * i * i / (sigma * sigma));
    sum += t[i + r];
  }
  for (double& v : t) v /= sum;
  return t;
}

void SsimConstants::validate() const {
  if (!(k1 > 0.0) || !(k2 > 0.0))
    throw std::invalid_argument("SSIM constants K1, K2 must be positive");
  if (!(dynamic_range > 0.0))
    throw std::invalid_argument("dynamic range must be positive");
}

void DscsiConfig::validate() const {
  window.validate();
  if (!(k_lightness > 0.0) || !(k_chroma > 0.0) || !(k_hue > 0.0))
    throw std::invalid_argument("DSCSI stabilising constants must be positive");
  if (!(chroma_gate >= 0.0))
    throw std::invalid_argument("chroma gate must be >= 0");
  if (!(lambda_chroma >= 0.0))
    throw std::invalid_argument("lambda_chroma must be >= 0");
}

namespace metric {

WindowMoments window_moments(const ad::Var& x, const ad::Var& y,
                             const WindowConfig& w) {
  w.validate();
  check_pair(x.shape(), y.shape(), w.window_size);
  if (x.shape().c != 1)
    throw std::invalid_argument("window moments need single-channel input");
  const std::vector<double> taps = w.taps();
  auto filt = [&](const ad::Var& v) {
    return ad::filter_separable(v, taps, taps, ad::Boundary::kValid, w.stride);
  };
  WindowMoments m;
  m.mean_x = filt(x);
  m.mean_y = filt(y);
  m.var_x = clamp_nonnegative(
      ad::sub(filt(ad::square(x)), ad::square(m.mean_x)));
  m.var_y = clamp_nonnegative(
      ad::sub(filt(ad::square(y)), ad::square(m.mean_y)));
  m.cov_xy = ad::sub(filt(ad::mul(x, y)), ad::mul(m.mean_x, m.mean_y));
  return m;
}

ad::Var ssim_map(const ad::Var& x, const ad::Var& y, const WindowConfig& w,
                 const SsimConstants& k) {
  k.validate();
  const WindowMoments m = window_moments(x, y, w);
  const ad::Var luminance =
      ratio_term(m.mean_x, m.mean_y, ad::square(m.mean_x),
                 ad::square(m.mean_y), k.c1());
  const ad::Var structure_num =
      ad::add_scalar(ad::mul_scalar(m.cov_xy, 2.0), k.c2());
  const ad::Var structure_den = ad::add_scalar(ad::add(m.var_x, m.var_y), k.c2());
  return ad::mul(luminance, ad::div(structure_num, structure_den));
}

ad::Var ssim_rgb(const ad::Var& x, const ad::Var& y, const WindowConfig& w,
                 const SsimConstants& k) {
  return ad::mean_per_sample(
      ssim_map(color::rgb_to_gray(x), color::rgb_to_gray(y), w, k));
}

DscsiTerms dscsi_terms(const ad::Var& x, const ad::Var& y,
                       const DscsiConfig& cfg, const ViewingConditions& vc) {
  cfg.validate();
  check_pair(x.shape(), y.shape(), cfg.window.window_size);
  const std::vector<double> taps = cfg.window.taps();
  auto filt = [&](const ad::Var& v) {
    return ad::filter_separable(v, taps, taps, ad::Boundary::kValid,
                                cfg.window.stride);
  };

  struct Channels {
    ad::Var lightness, a, b, chroma;
  };
  auto split = [&](const ad::Var& rgb) {
    const ad::Var lab = color::rgb_to_scielab(rgb, vc);
    Channels ch{ad::slice_channels(lab, 0, 1), ad::slice_channels(lab, 1, 1),
                ad::slice_channels(lab, 2, 1), {}};
    ch.chroma = ad::sqrt(ad::add_scalar(
        ad::add(ad::square(ch.a), ad::square(ch.b)),
        kChromaEpsilon * kChromaEpsilon));
    return ch;
  };
  const Channels cx = split(x);
  const Channels cy = split(y);

  const WindowMoments lm = window_moments(cx.lightness, cy.lightness, cfg.window);
  const WindowMoments cm = window_moments(cx.chroma, cy.chroma, cfg.window);

  // Chroma-weighted hue resultant: sum w*C*(cos H, sin H) = sum w*(a, b).
  const ad::Var ax = filt(cx.a), bx = filt(cx.b);
  const ad::Var ay = filt(cy.a), by = filt(cy.b);
  const ad::Var rx = ad::div(
      safe_sqrt(ad::add(ad::square(ax), ad::square(bx))), cm.mean_x);
  const ad::Var ry = ad::div(
      safe_sqrt(ad::add(ad::square(ay), ad::square(by))), cm.mean_y);
  const ad::Var cross = ad::sub(ad::mul(ax, by), ad::mul(bx, ay));
  const ad::Var dot = ad::add(ad::mul(ax, ay), ad::mul(bx, by));
  const ad::Var hue_distance = ad::atan2(ad::abs(cross), dot);  // [0, pi]

  DscsiTerms t;
  const ad::Var s_h1 =
      ad::rsub_scalar(1.0, ad::mul_scalar(hue_distance, 1.0 / std::numbers::pi));
  const ad::Var s_h2 =
      ratio_term(rx, ry, ad::square(rx), ad::square(ry), cfg.k_hue);
  t.chroma_mean = ratio_term(cm.mean_x, cm.mean_y, ad::square(cm.mean_x),
                             ad::square(cm.mean_y), cfg.k_chroma);
  const ad::Var sc_x = safe_sqrt(cm.var_x), sc_y = safe_sqrt(cm.var_y);
  const ad::Var s_c2 = ratio_term(sc_x, sc_y, cm.var_x, cm.var_y, cfg.k_chroma);
  const ad::Var sl_x = safe_sqrt(lm.var_x), sl_y = safe_sqrt(lm.var_y);
  t.lightness_contrast =
      ratio_term(sl_x, sl_y, lm.var_x, lm.var_y, cfg.k_lightness);
  t.lightness_structure =
      ad::div(ad::add_scalar(lm.cov_xy, cfg.k_lightness / 2.0),
              ad::add_scalar(ad::mul(sl_x, sl_y), cfg.k_lightness / 2.0));

  // Achromatic windows: hue and chroma contrast are undefined, score them 1.
  Tensor mask(cm.mean_x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = (cm.mean_x.value()[i] < cfg.chroma_gate &&
               cm.mean_y.value()[i] < cfg.chroma_gate)
                  ? 1.0
                  : 0.0;
  Tensor keep = mask;
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = 1.0 - mask[i];
  const ad::Var mask_v = ad::constant(mask);
  const ad::Var keep_v = ad::constant(std::move(keep));
  auto gated = [&](const ad::Var& s) {
    return ad::add(ad::mul(s, keep_v), mask_v);
  };
  t.hue_mean = gated(s_h1);
  t.hue_dispersion = gated(s_h2);
  t.chroma_contrast = gated(s_c2);
  t.achromatic_mask = std::move(mask);

  t.chromatic = ad::mean_per_sample(
      ad::mul(ad::mul(t.hue_mean, t.hue_dispersion),
              ad::mul(t.chroma_mean, t.chroma_contrast)));
  t.achromatic = ad::mean_per_sample(
      ad::mul(t.lightness_contrast, t.lightness_structure));
  t.score = ad::mul(t.achromatic, ad::pow(t.chromatic, cfg.lambda_chroma));
  return t;
}

ad::Var dscsi_rgb(const ad::Var& x, const ad::Var& y, const DscsiConfig& cfg,
                  const ViewingConditions& vc) {
  return dscsi_terms(x, y, cfg, vc).score;
}

ad::Var ssim_loss(const ad::Var& x, const ad::Var& x_hat,
                  const WindowConfig& w, const SsimConstants& k) {
  return ad::rsub_scalar(1.0, ad::mean(ssim_rgb(x, x_hat, w, k)));
}

ad::Var dscsi_loss(const ad::Var& x, const ad::Var& x_hat,
                   const DscsiConfig& cfg, const ViewingConditions& vc) {
  return ad::rsub_scalar(1.0, ad::mean(dscsi_rgb(x, x_hat, cfg, vc)));
}

ad::Var mse_loss(const ad::Var& x, const ad::Var& x_hat) {
  return ad::mean(ad::square(ad::sub(x_hat, x)));
}

}  // namespace metric

LocalStats local_stats(const GrayPatch& x, const GrayPatch& y,
                       const WindowConfig& w) {
  const auto m = metric::window_moments(ad::constant(to_tensor(x)),
                                        ad::constant(to_tensor(y)), w);
  LocalStats s;
  s.rows = m.mean_x.shape().h;
  s.cols = m.mean_x.shape().w;
  s.mean_x = flatten(m.mean_x);
  s.mean_y = flatten(m.mean_y);
  s.var_x = flatten(m.var_x);
  s.var_y = flatten(m.var_y);
  s.cov_xy = flatten(m.cov_xy);
  return s;
}

SimilarityScore ssim(const GrayPatch& x, const GrayPatch& y,
                     const WindowConfig& w, const SsimConstants& k) {
  const ad::Var map = metric::ssim_map(ad::constant(to_tensor(x)),
                                       ad::constant(to_tensor(y)), w, k);
  return {ad::mean(map).item()};
}

SimilarityScore ssim(const RGBPatch& x, const RGBPatch& y,
                     const WindowConfig& w, const SsimConstants& k) {
  return ssim(rgb_to_gray(x), rgb_to_gray(y), w, k);
}

CircularMean circular_mean_resultant(std::span<const double> angles,
                                     std::span<const double> weights) {
  if (angles.size() != weights.size())
    throw std::invalid_argument("angles and weights differ in length");
  double total = 0.0, s = 0.0, c = 0.0;
  for (std::size_t i = 0; i < angles.size(); ++i) {
    if (weights[i] < 0.0)
      throw std::invalid_argument("circular weights must be nonnegative");
    total += weights[i];
    s += weights[i] * std::sin(angles[i]);
    c += weights[i] * std::cos(angles[i]);
  }
  if (!(total > 0.0))
    throw std::invalid_argument("circular mean needs a positive weight");
  CircularMean out;
  out.resultant = std::min(1.0, std::hypot(s, c) / total);
  if (out.resultant >= 1e-12) {
    out.mean_angle = std::atan2(s, c);
    if (out.mean_angle < 0.0) out.mean_angle += 2.0 * std::numbers::pi;
    if (out.mean_angle >= 2.0 * std::numbers::pi) out.mean_angle = 0.0;
  }
  return out;
}

DscsiBreakdown dscsi_breakdown(const RGBPatch& x, const RGBPatch& y,
                               const DscsiConfig& cfg,
                               const ViewingConditions& vc) {
  validate(x);
  validate(y);
  const auto t = metric::dscsi_terms(ad::constant(to_tensor(x)),
                                     ad::constant(to_tensor(y)), cfg, vc);
  DscsiBreakdown b;
  b.score = t.score.item();
  b.chromatic = t.chromatic.item();
  b.achromatic = t.achromatic.item();
  b.rows = t.hue_mean.shape().h;
  b.cols = t.hue_mean.shape().w;
  b.hue_mean = flatten(t.hue_mean);
  b.hue_dispersion = flatten(t.hue_dispersion);
  b.chroma_mean = flatten(t.chroma_mean);
  b.chroma_contrast = flatten(t.chroma_contrast);
  b.lightness_contrast = flatten(t.lightness_contrast);
  b.lightness_structure = flatten(t.lightness_structure);
  for (double m : t.achromatic_mask.span()) b.achromatic_window.push_back(m > 0.5);
  return b;
}

SimilarityScore dscsi(const RGBPatch& x, const RGBPatch& y,
                      const DscsiConfig& cfg, const ViewingConditions& vc) {
  validate(x);
  validate(y);
  return {metric::dscsi_rgb(ad::constant(to_tensor(x)),
                            ad::constant(to_tensor(y)), cfg, vc)
              .item()};
}

double reco_loss_ssim(const RGBPatch& x, const RGBPatch& x_hat,
                      const WindowConfig& w, const SsimConstants& k) {
  return 1.0 - ssim(x, x_hat, w, k).value;
}

double reco_loss_dscsi(const RGBPatch& x, const RGBPatch& x_hat,
                       const DscsiConfig& cfg, const ViewingConditions& vc) {
  return 1.0 - dscsi(x, x_hat, cfg, vc).value;
}

namespace {

template <typename LossFn>
LossAndGradient loss_with_grad(const RGBPatch& x, const RGBPatch& x_hat,
                               LossFn fn) {
  validate(x);
  validate(x_hat);
  const ad::Var xv = ad::constant(to_tensor(x));
  const ad::Var xh = ad::leaf(to_tensor(x_hat));
  const ad::Var loss = fn(xv, xh);
  ad::backward(loss);
  return {loss.item(), rgb_from_tensor(xh.grad())};
}

}  // namespace

LossAndGradient reco_loss_ssim_grad(const RGBPatch& x, const RGBPatch& x_hat,
                                    const WindowConfig& w,
                                    const SsimConstants& k) {
  return loss_with_grad(x, x_hat, [&](const ad::Var& a, const ad::Var& b) {
    return metric::ssim_loss(a, b, w, k);
  });
}

LossAndGradient reco_loss_dscsi_grad(const RGBPatch& x, const RGBPatch& x_hat,
                                     const DscsiConfig& cfg,
                                     const ViewingConditions& vc) {
  return loss_with_grad(x, x_hat, [&](const ad::Var& a, const ad::Var& b) {
    return metric::dscsi_loss(a, b, cfg, vc);
  });
}

}  // namespace stainforge
