#include <doctest.h>

#include <cmath>
#include <numbers>

#include "stainforge/color_space.hpp"
#include "test_support.hpp"

using namespace stainforge;
using doctest::Approx;

TEST_CASE("rgb_to_gray uses BT.601 luma on encoded values") {
  CHECK(rgb_to_gray(uniform_rgb(8, 8, {1, 1, 1})).at(3, 3) == Approx(1.0).epsilon(1e-12));
  CHECK(rgb_to_gray(uniform_rgb(8, 8, {0, 0, 0})).at(3, 3) == 0.0);
  const GrayPatch red = rgb_to_gray(uniform_rgb(8, 9, {1, 0, 0}));
  CHECK(red.width() == 8);
  CHECK(red.height() == 9);
  for (double v : red.data()) CHECK(v == Approx(0.299).epsilon(1e-12));
}

TEST_CASE("rgb_to_lab reference colours under D65") {
  const LabPatch white = rgb_to_lab(uniform_rgb(8, 8, {1, 1, 1}));
  CHECK(white.at(0, 0, 0) == Approx(100.0).epsilon(1e-9));
  CHECK(std::abs(white.at(0, 0, 1)) < 1e-9);
  CHECK(std::abs(white.at(0, 0, 2)) < 1e-9);

  const LabPatch black = rgb_to_lab(uniform_rgb(8, 8, {0, 0, 0}));
  for (int c = 0; c < 3; ++c) CHECK(std::abs(black.at(2, 2, c)) < 1e-12);

  // Closed form: Y/Yn equals the linearised grey level; L = 116 cbrt(Y) - 16.
  const double lin = std::pow((0.5 + 0.055) / 1.055, 2.4);
  const double expected_l = 116.0 * std::cbrt(lin) - 16.0;
  const LabPatch mid = rgb_to_lab(uniform_rgb(8, 8, {0.5, 0.5, 0.5}));
  CHECK(mid.at(4, 4, 0) == Approx(expected_l).epsilon(1e-12));
  CHECK(mid.at(4, 4, 0) == Approx(53.39).epsilon(1e-4));
  CHECK(std::abs(mid.at(4, 4, 1)) < 1e-6);
  CHECK(std::abs(mid.at(4, 4, 2)) < 1e-6);
}

TEST_CASE("uniform greys are neutral in CIELAB") {
  for (double g = 0.0; g <= 1.0; g += 0.0625) {
    const Vec3 lab = srgb_to_lab({g, g, g});
    CHECK(std::abs(lab[1]) < 1e-6);
    CHECK(std::abs(lab[2]) < 1e-6);
  }
}

TEST_CASE("sRGB transfer round trip") {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const double c = rng.uniform();
    CHECK(linear_to_srgb(srgb_to_linear(c)) == Approx(c).epsilon(1e-6));
  }
}

TEST_CASE("CIELAB round trip through lab_to_srgb") {
  Rng rng(12);
  for (int i = 0; i < 500; ++i) {
    const Vec3 rgb{rng.uniform(), rng.uniform(), rng.uniform()};
    const Vec3 back = lab_to_srgb(srgb_to_lab(rgb));
    for (int c = 0; c < 3; ++c) CHECK(back[c] == Approx(rgb[c]).epsilon(1e-9));
  }
}

TEST_CASE("CSF kernels have unit DC gain") {
  for (double spd : {8.0, 23.0, 32.0, 64.0}) {
    for (const auto& kernel : make_csf_kernels(spd)) {
      double total = 0.0;
      for (const auto& row : kernel.dense())
        for (double v : row) total += v;
      CHECK(std::abs(total - 1.0) < 1e-9);
      for (const auto& comp : kernel.components) CHECK(comp.taps.size() % 2 == 1);
    }
  }
  CHECK_THROWS_AS(make_csf_kernels(0.0), std::invalid_argument);
}

TEST_CASE("S-CIELAB equals CIELAB on spatially uniform images") {
  Rng rng(13);
  for (int i = 0; i < 10; ++i) {
    const RGBPatch img =
        uniform_rgb(12, 10, {rng.uniform(), rng.uniform(), rng.uniform()});
    const LabPatch plain = rgb_to_lab(img);
    const LabPatch filtered = rgb_to_scielab(img);
    for (std::size_t k = 0; k < plain.data().size(); ++k)
      CHECK(std::abs(plain.data()[k] - filtered.data()[k]) < 1e-6);
  }
}

TEST_CASE("S-CIELAB attenuates fine isoluminant chromatic contrast") {
  // Two colours with equal L and opposite a*, in a one-pixel checkerboard.
  const Vec3 c1 = lab_to_srgb({60.0, 25.0, 5.0});
  const Vec3 c2 = lab_to_srgb({60.0, -25.0, 5.0});
  for (double v : c1) REQUIRE((v >= 0.0 && v <= 1.0));
  for (double v : c2) REQUIRE((v >= 0.0 && v <= 1.0));
  RGBPatch board(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) board.set_pixel(x, y, (x + y) % 2 ? c1 : c2);
  const LChPatch plain = lab_to_lch(rgb_to_lab(board));
  const LChPatch filtered = lab_to_lch(rgb_to_scielab(board));
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) CHECK(filtered.at(x, y, 1) < plain.at(x, y, 1));
}

TEST_CASE("lab_to_lch conventions") {
  const Vec3 a = lab_to_lch(Vec3{50, 3, 4});
  CHECK(a[0] == 50.0);
  CHECK(a[1] == Approx(5.0).epsilon(1e-12));
  CHECK(a[2] == Approx(std::atan2(4.0, 3.0)).epsilon(1e-12));
  CHECK(a[2] == Approx(0.9273).epsilon(1e-4));
  const Vec3 gray = lab_to_lch(Vec3{50, 0, 0});
  CHECK(gray[1] == 0.0);
  CHECK(gray[2] == 0.0);
  const Vec3 neg = lab_to_lch(Vec3{50, -3, 0});
  CHECK(neg[1] == Approx(3.0));
  CHECK(neg[2] == Approx(std::numbers::pi).epsilon(1e-12));
  const Vec3 below = lab_to_lch(Vec3{50, 1, -1});
  CHECK(below[2] == Approx(7.0 * std::numbers::pi / 4.0).epsilon(1e-12));
}

TEST_CASE("lab_to_lch inverts through polar coordinates") {
  Rng rng(14);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(-80, 80), b = rng.uniform(-80, 80);
    const Vec3 lch = lab_to_lch(Vec3{50, a, b});
    CHECK(lch[2] >= 0.0);
    CHECK(lch[2] < 2.0 * std::numbers::pi);
    CHECK(std::abs(lch[1] * std::cos(lch[2]) - a) < 1e-9);
    CHECK(std::abs(lch[1] * std::sin(lch[2]) - b) < 1e-9);
  }
}

TEST_CASE("transforms are pure") {
  Rng rng(15);
  const RGBPatch img = stainforge::testing::random_rgb(rng, 16, 16);
  const RGBPatch copy = img;
  const LabPatch first = rgb_to_scielab(img);
  CHECK(rgb_to_scielab(img) == first);
  CHECK(img == copy);
}

TEST_CASE("invalid inputs are rejected") {
  CHECK_THROWS_AS(rgb_to_gray(uniform_rgb(7, 8, {0.5, 0.5, 0.5})), std::invalid_argument);
  RGBPatch bad = uniform_rgb(8, 8, {0.5, 0.5, 0.5});
  bad.at(1, 1, 2) = 1.5;
  CHECK_THROWS_AS(rgb_to_lab(bad), std::invalid_argument);
  ViewingConditions vc;
  vc.samples_per_degree = -1.0;
  CHECK_THROWS_AS(rgb_to_scielab(uniform_rgb(8, 8, {0.5, 0.5, 0.5}), vc),
                  std::invalid_argument);
}
