#include <doctest.h>

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "stainforge/color_space.hpp"
#include "stainforge/metrics.hpp"
#include "stainforge/synthdata.hpp"
#include "test_support.hpp"

using namespace stainforge;
using stainforge::testing::TempDir;

namespace {

// Solves the 2x2 normal equations A^T A c = A^T od directly from the render.
std::array<double, 2> invert_pixel(const RGBPatch& img, int x, int y, const StainProfile& p) {
  double od[3];
  for (int c = 0; c < 3; ++c) od[c] = -std::log(srgb_to_linear(img.at(x, y, c)));
  const auto& a = p.od[0];
  const auto& b = p.od[1];
  double g00 = 0, g01 = 0, g11 = 0, r0 = 0, r1 = 0;
  for (int c = 0; c < 3; ++c) {
    g00 += a[c] * a[c];
    g01 += a[c] * b[c];
    g11 += b[c] * b[c];
    r0 += a[c] * od[c];
    r1 += b[c] * od[c];
  }
  const double det = g00 * g11 - g01 * g01;
  return {(g11 * r0 - g01 * r1) / det / p.intensity_scale[0],
          (g00 * r1 - g01 * r0) / det / p.intensity_scale[1]};
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

void write_png16(const std::filesystem::path& path, int side) {
  FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, f);
  png_set_IHDR(png, info, side, side, 16, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(side) * 6, 0x80);
  for (int y = 0; y < side; ++y) png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

}  // namespace

TEST_CASE("default profiles satisfy their invariants") {
  for (const auto& p : {StainProfile::lab_a(), StainProfile::lab_b()}) {
    CHECK_NOTHROW(p.validate());
    for (const auto& col : p.od) {
      CHECK(std::abs(std::hypot(col[0], col[1], col[2]) - 1.0) < 1e-9);
      for (double v : col) CHECK(v >= 0.0);
    }
    CHECK(angle_degrees(p.od[0], p.od[1]) >= 10.0);
  }
  const auto a = StainProfile::lab_a();
  const auto b = StainProfile::lab_b();
  for (int k = 0; k < 2; ++k) {
    const double rot = angle_degrees(a.od[k], b.od[k]);
    CHECK(rot >= 10.0);
    CHECK(rot <= 15.0);
    CHECK(std::abs(b.intensity_scale[k] / a.intensity_scale[k] - 1.0) == doctest::Approx(0.2));
  }
}

TEST_CASE("profile validation rejects collinear and non-unit columns") {
  StainProfile p = StainProfile::lab_a();
  p.od[1] = p.od[0];
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = StainProfile::lab_a();
  p.od[0][0] *= 1.1;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = StainProfile::lab_a();
  p.intensity_scale[1] = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("zero concentration renders pure white") {
  ConcentrationField f;
  f.width = f.height = 32;
  f.c1.assign(32 * 32, 0.0);
  f.c2.assign(32 * 32, 0.0);
  const RGBPatch img = render_patch(f, StainProfile::lab_a());
  for (double v : img.data()) CHECK(v == 1.0);
}

TEST_CASE("doubling nuclear concentration darkens every absorbing channel") {
  ConcentrationField f = generate_field(3, Label::kTumor, 32);
  ConcentrationField g = f;
  for (double& v : g.c1) v *= 2.0;
  const auto p = StainProfile::lab_a();
  const RGBPatch a = render_patch(f, p);
  const RGBPatch b = render_patch(g, p);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * 32 + x;
      if (f.c1[i] <= 0.0) continue;
      for (int c = 0; c < 3; ++c)
        if (p.od[0][c] > 0.0) CHECK(b.at(x, y, c) < a.at(x, y, c));
    }
}

TEST_CASE("render then invert recovers concentrations") {
  for (const auto& p : {StainProfile::lab_a(), StainProfile::lab_b()})
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto f = generate_field(seed, seed % 2 ? Label::kTumor : Label::kNormal, 48);
      const RGBPatch img = render_patch(f, p);
      double worst = 0.0;
      for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x) {
          const auto c = invert_pixel(img, x, y, p);
          const std::size_t i = static_cast<std::size_t>(y) * 48 + x;
          worst = std::max({worst, std::abs(c[0] - f.c1[i]), std::abs(c[1] - f.c2[i])});
        }
      CHECK(worst < 1e-6);
    }
}

TEST_CASE("fields are deterministic and non-negative") {
  const auto a = generate_field(42, Label::kTumor, 64);
  const auto b = generate_field(42, Label::kTumor, 64);
  CHECK(a.c1 == b.c1);
  CHECK(a.c2 == b.c2);
  CHECK(a.digest() == b.digest());
  CHECK(a.digest() != generate_field(43, Label::kTumor, 64).digest());
  for (double v : a.c1) CHECK(v >= 0.0);
  for (double v : a.c2) CHECK(v >= 0.0);
  CHECK_THROWS_AS(generate_field(1, Label::kNormal, 16), std::invalid_argument);
}

TEST_CASE("tumor fields carry more nuclear stain than normal fields") {
  std::vector<double> tumor, normal;
  for (std::uint64_t s = 0; s < 100; ++s) {
    tumor.push_back(mean_of(generate_field(s, Label::kTumor, 64).c1));
    normal.push_back(mean_of(generate_field(s, Label::kNormal, 64).c1));
  }
  for (std::size_t i = 0; i < tumor.size(); ++i) CHECK(tumor[i] > normal[i]);
  auto stats = [](const std::vector<double>& v) {
    const double m = mean_of(v);
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
  };
  const auto [mt, st] = stats(tumor);
  const auto [mn, sn] = stats(normal);
  // Means separated by more than three standard errors of each.
  CHECK(mt - 3.0 * st / 10.0 > mn + 3.0 * sn / 10.0);
}

TEST_CASE("paired dataset layout, pairing and determinism") {
  TempDir dir("synth");
  SynthOptions opts;
  opts.n_per_class = 10;
  opts.patch_size = 32;
  const auto m = generate_paired_dataset(opts, StainProfile::lab_a(), StainProfile::lab_b(),
                                         dir.path() / "d1");
  CHECK(m.records.size() == 40);
  const auto counts = m.counts();
  int tumor = 0, normal = 0;
  for (const auto& r : m.records) (r.label == Label::kTumor ? tumor : normal)++;
  CHECK(tumor == 20);
  CHECK(normal == 20);
  for (const char* profile : {"A", "B"})
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
      const auto sel = m.select(s, profile);
      const auto t = std::count_if(sel.begin(), sel.end(),
                                   [](const auto& r) { return r.label == Label::kTumor; });
      CHECK(2 * t == static_cast<long>(sel.size()));
    }
  CHECK(m.select(Split::kTrain, "A").size() == 16);

  std::set<std::string> paths;
  for (const auto& r : m.records) CHECK(paths.insert(r.path).second);

  const auto pairs = load_pairs(dir.path() / "d1" / "pairs.csv");
  REQUIRE(pairs.size() == 20);
  // Re-rendering the pair's field under B reproduces B's file exactly.
  for (std::size_t k = 0; k < pairs.size(); k += 7) {
    const auto& pr = pairs[k];
    const int index = std::stoi(pr.pair_id.substr(pr.pair_id.find('_') + 1));
    const std::uint64_t seed = derive_seed(opts.seed, static_cast<std::uint64_t>(pr.label) + 1,
                                           static_cast<std::uint64_t>(index));
    const auto field = generate_field(seed, pr.label, opts.patch_size);
    CHECK(field.digest() == pr.field_digest);
    TempDir scratch("rerender");
    save_patch(render_patch(field, StainProfile::lab_b()), scratch.path() / "b.png");
    CHECK(load_patch(scratch.path() / "b.png") == load_patch(dir.path() / "d1" / pr.path_b));
    const RGBPatch a = load_patch(dir.path() / "d1" / pr.path_a);
    const RGBPatch b = load_patch(dir.path() / "d1" / pr.path_b);
    CHECK(dscsi(a, a).value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(dscsi(a, b).value < 1.0);
  }

  const auto m2 = generate_paired_dataset(opts, StainProfile::lab_a(), StainProfile::lab_b(),
                                          dir.path() / "d2");
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    std::ifstream f1(dir.path() / "d1" / m.records[i].path, std::ios::binary);
    std::ifstream f2(dir.path() / "d2" / m2.records[i].path, std::ios::binary);
    const std::string s1((std::istreambuf_iterator<char>(f1)), {});
    const std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
  }
}

TEST_CASE("paired dataset preconditions") {
  TempDir dir("synth_pre");
  SynthOptions opts;
  opts.n_per_class = 0;
  CHECK_THROWS_AS(generate_paired_dataset(opts, StainProfile::lab_a(), StainProfile::lab_b(),
                                          dir.path()),
                  std::invalid_argument);
  opts.n_per_class = 1;
  CHECK_THROWS_AS(generate_paired_dataset(opts, StainProfile::lab_a(), StainProfile::lab_a(),
                                          dir.path()),
                  std::invalid_argument);
  std::ofstream(dir.path() / "file") << "x";
  CHECK_THROWS_AS(generate_paired_dataset(opts, StainProfile::lab_a(), StainProfile::lab_b(),
                                          dir.path() / "file" / "sub"),
                  std::runtime_error);
}

TEST_CASE("manifest round trip and parse errors") {
  TempDir dir("manifest");
  DatasetManifest m;
  m.root = dir.path();
  m.records = {{"A/train/x.png", Label::kTumor, Split::kTrain, "A"},
               {"B/test/y.png", Label::kNormal, Split::kTest, "B"}};
  write_manifest(m, dir.path() / "manifest.csv");
  const auto back = load_manifest(dir.path() / "manifest.csv");
  CHECK(back.records == m.records);
  CHECK(back.root == dir.path());

  std::ofstream(dir.path() / "bad.csv") << kManifestHeader << "\nA/x.png,tumor,train,A\n"
                                        << "A/y.png,t,train,A\n";
  try {
    load_manifest(dir.path() / "bad.csv");
    FAIL("malformed label accepted");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find(":3") != std::string::npos);
  }
  CHECK_THROWS(load_manifest(dir.path() / "missing.csv"));

  m.records.push_back(m.records.front());
  CHECK_THROWS(m.validate());
}

TEST_CASE("patch files are 8-bit RGB") {
  TempDir dir("png");
  Rng rng(5);
  RGBPatch img = stainforge::testing::random_rgb(rng, 32, 32);
  save_patch(img, dir.path() / "p.png");
  const RGBPatch back = load_patch(dir.path() / "p.png");
  for (std::size_t i = 0; i < img.data().size(); ++i)
    CHECK(std::abs(back.data()[i] - img.data()[i]) <= 0.5 / 255.0 + 1e-12);
  write_png16(dir.path() / "deep.png", 32);
  CHECK_THROWS(load_patch(dir.path() / "deep.png"));
  CHECK_THROWS(load_patch(dir.path() / "absent.png"));
}
