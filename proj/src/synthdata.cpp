#include "stainforge/synthdata.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "stainforge/color_space.hpp"
#include "stainforge/rng.hpp"

namespace stainforge {

namespace {

using Vec = std::array<double, 3>;

double norm(const Vec& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

Vec normalized(const Vec& v) {
  const double n = norm(v);
  return {v[0] / n, v[1] / n, v[2] / n};
}

// Rotates unit vector u by `degrees` towards `target` in their common plane.
Vec rotate_towards(const Vec& u, const Vec& target, double degrees) {
  const double d = u[0] * target[0] + u[1] * target[1] + u[2] * target[2];
  const Vec w = normalized(
      {target[0] - d * u[0], target[1] - d * u[1], target[2] - d * u[2]});
  const double t = degrees * std::numbers::pi / 180.0;
  return normalized({std::cos(t) * u[0] + std::sin(t) * w[0],
                     std::cos(t) * u[1] + std::sin(t) * w[1],
                     std::cos(t) * u[2] + std::sin(t) * w[2]});
}

// Bilinearly interpolated lattice noise in [0,1].
std::vector<double> value_noise(Rng& rng, int size, int cell) {
  const int g = size / cell + 2;
  std::vector<double> lattice(static_cast<std::size_t>(g) * g);
  for (double& v : lattice) v = rng.uniform();
  std::vector<double> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const double fy = static_cast<double>(y) / cell;
      const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
      double tx = fx - ix, ty = fy - iy;
      tx = tx * tx * (3.0 - 2.0 * tx);
      ty = ty * ty * (3.0 - 2.0 * ty);
      auto at = [&](int xx, int yy) { return lattice[yy * g + xx]; };
      const double top = at(ix, iy) * (1 - tx) + at(ix + 1, iy) * tx;
      const double bot = at(ix, iy + 1) * (1 - tx) + at(ix + 1, iy + 1) * tx;
      out[static_cast<std::size_t>(y) * size + x] = top * (1 - ty) + bot * ty;
    }
  return out;
}

struct ClassParams {
  double nuclei_per_pixel;
  double radius_lo, radius_hi;
  double max_elongation;
  double peak_lo, peak_hi;
  double cyto_base, cyto_range;
};

constexpr ClassParams kNormalParams{0.0030, 2.5, 4.0, 1.3, 1.4, 1.8, 0.35, 0.50};
constexpr ClassParams kTumorParams{0.0050, 4.0, 6.5, 1.7, 1.8, 2.4, 0.25, 0.45};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

void check_csv_safe(const std::string& s) {
  if (s.find_first_of(",\n\r") != std::string::npos)
    throw std::invalid_argument("value contains a CSV delimiter: " + s);
}

}  // namespace

std::string to_string(Label l) { return l == Label::kTumor ? "tumor" : "normal"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Label parse_label(const std::string& s) {
  if (s == "tumor") return Label::kTumor;
  if (s == "normal") return Label::kNormal;
  throw std::invalid_argument("invalid label '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("invalid split '" + s + "'");
}

double angle_degrees(const std::array<double, 3>& u,
                     const std::array<double, 3>& v) {
  const double c = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (norm(u) * norm(v));
  return std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

void StainProfile::validate() const {
  for (const auto& col : od) {
    if (std::abs(norm(col) - 1.0) > 1e-9)
      throw std::invalid_argument("stain OD columns must be unit norm");
    for (double v : col)
      if (v < 0.0) throw std::invalid_argument("stain OD entries must be >= 0");
  }
  if (angle_degrees(od[0], od[1]) < 10.0)
    throw std::invalid_argument("stain OD columns are nearly collinear");
  for (double s : intensity_scale)
    if (!(s > 0.0)) throw std::invalid_argument("intensity scales must be > 0");
}

StainProfile StainProfile::lab_a() {
  StainProfile p;
  p.od[0] = normalized({0.65, 0.70, 0.29});
  p.od[1] = normalized({0.07, 0.99, 0.11});
  p.intensity_scale = {1.0, 1.0};
  return p;
}

StainProfile StainProfile::lab_b() {
  const StainProfile a = lab_a();
  StainProfile p;
  p.od[0] = rotate_towards(a.od[0], {1.0, 0.0, 0.0}, 12.0);
  p.od[1] = rotate_towards(a.od[1], {0.0, 0.0, 1.0}, 12.0);
  p.intensity_scale = {1.2, 0.8};
  return p;
}

std::uint64_t ConcentrationField::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed(&width, sizeof width);
  feed(&height, sizeof height);
  const int l = static_cast<int>(label);
  feed(&l, sizeof l);
  feed(c1.data(), c1.size() * sizeof(double));
  feed(c2.data(), c2.size() * sizeof(double));
  return h;
}

RGBPatch render_patch(const ConcentrationField& field,
                      const StainProfile& profile) {
  profile.validate();
  RGBPatch out(field.width, field.height);
  for (int y = 0; y < field.height; ++y)
    for (int x = 0; x < field.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * field.width + x;
      const double s1 = profile.intensity_scale[0] * field.c1[i];
      const double s2 = profile.intensity_scale[1] * field.c2[i];
      for (int c = 0; c < 3; ++c) {
        const double od = profile.od[0][c] * s1 + profile.od[1][c] * s2;
        out.at(x, y, c) = std::clamp(linear_to_srgb(std::exp(-od)), 0.0, 1.0);
      }
    }
  return out;
}

ConcentrationField generate_field(std::uint64_t seed, Label label, int size) {
  if (size < 32) throw std::invalid_argument("field size must be >= 32");
  const ClassParams& p = label == Label::kTumor ? kTumorParams : kNormalParams;
  Rng rng(seed);
  ConcentrationField f;
  f.width = f.height = size;
  f.label = label;
  const std::size_t n = static_cast<std::size_t>(size) * size;

  const std::vector<double> cyto = value_noise(rng, size, 16);
  const std::vector<double> fine = value_noise(rng, size, 4);
  f.c2.resize(n);
  f.c1.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    f.c2[i] = p.cyto_base + p.cyto_range * cyto[i];
    f.c1[i] = 0.03 + 0.05 * fine[i];
  }

  const double expected = p.nuclei_per_pixel * static_cast<double>(n);
  const int count = static_cast<int>(std::lround(expected * rng.uniform(0.8, 1.2)));
  std::vector<double> nucleus(n, 0.0);
  for (int k = 0; k < count; ++k) {
    const double cx = rng.uniform(0.0, size), cy = rng.uniform(0.0, size);
    const double r = rng.uniform(p.radius_lo, p.radius_hi);
    const double elong = rng.uniform(1.0, p.max_elongation);
    const double ra = r * std::sqrt(elong), rb = r / std::sqrt(elong);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double peak = rng.uniform(p.peak_lo, p.peak_hi);
    const double ct = std::cos(theta), st = std::sin(theta);
    const int reach = static_cast<int>(std::ceil(ra * 1.3)) + 1;
    for (int y = std::max(0, static_cast<int>(cy) - reach);
         y < std::min(size, static_cast<int>(cy) + reach + 1); ++y)
      for (int x = std::max(0, static_cast<int>(cx) - reach);
           x < std::min(size, static_cast<int>(cx) + reach + 1); ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = (dx * ct + dy * st) / ra;
        const double v = (-dx * st + dy * ct) / rb;
        const double d = std::sqrt(u * u + v * v);
        const double m = std::clamp((1.2 - d) / 0.4, 0.0, 1.0);
        const std::size_t i = static_cast<std::size_t>(y) * size + x;
        nucleus[i] = std::max(nucleus[i], m * peak);
      }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (nucleus[i] <= 0.0) continue;
    const double chromatin = 0.85 + 0.3 * fine[(i * 7919) % n];
    f.c1[i] += nucleus[i] * chromatin;
    f.c2[i] *= 1.0 - 0.8 * std::min(1.0, nucleus[i] / p.peak_lo);
  }
  return f;
}

std::vector<ManifestRecord> DatasetManifest::select(
    Split split, const std::string& profile_id) const {
  std::vector<ManifestRecord> out;
  for (const auto& r : records)
    if (r.split == split && r.profile_id == profile_id) out.push_back(r);
  return out;
}

std::map<std::string, int> DatasetManifest::counts() const {
  std::map<std::string, int> out;
  for (const auto& r : records)
    ++out[to_string(r.split) + "/" + r.profile_id + "/" + to_string(r.label)];
  return out;
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : records)
    if (!seen.insert(r.path).second)
      throw std::invalid_argument("duplicate manifest path " + r.path);
}

DatasetManifest generate_paired_dataset(const SynthOptions& opts,
                                        const StainProfile& profile_a,
                                        const StainProfile& profile_b,
                                        const std::filesystem::path& out_dir) {
  if (opts.n_per_class < 1)
    throw std::invalid_argument("n_per_class must be >= 1");
  profile_a.validate();
  profile_b.validate();
  if (profile_a.od == profile_b.od &&
      profile_a.intensity_scale == profile_b.intensity_scale)
    throw std::invalid_argument("paired profiles must differ");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw std::runtime_error("cannot create output directory " +
                             out_dir.string());

  const int n_train = static_cast<int>(std::floor(opts.n_per_class * opts.train_fraction));
  const int n_val = static_cast<int>(std::floor(opts.n_per_class * opts.val_fraction));

  DatasetManifest manifest;
  manifest.root = out_dir;
  std::vector<PairRecord> pairs;
  for (Label label : {Label::kTumor, Label::kNormal}) {
    for (int i = 0; i < opts.n_per_class; ++i) {
      const Split split = i < n_train           ? Split::kTrain
                          : i < n_train + n_val ? Split::kVal
                                                : Split::kTest;
      const std::uint64_t seed =
          derive_seed(opts.seed, static_cast<std::uint64_t>(label) + 1, i);
      const ConcentrationField field =
          generate_field(seed, label, opts.patch_size);
      char name[64];
      std::snprintf(name, sizeof name, "%s_%05d", to_string(label).c_str(), i);
      PairRecord pr{name, label, split, "", "", field.digest()};
      for (const auto& [id, profile] :
           {std::pair{std::string("A"), &profile_a},
            std::pair{std::string("B"), &profile_b}}) {
        const std::string rel =
            id + "/" + to_string(split) + "/" + std::string(name) + ".png";
        std::filesystem::create_directories(out_dir / id / to_string(split));
        save_patch(render_patch(field, *profile), out_dir / rel);
        manifest.records.push_back({rel, label, split, id});
        (id == "A" ? pr.path_a : pr.path_b) = rel;
      }
      pairs.push_back(pr);
    }
  }
  write_manifest(manifest, out_dir / "manifest.csv");
  write_pairs(pairs, out_dir / "pairs.csv");
  return manifest;
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  m.validate();
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  os << kManifestHeader << '\n';
  for (const auto& r : m.records) {
    check_csv_safe(r.path);
    check_csv_safe(r.profile_id);
    os << r.path << ',' << to_string(r.label) << ',' << to_string(r.split)
       << ',' << r.profile_id << '\n';
  }
  if (!os) throw std::runtime_error("failed writing manifest " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& why) {
    throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                             ": " + why);
  };
  if (!std::getline(is, line) || strip_cr(line) != kManifestHeader) {
    line_no = 1;
    fail(std::string("expected header '") + kManifestHeader + "'");
  }
  line_no = 1;
  std::set<std::string> seen;
  while (std::getline(is, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 4) fail("expected 4 fields, got " + std::to_string(cells.size()));
    ManifestRecord r;
    r.path = cells[0];
    if (r.path.empty()) fail("empty path");
    try {
      r.label = parse_label(cells[1]);
      r.split = parse_split(cells[2]);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    r.profile_id = cells[3];
    if (r.profile_id.empty()) fail("empty profile_id");
    if (!seen.insert(r.path).second) fail("duplicate path " + r.path);
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_pairs(const std::vector<PairRecord>& pairs,
                 const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write pairs file " + path.string());
  os << kPairsHeader << '\n';
  for (const auto& p : pairs) {
    char digest[32];
    std::snprintf(digest, sizeof digest, "%016llx",
                  static_cast<unsigned long long>(p.field_digest));
    os << p.pair_id << ',' << to_string(p.label) << ',' << to_string(p.split)
       << ',' << p.path_a << ',' << p.path_b << ',' << digest << '\n';
  }
}

std::vector<PairRecord> load_pairs(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open pairs file " + path.string());
  std::string line;
  if (!std::getline(is, line) || strip_cr(line) != kPairsHeader)
    throw std::runtime_error(path.string() + ":1: unexpected header");
  std::vector<PairRecord> out;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    try {
      if (c.size() != 6) throw std::invalid_argument("expected 6 fields");
      out.push_back({c[0], parse_label(c[1]), parse_split(c[2]), c[3], c[4],
                     std::stoull(c[5], nullptr, 16)});
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return out;
}

void save_patch(const RGBPatch& img, const std::filesystem::path& path) {
  std::vector<png_byte> buf(img.pixel_count() * 3);
  const auto d = img.data();
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<png_byte>(
        std::lround(std::clamp(d[i], 0.0, 1.0) * 255.0));
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG " + path.string() + ": " +
                             image.message);
}

RGBPatch load_patch(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw std::runtime_error("missing image file " + path.string());
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " +
                             image.message);
  const png_uint_32 fmt = image.format;
  std::string problem;
  if (fmt & PNG_FORMAT_FLAG_LINEAR) problem = "16-bit samples (need 8-bit RGB)";
  else if (!(fmt & PNG_FORMAT_FLAG_COLOR)) problem = "grayscale (need 8-bit RGB)";
  else if (fmt & PNG_FORMAT_FLAG_ALPHA) problem = "alpha channel (need 8-bit RGB)";
  if (!problem.empty()) {
    png_image_free(&image);
    throw std::runtime_error("unsupported image format in " + path.string() +
                             ": " + problem);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr))
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " +
                             image.message);
  RGBPatch img(static_cast<int>(image.width), static_cast<int>(image.height));
  auto d = img.data();
  for (std::size_t i = 0; i < buf.size(); ++i) d[i] = buf[i] / 255.0;
  return img;
}

}  // namespace stainforge
