#pragma once

// Beer-Lambert rendering of synthetic two-stain tissue, paired lab A / lab B
// datasets, and the on-disk patch/manifest formats.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stainforge/image.hpp"

namespace stainforge {

enum class Label { kNormal = 0, kTumor = 1 };
enum class Split { kTrain, kVal, kTest };

std::string to_string(Label l);
std::string to_string(Split s);
Label parse_label(const std::string& s);
Split parse_split(const std::string& s);

/// Two unit-norm optical-density columns (stain 1 nuclear, stain 2
/// cytoplasmic) and per-stain concentration multipliers.
struct StainProfile {
  std::array<std::array<double, 3>, 2> od{};  // od[stain][channel]
  std::array<double, 2> intensity_scale{1.0, 1.0};

  /// Throws unless columns are unit-norm, nonnegative and at least 10
  /// degrees apart, and scales are positive.
  void validate() const;

  /// Hematoxylin/eosin-like reference lab.
  static StainProfile lab_a();
  /// lab_a with both columns rotated 12 degrees and intensities +-20%.
  static StainProfile lab_b();
};

/// Angle in degrees between two OD directions.
double angle_degrees(const std::array<double, 3>& u,
                     const std::array<double, 3>& v);

struct ConcentrationField {
  int width = 0;
  int height = 0;
  std::vector<double> c1;  // nuclear stain
  std::vector<double> c2;  // cytoplasmic stain
  Label label = Label::kNormal;

  /// FNV-1a over dimensions, label and concentration bits.
  std::uint64_t digest() const;
};

RGBPatch render_patch(const ConcentrationField& field,
                      const StainProfile& profile);

/// Deterministic per seed. Tumour fields carry larger, denser nuclei.
ConcentrationField generate_field(std::uint64_t seed, Label label, int size);

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  Label label = Label::kNormal;
  Split split = Split::kTrain;
  std::string profile_id;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory paths resolve against
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const ManifestRecord& r) const {
    return root / r.path;
  }
  std::vector<ManifestRecord> select(Split split,
                                     const std::string& profile_id) const;
  /// (split, profile, label) -> count
  std::map<std::string, int> counts() const;
  /// Throws on duplicate paths.
  void validate() const;
};

struct PairRecord {
  std::string pair_id;
  Label label = Label::kNormal;
  Split split = Split::kTrain;
  std::string path_a;
  std::string path_b;
  std::uint64_t field_digest = 0;
};

struct SynthOptions {
  int n_per_class = 1000;
  std::uint64_t seed = 7;
  int patch_size = 64;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
};

/// Writes A/ and B/ renders of every field, manifest.csv and pairs.csv into
/// out_dir. Splits are assigned per class in index order.
DatasetManifest generate_paired_dataset(const SynthOptions& opts,
                                        const StainProfile& profile_a,
                                        const StainProfile& profile_b,
                                        const std::filesystem::path& out_dir);

inline constexpr const char* kManifestHeader = "path,label,split,profile_id";
inline constexpr const char* kPairsHeader =
    "pair_id,label,split,path_a,path_b,field_digest";

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
/// Parse errors name the file and line.
DatasetManifest load_manifest(const std::filesystem::path& path);
void write_pairs(const std::vector<PairRecord>& pairs,
                 const std::filesystem::path& path);
std::vector<PairRecord> load_pairs(const std::filesystem::path& path);

/// 8-bit RGB PNG.
void save_patch(const RGBPatch& img, const std::filesystem::path& path);
/// Rejects non-8-bit, grayscale and alpha images.
RGBPatch load_patch(const std::filesystem::path& path);

}  // namespace stainforge
