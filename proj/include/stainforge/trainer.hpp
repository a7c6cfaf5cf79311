#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stainforge/color_space.hpp"
#include "stainforge/image.hpp"
#include "stainforge/metrics.hpp"
#include "stainforge/models.hpp"
#include "stainforge/rng.hpp"
#include "stainforge/synthdata.hpp"

namespace stainforge {

/// Keeps freed memory in the process so per-step tensors stop paying for
/// fresh page faults. Call once from executables that train.
void tune_allocator();

enum class Stage { kClassifier, kGan };
enum class RecoKind { kMse, kSsim, kDscsi };

std::string to_string(RecoKind k);
RecoKind parse_reco_kind(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::kGan;
  double learning_rate = 1e-4;
  int batch_size = 4;  // 2m for the GAN stage
  int epochs = 10;
  std::uint64_t seed = 7;
  RecoKind reco = RecoKind::kDscsi;
  LossWeights weights;
  double momentum = 0.0;
  /// Amplitude of the random OD-space mixing applied to classifier inputs
  /// (classifier stage) or generator inputs (GAN stage); 0 disables it.
  double stain_jitter = 0.0;

  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  ClassifierConfig classifier;
  DscsiConfig dscsi;
  WindowConfig window;
  SsimConstants ssim;
  ViewingConditions viewing;

  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::filesystem::path log_path;        // empty: no CSV log

  static TrainConfig classifier_defaults();
  static TrainConfig gan_defaults();
  void validate() const;
  /// Identifies everything that shapes the trajectory except the epoch
  /// count and output paths, so a run can be resumed and extended.
  std::string digest() const;
};

/// 8-bit patches held in memory with their labels.
class PatchSet {
 public:
  void add(const RGBPatch& img, Label label, std::string path = {});
  std::size_t size() const { return labels_.size(); }
  int side() const { return side_; }
  Label label(std::size_t i) const { return labels_[i]; }
  std::span<const Label> labels() const { return labels_; }
  const std::string& path(std::size_t i) const { return paths_[i]; }
  RGBPatch patch(std::size_t i) const;
  /// (n,3,side,side) tensor of the given patches.
  Tensor batch(std::span<const std::size_t> indices) const;

 private:
  int side_ = 0;
  std::vector<std::uint8_t> pixels_;
  std::vector<Label> labels_;
  std::vector<std::string> paths_;
};

PatchSet load_patch_set(const DatasetManifest& manifest, Split split,
                        const std::string& profile_id);

/// Exactly m tumor and m normal indices, shuffled.
std::vector<std::size_t> sample_balanced_minibatch(std::span<const Label> labels, int m,
                                                   Rng& rng);

/// One epoch: floor(N / 2m) balanced batches, drawn without replacement
/// within each class (a class cycles again only when it runs out).
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const Label> labels, int m,
                                                    Rng& rng);

/// Plain SGD, optionally with heavy-ball momentum.
class Sgd {
 public:
  Sgd(double learning_rate, double momentum) : lr_(learning_rate), momentum_(momentum) {}
  void step(ParamSet& params);
  void save(Checkpoint& ck, const std::string& prefix) const;
  void load(const Checkpoint& ck, const std::string& prefix, const ParamSet& params);

 private:
  double lr_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

struct TrainLogRecord {
  long iter = 0;
  int epoch = 0;
  double d_loss = 0.0;  // -mean[log D(x) + log(1 - D(x_hat))]; 0 for the classifier
  double g_gan = 0.0;
  double reco = 0.0;
  double kl = 0.0;
  double total = 0.0;  // cross-entropy for the classifier stage
  double wall_ms = 0.0;
};

struct TrainLog {
  static constexpr const char* kHeader = "iter,epoch,d_loss,g_gan,reco,kl,total,wall_ms";
  std::vector<TrainLogRecord> records;

  void write_csv(const std::filesystem::path& path) const;
  static TrainLog read_csv(const std::filesystem::path& path);
};

/// Trailing moving average: entry i averages values[max(0, i - window + 1) .. i].
std::vector<double> moving_average(std::span<const double> values, int window);

/// Shape of a reconstruction-loss curve over its first `steps` entries.
struct CurveSummary {
  double initial = 0.0;   // mean of the first `window` losses
  double final = 0.0;     // trailing `window`-mean at the last step considered
  double ratio = 0.0;     // final / initial
  /// Variance of successive differences of the raw losses, divided by
  /// initial^2 so curves on different loss scales compare.
  double step_variance = 0.0;
  std::size_t steps = 0;
};

/// Summarises the `reco` column of records with epoch <= max_epoch.
CurveSummary summarize_reco_curve(const TrainLog& log, int window, int max_epoch);

/// Raised when a loss stops being finite; the offending record is kept.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, TrainLogRecord rec)
      : std::runtime_error(what), record(rec) {}
  TrainLogRecord record;
};

using ProgressFn = std::function<void(const TrainLogRecord&)>;

struct ClassifierRun {
  Classifier model;
  TrainLog log;
};

ClassifierRun train_classifier(const PatchSet& train, const TrainConfig& cfg,
                               const ProgressFn& on_epoch = {});

/// In-place OD-space stain mixing: od' = (I + E) od per sample, E uniform
/// in [-amount, amount].
void stain_jitter(Tensor& batch, double amount, Rng& rng);

struct GanState {
  Generator generator;
  Discriminator discriminator;
  Sgd opt_g;
  Sgd opt_d;
  int epoch = 0;  // completed epochs
  long iter = 0;  // completed steps

  explicit GanState(const TrainConfig& cfg);
};

/// One iteration of the minibatch procedure: discriminator ascent, then a
/// generator descent on the weighted objective. `classifier` must be frozen.
TrainLogRecord gan_training_step(GanState& state, const Classifier& classifier,
                                 const Tensor& batch, const TrainConfig& cfg, Rng& aug_rng);

struct GanRun {
  Generator generator;
  Discriminator discriminator;
  TrainLog log;
};

struct GanOptions {
  bool resume = false;  // continue from checkpoint_dir/gan.ckpt if present
  ProgressFn on_epoch;
};

GanRun train_gan(const PatchSet& train_a, const Classifier& classifier, const TrainConfig& cfg,
                 const GanOptions& opts = {});

std::vector<RGBPatch> normalize_patches(const Generator& g, std::span<const RGBPatch> patches);

struct EvalReport {
  double auc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;
  std::size_t n_samples = 0;
  double threshold = 0.5;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

/// Tumor is the positive class. AUC is the Mann-Whitney statistic with
/// tied scores counted as one half. Precision is 0 when nothing is
/// predicted positive.
EvalReport compute_eval_report(std::span<const double> scores, std::span<const Label> labels,
                               double threshold = 0.5);

/// Tumor probabilities of every patch in the set, optionally after
/// normalization by `normalizer`.
std::vector<double> classifier_scores(const Classifier& c, const PatchSet& set,
                                      const Generator* normalizer = nullptr);

EvalReport evaluate_classifier(const Classifier& c, const PatchSet& set,
                               const Generator* normalizer = nullptr);

/// Model checkpoints written by the trainers.
Classifier load_classifier(const std::filesystem::path& path);
Generator load_generator(const std::filesystem::path& path);
void save_classifier(const Classifier& c, const std::filesystem::path& path);
void save_generator(const Generator& g, const std::filesystem::path& path);

}  // namespace stainforge
