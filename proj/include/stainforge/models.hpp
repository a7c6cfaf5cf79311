#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stainforge/autograd.hpp"

namespace stainforge {

/// Named, ordered parameter collection. Order is part of the checkpoint
/// contract and of the optimizer state layout.
class ParamSet {
 public:
  ad::Var& add(const std::string& name, Tensor init);
  const ad::Var& get(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  /// Total number of scalar parameters.
  std::size_t count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Toggles gradient recording for every parameter.
  void set_trainable(bool trainable);
  void zero_grad();
  /// FNV-1a over names, shapes and raw values.
  std::uint64_t digest() const;

 private:
  std::vector<std::pair<std::string, ad::Var>> entries_;
};

/// Copies parameter values by name; shapes must match.
void copy_values(const ParamSet& from, ParamSet& to);

struct GeneratorConfig {
  int depth = 3;
  int base_channels = 16;
  void validate() const;
  std::string describe() const;
};

struct DiscriminatorConfig {
  int levels = 4;
  int base_channels = 16;
  void validate() const;
  std::string describe() const;
};

struct ClassifierConfig {
  int stages = 3;
  int base_channels = 16;
  void validate() const;
  std::string describe() const;
  int feature_length() const { return base_channels << (stages - 1); }
};

/// U-Net: two 3x3 convolutions per level, average-pool down, nearest
/// upsample, one skip per level. Two corrections are added to the input's
/// logit before the final sigmoid: a per-pixel 1x1 head on the decoder
/// output, and a per-sample 3x3 affine map of the logits predicted from the
/// pooled bottleneck and the mean input logit. Both start at zero, so an
/// untrained generator returns its input clamped to [1e-3, 1 - 1e-3].
class Generator {
 public:
  Generator(const GeneratorConfig& cfg, std::uint64_t seed);

  /// x: (N,3,H,W) in [0,1]; H and W divisible by 2^depth.
  ad::Var forward(const ad::Var& x) const;
  int skip_count() const { return cfg_.depth; }

  const GeneratorConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  GeneratorConfig cfg_;
  ParamSet params_;
};

/// Strided convolutions, global average pool and a zero-initialised linear
/// output, so an untrained discriminator returns exactly 0.5.
class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

  /// Probability that each sample is real, (N,1,1,1).
  ad::Var forward(const ad::Var& x) const;

  const DiscriminatorConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  DiscriminatorConfig cfg_;
  ParamSet params_;
};

struct ClassifierOutput {
  ad::Var logits;         // (N,2,1,1)
  ad::Var probabilities;  // (N,2,1,1); index 1 is tumor
  ad::Var features;       // (N,F,1,1), pooled input to the final linear layer
};

/// Residual network: stem convolution, then per stage a stride-2
/// convolution followed by one residual block.
class Classifier {
 public:
  Classifier(const ClassifierConfig& cfg, std::uint64_t seed);

  ClassifierOutput forward(const ad::Var& x) const;

  const ClassifierConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  ClassifierConfig cfg_;
  ParamSet params_;
};

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kKlSmoothing = 1e-8;

struct GanTerms {
  ad::Var d_objective;  // mean[log D(x) + log(1 - D(x_hat))], maximised by D
  ad::Var g_term;       // mean[log(1 - D(x_hat))], minimised by G
};

GanTerms gan_losses(const ad::Var& d_real, const ad::Var& d_fake);

/// Batch mean of KL(softmax(f_x) || softmax(f_x_hat)).
ad::Var feature_kl(const ad::Var& f_x, const ad::Var& f_x_hat);

/// Per-row KL for plain vectors.
double feature_kl(const std::vector<double>& f_x, const std::vector<double>& f_x_hat);

/// Mean cross-entropy of (N,2,1,1) logits against 0/1 labels.
ad::Var cross_entropy(const ad::Var& logits, const std::vector<int>& labels);

struct LossWeights {
  double alpha = 0.2;  // adversarial
  double beta = 0.3;   // reconstruction
  double gamma = 0.5;  // feature preservation
  void validate() const;
};

ad::Var total_loss(const ad::Var& l_gan, const ad::Var& l_reco,
                   const ad::Var& l_fp, const LossWeights& w);
/// Throws std::domain_error on a non-finite component.
double total_loss(double l_gan, double l_reco, double l_fp, const LossWeights& w);

/// Binary container: "SFCK", u32 version, config digest string, string
/// metadata map, then named tensor blocks (name, 4 x i32 shape, f64 data).
/// Integers and doubles are little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string config_digest;
  std::map<std::string, std::string> metadata;
  std::map<std::string, Tensor> tensors;

  void put(const std::string& prefix, const ParamSet& params);
  /// Copies values into existing parameters; shapes must match.
  void take(const std::string& prefix, ParamSet& params) const;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stainforge
