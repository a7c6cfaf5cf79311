// stainforge: synthesis, two-stage training, normalization, scoring and
// reporting from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "report.hpp"
#include "stainforge/baselines.hpp"
#include "stainforge/metrics.hpp"
#include "stainforge/synthdata.hpp"
#include "stainforge/trainer.hpp"

namespace fs = std::filesystem;
using namespace stainforge;

namespace {

constexpr std::uint64_t kDefaultSeed = 7;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw std::runtime_error(what + " not found: " + p.string());
}

// Options shared by every command that trains or normalizes.
struct Common {
  std::uint64_t seed = kDefaultSeed;
};

void add_seed(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Random seed")
      ->envname("STAINFORGE_SEED")
      ->capture_default_str();
}

void add_config(CLI::App* app) {
  // Consumed by expand_config before parsing; registered for --help.
  app->add_option("--config", "Flat key = value file; command-line flags win");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") + 1 - b);
}

// Rewrites `--config FILE` into `--key=value` arguments for every key the
// command line does not already set. Lines are `key = value`; `#` starts a
// comment; keys are long option names without the dashes.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::optional<fs::path> file;
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      file = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
    } else {
      kept.push_back(args[i]);
    }
  }
  if (!file) return kept;
  std::ifstream is(*file);
  if (!is) throw UsageError("cannot read config file " + file->string());
  auto given = [&](const std::string& key) {
    for (const auto& a : kept)
      if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) return true;
    return false;
  };
  std::string line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(file->string() + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || key == "config")
      throw UsageError(file->string() + ":" + std::to_string(lineno) + ": bad key");
    if (!given(key)) kept.push_back("--" + key + "=" + value);
  }
  return kept;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  Common common;
  fs::path out;
  SynthOptions opts;
};

int run_synth(const SynthArgs& a) {
  SynthOptions opts = a.opts;
  opts.seed = a.common.seed;
  const DatasetManifest m =
      generate_paired_dataset(opts, StainProfile::lab_a(), StainProfile::lab_b(), a.out);
  std::printf("wrote %zu patches to %s\n", m.records.size(), a.out.string().c_str());
  for (const auto& [key, n] : m.counts()) std::printf("  %-24s %d\n", key.c_str(), n);
  return 0;
}

// ------------------------------------------------------------ training

struct ModelArgs {
  int g_depth = GeneratorConfig{}.depth;
  int g_base = GeneratorConfig{}.base_channels;
  int d_levels = DiscriminatorConfig{}.levels;
  int d_base = DiscriminatorConfig{}.base_channels;
  int c_stages = ClassifierConfig{}.stages;
  int c_base = ClassifierConfig{}.base_channels;
};

void add_classifier_shape(CLI::App* app, ModelArgs& m) {
  app->add_option("--classifier-stages", m.c_stages, "Classifier residual stages")
      ->capture_default_str();
  app->add_option("--classifier-base", m.c_base, "Classifier base channels")
      ->capture_default_str();
}

struct TrainArgs {
  Common common;
  ModelArgs model;
  fs::path data;
  fs::path out;
  fs::path classifier;
  std::string profile = "A";
  std::string reco = "dscsi";
  TrainConfig cfg;
  bool resume = false;
};

void add_schedule(CLI::App* app, TrainArgs& a) {
  app->add_option("--data", a.data, "Dataset manifest.csv")->required();
  app->add_option("--out", a.out, "Output directory")->required();
  app->add_option("--profile", a.profile, "Training profile id")->capture_default_str();
  app->add_option("--lr", a.cfg.learning_rate, "Learning rate")->capture_default_str();
  app->add_option("--batch", a.cfg.batch_size, "Batch size (2m)")->capture_default_str();
  app->add_option("--epochs", a.cfg.epochs, "Epochs")->capture_default_str();
  app->add_option("--momentum", a.cfg.momentum, "Heavy-ball momentum; 0 is plain SGD")
      ->capture_default_str();
  app->add_option("--jitter", a.cfg.stain_jitter, "Stain-mixing augmentation amplitude")
      ->capture_default_str();
}

void finish_config(TrainArgs& a) {
  a.cfg.seed = a.common.seed;
  a.cfg.generator = {a.model.g_depth, a.model.g_base};
  a.cfg.discriminator = {a.model.d_levels, a.model.d_base};
  a.cfg.classifier = {a.model.c_stages, a.model.c_base};
  a.cfg.dscsi.window = a.cfg.window;
  a.cfg.checkpoint_dir = a.out;
}

void print_record(const char* prefix, const TrainLogRecord& r) {
  std::printf("%s epoch %d iter %ld d_loss %.6f g_gan %.6f reco %.6f kl %.6f total %.6f\n",
              prefix, r.epoch, r.iter, r.d_loss, r.g_gan, r.reco, r.kl, r.total);
  std::fflush(stdout);
}

int run_train_classifier(TrainArgs& a) {
  finish_config(a);
  a.cfg.stage = Stage::kClassifier;
  a.cfg.log_path = a.out / "classifier_log.csv";
  const DatasetManifest m = load_manifest(a.data);
  const PatchSet train = load_patch_set(m, Split::kTrain, a.profile);
  std::printf("training classifier on %zu %s patches\n", train.size(), a.profile.c_str());
  ClassifierRun run = train_classifier(train, a.cfg, [](const TrainLogRecord& r) {
    std::printf("epoch %d iter %ld cross-entropy %.6f\n", r.epoch, r.iter, r.total);
    std::fflush(stdout);
  });
  const PatchSet val = load_patch_set(m, Split::kVal, a.profile);
  if (val.size() > 0) {
    const EvalReport rep = evaluate_classifier(run.model, val);
    std::ofstream(a.out / "classifier_val.json") << rep.to_json() << '\n';
    std::printf("validation auc %.4f accuracy %.4f\n", rep.auc, rep.accuracy);
  }
  std::printf("checkpoint %s\n", (a.out / "classifier.ckpt").string().c_str());
  return 0;
}

int run_train_gan(TrainArgs& a) {
  finish_config(a);
  a.cfg.stage = Stage::kGan;
  a.cfg.reco = parse_reco_kind(a.reco);
  a.cfg.log_path = a.out / "log.csv";
  require_file(a.classifier, "classifier checkpoint");
  const Classifier c = load_classifier(a.classifier);
  a.cfg.classifier = c.config();
  const DatasetManifest m = load_manifest(a.data);
  const PatchSet train = load_patch_set(m, Split::kTrain, a.profile);
  std::printf("weights alpha=%g beta=%g gamma=%g reco=%s lr=%g batch=%d epochs=%d\n",
              a.cfg.weights.alpha, a.cfg.weights.beta, a.cfg.weights.gamma,
              to_string(a.cfg.reco).c_str(), a.cfg.learning_rate, a.cfg.batch_size,
              a.cfg.epochs);
  GanOptions opts;
  opts.resume = a.resume;
  opts.on_epoch = [](const TrainLogRecord& r) { print_record("", r); };
  try {
    train_gan(train, c, a.cfg, opts);
  } catch (const NonFiniteLoss& e) {
    print_record("last", e.record);
    throw;
  }
  std::printf("checkpoint %s\n", (a.out / "generator.ckpt").string().c_str());
  return 0;
}

// ------------------------------------------------------- normalization

struct NormalizerArgs {
  std::string method = "gan";
  fs::path generator;
  fs::path reference;  // manifest holding reference patches
  std::string reference_profile = "A";
  int refs = 10;
};

void add_normalizer(CLI::App* app, NormalizerArgs& n) {
  app->add_option("--method", n.method, "gan, reinhard, macenko or none")
      ->check(CLI::IsMember({"gan", "reinhard", "macenko", "none"}))
      ->capture_default_str();
  app->add_option("--generator", n.generator, "Generator checkpoint (method gan)");
  app->add_option("--reference", n.reference,
                  "Manifest whose training split supplies reference patches");
  app->add_option("--reference-profile", n.reference_profile, "Reference profile id")
      ->capture_default_str();
  app->add_option("--refs", n.refs, "Reference patches drawn per trial")->capture_default_str();
}

// A normalizer bound to one draw of reference patches.
class Normalizer {
 public:
  Normalizer(const NormalizerArgs& a, Rng& rng) : method_(a.method) {
    if (method_ == "gan") {
      if (a.generator.empty()) throw UsageError("--method gan needs --generator");
      require_file(a.generator, "generator checkpoint");
      generator_.emplace(load_generator(a.generator));
    } else if (method_ != "none") {
      if (a.reference.empty()) throw UsageError("--method " + method_ + " needs --reference");
      const DatasetManifest m = load_manifest(a.reference);
      const auto pool = m.select(Split::kTrain, a.reference_profile);
      if (pool.empty())
        throw std::runtime_error("no training patches for reference profile " +
                                 a.reference_profile);
      std::vector<RGBPatch> refs;
      for (std::size_t i : sample_reference_indices(pool.size(), a.refs, rng))
        refs.push_back(load_patch(m.resolve(pool[i])));
      if (method_ == "reinhard") lab_ = lab_stats(refs);
      else stains_ = macenko_estimate(std::span<const RGBPatch>(refs));
    }
  }

  const Generator* generator() const { return generator_ ? &*generator_ : nullptr; }

  std::vector<RGBPatch> apply(std::span<const RGBPatch> in) {
    if (generator_) return normalize_patches(*generator_, in);
    std::vector<RGBPatch> out;
    out.reserve(in.size());
    for (const auto& p : in) {
      if (lab_) {
        out.push_back(reinhard_normalize(p, *lab_));
      } else if (stains_) {
        // Patches without two estimable stains pass through unchanged.
        try {
          out.push_back(macenko_normalize(p, macenko_estimate(p), *stains_));
        } catch (const StainEstimationError&) {
          ++passthrough_;
          out.push_back(p);
        }
      } else {
        out.push_back(p);
      }
    }
    return out;
  }

  int passthrough() const { return passthrough_; }

 private:
  std::string method_;
  std::optional<Generator> generator_;
  std::optional<LabStats> lab_;
  std::optional<EstimatedStains> stains_;
  int passthrough_ = 0;
};

struct NormalizeArgs {
  Common common;
  NormalizerArgs norm;
  fs::path in;
  fs::path out;
  std::string profile = "B";
  std::string split = "test";
};

int run_normalize(const NormalizeArgs& a) {
  Rng rng(derive_seed(a.common.seed, 31));
  Normalizer n(a.norm, rng);
  if (a.in.extension() == ".png") {
    const RGBPatch src = load_patch(a.in);
    const auto out = n.apply(std::span<const RGBPatch>(&src, 1));
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    save_patch(out[0], a.out);
    std::printf("wrote %s\n", a.out.string().c_str());
    return 0;
  }
  const DatasetManifest m = load_manifest(a.in);
  const auto records = m.select(parse_split(a.split), a.profile);
  if (records.empty())
    throw std::runtime_error("no " + a.split + " patches for profile " + a.profile);
  DatasetManifest written;
  written.root = a.out;
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < records.size(); i += kChunk) {
    std::vector<RGBPatch> batch;
    const std::size_t end = std::min(records.size(), i + kChunk);
    for (std::size_t k = i; k < end; ++k) batch.push_back(load_patch(m.resolve(records[k])));
    const auto out = n.apply(batch);
    for (std::size_t k = i; k < end; ++k) {
      const fs::path dst = a.out / records[k].path;
      fs::create_directories(dst.parent_path());
      save_patch(out[k - i], dst);
      written.records.push_back(records[k]);
    }
  }
  write_manifest(written, a.out / "manifest.csv");
  std::printf("wrote %zu patches to %s", written.records.size(), a.out.string().c_str());
  if (n.passthrough() > 0) std::printf(" (%d passed through unchanged)", n.passthrough());
  std::printf("\n");
  return 0;
}

// -------------------------------------------------------------- metric

struct MetricArgs {
  fs::path a, b, pairs, b_root;
  std::string kind = "ssim";
  std::string split = "test";
  int window = WindowConfig{}.window_size;
};

double score(const std::string& kind, const RGBPatch& a, const RGBPatch& b,
             const WindowConfig& w) {
  if (a.width() != b.width() || a.height() != b.height())
    throw std::runtime_error("image sizes differ: " + std::to_string(a.width()) + "x" +
                             std::to_string(a.height()) + " vs " + std::to_string(b.width()) +
                             "x" + std::to_string(b.height()));
  if (kind == "ssim") return ssim(a, b, w).value;
  DscsiConfig cfg;
  cfg.window = w;
  return dscsi(a, b, cfg).value;
}

int run_metric(const MetricArgs& a) {
  WindowConfig w;
  w.window_size = a.window;
  if (!a.pairs.empty()) {
    if (!a.a.empty() || !a.b.empty()) throw UsageError("use either --pairs or --a/--b");
    const auto pairs = load_pairs(a.pairs);
    const fs::path root = a.pairs.parent_path();
    const fs::path b_root = a.b_root.empty() ? root : a.b_root;
    const Split split = parse_split(a.split);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : pairs) {
      if (p.split != split) continue;
      sum += score(a.kind, load_patch(b_root / p.path_b), load_patch(root / p.path_a), w);
      ++n;
    }
    if (n == 0) throw std::runtime_error("no " + a.split + " pairs in " + a.pairs.string());
    std::printf("%s %.6f over %zu pairs\n", a.kind.c_str(), sum / static_cast<double>(n), n);
    return 0;
  }
  if (a.a.empty() || a.b.empty()) throw UsageError("metric needs --a and --b, or --pairs");
  std::printf("%s %.6f\n", a.kind.c_str(), score(a.kind, load_patch(a.a), load_patch(a.b), w));
  return 0;
}

// ------------------------------------------------------------ evaluate

struct EvaluateArgs {
  Common common;
  NormalizerArgs norm;
  fs::path classifier, data, out;
  std::string profile = "B";
  std::string split = "test";
  int trials = 1;
};

int run_evaluate(EvaluateArgs& a) {
  require_file(a.classifier, "classifier checkpoint");
  const Classifier c = load_classifier(a.classifier);
  const DatasetManifest m = load_manifest(a.data);
  const PatchSet set = load_patch_set(m, parse_split(a.split), a.profile);
  if (set.size() == 0) throw std::runtime_error("no " + a.split + " patches for " + a.profile);
  // Only the reference-based baselines vary between trials.
  const bool sampled = a.norm.method == "reinhard" || a.norm.method == "macenko";
  const int trials = sampled ? a.trials : 1;
  std::vector<EvalReport> reports;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(a.common.seed, 31, t));
    Normalizer n(a.norm, rng);
    std::vector<double> scores;
    if (n.generator() || a.norm.method == "none") {
      scores = classifier_scores(c, set, n.generator());
    } else {
      std::vector<RGBPatch> patches;
      for (std::size_t i = 0; i < set.size(); ++i) patches.push_back(set.patch(i));
      PatchSet normed;
      const auto out = n.apply(patches);
      for (std::size_t i = 0; i < out.size(); ++i) normed.add(out[i], set.label(i));
      scores = classifier_scores(c, normed);
    }
    reports.push_back(compute_eval_report(scores, set.labels()));
    if (trials > 1)
      std::fprintf(stderr, "trial %d auc %.4f accuracy %.4f\n", t + 1, reports.back().auc,
                   reports.back().accuracy);
  }
  EvalReport mean = reports[0];
  if (reports.size() > 1) {
    mean.auc = mean.precision = mean.recall = mean.accuracy = 0.0;
    for (const auto& r : reports) {
      mean.auc += r.auc;
      mean.precision += r.precision;
      mean.recall += r.recall;
      mean.accuracy += r.accuracy;
    }
    const double n = static_cast<double>(reports.size());
    mean.auc /= n;
    mean.precision /= n;
    mean.recall /= n;
    mean.accuracy /= n;
  }
  const std::string json = mean.to_json();
  if (!a.out.empty()) {
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    std::ofstream(a.out) << json << '\n';
  }
  std::printf("%s\n", json.c_str());
  return 0;
}

// -------------------------------------------------------------- report

struct ReportArgs {
  std::vector<fs::path> logs, evals;
  std::vector<std::string> labels, eval_labels;
  fs::path out;
  int window = 50;
  int epoch = 5;
};

std::string default_label(const fs::path& p) {
  const std::string stem = p.stem().string();
  if ((stem == "log" || stem == "classifier_log") && p.has_parent_path() &&
      !p.parent_path().filename().empty())
    return p.parent_path().filename().string();
  return stem;
}

int run_report(const ReportArgs& a) {
  if (a.logs.empty() && a.evals.empty()) throw UsageError("report needs --log or --eval");
  if (!a.labels.empty() && a.labels.size() != a.logs.size())
    throw UsageError("give one --label per --log");
  if (!a.eval_labels.empty() && a.eval_labels.size() != a.evals.size())
    throw UsageError("give one --eval-label per --eval");
  fs::create_directories(a.out);

  if (!a.logs.empty()) {
    std::vector<report::Curve> curves;
    for (std::size_t i = 0; i < a.logs.size(); ++i) {
      require_file(a.logs[i], "training log");
      report::Curve c;
      c.label = a.labels.empty() ? default_label(a.logs[i]) : a.labels[i];
      c.log = TrainLog::read_csv(a.logs[i]);
      if (c.log.records.empty()) throw std::runtime_error(a.logs[i].string() + " has no records");
      curves.push_back(std::move(c));
    }
    report::write_curves_csv(curves, a.window, a.out / "loss_curves.csv");
    report::write_curves_svg(curves, a.window, a.out / "loss_curves.svg");
    report::write_curve_summary(curves, a.window, a.epoch, a.out / "curve_summary.csv");
    std::printf("wrote loss_curves.csv, loss_curves.svg, curve_summary.csv to %s\n",
                a.out.string().c_str());
  }
  if (!a.evals.empty()) {
    std::vector<std::pair<std::string, EvalReport>> rows;
    for (std::size_t i = 0; i < a.evals.size(); ++i) {
      require_file(a.evals[i], "evaluation report");
      std::ifstream is(a.evals[i]);
      std::stringstream ss;
      ss << is.rdbuf();
      rows.emplace_back(a.eval_labels.empty() ? a.evals[i].stem().string() : a.eval_labels[i],
                        EvalReport::from_json(ss.str()));
    }
    report::write_metrics_csv(rows, a.out / "metrics.csv");
    report::write_metrics_svg(rows, a.out / "metrics.svg");
    std::printf("wrote metrics.csv, metrics.svg to %s\n", a.out.string().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stain style transfer with structure-preserving losses"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a paired two-lab synthetic dataset");
  add_config(s);
  add_seed(s, synth.common);
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--n", synth.opts.n_per_class, "Fields per class")->capture_default_str();
  s->add_option("--size", synth.opts.patch_size, "Patch side in pixels")->capture_default_str();
  s->add_option("--train-fraction", synth.opts.train_fraction)->capture_default_str();
  s->add_option("--val-fraction", synth.opts.val_fraction)->capture_default_str();

  TrainArgs tc;
  tc.cfg = TrainConfig::classifier_defaults();
  auto* c = app.add_subcommand("train-classifier", "Train the auxiliary tumor/normal classifier");
  add_config(c);
  add_seed(c, tc.common);
  add_schedule(c, tc);
  add_classifier_shape(c, tc.model);

  TrainArgs tg;
  tg.cfg = TrainConfig::gan_defaults();
  auto* g = app.add_subcommand("train-gan", "Train the stain-transfer GAN");
  add_config(g);
  add_seed(g, tg.common);
  add_schedule(g, tg);
  g->add_option("--classifier", tg.classifier, "Trained classifier checkpoint")->required();
  g->add_option("--reco", tg.reco, "Reconstruction loss")
      ->check(CLI::IsMember({"mse", "ssim", "dscsi"}))
      ->capture_default_str();
  g->add_option("--alpha", tg.cfg.weights.alpha, "Adversarial weight")->capture_default_str();
  g->add_option("--beta", tg.cfg.weights.beta, "Reconstruction weight")->capture_default_str();
  g->add_option("--gamma", tg.cfg.weights.gamma, "Feature-preservation weight")
      ->capture_default_str();
  g->add_option("--window", tg.cfg.window.window_size, "SSIM/DSCSI window side")
      ->capture_default_str();
  g->add_option("--g-depth", tg.model.g_depth, "Generator levels")->capture_default_str();
  g->add_option("--g-base", tg.model.g_base, "Generator base channels")->capture_default_str();
  g->add_option("--d-levels", tg.model.d_levels, "Discriminator levels")->capture_default_str();
  g->add_option("--d-base", tg.model.d_base, "Discriminator base channels")
      ->capture_default_str();
  g->add_flag("--resume", tg.resume, "Continue from OUT/gan.ckpt if present");

  NormalizeArgs na;
  auto* n = app.add_subcommand("normalize", "Normalize a patch or a manifest split");
  add_config(n);
  add_seed(n, na.common);
  add_normalizer(n, na.norm);
  n->add_option("--in", na.in, "Input .png or manifest.csv")->required();
  n->add_option("--out", na.out, "Output .png or directory")->required();
  n->add_option("--profile", na.profile, "Profile to normalize (manifest input)")
      ->capture_default_str();
  n->add_option("--split", na.split, "Split to normalize (manifest input)")
      ->capture_default_str();

  MetricArgs ma;
  auto* mt = app.add_subcommand("metric", "SSIM or DSCSI of a pair, or averaged over pairs.csv");
  add_config(mt);
  mt->add_option("--a", ma.a, "First image");
  mt->add_option("--b", ma.b, "Second image");
  mt->add_option("--pairs", ma.pairs, "pairs.csv: scores each B render against its A render");
  mt->add_option("--b-root", ma.b_root, "Directory holding the B paths (e.g. normalized output)");
  mt->add_option("--split", ma.split, "Split scored with --pairs")->capture_default_str();
  mt->add_option("--kind", ma.kind, "ssim or dscsi")
      ->check(CLI::IsMember({"ssim", "dscsi"}))
      ->capture_default_str();
  mt->add_option("--window", ma.window, "Window side")->capture_default_str();

  EvaluateArgs ea;
  auto* e = app.add_subcommand("evaluate", "Classifier metrics, optionally after normalization");
  add_config(e);
  add_seed(e, ea.common);
  ea.norm.method = "none";
  add_normalizer(e, ea.norm);
  e->add_option("--classifier", ea.classifier, "Classifier checkpoint")->required();
  e->add_option("--data", ea.data, "Dataset manifest.csv")->required();
  e->add_option("--profile", ea.profile, "Profile to score")->capture_default_str();
  e->add_option("--split", ea.split, "Split to score")->capture_default_str();
  e->add_option("--trials", ea.trials, "Reference draws averaged for reinhard/macenko")
      ->capture_default_str();
  e->add_option("--out", ea.out, "Write the EvalReport JSON here too");

  ReportArgs ra;
  auto* r = app.add_subcommand("report", "Loss curves and metric tables as CSV and SVG");
  add_config(r);
  r->add_option("--log", ra.logs, "Training log CSV (repeatable)");
  r->add_option("--label", ra.labels, "Curve label per --log");
  r->add_option("--eval", ra.evals, "EvalReport JSON (repeatable)");
  r->add_option("--eval-label", ra.eval_labels, "Row label per --eval");
  r->add_option("--out", ra.out, "Output directory")->required();
  r->add_option("--window", ra.window, "Moving-average window in steps")->capture_default_str();
  r->add_option("--epoch", ra.epoch, "Last epoch included in curve_summary.csv")
      ->capture_default_str();

  try {
    std::vector<std::string> args;
    try {
      args = expand_config(argc, argv);
    } catch (const UsageError& ex) {
      std::fprintf(stderr, "usage error: %s\n", ex.what());
      return 2;
    }
    std::vector<char*> ptrs;
    for (auto& a : args) ptrs.push_back(a.data());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (s->parsed()) return run_synth(synth);
    tune_allocator();
    if (c->parsed()) return run_train_classifier(tc);
    if (g->parsed()) return run_train_gan(tg);
    if (n->parsed()) return run_normalize(na);
    if (mt->parsed()) return run_metric(ma);
    if (e->parsed()) return run_evaluate(ea);
    if (r->parsed()) return run_report(ra);
  } catch (const UsageError& ex) {
    std::fprintf(stderr, "usage error: %s\n", ex.what());
    return 2;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 2;
}
