#include "stainforge/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace stainforge {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

std::string to_string(RecoKind k) {
  switch (k) {
    case RecoKind::kMse: return "mse";
    case RecoKind::kSsim: return "ssim";
    case RecoKind::kDscsi: return "dscsi";
  }
  return "?";
}

RecoKind parse_reco_kind(const std::string& s) {
  if (s == "mse") return RecoKind::kMse;
  if (s == "ssim") return RecoKind::kSsim;
  if (s == "dscsi") return RecoKind::kDscsi;
  throw std::invalid_argument("unknown reconstruction loss '" + s + "' (mse|ssim|dscsi)");
}

TrainConfig TrainConfig::classifier_defaults() {
  TrainConfig c;
  c.stage = Stage::kClassifier;
  c.learning_rate = 1e-3;
  c.batch_size = 8;
  c.epochs = 10;
  return c;
}

TrainConfig TrainConfig::gan_defaults() {
  TrainConfig c;
  c.stage = Stage::kGan;
  c.learning_rate = 1e-4;
  c.batch_size = 4;
  c.epochs = 10;
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size < 2 || batch_size % 2 != 0)
    throw std::invalid_argument("batch_size must be even and >= 2 (m tumor + m normal)");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("momentum must be in [0, 1)");
  if (stain_jitter < 0.0) throw std::invalid_argument("stain_jitter must be >= 0");
  weights.validate();
  generator.validate();
  discriminator.validate();
  classifier.validate();
  window.validate();
  viewing.validate();
}

std::string TrainConfig::digest() const {
  // Hex floats keep the digest exact.
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "stage=%d lr=%a batch=%d seed=%llu reco=%s w=%a,%a,%a mom=%a jit=%a "
                "dscsi=%a,%a,%a,%a,%a win=%d,%d,%a,%d spd=%a",
                static_cast<int>(stage), learning_rate, batch_size,
                static_cast<unsigned long long>(seed), to_string(reco).c_str(), weights.alpha,
                weights.beta, weights.gamma, momentum, stain_jitter, dscsi.k_lightness,
                dscsi.k_chroma, dscsi.k_hue, dscsi.lambda_chroma, dscsi.chroma_gate,
                window.window_size, static_cast<int>(window.kind), window.sigma, window.stride,
                viewing.samples_per_degree);
  return std::string(buf) + " " + generator.describe() + " " + discriminator.describe() +
         " " + classifier.describe();
}

void PatchSet::add(const RGBPatch& img, Label label, std::string path) {
  validate(img);
  if (img.width() != img.height())
    throw std::invalid_argument("patch sets hold square patches");
  if (side_ == 0) side_ = img.width();
  if (img.width() != side_)
    throw std::invalid_argument("patch side " + std::to_string(img.width()) +
                                " differs from the set's " + std::to_string(side_));
  for (double v : img.data())
    pixels_.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
  labels_.push_back(label);
  paths_.push_back(std::move(path));
}

RGBPatch PatchSet::patch(std::size_t i) const {
  RGBPatch img(side_, side_);
  const std::size_t n = img.data().size();
  const std::uint8_t* src = pixels_.data() + i * n;
  for (std::size_t k = 0; k < n; ++k) img.data()[k] = src[k] / 255.0;
  return img;
}

Tensor PatchSet::batch(std::span<const std::size_t> indices) const {
  const int n = static_cast<int>(indices.size());
  Tensor t({n, 3, side_, side_});
  const std::size_t plane = static_cast<std::size_t>(side_) * side_;
  for (int b = 0; b < n; ++b) {
    if (indices[b] >= size()) throw std::out_of_range("patch index out of range");
    const std::uint8_t* src = pixels_.data() + indices[b] * plane * 3;
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c)
        t[(static_cast<std::size_t>(b) * 3 + c) * plane + p] = src[p * 3 + c] / 255.0;
  }
  return t;
}

PatchSet load_patch_set(const DatasetManifest& manifest, Split split,
                        const std::string& profile_id) {
  PatchSet set;
  for (const auto& r : manifest.select(split, profile_id))
    set.add(load_patch(manifest.resolve(r)), r.label, r.path);
  return set;
}

namespace {

void split_by_class(std::span<const Label> labels, std::vector<std::size_t>& tumor,
                    std::vector<std::size_t>& normal) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] == Label::kTumor ? tumor : normal).push_back(i);
}

void require_population(std::size_t tumor, std::size_t normal, int m) {
  if (m < 1) throw std::invalid_argument("m must be >= 1");
  if (tumor < static_cast<std::size_t>(m) || normal < static_cast<std::size_t>(m))
    throw std::invalid_argument("insufficient class population: " + std::to_string(tumor) +
                                " tumor, " + std::to_string(normal) + " normal, need " +
                                std::to_string(m) + " of each");
}

}  // namespace

std::vector<std::size_t> sample_balanced_minibatch(std::span<const Label> labels, int m,
                                                   Rng& rng) {
  std::vector<std::size_t> tumor, normal;
  split_by_class(labels, tumor, normal);
  require_population(tumor.size(), normal.size(), m);
  std::vector<std::size_t> out;
  for (auto* pool : {&tumor, &normal}) {
    // Partial Fisher-Yates: the first m entries are a uniform sample.
    for (int i = 0; i < m; ++i) {
      const std::size_t j = i + rng.below(pool->size() - i);
      std::swap((*pool)[i], (*pool)[j]);
      out.push_back((*pool)[i]);
    }
  }
  rng.shuffle(out);
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::span<const Label> labels, int m,
                                                    Rng& rng) {
  std::vector<std::size_t> tumor, normal;
  split_by_class(labels, tumor, normal);
  require_population(tumor.size(), normal.size(), m);
  rng.shuffle(tumor);
  rng.shuffle(normal);
  std::size_t ct = 0, cn = 0;
  auto take = [&](std::vector<std::size_t>& pool, std::size_t& cursor,
                  std::vector<std::size_t>& out) {
    if (cursor + m > pool.size()) {
      rng.shuffle(pool);
      cursor = 0;
    }
    for (int i = 0; i < m; ++i) out.push_back(pool[cursor++]);
  };
  const std::size_t n_batches = labels.size() / (2 * static_cast<std::size_t>(m));
  std::vector<std::vector<std::size_t>> batches(n_batches);
  for (auto& b : batches) {
    take(tumor, ct, b);
    take(normal, cn, b);
    rng.shuffle(b);
  }
  return batches;
}

void Sgd::step(ParamSet& params) {
  if (momentum_ > 0.0 && velocity_.empty())
    for (const auto& [name, v] : params) velocity_.emplace_back(v.shape());
  std::size_t k = 0;
  for (auto& [name, v] : params) {
    const Tensor& g = v.grad();
    if (!g.empty()) {
      Tensor& w = v.mutable_value();
      if (momentum_ > 0.0) {
        Tensor& vel = velocity_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
          vel[i] = momentum_ * vel[i] + g[i];
          w[i] -= lr_ * vel[i];
        }
      } else {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
      }
    }
    v.zero_grad();
    ++k;
  }
}

void Sgd::save(Checkpoint& ck, const std::string& prefix) const {
  if (velocity_.empty()) return;
  for (std::size_t k = 0; k < velocity_.size(); ++k)
    ck.tensors[prefix + std::to_string(k)] = velocity_[k];
}

void Sgd::load(const Checkpoint& ck, const std::string& prefix, const ParamSet& params) {
  velocity_.clear();
  if (momentum_ == 0.0) return;
  if (!ck.tensors.contains(prefix + "0")) return;  // saved before the first step
  std::size_t k = 0;
  for (const auto& [name, v] : params) {
    const auto it = ck.tensors.find(prefix + std::to_string(k));
    if (it == ck.tensors.end() || !(it->second.shape() == v.shape()))
      throw std::runtime_error("checkpoint optimizer state does not match " + name);
    velocity_.push_back(it->second);
    ++k;
  }
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write log " + path.string());
  os << kHeader << '\n';
  char line[512];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.iter,
                  r.epoch, r.d_loss, r.g_gan, r.reco, r.kl, r.total, r.wall_ms);
    os << line;
  }
}

TrainLog TrainLog::read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open log " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kHeader)
    throw std::runtime_error(path.string() + ":1: expected header '" + kHeader + "'");
  TrainLog log;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    TrainLogRecord r;
    if (std::sscanf(line.c_str(), "%ld,%d,%lf,%lf,%lf,%lf,%lf,%lf", &r.iter, &r.epoch,
                    &r.d_loss, &r.g_gan, &r.reco, &r.kl, &r.total, &r.wall_ms) != 8)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": malformed log record");
    log.records.push_back(r);
  }
  return log;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

bool finite_record(const TrainLogRecord& r) {
  return std::isfinite(r.d_loss) && std::isfinite(r.g_gan) && std::isfinite(r.reco) &&
         std::isfinite(r.kl) && std::isfinite(r.total);
}

std::string describe_record(const TrainLogRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "iter %ld epoch %d: d_loss=%g g_gan=%g reco=%g kl=%g total=%g",
                r.iter, r.epoch, r.d_loss, r.g_gan, r.reco, r.kl, r.total);
  return buf;
}

void require_both_classes(std::span<const Label> labels, const char* what) {
  const auto tumors = std::count(labels.begin(), labels.end(), Label::kTumor);
  if (tumors == 0 || tumors == static_cast<long>(labels.size()))
    throw std::invalid_argument(std::string(what) + " needs both tumor and normal patches");
}

void put_config(Checkpoint& ck, const std::string& prefix, int a, int b) {
  ck.metadata[prefix + ".a"] = std::to_string(a);
  ck.metadata[prefix + ".base"] = std::to_string(b);
}

std::pair<int, int> get_config(const Checkpoint& ck, const std::string& prefix) {
  const auto a = ck.metadata.find(prefix + ".a");
  const auto b = ck.metadata.find(prefix + ".base");
  if (a == ck.metadata.end() || b == ck.metadata.end())
    throw std::runtime_error("checkpoint lacks " + prefix + " configuration");
  return {std::stoi(a->second), std::stoi(b->second)};
}

Classifier frozen_copy(const Classifier& c) {
  Classifier out(c.config(), 0);
  copy_values(c.params(), out.params());
  out.params().set_trainable(false);
  return out;
}

}  // namespace

ClassifierRun train_classifier(const PatchSet& train, const TrainConfig& cfg,
                               const ProgressFn& on_epoch) {
  cfg.validate();
  require_both_classes(train.labels(), "classifier training");
  ClassifierRun run{Classifier(cfg.classifier, derive_seed(cfg.seed, 11)), {}};
  Sgd opt(cfg.learning_rate, cfg.momentum);
  const int m = cfg.batch_size / 2;
  long iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 12, epoch));
    Rng aug_rng(derive_seed(cfg.seed, 13, epoch));
    for (const auto& idx : epoch_batches(train.labels(), m, rng)) {
      const auto t0 = Clock::now();
      std::vector<int> y;
      for (std::size_t i : idx) y.push_back(train.label(i) == Label::kTumor ? 1 : 0);
      Tensor input = train.batch(idx);
      if (cfg.stain_jitter > 0.0) stain_jitter(input, cfg.stain_jitter, aug_rng);
      const ClassifierOutput out = run.model.forward(ad::constant(std::move(input)));
      const ad::Var loss = cross_entropy(out.logits, y);
      TrainLogRecord rec;
      rec.iter = ++iter;
      rec.epoch = epoch + 1;
      rec.total = loss.item();
      if (!finite_record(rec)) {
        run.log.records.push_back(rec);
        if (!cfg.log_path.empty()) run.log.write_csv(cfg.log_path);
        throw NonFiniteLoss("non-finite loss at " + describe_record(rec), rec);
      }
      ad::backward(loss);
      opt.step(run.model.params());
      rec.wall_ms = elapsed_ms(t0);
      run.log.records.push_back(rec);
    }
    if (!cfg.checkpoint_dir.empty()) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      save_classifier(run.model, cfg.checkpoint_dir / "classifier.ckpt");
    }
    if (!cfg.log_path.empty()) run.log.write_csv(cfg.log_path);
    if (on_epoch && !run.log.records.empty()) on_epoch(run.log.records.back());
  }
  return run;
}

void stain_jitter(Tensor& batch, double amount, Rng& rng) {
  const Shape s = batch.shape();
  if (s.c != 3) throw std::invalid_argument("stain_jitter expects RGB batches");
  constexpr double kMinTransmittance = 1e-4;
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    double m[3][3];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m[i][j] = (i == j ? 1.0 : 0.0) + rng.uniform(-amount, amount);
    double* base = batch.data() + batch.index(n, 0, 0, 0);
    for (std::size_t p = 0; p < plane; ++p) {
      double od[3];
      for (int c = 0; c < 3; ++c)
        od[c] = -std::log(std::max(srgb_to_linear(base[c * plane + p]), kMinTransmittance));
      for (int c = 0; c < 3; ++c) {
        const double o = std::max(0.0, m[c][0] * od[0] + m[c][1] * od[1] + m[c][2] * od[2]);
        base[c * plane + p] = std::clamp(linear_to_srgb(std::exp(-o)), 0.0, 1.0);
      }
    }
  }
}

GanState::GanState(const TrainConfig& cfg)
    : generator(cfg.generator, derive_seed(cfg.seed, 21)),
      discriminator(cfg.discriminator, derive_seed(cfg.seed, 22)),
      opt_g(cfg.learning_rate, cfg.momentum),
      opt_d(cfg.learning_rate, cfg.momentum) {}

TrainLogRecord gan_training_step(GanState& st, const Classifier& classifier,
                                 const Tensor& batch, const TrainConfig& cfg, Rng& aug_rng) {
  const auto t0 = Clock::now();
  Tensor input = batch;
  if (cfg.stain_jitter > 0.0) stain_jitter(input, cfg.stain_jitter, aug_rng);
  const ad::Var x = ad::constant(batch);
  const ad::Var x_hat = st.generator.forward(ad::constant(std::move(input)));

  TrainLogRecord rec;
  rec.iter = st.iter + 1;
  rec.epoch = st.epoch + 1;

  // Discriminator: ascend mean[log D(x) + log(1 - D(G(x)))].
  ParamSet& dp = st.discriminator.params();
  dp.set_trainable(true);
  const ad::Var d_real = st.discriminator.forward(x);
  const GanTerms d_terms = gan_losses(d_real, st.discriminator.forward(ad::detach(x_hat)));
  rec.d_loss = -d_terms.d_objective.item();
  if (!std::isfinite(rec.d_loss))
    throw NonFiniteLoss("non-finite discriminator loss at " + describe_record(rec), rec);
  ad::backward(ad::mul_scalar(d_terms.d_objective, -1.0));
  st.opt_d.step(dp);

  // Generator: descend alpha*log(1 - D(G(x))) + beta*reco + gamma*KL.
  dp.set_trainable(false);
  const GanTerms g_terms =
      gan_losses(ad::detach(d_real), st.discriminator.forward(x_hat));
  ad::Var reco;
  switch (cfg.reco) {
    case RecoKind::kMse: reco = metric::mse_loss(x, x_hat); break;
    case RecoKind::kSsim: reco = metric::ssim_loss(x, x_hat, cfg.window, cfg.ssim); break;
    case RecoKind::kDscsi: reco = metric::dscsi_loss(x, x_hat, cfg.dscsi, cfg.viewing); break;
  }
  const ad::Var f_x = classifier.forward(x).features;
  const ad::Var kl = feature_kl(f_x, classifier.forward(x_hat).features);
  const ad::Var total = total_loss(g_terms.g_term, reco, kl, cfg.weights);
  rec.g_gan = g_terms.g_term.item();
  rec.reco = reco.item();
  rec.kl = kl.item();
  rec.total = total.item();
  if (!finite_record(rec)) {
    dp.set_trainable(true);
    throw NonFiniteLoss("non-finite generator loss at " + describe_record(rec), rec);
  }
  ad::backward(total);
  dp.set_trainable(true);
  st.opt_g.step(st.generator.params());
  st.iter = rec.iter;
  rec.wall_ms = elapsed_ms(t0);
  return rec;
}

namespace {

void save_gan(const GanState& st, const TrainConfig& cfg, const std::filesystem::path& path) {
  Checkpoint ck;
  ck.config_digest = cfg.digest();
  ck.metadata["kind"] = "gan";
  ck.metadata["epoch"] = std::to_string(st.epoch);
  ck.metadata["iter"] = std::to_string(st.iter);
  put_config(ck, "generator", cfg.generator.depth, cfg.generator.base_channels);
  put_config(ck, "discriminator", cfg.discriminator.levels, cfg.discriminator.base_channels);
  ck.put("g/", st.generator.params());
  ck.put("d/", st.discriminator.params());
  st.opt_g.save(ck, "opt_g/");
  st.opt_d.save(ck, "opt_d/");
  save_checkpoint(ck, path);
}

void restore_gan(GanState& st, const TrainConfig& cfg, const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.config_digest != cfg.digest())
    throw std::runtime_error(path.string() +
                             ": checkpoint was written with a different configuration");
  ck.take("g/", st.generator.params());
  ck.take("d/", st.discriminator.params());
  st.opt_g.load(ck, "opt_g/", st.generator.params());
  st.opt_d.load(ck, "opt_d/", st.discriminator.params());
  st.epoch = std::stoi(ck.metadata.at("epoch"));
  st.iter = std::stol(ck.metadata.at("iter"));
}

}  // namespace

GanRun train_gan(const PatchSet& train_a, const Classifier& classifier, const TrainConfig& cfg,
                 const GanOptions& opts) {
  cfg.validate();
  require_both_classes(train_a.labels(), "GAN training");
  if (!(classifier.config().stages == cfg.classifier.stages &&
        classifier.config().base_channels == cfg.classifier.base_channels))
    throw std::invalid_argument("classifier does not match the configured architecture");
  const Classifier frozen = frozen_copy(classifier);
  GanState st(cfg);
  TrainLog log;
  const std::filesystem::path ck_path =
      cfg.checkpoint_dir.empty() ? std::filesystem::path() : cfg.checkpoint_dir / "gan.ckpt";
  if (opts.resume && !ck_path.empty() && std::filesystem::exists(ck_path)) {
    restore_gan(st, cfg, ck_path);
    if (!cfg.log_path.empty() && std::filesystem::exists(cfg.log_path)) {
      log = TrainLog::read_csv(cfg.log_path);
      std::erase_if(log.records, [&](const TrainLogRecord& r) { return r.iter > st.iter; });
    }
  }
  const int m = cfg.batch_size / 2;
  for (int epoch = st.epoch; epoch < cfg.epochs; ++epoch) {
    Rng batch_rng(derive_seed(cfg.seed, 23, epoch));
    Rng aug_rng(derive_seed(cfg.seed, 24, epoch));
    for (const auto& idx : epoch_batches(train_a.labels(), m, batch_rng)) {
      try {
        log.records.push_back(gan_training_step(st, frozen, train_a.batch(idx), cfg, aug_rng));
      } catch (const NonFiniteLoss& e) {
        log.records.push_back(e.record);
        if (!cfg.log_path.empty()) log.write_csv(cfg.log_path);
        throw;
      }
    }
    st.epoch = epoch + 1;
    if (!ck_path.empty()) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      save_gan(st, cfg, ck_path);
      save_generator(st.generator, cfg.checkpoint_dir / "generator.ckpt");
    }
    if (!cfg.log_path.empty()) log.write_csv(cfg.log_path);
    if (opts.on_epoch && !log.records.empty()) opts.on_epoch(log.records.back());
  }
  return GanRun{std::move(st.generator), std::move(st.discriminator), std::move(log)};
}

std::vector<double> moving_average(std::span<const double> values, int window) {
  if (window < 1) throw std::invalid_argument("moving_average window must be >= 1");
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sum += values[i];
    if (i >= static_cast<std::size_t>(window)) sum -= values[i - window];
    out[i] = sum / static_cast<double>(std::min<std::size_t>(i + 1, window));
  }
  return out;
}

CurveSummary summarize_reco_curve(const TrainLog& log, int window, int max_epoch) {
  std::vector<double> reco;
  for (const auto& r : log.records)
    if (r.epoch <= max_epoch) reco.push_back(r.reco);
  if (reco.size() < static_cast<std::size_t>(window) + 1)
    throw std::invalid_argument("curve has " + std::to_string(reco.size()) +
                                " steps, need more than the window of " +
                                std::to_string(window));
  CurveSummary s;
  s.steps = reco.size();
  const auto smooth = moving_average(reco, window);
  s.initial = smooth[window - 1];
  s.final = smooth.back();
  s.ratio = s.final / s.initial;
  double mean = 0.0;
  for (std::size_t i = 1; i < reco.size(); ++i) mean += reco[i] - reco[i - 1];
  mean /= static_cast<double>(reco.size() - 1);
  double var = 0.0;
  for (std::size_t i = 1; i < reco.size(); ++i) {
    const double d = reco[i] - reco[i - 1] - mean;
    var += d * d;
  }
  s.step_variance = var / static_cast<double>(reco.size() - 1) / (s.initial * s.initial);
  return s;
}

std::vector<RGBPatch> normalize_patches(const Generator& g, std::span<const RGBPatch> patches) {
  ad::NoGrad no_grad;
  std::vector<RGBPatch> out;
  out.reserve(patches.size());
  constexpr std::size_t kChunk = 16;
  for (std::size_t i = 0; i < patches.size(); i += kChunk) {
    const auto chunk = patches.subspan(i, std::min(kChunk, patches.size() - i));
    for (const auto& p : chunk) validate(p);
    const ad::Var y = g.forward(ad::constant(to_tensor(chunk)));
    for (auto& img : rgb_batch_from_tensor(y.value())) out.push_back(std::move(img));
  }
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::json j{{"auc", auc},           {"precision", precision},
                   {"recall", recall},     {"accuracy", accuracy},
                   {"n_samples", n_samples}, {"threshold", threshold}};
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EvalReport r;
  r.auc = j.at("auc").get<double>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.threshold = j.at("threshold").get<double>();
  return r;
}

EvalReport compute_eval_report(std::span<const double> scores, std::span<const Label> labels,
                               double threshold) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("scores and labels must be non-empty and equal in length");
  require_both_classes(labels, "evaluation");
  const std::size_t n = scores.size();

  // Average ranks (1-based) with ties sharing the mean rank.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double rank_sum = 0.0, pos = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool positive = labels[i] == Label::kTumor;
    const bool predicted = scores[i] >= threshold;
    if (positive) {
      rank_sum += rank[i];
      pos += 1.0;
    }
    tp += positive && predicted;
    fp += !positive && predicted;
    fn += positive && !predicted;
    tn += !positive && !predicted;
  }
  const double neg = static_cast<double>(n) - pos;
  EvalReport r;
  r.auc = (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
  r.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  r.accuracy = static_cast<double>(tp + tn) / static_cast<double>(n);
  r.n_samples = n;
  r.threshold = threshold;
  return r;
}

std::vector<double> classifier_scores(const Classifier& c, const PatchSet& set,
                                      const Generator* normalizer) {
  ad::NoGrad no_grad;
  std::vector<double> scores;
  scores.reserve(set.size());
  constexpr std::size_t kChunk = 32;
  for (std::size_t i = 0; i < set.size(); i += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t k = i; k < std::min(set.size(), i + kChunk); ++k) idx.push_back(k);
    ad::Var x = ad::constant(set.batch(idx));
    if (normalizer) x = normalizer->forward(x);
    const Tensor p = c.forward(x).probabilities.value();
    for (std::size_t k = 0; k < idx.size(); ++k) scores.push_back(p[k * 2 + 1]);
  }
  return scores;
}

EvalReport evaluate_classifier(const Classifier& c, const PatchSet& set,
                               const Generator* normalizer) {
  if (set.size() == 0) throw std::invalid_argument("evaluation split is empty");
  const auto scores = classifier_scores(c, set, normalizer);
  return compute_eval_report(scores, set.labels());
}

Classifier load_classifier(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  const auto [stages, base] = get_config(ck, "classifier");
  Classifier c(ClassifierConfig{stages, base}, 0);
  ck.take("c/", c.params());
  return c;
}

void save_classifier(const Classifier& c, const std::filesystem::path& path) {
  Checkpoint ck;
  ck.config_digest = c.config().describe();
  ck.metadata["kind"] = "classifier";
  put_config(ck, "classifier", c.config().stages, c.config().base_channels);
  ck.put("c/", c.params());
  save_checkpoint(ck, path);
}

Generator load_generator(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  const auto [depth, base] = get_config(ck, "generator");
  Generator g(GeneratorConfig{depth, base}, 0);
  ck.take("g/", g.params());
  return g;
}

void save_generator(const Generator& g, const std::filesystem::path& path) {
  Checkpoint ck;
  ck.config_digest = g.config().describe();
  ck.metadata["kind"] = "generator";
  put_config(ck, "generator", g.config().depth, g.config().base_channels);
  ck.put("g/", g.params());
  save_checkpoint(ck, path);
}

}  // namespace stainforge
