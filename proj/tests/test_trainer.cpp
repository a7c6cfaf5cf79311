#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "stainforge/trainer.hpp"
#include "test_support.hpp"

using namespace stainforge;
using stainforge::testing::TempDir;

namespace {

PatchSet tiny_set(const StainProfile& p, int per_class, int side = 32, std::uint64_t seed = 1) {
  PatchSet set;
  for (int i = 0; i < per_class; ++i)
    for (Label l : {Label::kTumor, Label::kNormal})
      set.add(render_patch(generate_field(derive_seed(seed, i, static_cast<int>(l)), l, side), p),
              l);
  return set;
}

TrainConfig tiny_gan_config() {
  TrainConfig cfg = TrainConfig::gan_defaults();
  cfg.generator = {2, 4};
  cfg.discriminator = {2, 4};
  cfg.classifier = {2, 4};
  cfg.window.window_size = 7;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 2;
  return cfg;
}

Classifier tiny_classifier(std::uint64_t seed = 3) { return Classifier(ClassifierConfig{2, 4}, seed); }

std::vector<Label> labels_of(int tumor, int normal) {
  std::vector<Label> v(tumor, Label::kTumor);
  v.insert(v.end(), normal, Label::kNormal);
  return v;
}

bool same_losses(const TrainLogRecord& a, const TrainLogRecord& b) {
  return a.iter == b.iter && a.epoch == b.epoch && a.d_loss == b.d_loss && a.g_gan == b.g_gan &&
         a.reco == b.reco && a.kl == b.kl && a.total == b.total;
}

}  // namespace

TEST_CASE("training schedules default to the published settings") {
  const TrainConfig c = TrainConfig::classifier_defaults();
  CHECK(c.learning_rate == 1e-3);
  CHECK(c.batch_size == 8);
  const TrainConfig g = TrainConfig::gan_defaults();
  CHECK(g.learning_rate == 1e-4);
  CHECK(g.batch_size == 4);
  CHECK(g.weights.alpha == 0.2);
  CHECK(g.weights.beta == 0.3);
  CHECK(g.weights.gamma == 0.5);
  CHECK(g.momentum == 0.0);
  CHECK(g.reco == RecoKind::kDscsi);
}

TEST_CASE("training configuration validation and digest") {
  TrainConfig c = TrainConfig::gan_defaults();
  CHECK_NOTHROW(c.validate());
  TrainConfig bad = c;
  bad.batch_size = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  TrainConfig longer = c;
  longer.epochs = 60;
  longer.log_path = "elsewhere.csv";
  CHECK(longer.digest() == c.digest());
  TrainConfig other = c;
  other.learning_rate = 2e-4;
  CHECK(other.digest() != c.digest());
  other = c;
  other.reco = RecoKind::kSsim;
  CHECK(other.digest() != c.digest());

  CHECK(parse_reco_kind("mse") == RecoKind::kMse);
  CHECK(parse_reco_kind("ssim") == RecoKind::kSsim);
  CHECK(parse_reco_kind("dscsi") == RecoKind::kDscsi);
  CHECK_THROWS_AS(parse_reco_kind("l1"), std::invalid_argument);
}

TEST_CASE("balanced minibatches") {
  const auto labels = labels_of(7, 11);
  Rng rng(1);
  for (int m : {1, 2, 4}) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto idx = sample_balanced_minibatch(labels, m, rng);
      REQUIRE(idx.size() == static_cast<std::size_t>(2 * m));
      int tumor = 0;
      for (auto i : idx) tumor += labels[i] == Label::kTumor;
      CHECK(tumor == m);
      CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == idx.size());
    }
  }
  // Shuffled: the tumor half is not always first.
  int tumor_first = 0;
  for (int trial = 0; trial < 100; ++trial)
    tumor_first += labels[sample_balanced_minibatch(labels, 2, rng)[0]] == Label::kTumor;
  CHECK(tumor_first > 20);
  CHECK(tumor_first < 80);
  CHECK_THROWS_AS(sample_balanced_minibatch(labels_of(0, 10), 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_balanced_minibatch(labels_of(3, 10), 4, rng), std::invalid_argument);
}

TEST_CASE("epoch batches cover each class without replacement") {
  const auto labels = labels_of(10, 10);
  Rng rng(2);
  const auto batches = epoch_batches(labels, 2, rng);
  CHECK(batches.size() == 5);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) {
    int tumor = 0;
    for (auto i : b) {
      tumor += labels[i] == Label::kTumor;
      seen.insert(i);
    }
    CHECK(tumor == 2);
  }
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 20);

  // Unequal classes: the smaller one cycles, every batch stays balanced.
  const auto skewed = labels_of(3, 13);
  for (const auto& b : epoch_batches(skewed, 2, rng)) {
    int tumor = 0;
    for (auto i : b) tumor += skewed[i] == Label::kTumor;
    CHECK(tumor == 2);
  }
}

TEST_CASE("plain and momentum SGD updates") {
  ParamSet ps;
  ad::Var& w = ps.add("w", Tensor({1, 1, 1, 2}, std::vector<double>{1.0, -1.0}));
  Sgd plain(0.1, 0.0);
  ad::backward(ad::sum(ad::mul(w, ad::constant(Tensor({1, 1, 1, 2}, std::vector<double>{2.0, 3.0})))));
  plain.step(ps);
  CHECK(w.value()[0] == doctest::Approx(0.8));
  CHECK(w.value()[1] == doctest::Approx(-1.3));
  CHECK(w.grad().empty());

  Sgd heavy(0.1, 0.5);
  for (int k = 0; k < 2; ++k) {
    ad::backward(ad::sum(w));
    heavy.step(ps);
  }
  // v1 = 1, v2 = 1.5; total displacement 0.1 * 2.5.
  CHECK(w.value()[0] == doctest::Approx(0.8 - 0.25));

  Checkpoint ck;
  heavy.save(ck, "opt/");
  Sgd restored(0.1, 0.5);
  restored.load(ck, "opt/", ps);
  ParamSet a = ps;
  (void)a;
  const double before = w.value()[0];
  ad::backward(ad::sum(w));
  restored.step(ps);
  // v3 = 0.5 * 1.5 + 1 = 1.75
  CHECK(w.value()[0] == doctest::Approx(before - 0.175));
}

TEST_CASE("training log CSV round trip") {
  TempDir dir("log");
  TrainLog log;
  log.records.push_back({1, 1, 1.25, -0.5, 0.125, 1e-3, 0.2, 12.5});
  log.records.push_back({2, 1, 1.0 / 3.0, -0.7, 0.1, 2e-3, 0.1, 13.0});
  log.write_csv(dir.path() / "sub" / "log.csv");
  std::ifstream is(dir.path() / "sub" / "log.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "iter,epoch,d_loss,g_gan,reco,kl,total,wall_ms");
  const TrainLog back = TrainLog::read_csv(dir.path() / "sub" / "log.csv");
  REQUIRE(back.records.size() == 2);
  CHECK(same_losses(back.records[1], log.records[1]));
  std::ofstream(dir.path() / "bad.csv") << "iter,loss\n1,2\n";
  CHECK_THROWS(TrainLog::read_csv(dir.path() / "bad.csv"));
}

TEST_CASE("evaluation metrics") {
  const auto labels = labels_of(10, 10);
  std::vector<double> perfect(20);
  for (int i = 0; i < 20; ++i) perfect[i] = i < 10 ? 0.9 : 0.1;
  const EvalReport r = compute_eval_report(perfect, labels);
  CHECK(r.auc == 1.0);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.accuracy == 1.0);
  CHECK(r.n_samples == 20);

  // TP=8, FN=2, FP=2, TN=8.
  std::vector<double> confused(20);
  for (int i = 0; i < 20; ++i) confused[i] = (i < 8 || (i >= 10 && i < 12)) ? 0.7 : 0.2;
  const EvalReport c = compute_eval_report(confused, labels);
  CHECK(c.precision == doctest::Approx(0.8));
  CHECK(c.recall == doctest::Approx(0.8));
  CHECK(c.accuracy == doctest::Approx(0.8));

  Rng rng(3);
  std::vector<double> noise(1000);
  std::vector<Label> random_labels(1000);
  for (int i = 0; i < 1000; ++i) {
    noise[i] = rng.uniform();
    random_labels[i] = i % 2 ? Label::kTumor : Label::kNormal;
  }
  CHECK(std::abs(compute_eval_report(noise, random_labels).auc - 0.5) < 0.05);

  // Rank statistic against the pairwise definition, with ties.
  std::vector<double> tied(40);
  std::vector<Label> tl(40);
  for (int i = 0; i < 40; ++i) {
    tied[i] = std::floor(rng.uniform() * 5.0) / 5.0;
    tl[i] = rng.uniform() < 0.4 ? Label::kTumor : Label::kNormal;
  }
  tl[0] = Label::kTumor;
  tl[1] = Label::kNormal;
  double wins = 0.0, pairs = 0.0;
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j)
      if (tl[i] == Label::kTumor && tl[j] == Label::kNormal) {
        pairs += 1.0;
        wins += tied[i] > tied[j] ? 1.0 : tied[i] == tied[j] ? 0.5 : 0.0;
      }
  CHECK(compute_eval_report(tied, tl).auc == doctest::Approx(wins / pairs).epsilon(1e-12));

  std::vector<double> none(20, 0.1);
  CHECK(compute_eval_report(none, labels).precision == 0.0);
  CHECK_THROWS_AS(compute_eval_report(perfect, labels_of(20, 0)), std::invalid_argument);
  CHECK_THROWS_AS(compute_eval_report(std::vector<double>(3), labels), std::invalid_argument);

  const EvalReport back = EvalReport::from_json(c.to_json());
  CHECK(back.auc == c.auc);
  CHECK(back.precision == c.precision);
  CHECK(back.n_samples == c.n_samples);
  CHECK(back.threshold == 0.5);
}

TEST_CASE("stain jitter keeps white and range") {
  Rng rng(4);
  Tensor t({2, 3, 16, 16});
  for (double& v : t.span()) v = rng.uniform();
  t.at(0, 0, 0, 0) = t.at(0, 1, 0, 0) = t.at(0, 2, 0, 0) = 1.0;
  Tensor same = t;
  Rng r0(5);
  stain_jitter(same, 0.0, r0);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(same[i] - t[i]) < 1e-12);
  Tensor a = t, b = t;
  Rng r1(6), r2(6);
  stain_jitter(a, 0.3, r1);
  stain_jitter(b, 0.3, r2);
  CHECK(std::equal(a.span().begin(), a.span().end(), b.span().begin()));
  for (double v : a.span()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (int c = 0; c < 3; ++c) CHECK(a.at(0, c, 0, 0) == 1.0);
  double moved = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) moved = std::max(moved, std::abs(a[i] - t[i]));
  CHECK(moved > 0.01);
}

TEST_CASE("patch sets hold 8-bit patches") {
  PatchSet set = tiny_set(StainProfile::lab_a(), 2);
  CHECK(set.size() == 4);
  CHECK(set.side() == 32);
  const std::vector<std::size_t> idx{2, 0};
  const Tensor b = set.batch(idx);
  const Tensor ref = to_tensor(std::vector<RGBPatch>{set.patch(2), set.patch(0)});
  CHECK(std::equal(b.span().begin(), b.span().end(), ref.span().begin()));
  CHECK_THROWS_AS(set.add(uniform_rgb(64, 64, {1, 1, 1}), Label::kTumor), std::invalid_argument);
}

TEST_CASE("classifier training is deterministic and learns the synthetic classes") {
  const PatchSet train = tiny_set(StainProfile::lab_a(), 16);
  TrainConfig cfg = TrainConfig::classifier_defaults();
  cfg.classifier = {2, 4};
  cfg.epochs = 3;
  const ClassifierRun a = train_classifier(train, cfg);
  const ClassifierRun b = train_classifier(train, cfg);
  REQUIRE(a.log.records.size() == 3 * 4);
  CHECK(a.log.records.back().total == b.log.records.back().total);
  CHECK(a.model.params().digest() == b.model.params().digest());
  for (std::size_t i = 1; i < a.log.records.size(); ++i)
    CHECK(a.log.records[i].iter == a.log.records[i - 1].iter + 1);

  PatchSet one_class;
  one_class.add(train.patch(0), Label::kTumor);
  one_class.add(train.patch(2), Label::kTumor);
  CHECK_THROWS_AS(train_classifier(one_class, cfg), std::invalid_argument);
}

TEST_CASE("a GAN step leaves the classifier untouched and logs finite losses") {
  const PatchSet train = tiny_set(StainProfile::lab_a(), 4);
  const TrainConfig cfg = tiny_gan_config();
  const Classifier c = tiny_classifier();
  const std::uint64_t c_before = c.params().digest();
  GanState st(cfg);
  const std::uint64_t g_before = st.generator.params().digest();
  const std::uint64_t d_before = st.discriminator.params().digest();
  Rng aug(1);
  Rng pick(2);
  for (int k = 0; k < 3; ++k) {
    const auto idx = sample_balanced_minibatch(train.labels(), 2, pick);
    const TrainLogRecord r = gan_training_step(st, c, train.batch(idx), cfg, aug);
    CHECK(r.iter == k + 1);
    for (double v : {r.d_loss, r.g_gan, r.reco, r.kl, r.total}) CHECK(std::isfinite(v));
    CHECK(r.total == doctest::Approx(0.2 * r.g_gan + 0.3 * r.reco + 0.5 * r.kl).epsilon(1e-12));
  }
  CHECK(c.params().digest() == c_before);
  CHECK(st.generator.params().digest() != g_before);
  CHECK(st.discriminator.params().digest() != d_before);
  // The generator update must not leave gradients behind in D.
  for (const auto& [name, v] : st.discriminator.params()) {
    CHECK(v.requires_grad());
    CHECK(v.grad().empty());
  }
}

TEST_CASE("loss weights select the generator objective") {
  const PatchSet train = tiny_set(StainProfile::lab_a(), 2);
  const Classifier c = tiny_classifier();
  const std::vector<std::size_t> idx{0, 1};
  TrainConfig gan_only = tiny_gan_config();
  gan_only.weights = {1.0, 0.0, 0.0};
  {
    GanState st(gan_only);
    Rng aug(1);
    const TrainLogRecord r = gan_training_step(st, c, train.batch(idx), gan_only, aug);
    CHECK(r.total == r.g_gan);
    // Still logged; near zero because the untrained generator is the identity.
    CHECK(std::abs(r.reco) < 1e-9);
    CHECK(r.kl >= 0.0);
  }
  TrainConfig reco_only = tiny_gan_config();
  reco_only.weights = {0.0, 1.0, 0.0};
  reco_only.reco = RecoKind::kSsim;
  {
    GanState st(reco_only);
    Rng aug(1);
    const TrainLogRecord r = gan_training_step(st, c, train.batch(idx), reco_only, aug);
    CHECK(r.total == r.reco);
  }
}

TEST_CASE("resumed GAN training matches an uninterrupted run") {
  TempDir dir("resume");
  const PatchSet train = tiny_set(StainProfile::lab_a(), 4);
  const Classifier c = tiny_classifier();
  TrainConfig cfg = tiny_gan_config();
  cfg.momentum = 0.9;
  cfg.stain_jitter = 0.1;

  TrainConfig full = cfg;
  full.checkpoint_dir = dir.path() / "full";
  full.log_path = dir.path() / "full" / "log.csv";
  const GanRun whole = train_gan(train, c, full);

  TrainConfig first = cfg;
  first.epochs = 1;
  first.checkpoint_dir = dir.path() / "split";
  first.log_path = dir.path() / "split" / "log.csv";
  train_gan(train, c, first);
  TrainConfig second = first;
  second.epochs = 2;
  const GanRun resumed = train_gan(train, c, second, GanOptions{true, {}});

  REQUIRE(resumed.log.records.size() == whole.log.records.size());
  for (std::size_t i = 0; i < whole.log.records.size(); ++i)
    CHECK(same_losses(resumed.log.records[i], whole.log.records[i]));
  CHECK(resumed.generator.params().digest() == whole.generator.params().digest());
  CHECK(resumed.discriminator.params().digest() == whole.discriminator.params().digest());
  CHECK(TrainLog::read_csv(second.log_path).records.size() == whole.log.records.size());
  CHECK(std::filesystem::exists(second.checkpoint_dir / "generator.ckpt"));

  // A checkpoint from a different configuration is refused.
  TrainConfig changed = second;
  changed.learning_rate = 5e-3;
  CHECK_THROWS(train_gan(train, c, changed, GanOptions{true, {}}));
}

TEST_CASE("non-finite losses abort with the offending record logged") {
  TempDir dir("nonfinite");
  const PatchSet train = tiny_set(StainProfile::lab_a(), 2);
  Classifier c = tiny_classifier();
  for (auto& [name, v] : c.params())
    if (name == "stem.w") v.mutable_value()[0] = NAN;
  TrainConfig cfg = tiny_gan_config();
  cfg.log_path = dir.path() / "log.csv";
  try {
    train_gan(train, c, cfg);
    FAIL("non-finite loss not detected");
  } catch (const NonFiniteLoss& e) {
    CHECK(std::string(e.what()).find("iter 1") != std::string::npos);
    const TrainLog log = TrainLog::read_csv(cfg.log_path);
    REQUIRE(log.records.size() == 1);
    CHECK_FALSE(std::isfinite(log.records[0].kl));
  }
}

TEST_CASE("normalization and evaluation plumbing") {
  TempDir dir("models");
  const PatchSet set = tiny_set(StainProfile::lab_b(), 3);
  Generator g(GeneratorConfig{2, 4}, 5);
  std::vector<RGBPatch> patches;
  for (std::size_t i = 0; i < set.size(); ++i) patches.push_back(set.patch(i));
  const auto out = normalize_patches(g, patches);
  REQUIRE(out.size() == patches.size());
  for (const auto& p : out) {
    CHECK(p.width() == 32);
    for (double v : p.data()) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK_THROWS(normalize_patches(g, std::vector<RGBPatch>{uniform_rgb(30, 30, {1, 1, 1})}));

  const Classifier c = tiny_classifier();
  const EvalReport plain = evaluate_classifier(c, set);
  const EvalReport normed = evaluate_classifier(c, set, &g);
  CHECK(plain.n_samples == 6);
  for (double v : {plain.auc, plain.precision, plain.recall, plain.accuracy, normed.auc})
    CHECK((v >= 0.0 && v <= 1.0));

  save_classifier(c, dir.path() / "c.ckpt");
  save_generator(g, dir.path() / "g.ckpt");
  CHECK(load_classifier(dir.path() / "c.ckpt").params().digest() == c.params().digest());
  const Generator g2 = load_generator(dir.path() / "g.ckpt");
  CHECK(g2.config().base_channels == 4);
  CHECK(g2.params().digest() == g.params().digest());
  CHECK(classifier_scores(c, set, &g) == classifier_scores(c, set, &g2));
}

TEST_CASE("moving average and curve summary against direct sums") {
  const std::vector<double> v{4, 2, 6, 8, 0, 10};
  const auto m = moving_average(v, 3);
  const std::vector<double> expect{4, 3, 4, 16.0 / 3, 14.0 / 3, 6};
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(m[i] == doctest::Approx(expect[i]));
  CHECK_THROWS_AS(moving_average(v, 0), std::invalid_argument);

  TrainLog log;
  for (std::size_t i = 0; i < v.size(); ++i) {
    TrainLogRecord r;
    r.iter = static_cast<long>(i + 1);
    r.epoch = i < 4 ? 1 : 2;
    r.reco = v[i];
    log.records.push_back(r);
  }
  const CurveSummary all = summarize_reco_curve(log, 3, 2);
  CHECK(all.steps == 6);
  CHECK(all.initial == doctest::Approx(4.0));
  CHECK(all.final == doctest::Approx(6.0));
  CHECK(all.ratio == doctest::Approx(1.5));
  // Differences -2, 4, 2, -8, 10: mean 1.2, population variance 180.8 / 5 = 36.16.
  CHECK(all.step_variance == doctest::Approx(36.16 / 16.0));
  const CurveSummary first = summarize_reco_curve(log, 3, 1);
  CHECK(first.steps == 4);
  CHECK(first.final == doctest::Approx(16.0 / 3));
  CHECK_THROWS_AS(summarize_reco_curve(log, 6, 2), std::invalid_argument);
}
