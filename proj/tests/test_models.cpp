#include <doctest.h>

#include <cmath>
#include <fstream>
#include <functional>

#include "stainforge/models.hpp"
#include "stainforge/rng.hpp"
#include "test_support.hpp"

using namespace stainforge;
using stainforge::testing::relative_error;
using stainforge::testing::TempDir;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = 0.0, double hi = 1.0) {
  Tensor t(s);
  for (double& v : t.span()) v = rng.uniform(lo, hi);
  return t;
}

Tensor vec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor({1, n, 1, 1}, std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Gradient of a scalar model loss with respect to a sample of parameters,
// checked against central differences.
double param_gradient_error(ParamSet& params, const std::function<ad::Var()>& loss,
                            int per_tensor = 3, double step = 1e-5) {
  params.zero_grad();
  ad::backward(loss());
  std::vector<Tensor> grads;
  for (const auto& [name, v] : params) grads.push_back(v.grad());
  double worst = 0.0;
  std::size_t k = 0;
  for (auto& [name, v] : params) {
    Tensor& w = v.mutable_value();
    const Tensor& g = grads[k++];
    for (int j = 0; j < per_tensor && j < static_cast<int>(w.size()); ++j) {
      const std::size_t i = (static_cast<std::size_t>(j) * 7919) % w.size();
      const double orig = w[i];
      w[i] = orig + step;
      const double up = loss().item();
      w[i] = orig - step;
      const double down = loss().item();
      w[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double an = g.empty() ? 0.0 : g[i];
      if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;
      worst = std::max(worst, relative_error(an, fd, 1e-6));
    }
  }
  params.zero_grad();
  return worst;
}

}  // namespace

TEST_CASE("generator preserves shape and range") {
  Generator g(GeneratorConfig{}, 1);
  Rng rng(2);
  const ad::Var y = g.forward(ad::constant(random_tensor(rng, {4, 3, 64, 64})));
  CHECK(y.shape() == Shape{4, 3, 64, 64});
  for (double v : y.value().span()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(g.skip_count() == GeneratorConfig{}.depth);
  CHECK(Generator(GeneratorConfig{4, 4}, 1).skip_count() == 4);
}

TEST_CASE("generator rejects incompatible inputs and configs") {
  Generator g(GeneratorConfig{3, 4}, 1);
  CHECK_THROWS_AS(g.forward(ad::constant(Tensor({1, 3, 60, 60}))), std::invalid_argument);
  CHECK_THROWS_AS(g.forward(ad::constant(Tensor({1, 1, 64, 64}))), std::invalid_argument);
  CHECK_THROWS_AS(Generator(GeneratorConfig{1, 16}, 1), std::invalid_argument);
}

TEST_CASE("an untrained generator is the clamped identity") {
  Generator g(GeneratorConfig{3, 4}, 5);
  Rng rng(6);
  Tensor x = random_tensor(rng, {2, 3, 32, 32});
  x[0] = 0.0;
  x[1] = 1.0;
  const Tensor y = g.forward(ad::constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(std::abs(y[i] - std::clamp(x[i], 1e-3, 1.0 - 1e-3)) < 1e-12);
}

TEST_CASE("perturbing one input pixel changes the generator output") {
  Generator g(GeneratorConfig{3, 4}, 3);
  Rng rng(4);
  for (ad::Var head = g.params().get("head.w"); double& w : head.mutable_value().span()) w = rng.uniform(-0.5, 0.5);
  Tensor x = random_tensor(rng, {1, 3, 32, 32});
  const Tensor y0 = g.forward(ad::constant(x)).value();
  x.at(0, 1, 16, 16) += 0.2;
  const Tensor y1 = g.forward(ad::constant(x)).value();
  CHECK(max_abs_diff(y0, y1) > 0.0);
  // Neighbours respond through the convolutional path, not only the identity.
  double neighbour = 0.0;
  for (int c = 0; c < 3; ++c) neighbour += std::abs(y1.at(0, c, 16, 18) - y0.at(0, c, 16, 18));
  CHECK(neighbour > 0.0);
}

TEST_CASE("untrained discriminator returns exactly one half") {
  Discriminator d(DiscriminatorConfig{}, 5);
  Rng rng(6);
  const ad::Var p = d.forward(ad::constant(random_tensor(rng, {3, 3, 64, 64})));
  CHECK(p.shape() == Shape{3, 1, 1, 1});
  for (double v : p.value().span()) CHECK(v == 0.5);
}

TEST_CASE("discriminator outputs are probabilities") {
  Discriminator d(DiscriminatorConfig{3, 4}, 5);
  Rng rng(7);
  for (auto& [name, v] : d.params())
    for (double& w : v.mutable_value().span()) w += rng.uniform(-0.5, 0.5);
  const ad::Var p = d.forward(ad::constant(random_tensor(rng, {4, 3, 32, 32})));
  for (double v : p.value().span()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("classifier probabilities and features") {
  for (const ClassifierConfig cfg : {ClassifierConfig{}, ClassifierConfig{2, 8}}) {
    Classifier c(cfg, 8);
    Rng rng(9);
    const ClassifierOutput out = c.forward(ad::constant(random_tensor(rng, {5, 3, 64, 64})));
    CHECK(out.logits.shape() == Shape{5, 2, 1, 1});
    CHECK(out.features.shape() == Shape{5, cfg.feature_length(), 1, 1});
    for (int n = 0; n < 5; ++n) {
      const double s = out.probabilities.value()[n * 2] + out.probabilities.value()[n * 2 + 1];
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  CHECK(ClassifierConfig{}.feature_length() == 64);
}

TEST_CASE("gan loss examples") {
  const double eps = kProbabilityClamp;
  {
    const GanTerms t = gan_losses(ad::constant(Tensor({2, 1, 1, 1}, 1.0)),
                                  ad::constant(Tensor({2, 1, 1, 1}, 0.0)));
    CHECK(t.d_objective.item() == doctest::Approx(2.0 * std::log(1.0 - eps)).epsilon(1e-12));
    CHECK(std::abs(t.d_objective.item() + 2e-7) < 1e-12);
    CHECK(std::isfinite(t.g_term.item()));
  }
  {
    const GanTerms t = gan_losses(ad::constant(Tensor({4, 1, 1, 1}, 0.5)),
                                  ad::constant(Tensor({4, 1, 1, 1}, 0.5)));
    CHECK(t.g_term.item() == doctest::Approx(std::log(0.5)).epsilon(1e-15));
    CHECK(std::abs(t.g_term.item() + 0.6931) < 1e-4);
    CHECK(t.d_objective.item() == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-15));
    CHECK(std::abs(t.d_objective.item() + 1.3863) < 1e-4);
  }
  {
    // Both terms stay finite at the degenerate ends.
    const GanTerms t = gan_losses(ad::constant(Tensor({1, 1, 1, 1}, 0.0)),
                                  ad::constant(Tensor({1, 1, 1, 1}, 1.0)));
    CHECK(std::isfinite(t.d_objective.item()));
    CHECK(std::isfinite(t.g_term.item()));
  }
}

TEST_CASE("gan loss gradients match finite differences") {
  Rng rng(10);
  const Tensor real = random_tensor(rng, {4, 1, 1, 1}, 0.05, 0.95);
  const Tensor fake = random_tensor(rng, {4, 1, 1, 1}, 0.05, 0.95);
  const ad::Var r = ad::leaf(real), f = ad::leaf(fake);
  ad::backward(gan_losses(r, f).d_objective);
  for (std::size_t i = 0; i < 4; ++i) {
    const double h = 1e-6;
    Tensor fu = fake, fd = fake;
    fu[i] += h;
    fd[i] -= h;
    const double num = (gan_losses(ad::constant(real), ad::constant(fu)).d_objective.item() -
                        gan_losses(ad::constant(real), ad::constant(fd)).d_objective.item()) /
                       (2 * h);
    CHECK(relative_error(f.grad()[i], num) < 1e-6);
    CHECK(r.grad()[i] == doctest::Approx(1.0 / (4.0 * real[i])).epsilon(1e-9));
  }
}

TEST_CASE("feature KL examples") {
  const ad::Var p = ad::constant(vec({0.0, 0.0}));                           // (0.5, 0.5)
  const ad::Var q = ad::constant(vec({std::log(0.9), std::log(0.1)}));       // (0.9, 0.1)
  const double forward = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  const double reverse = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  CHECK(std::abs(feature_kl(p, q).item() - forward) < 1e-7);
  CHECK(std::abs(feature_kl(p, q).item() - 0.5108) < 1e-4);
  CHECK(std::abs(feature_kl(q, p).item() - reverse) < 1e-7);
  // Reverse direction in closed form: 0.9 ln 1.8 + 0.1 ln 0.2.
  CHECK(std::abs(feature_kl(q, p).item() - 0.3681) < 1e-4);
  CHECK(feature_kl(p, q).item() != doctest::Approx(feature_kl(q, p).item()));
  CHECK(feature_kl(p, p).item() == 0.0);
  CHECK(feature_kl({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == 0.0);
  CHECK_THROWS_AS(feature_kl({1.0, 2.0}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("feature KL is non-negative and zero only at equal distributions") {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const Tensor a = random_tensor(rng, {3, 8, 1, 1}, -3, 3);
    const Tensor b = random_tensor(rng, {3, 8, 1, 1}, -3, 3);
    CHECK(feature_kl(ad::constant(a), ad::constant(b)).item() > 0.0);
    // Softmax is shift invariant, so a shifted copy is the same distribution.
    Tensor shifted = a;
    for (double& v : shifted.span()) v += 1.25;
    CHECK(std::abs(feature_kl(ad::constant(a), ad::constant(shifted)).item()) < 1e-12);
  }
}

TEST_CASE("feature KL and cross-entropy gradients match finite differences") {
  Rng rng(12);
  const Tensor fx = random_tensor(rng, {2, 6, 1, 1}, -2, 2);
  const Tensor fy = random_tensor(rng, {2, 6, 1, 1}, -2, 2);
  const ad::Var y = ad::leaf(fy);
  ad::backward(feature_kl(ad::constant(fx), y));
  for (std::size_t i = 0; i < fy.size(); ++i) {
    const double h = 1e-6;
    Tensor u = fy, d = fy;
    u[i] += h;
    d[i] -= h;
    const double num = (feature_kl(ad::constant(fx), ad::constant(u)).item() -
                        feature_kl(ad::constant(fx), ad::constant(d)).item()) /
                       (2 * h);
    CHECK(relative_error(y.grad()[i], num, 1e-6) < 1e-5);
  }

  const Tensor logits = random_tensor(rng, {3, 2, 1, 1}, -2, 2);
  const std::vector<int> labels{1, 0, 1};
  const ad::Var l = ad::leaf(logits);
  const ad::Var ce = cross_entropy(l, labels);
  double manual = 0.0;
  for (int n = 0; n < 3; ++n) {
    const double a = logits[n * 2], b = logits[n * 2 + 1];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    manual += lse - logits[n * 2 + labels[n]];
  }
  CHECK(ce.item() == doctest::Approx(manual / 3.0).epsilon(1e-12));
  ad::backward(ce);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double h = 1e-6;
    Tensor u = logits, d = logits;
    u[i] += h;
    d[i] -= h;
    const double num =
        (cross_entropy(ad::constant(u), labels).item() - cross_entropy(ad::constant(d), labels).item()) /
        (2 * h);
    CHECK(relative_error(l.grad()[i], num, 1e-6) < 1e-5);
  }
  CHECK_THROWS_AS(cross_entropy(ad::constant(logits), {1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(ad::constant(logits), {1, 0, 2}), std::invalid_argument);
}

TEST_CASE("network parameter gradients match finite differences") {
  Rng rng(13);
  const Tensor x = random_tensor(rng, {2, 3, 16, 16});
  const Tensor target = random_tensor(rng, {2, 3, 16, 16});
  {
    Generator g(GeneratorConfig{2, 2}, 14);
    for (ad::Var head = g.params().get("head.w"); double& w : head.mutable_value().span()) w = rng.uniform(-0.5, 0.5);
    auto loss = [&] {
      const ad::Var d = ad::sub(g.forward(ad::constant(x)), ad::constant(target));
      return ad::mean(ad::square(d));
    };
    CHECK(param_gradient_error(g.params(), loss) < 1e-3);
  }
  {
    Discriminator d(DiscriminatorConfig{2, 3}, 15);
    for (auto& [name, v] : d.params())
      for (double& w : v.mutable_value().span()) w += rng.uniform(-0.3, 0.3);
    auto loss = [&] { return gan_losses(d.forward(ad::constant(x)), d.forward(ad::constant(target))).d_objective; };
    CHECK(param_gradient_error(d.params(), loss) < 1e-3);
  }
  {
    Classifier c(ClassifierConfig{2, 3}, 16);
    auto loss = [&] {
      const ClassifierOutput o = c.forward(ad::constant(x));
      return ad::add(cross_entropy(o.logits, {1, 0}),
                     feature_kl(c.forward(ad::constant(target)).features, o.features));
    };
    // Many ReLU pre-activations sit close to zero at full resolution, so a
    // 1e-5 step straddles kinks; 1e-7 keeps the difference on one side.
    CHECK(param_gradient_error(c.params(), loss, 3, 1e-7) < 1e-3);
  }
}

TEST_CASE("total loss arithmetic and reductions") {
  const LossWeights w;
  CHECK(w.alpha == 0.2);
  CHECK(w.beta == 0.3);
  CHECK(w.gamma == 0.5);
  CHECK(std::abs(total_loss(1.0, 1.0, 1.0, w) - 1.0) < 1e-12);
  const double composite = total_loss(-0.6931, 0.2003, 0.5108, w);
  // -0.13862 + 0.06009 + 0.25540
  CHECK(std::abs(composite - 0.17687) < 1e-9);
  CHECK(std::abs(composite - 0.1769) < 1e-4);

  const LossWeights gan_only{1.0, 0.0, 0.0};
  CHECK(total_loss(-0.4, 7.0, 9.0, gan_only) == -0.4);
  const LossWeights reco_only{0.0, 1.0, 0.0};
  CHECK(total_loss(-0.4, 0.25, 9.0, reco_only) == 0.25);

  const ad::Var v = total_loss(ad::scalar(-0.6931), ad::scalar(0.2003), ad::scalar(0.5108), w);
  CHECK(v.item() == doctest::Approx(composite).epsilon(1e-15));

  CHECK_THROWS_AS(total_loss(NAN, 0.0, 0.0, w), std::domain_error);
  CHECK_THROWS_AS(total_loss(0.0, INFINITY, 0.0, w), std::domain_error);
  CHECK_THROWS_AS(LossWeights({0, 0, 0}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(LossWeights({-0.1, 1, 0}).validate(), std::invalid_argument);
}

TEST_CASE("parameter sets") {
  Classifier a(ClassifierConfig{2, 4}, 1);
  Classifier b(ClassifierConfig{2, 4}, 2);
  CHECK(a.params().digest() != b.params().digest());
  copy_values(a.params(), b.params());
  CHECK(a.params().digest() == b.params().digest());
  CHECK(a.params().count() > 0);
  CHECK_THROWS(a.params().get("missing"));

  b.params().set_trainable(false);
  Rng rng(3);
  const ClassifierOutput o = b.forward(ad::constant(random_tensor(rng, {2, 3, 16, 16})));
  CHECK_FALSE(o.logits.requires_grad());
  b.params().set_trainable(true);
  CHECK(b.forward(ad::constant(random_tensor(rng, {2, 3, 16, 16}))).logits.requires_grad());

  Classifier wide(ClassifierConfig{2, 8}, 1);
  CHECK_THROWS(copy_values(a.params(), wide.params()));
}

TEST_CASE("checkpoint round trip reproduces forward outputs") {
  TempDir dir("ckpt");
  Rng rng(21);
  const Tensor x = random_tensor(rng, {2, 3, 32, 32});
  Generator g(GeneratorConfig{3, 4}, 22);
  Checkpoint ck;
  ck.config_digest = g.config().describe();
  ck.metadata["epoch"] = "3";
  ck.put("g/", g.params());
  save_checkpoint(ck, dir.path() / "g.ckpt");
  CHECK_FALSE(std::filesystem::exists(dir.path() / "g.ckpt.tmp"));

  const Checkpoint back = load_checkpoint(dir.path() / "g.ckpt");
  CHECK(back.config_digest == ck.config_digest);
  CHECK(back.metadata == ck.metadata);
  Generator h(GeneratorConfig{3, 4}, 99);
  back.take("g/", h.params());
  CHECK(max_abs_diff(g.forward(ad::constant(x)).value(), h.forward(ad::constant(x)).value()) <
        1e-6);
  CHECK(g.params().digest() == h.params().digest());

  Generator other(GeneratorConfig{3, 8}, 1);
  CHECK_THROWS(back.take("g/", other.params()));
  CHECK_THROWS(back.take("d/", h.params()));
}

TEST_CASE("corrupt checkpoints are rejected") {
  TempDir dir("ckpt_bad");
  Checkpoint ck;
  ck.config_digest = "x";
  ck.tensors["t"] = Tensor({1, 2, 3, 4}, 1.5);
  save_checkpoint(ck, dir.path() / "ok.ckpt");
  std::ifstream is(dir.path() / "ok.ckpt", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(is)), {});

  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir.path() / name, std::ios::binary) << content;
    return dir.path() / name;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS(load_checkpoint(write("magic.ckpt", bad_magic)));
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS(load_checkpoint(write("version.ckpt", bad_version)));
  CHECK_THROWS(load_checkpoint(write("short.ckpt", bytes.substr(0, bytes.size() - 5))));
  CHECK_THROWS(load_checkpoint(dir.path() / "absent.ckpt"));
}
