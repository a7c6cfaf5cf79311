#include "stainforge/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "stainforge/rng.hpp"

namespace stainforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

namespace {

constexpr double kLeakSlope = 0.2;
// 8-bit inputs survive the clamp unchanged after rounding.
constexpr double kIdentityEps = 1e-3;

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

// He-normal initialisation for a (O,C,k,k) kernel.
Tensor conv_init(Rng& rng, int out, int in, int k, double gain = 2.0) {
  Tensor w({out, in, k, k});
  const double sd = std::sqrt(gain / static_cast<double>(in * k * k));
  for (double& v : w.span()) v = sd * rng.normal();
  return w;
}

Tensor bias_init(int out) { return Tensor({1, out, 1, 1}); }

void add_conv(ParamSet& ps, Rng& rng, const std::string& name, int out, int in,
              int k, double gain = 2.0) {
  ps.add(name + ".w", conv_init(rng, out, in, k, gain));
  ps.add(name + ".b", bias_init(out));
}

ad::Var conv(const ParamSet& ps, const std::string& name, const ad::Var& x,
             int stride = 1) {
  const ad::Var& w = ps.get(name + ".w");
  const int k = w.shape().h;
  return ad::conv2d(x, w, ps.get(name + ".b"), stride, k / 2);
}

ad::Var lrelu(const ad::Var& x) { return ad::leaky_relu(x, kLeakSlope); }

constexpr double kLeakyGain = 2.0 / (1.0 + kLeakSlope * kLeakSlope);

void check_input(const ad::Var& x, const char* who) {
  if (x.shape().c != 3)
    throw std::invalid_argument(std::string(who) + ": expected 3 channels, got " +
                                x.shape().str());
}

}  // namespace

ad::Var& ParamSet::add(const std::string& name, Tensor init) {
  for (const auto& [n, v] : entries_)
    if (n == name) throw std::logic_error("duplicate parameter " + name);
  entries_.emplace_back(name, ad::leaf(std::move(init), true));
  return entries_.back().second;
}

const ad::Var& ParamSet::get(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw std::out_of_range("no parameter named " + name);
}

std::size_t ParamSet::count() const {
  std::size_t total = 0;
  for (const auto& [n, v] : entries_) total += v.value().size();
  return total;
}

void ParamSet::set_trainable(bool trainable) {
  for (auto& [n, v] : entries_) v.node()->requires_grad = trainable;
}

void ParamSet::zero_grad() {
  for (auto& [n, v] : entries_) v.zero_grad();
}

std::uint64_t ParamSet::digest() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& [n, v] : entries_) {
    h = fnv1a(n.data(), n.size(), h);
    const Shape s = v.shape();
    const int dims[4] = {s.n, s.c, s.h, s.w};
    h = fnv1a(dims, sizeof dims, h);
    h = fnv1a(v.value().data(), v.value().size() * sizeof(double), h);
  }
  return h;
}

void copy_values(const ParamSet& from, ParamSet& to) {
  for (auto& [name, v] : to) {
    const ad::Var& src = from.get(name);
    if (!(src.shape() == v.shape()))
      throw std::invalid_argument("copy_values: shape mismatch for " + name);
    v.mutable_value() = src.value();
  }
}

void GeneratorConfig::validate() const {
  if (depth < 2) throw std::invalid_argument("generator depth must be >= 2");
  if (base_channels < 1) throw std::invalid_argument("generator base_channels must be >= 1");
}

std::string GeneratorConfig::describe() const {
  return "generator depth=" + std::to_string(depth) + " base=" + std::to_string(base_channels);
}

void DiscriminatorConfig::validate() const {
  if (levels < 1) throw std::invalid_argument("discriminator levels must be >= 1");
  if (base_channels < 1) throw std::invalid_argument("discriminator base_channels must be >= 1");
}

std::string DiscriminatorConfig::describe() const {
  return "discriminator levels=" + std::to_string(levels) + " base=" +
         std::to_string(base_channels);
}

void ClassifierConfig::validate() const {
  if (stages < 1) throw std::invalid_argument("classifier stages must be >= 1");
  if (base_channels < 1) throw std::invalid_argument("classifier base_channels must be >= 1");
}

std::string ClassifierConfig::describe() const {
  return "classifier stages=" + std::to_string(stages) + " base=" +
         std::to_string(base_channels);
}

Generator::Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int b = cfg_.base_channels;
  int in = 3;
  for (int l = 0; l < cfg_.depth; ++l) {
    const int c = b << l;
    add_conv(params_, rng, "enc" + std::to_string(l) + ".0", c, in, 3, kLeakyGain);
    add_conv(params_, rng, "enc" + std::to_string(l) + ".1", c, c, 3, kLeakyGain);
    in = c;
  }
  const int cb = b << cfg_.depth;
  add_conv(params_, rng, "mid.0", cb, in, 3, kLeakyGain);
  add_conv(params_, rng, "mid.1", cb, cb, 3, kLeakyGain);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const int c = b << l;
    add_conv(params_, rng, "dec" + std::to_string(l) + ".up", c, 2 * c, 3, kLeakyGain);
    add_conv(params_, rng, "dec" + std::to_string(l) + ".merge", c, 2 * c, 3, kLeakyGain);
  }
  // Zero heads: the untrained generator is the identity on [eps, 1 - eps].
  params_.add("head.w", Tensor({3, b, 1, 1}));
  params_.add("head.b", bias_init(3));
  add_conv(params_, rng, "global.0", cb, cb + 3, 1, kLeakyGain);
  params_.add("global.1.w", Tensor({12, cb, 1, 1}));
  params_.add("global.1.b", bias_init(12));
}

ad::Var Generator::forward(const ad::Var& x) const {
  check_input(x, "generator");
  const int div = 1 << cfg_.depth;
  if (x.shape().h % div != 0 || x.shape().w % div != 0)
    throw std::invalid_argument("generator: patch side must be divisible by " +
                                std::to_string(div) + ", got " + x.shape().str());
  std::vector<ad::Var> skips;
  ad::Var h = x;
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    h = lrelu(conv(params_, p + ".0", h));
    h = lrelu(conv(params_, p + ".1", h));
    skips.push_back(h);
    h = ad::avg_pool2(h);
  }
  h = lrelu(conv(params_, "mid.0", h));
  h = lrelu(conv(params_, "mid.1", h));
  const ad::Var xc = ad::clamp(x, kIdentityEps, 1.0 - kIdentityEps);
  const ad::Var logit = ad::sub(ad::log(xc), ad::log(ad::add_scalar(ad::mul_scalar(xc, -1.0), 1.0)));
  // Patch-wide colour statistics set one 3x3 affine map of the logits per
  // sample; a stain shift is global, beyond the reach of the local path.
  const ad::Var context = ad::concat_channels({ad::global_avg_pool(h), ad::global_avg_pool(logit)});
  const ad::Var coef = conv(params_, "global.1", lrelu(conv(params_, "global.0", context)));
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    h = lrelu(conv(params_, p + ".up", ad::upsample2(h)));
    h = lrelu(conv(params_, p + ".merge", ad::concat_channels({h, skips[l]})));
  }
  // Both corrections act in logit space on top of the input.
  return ad::sigmoid(ad::add(ad::add(logit, ad::channel_affine(logit, coef)),
                             conv(params_, "head", h)));
}

Discriminator::Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  int in = 3;
  for (int l = 0; l < cfg_.levels; ++l) {
    const int c = cfg_.base_channels << l;
    add_conv(params_, rng, "conv" + std::to_string(l), c, in, 3, kLeakyGain);
    in = c;
  }
  params_.add("fc.w", Tensor({1, in, 1, 1}));
  params_.add("fc.b", Tensor({1, 1, 1, 1}));
}

ad::Var Discriminator::forward(const ad::Var& x) const {
  check_input(x, "discriminator");
  ad::Var h = x;
  for (int l = 0; l < cfg_.levels; ++l)
    h = lrelu(conv(params_, "conv" + std::to_string(l), h, 2));
  h = ad::global_avg_pool(h);
  return ad::sigmoid(ad::linear(h, params_.get("fc.w"), params_.get("fc.b")));
}

Classifier::Classifier(const ClassifierConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int b = cfg_.base_channels;
  add_conv(params_, rng, "stem", b, 3, 3);
  int in = b;
  for (int s = 0; s < cfg_.stages; ++s) {
    const int c = b << s;
    const std::string p = "stage" + std::to_string(s);
    add_conv(params_, rng, p + ".down", c, in, 3);
    add_conv(params_, rng, p + ".res0", c, c, 3);
    // Residual branch starts small so each block is close to identity.
    add_conv(params_, rng, p + ".res1", c, c, 3, 0.1);
    in = c;
  }
  Tensor fc({2, in, 1, 1});
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& v : fc.span()) v = sd * rng.normal();
  params_.add("fc.w", std::move(fc));
  params_.add("fc.b", Tensor({1, 2, 1, 1}));
}

ClassifierOutput Classifier::forward(const ad::Var& x) const {
  check_input(x, "classifier");
  ad::Var h = ad::relu(conv(params_, "stem", x));
  for (int s = 0; s < cfg_.stages; ++s) {
    const std::string p = "stage" + std::to_string(s);
    h = ad::relu(conv(params_, p + ".down", h, 2));
    const ad::Var r = conv(params_, p + ".res1", ad::relu(conv(params_, p + ".res0", h)));
    h = ad::relu(ad::add(h, r));
  }
  ClassifierOutput out;
  out.features = ad::global_avg_pool(h);
  out.logits = ad::linear(out.features, params_.get("fc.w"), params_.get("fc.b"));
  out.probabilities = ad::softmax(out.logits);
  return out;
}

GanTerms gan_losses(const ad::Var& d_real, const ad::Var& d_fake) {
  const double lo = kProbabilityClamp, hi = 1.0 - kProbabilityClamp;
  const ad::Var real = ad::clamp(d_real, lo, hi);
  const ad::Var fake = ad::clamp(d_fake, lo, hi);
  const ad::Var log_fake_complement = ad::log(ad::rsub_scalar(1.0, fake));
  GanTerms t;
  t.g_term = ad::mean(log_fake_complement);
  t.d_objective = ad::add(ad::mean(ad::log(real)), t.g_term);
  return t;
}

ad::Var feature_kl(const ad::Var& f_x, const ad::Var& f_x_hat) {
  if (!(f_x.shape() == f_x_hat.shape()))
    throw std::invalid_argument("feature_kl: shape mismatch " + f_x.shape().str() +
                                " vs " + f_x_hat.shape().str());
  const ad::Var p = ad::softmax(f_x);
  const ad::Var q = ad::softmax(f_x_hat);
  const ad::Var log_ratio = ad::sub(ad::log(ad::add_scalar(p, kKlSmoothing)),
                                    ad::log(ad::add_scalar(q, kKlSmoothing)));
  // Sum over features, mean over the batch.
  return ad::mul_scalar(ad::sum(ad::mul(p, log_ratio)), 1.0 / f_x.shape().n);
}

double feature_kl(const std::vector<double>& f_x, const std::vector<double>& f_x_hat) {
  if (f_x.size() != f_x_hat.size() || f_x.empty())
    throw std::invalid_argument("feature_kl: length mismatch");
  const int n = static_cast<int>(f_x.size());
  return feature_kl(ad::constant(Tensor({1, n, 1, 1}, f_x)),
                    ad::constant(Tensor({1, n, 1, 1}, f_x_hat)))
      .item();
}

ad::Var cross_entropy(const ad::Var& logits, const std::vector<int>& labels) {
  const Shape s = logits.shape();
  if (s.c != 2 || s.h != 1 || s.w != 1 || static_cast<int>(labels.size()) != s.n)
    throw std::invalid_argument("cross_entropy: expected (N,2,1,1) logits and N labels");
  Tensor onehot(s);
  for (int n = 0; n < s.n; ++n) {
    if (labels[n] != 0 && labels[n] != 1)
      throw std::invalid_argument("cross_entropy: labels must be 0 or 1");
    onehot[n * 2 + labels[n]] = -1.0 / s.n;
  }
  return ad::sum(ad::mul(ad::log_softmax(logits), ad::constant(std::move(onehot))));
}

void LossWeights::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0)
    throw std::invalid_argument("loss weights must be nonnegative");
  if (alpha == 0 && beta == 0 && gamma == 0)
    throw std::invalid_argument("loss weights must not all be zero");
}

ad::Var total_loss(const ad::Var& l_gan, const ad::Var& l_reco, const ad::Var& l_fp,
                   const LossWeights& w) {
  w.validate();
  return ad::add(ad::add(ad::mul_scalar(l_gan, w.alpha), ad::mul_scalar(l_reco, w.beta)),
                 ad::mul_scalar(l_fp, w.gamma));
}

double total_loss(double l_gan, double l_reco, double l_fp, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(l_gan) || !std::isfinite(l_reco) || !std::isfinite(l_fp))
    throw std::domain_error("total_loss: non-finite component");
  return w.alpha * l_gan + w.beta * l_reco + w.gamma * l_fp;
}

void Checkpoint::put(const std::string& prefix, const ParamSet& params) {
  for (const auto& [name, v] : params) tensors[prefix + name] = v.value();
}

void Checkpoint::take(const std::string& prefix, ParamSet& params) const {
  for (auto& [name, v] : params) {
    const auto it = tensors.find(prefix + name);
    if (it == tensors.end())
      throw std::runtime_error("checkpoint lacks tensor " + prefix + name);
    if (!(it->second.shape() == v.shape()))
      throw std::runtime_error("checkpoint tensor " + prefix + name + " has shape " +
                               it->second.shape().str() + ", expected " + v.shape().str());
    v.mutable_value() = it->second;
  }
}

namespace {

constexpr char kMagic[4] = {'S', 'F', 'C', 'K'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("checkpoint truncated");
  return v;
}

std::string get_string(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  if (n > (1u << 24)) throw std::runtime_error("checkpoint string too long");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw std::runtime_error("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  // Write-then-rename so an interrupted save never leaves a torn file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    os.write(kMagic, 4);
    put_u32(os, Checkpoint::kVersion);
    put_string(os, ck.config_digest);
    put_u32(os, static_cast<std::uint32_t>(ck.metadata.size()));
    for (const auto& [k, v] : ck.metadata) {
      put_string(os, k);
      put_string(os, v);
    }
    put_u32(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
      put_string(os, name);
      const Shape s = t.shape();
      const std::int32_t dims[4] = {s.n, s.c, s.h, s.w};
      os.write(reinterpret_cast<const char*>(dims), sizeof dims);
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path.string() + ": not a checkpoint file");
  const std::uint32_t version = get_u32(is);
  if (version != Checkpoint::kVersion)
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                             std::to_string(version));
  Checkpoint ck;
  ck.config_digest = get_string(is);
  const std::uint32_t n_meta = get_u32(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = get_string(is);
    ck.metadata[k] = get_string(is);
  }
  const std::uint32_t n_tensors = get_u32(is);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = get_string(is);
    std::int32_t dims[4];
    if (!is.read(reinterpret_cast<char*>(dims), sizeof dims))
      throw std::runtime_error("checkpoint truncated");
    for (int d : dims)
      if (d <= 0 || d > (1 << 20)) throw std::runtime_error("checkpoint has a bad shape");
    Tensor t({dims[0], dims[1], dims[2], dims[3]});
    if (!is.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw std::runtime_error("checkpoint truncated");
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace stainforge
