#include "stainforge/autograd.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace stainforge::ad {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.str() + " vs " + b.str());
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// Elementwise binary op with optional scalar broadcast on either side.
// `df` returns (d/da, d/db) given (a, b).
template <typename F, typename DF>
Var binary(const Var& a, const Var& b, const char* name, F f, DF df) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_bcast = av.size() == 1 && bv.size() != 1;
  const bool b_bcast = bv.size() == 1 && av.size() != 1;
  if (!a_bcast && !b_bcast) require_same(av.shape(), bv.shape(), name);
  Tensor out(a_bcast ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = f(av[a_bcast ? 0 : i], bv[b_bcast ? 0 : i]);
  return record(std::move(out), {a, b}, [df, a_bcast, b_bcast](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    Tensor* ga = pa.requires_grad ? &pa.grad_buffer() : nullptr;
    Tensor* gb = pb.requires_grad ? &pb.grad_buffer() : nullptr;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t ia = a_bcast ? 0 : i;
      const std::size_t ib = b_bcast ? 0 : i;
      const auto [da, db] = df(pa.value[ia], pb.value[ib]);
      if (ga) (*ga)[ia] += self.grad[i] * da;
      if (gb) (*gb)[ib] += self.grad[i] * db;
    }
  });
}

}  // namespace

namespace {
thread_local int no_grad_depth = 0;
}

NoGrad::NoGrad() { ++no_grad_depth; }
NoGrad::~NoGrad() { --no_grad_depth; }

Var record(Tensor value, std::vector<Var> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (no_grad_depth > 0) return Var(std::move(node));
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Var scalar(double v) { return constant(Tensor::scalar(v)); }

Var detach(const Var& x) { return constant(x.value()); }

void backward(const Var& root) {
  if (root.value().size() != 1)
    throw std::invalid_argument("backward: root must be a scalar, got " +
                                root.shape().str());
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; graphs can be a few thousand nodes deep.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release interior gradients; leaves keep theirs. Backward functions may
  // write into frozen parents, which must not carry that into a later step.
  for (Node* n : order) {
    if (n->backward_fn) n->grad = Tensor();
    for (const auto& p : n->parents)
      if (!p->requires_grad) p->grad = Tensor();
  }
}

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

Var atan2(const Var& y, const Var& x) {
  return binary(
      y, x, "atan2", [](double yy, double xx) { return std::atan2(yy, xx); },
      [](double yy, double xx) {
        const double r2 = xx * xx + yy * yy;
        if (r2 == 0.0) return std::pair{0.0, 0.0};
        return std::pair{xx / r2, -yy / r2};
      });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }
Var operator/(const Var& a, const Var& b) { return div(a, b); }

Var add_scalar(const Var& a, double s) {
  return map(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var mul_scalar(const Var& a, double s) {
  return map(a, [s](double x) { return x * s; }, [s](double) { return s; });
}

Var rsub_scalar(double s, const Var& a) {
  return map(a, [s](double x) { return s - x; }, [](double) { return -1.0; });
}

Var square(const Var& a) {
  return map(a, [](double x) { return x * x; },
             [](double x) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return map(a, [](double x) { return std::sqrt(x); },
             [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Var exp(const Var& a) {
  return map(a, [](double x) { return std::exp(x); },
             [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  return map(a, [](double x) { return std::log(x); },
             [](double x) { return 1.0 / x; });
}

Var abs(const Var& a) {
  return map(a, [](double x) { return std::abs(x); },
             [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var pow(const Var& a, double p) {
  if (p == 1.0) return a;
  return map(a, [p](double x) { return std::pow(x, p); },
             [p](double x) { return p * std::pow(x, p - 1.0); });
}

Var sigmoid(const Var& a) {
  return map(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 - s);
      });
}

// NaN inputs pass through so poisoned weights surface in the loss.
Var relu(const Var& a) {
  return map(a, [](double x) { return x <= 0.0 ? 0.0 : x; },
             [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
  return map(a, [slope](double x) { return x <= 0.0 ? slope * x : x; },
             [slope](double x) { return x > 0.0 ? 1.0 : slope; });
}

Var clamp(const Var& a, double lo, double hi) {
  return map(
      a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().span()) s += v;
  return record(Tensor::scalar(s), {a}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double gs = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return mul_scalar(sum(a), 1.0 / n);
}

Var mean_per_sample(const Var& a) {
  const Shape s = a.shape();
  const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
  Tensor out({s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    double acc = 0.0;
    const double* p = a.value().data() + n * per;
    for (std::size_t i = 0; i < per; ++i) acc += p[i];
    out[n] = acc / static_cast<double>(per);
  }
  return record(std::move(out), {a}, [per](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < self.grad.size(); ++n) {
      const double gn = self.grad[n] / static_cast<double>(per);
      double* p = g.data() + n * per;
      for (std::size_t i = 0; i < per; ++i) p[i] += gn;
    }
  });
}

Var slice_channels(const Var& x, int first, int count) {
  const Shape s = x.shape();
  if (first < 0 || count <= 0 || first + count > s.c)
    throw std::out_of_range("slice_channels out of range for " + s.str());
  Tensor out({s.n, count, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < count; ++c) {
      const double* src = x.value().data() + x.value().index(n, first + c, 0, 0);
      std::copy(src, src + plane, out.data() + out.index(n, c, 0, 0));
    }
  return record(std::move(out), {x}, [first, count, plane](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const int nb = self.grad.shape().n;
    for (int n = 0; n < nb; ++n)
      for (int c = 0; c < count; ++c) {
        const double* src = self.grad.data() + self.grad.index(n, c, 0, 0);
        double* dst = g.data() + g.index(n, first + c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
      }
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  Shape s = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w)
      throw std::invalid_argument("concat_channels: incompatible " +
                                  ps.str() + " vs " + s.str());
    total += ps.c;
  }
  Tensor out({s.n, total, s.h, s.w});
  const std::size_t plane = s.plane();
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Tensor& v = p.value();
    for (int n = 0; n < s.n; ++n) {
      const double* src = v.data() + v.index(n, 0, 0, 0);
      std::copy(src, src + v.shape().c * plane,
                out.data() + out.index(n, off, 0, 0));
    }
    off += p.shape().c;
  }
  return record(std::move(out), parts, [offsets, plane](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      Tensor& g = p.grad_buffer();
      const int cn = p.value.shape().c;
      for (int n = 0; n < g.shape().n; ++n) {
        const double* src =
            self.grad.data() + self.grad.index(n, offsets[k], 0, 0);
        double* dst = g.data() + g.index(n, 0, 0, 0);
        for (std::size_t i = 0; i < cn * plane; ++i) dst[i] += src[i];
      }
    }
  });
}

Var channel_mix(const Var& x, const std::array<std::array<double, 3>, 3>& m) {
  const Shape s = x.shape();
  if (s.c != 3) throw std::invalid_argument("channel_mix needs 3 channels");
  Tensor out(s);
  const std::size_t plane = s.plane();
  const Tensor& v = x.value();
  for (int n = 0; n < s.n; ++n) {
    const double* in[3] = {v.data() + v.index(n, 0, 0, 0),
                           v.data() + v.index(n, 1, 0, 0),
                           v.data() + v.index(n, 2, 0, 0)};
    for (int c = 0; c < 3; ++c) {
      double* o = out.data() + out.index(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i)
        o[i] = m[c][0] * in[0][i] + m[c][1] * in[1][i] + m[c][2] * in[2][i];
    }
  }
  return record(std::move(out), {x}, [m, plane](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int n = 0; n < g.shape().n; ++n)
      for (int c = 0; c < 3; ++c) {
        const double* go = self.grad.data() + self.grad.index(n, c, 0, 0);
        for (int k = 0; k < 3; ++k) {
          double* gi = g.data() + g.index(n, k, 0, 0);
          const double w = m[c][k];
          for (std::size_t i = 0; i < plane; ++i) gi[i] += w * go[i];
        }
      }
  });
}

Var channel_affine(const Var& x, const Var& coef) {
  const Shape s = x.shape();
  const int nc = s.c;
  const Shape cs = coef.shape();
  if (cs.n != s.n || cs.c != nc * nc + nc || cs.h != 1 || cs.w != 1)
    throw std::invalid_argument("channel_affine: coefficients " + cs.str() + " do not fit " +
                                s.str());
  const std::size_t plane = s.plane();
  const Tensor& v = x.value();
  const Tensor& m = coef.value();
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    const double* a = m.data() + m.index(n, 0, 0, 0);
    for (int c = 0; c < nc; ++c) {
      double* o = out.data() + out.index(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) o[i] = a[nc * nc + c];
      for (int k = 0; k < nc; ++k) {
        const double* in = v.data() + v.index(n, k, 0, 0);
        const double w = a[c * nc + k];
        for (std::size_t i = 0; i < plane; ++i) o[i] += w * in[i];
      }
    }
  }
  return record(std::move(out), {x, coef}, [nc, plane](Node& self) {
    Node& px = *self.parents[0];
    Node& pm = *self.parents[1];
    Tensor* gx = px.requires_grad ? &px.grad_buffer() : nullptr;
    Tensor* gm = pm.requires_grad ? &pm.grad_buffer() : nullptr;
    for (int n = 0; n < self.grad.shape().n; ++n) {
      const double* a = pm.value.data() + pm.value.index(n, 0, 0, 0);
      for (int c = 0; c < nc; ++c) {
        const double* go = self.grad.data() + self.grad.index(n, c, 0, 0);
        if (gm) {
          double* ga = gm->data() + gm->index(n, 0, 0, 0);
          double bias = 0.0;
          for (std::size_t i = 0; i < plane; ++i) bias += go[i];
          ga[nc * nc + c] += bias;
          for (int k = 0; k < nc; ++k) {
            const double* in = px.value.data() + px.value.index(n, k, 0, 0);
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += go[i] * in[i];
            ga[c * nc + k] += acc;
          }
        }
        if (gx)
          for (int k = 0; k < nc; ++k) {
            double* gi = gx->data() + gx->index(n, k, 0, 0);
            const double w = a[c * nc + k];
            for (std::size_t i = 0; i < plane; ++i) gi[i] += w * go[i];
          }
      }
    }
  });
}

Var filter_separable(const Var& x, std::span<const double> kernel_rows,
                     std::span<const double> kernel_cols, Boundary boundary,
                     int stride) {
  const Shape s = x.shape();
  const int kw = static_cast<int>(kernel_rows.size());
  const int kh = static_cast<int>(kernel_cols.size());
  if (kw % 2 == 0 || kh % 2 == 0)
    throw std::invalid_argument("filter kernels must have odd length");
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  if (boundary == Boundary::kReflect && stride != 1)
    throw std::invalid_argument("reflect filtering does not support stride");
  int wo = s.w, ho = s.h;
  if (boundary == Boundary::kValid) {
    if (s.w < kw || s.h < kh)
      throw std::invalid_argument("filter_separable: input " + s.str() +
                                  " smaller than kernel");
    wo = (s.w - kw) / stride + 1;
    ho = (s.h - kh) / stride + 1;
  }
  const int rw = kw / 2, rh = kh / 2;
  std::vector<double> kr(kernel_rows.begin(), kernel_rows.end());
  std::vector<double> kc(kernel_cols.begin(), kernel_cols.end());

  // Reflection is handled as padding followed by a valid correlation:
  // padded position i reads source column src_col[i] (row src_row[i]).
  const bool reflect = boundary == Boundary::kReflect;
  const int pw = reflect ? s.w + 2 * rw : s.w;
  const int ph = reflect ? s.h + 2 * rh : s.h;
  std::vector<int> src_col(pw), src_row(ph);
  for (int i = 0; i < pw; ++i) src_col[i] = reflect ? reflect_index(i - rw, s.w) : i;
  for (int i = 0; i < ph; ++i) src_row[i] = reflect ? reflect_index(i - rh, s.h) : i;

  const int planes = s.n * s.c;
  Tensor out({s.n, s.c, ho, wo});
  const double* in = x.value().data();
  {
    std::vector<double> prow(pw), tmp(static_cast<std::size_t>(s.h) * wo);
    for (int p = 0; p < planes; ++p) {
      const double* ip = in + static_cast<std::size_t>(p) * s.h * s.w;
      // Horizontal pass into tmp (H, wo).
      std::fill(tmp.begin(), tmp.end(), 0.0);
      for (int y = 0; y < s.h; ++y) {
        const double* row = ip + static_cast<std::size_t>(y) * s.w;
        for (int i = 0; i < pw; ++i) prow[i] = row[src_col[i]];
        double* t = tmp.data() + static_cast<std::size_t>(y) * wo;
        for (int j = 0; j < kw; ++j) {
          const double kj = kr[j];
          const double* src = prow.data() + j;
          if (stride == 1) {
            for (int ox = 0; ox < wo; ++ox) t[ox] += kj * src[ox];
          } else {
            for (int ox = 0; ox < wo; ++ox) t[ox] += kj * src[ox * stride];
          }
        }
      }
      // Vertical pass.
      double* op = out.data() + static_cast<std::size_t>(p) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        double* o = op + static_cast<std::size_t>(oy) * wo;
        for (int j = 0; j < kh; ++j) {
          const double kj = kc[j];
          const double* t = tmp.data() + static_cast<std::size_t>(src_row[oy * stride + j]) * wo;
          for (int ox = 0; ox < wo; ++ox) o[ox] += kj * t[ox];
        }
      }
    }
  }

  return record(std::move(out), {x}, [=](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    std::vector<double> gtmp(static_cast<std::size_t>(s.h) * wo), gpad(pw);
    for (int p = 0; p < planes; ++p) {
      std::fill(gtmp.begin(), gtmp.end(), 0.0);
      const double* go = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const double* gr = go + static_cast<std::size_t>(oy) * wo;
        for (int j = 0; j < kh; ++j) {
          const double kj = kc[j];
          double* t = gtmp.data() + static_cast<std::size_t>(src_row[oy * stride + j]) * wo;
          for (int ox = 0; ox < wo; ++ox) t[ox] += kj * gr[ox];
        }
      }
      double* gi = g.data() + static_cast<std::size_t>(p) * s.h * s.w;
      for (int y = 0; y < s.h; ++y) {
        std::fill(gpad.begin(), gpad.end(), 0.0);
        const double* t = gtmp.data() + static_cast<std::size_t>(y) * wo;
        for (int j = 0; j < kw; ++j) {
          const double kj = kr[j];
          double* dst = gpad.data() + j;
          if (stride == 1) {
            for (int ox = 0; ox < wo; ++ox) dst[ox] += kj * t[ox];
          } else {
            for (int ox = 0; ox < wo; ++ox) dst[ox * stride] += kj * t[ox];
          }
        }
        double* row = gi + static_cast<std::size_t>(y) * s.w;
        for (int i = 0; i < pw; ++i) row[src_col[i]] += gpad[i];
      }
    }
  });
}

namespace {

// Output columns [lo, hi) whose input column ox * stride + offset lies in
// [0, width).
std::pair<int, int> valid_range(int offset, int stride, int width, int out_w) {
  int lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  int hi = width - 1 - offset < 0 ? 0 : (width - 1 - offset) / stride + 1;
  lo = std::min(lo, out_w);
  hi = std::clamp(hi, lo, out_w);
  return {lo, hi};
}

}  // namespace

namespace {

struct ConvGeometry {
  Shape in;
  int k, stride, pad, ho, wo;
  int rows() const { return in.c * k * k; }
  int cols() const { return ho * wo; }
};

// Scratch reused across calls; fresh multi-megabyte buffers per call cost
// more in page faults than the GEMM itself.
AlignedBuffer& scratch(int slot, std::size_t n) {
  thread_local AlignedBuffer buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const int n_cols = g.cols();
  for (int c = 0; c < g.in.c; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * n_cols;
        const double* plane = x + static_cast<std::size_t>(c) * g.in.h * g.in.w;
        const auto [lo, hi] = valid_range(kx - g.pad, g.stride, g.in.w, g.wo);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* r = row + oy * g.wo;
          if (iy < 0 || iy >= g.in.h) {
            std::fill(r, r + g.wo, 0.0);
            continue;
          }
          std::fill(r, r + lo, 0.0);
          std::fill(r + hi, r + g.wo, 0.0);
          const double* src = plane + iy * g.in.w + kx - g.pad;
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, r + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) r[ox] = src[ox * g.stride];
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* x) {
  const int n_cols = g.cols();
  for (int c = 0; c < g.in.c; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row =
            cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * n_cols;
        double* plane = x + static_cast<std::size_t>(c) * g.in.h * g.in.w;
        const auto [lo, hi] = valid_range(kx - g.pad, g.stride, g.in.w, g.wo);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in.h) continue;
          double* dst = plane + iy * g.in.w + kx - g.pad;
          const double* src = row + oy * g.wo;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride,
           int pad) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != s.c || ws.h != ws.w)
    throw std::invalid_argument("conv2d: weight " + ws.str() +
                                " incompatible with input " + s.str());
  ConvGeometry g{s, ws.h, stride, pad, (s.h + 2 * pad - ws.h) / stride + 1,
                 (s.w + 2 * pad - ws.h) / stride + 1};
  if (g.ho <= 0 || g.wo <= 0)
    throw std::invalid_argument("conv2d: input too small " + s.str());
  const int rows = g.rows();
  const int cols = g.cols();
  const int out_c = ws.n;
  const bool has_bias = bias.defined();

  Tensor out({s.n, out_c, g.ho, g.wo});
  ConstMatMap wm(weight.value().data(), out_c, rows);
  double* cb = scratch(0, static_cast<std::size_t>(rows) * cols).data();
  for (int n = 0; n < s.n; ++n) {
    im2col(g, x.value().data() + x.value().index(n, 0, 0, 0), cb);
    MatMap om(out.data() + out.index(n, 0, 0, 0), out_c, cols);
    om.noalias() = wm * ConstMatMap(cb, rows, cols);
    if (has_bias)
      for (int o = 0; o < out_c; ++o) om.row(o).array() += bias.value()[o];
  }

  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return record(std::move(out), parents, [=](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    ConstMatMap wmat(pw.value.data(), out_c, rows);
    double* cbuf = scratch(0, static_cast<std::size_t>(rows) * cols).data();
    double* gbuf = scratch(1, static_cast<std::size_t>(rows) * cols).data();
    for (int n = 0; n < s.n; ++n) {
      ConstMatMap go(self.grad.data() + self.grad.index(n, 0, 0, 0), out_c,
                     cols);
      if (pw.requires_grad) {
        im2col(g, px.value.data() + px.value.index(n, 0, 0, 0), cbuf);
        MatMap gw(pw.grad_buffer().data(), out_c, rows);
        gw.noalias() += go * ConstMatMap(cbuf, rows, cols).transpose();
      }
      if (has_bias && self.parents[2]->requires_grad) {
        Tensor& gb = self.parents[2]->grad_buffer();
        for (int o = 0; o < out_c; ++o) {
          const double* row = self.grad.data() + self.grad.index(n, o, 0, 0);
          double acc = 0.0;
          for (int j = 0; j < cols; ++j) acc += row[j];
          gb[o] += acc;
        }
      }
      if (px.requires_grad) {
        MatMap gcols(gbuf, rows, cols);
        gcols.noalias() = wmat.transpose() * go;
        Tensor& gxt = px.grad_buffer();
        col2im_add(g, gbuf, gxt.data() + gxt.index(n, 0, 0, 0));
      }
    }
  });
}

Var avg_pool2(const Var& x) {
  const Shape s = x.shape();
  if (s.h % 2 || s.w % 2)
    throw std::invalid_argument("avg_pool2 needs even sides, got " + s.str());
  Tensor out({s.n, s.c, s.h / 2, s.w / 2});
  const Tensor& v = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h / 2; ++y)
        for (int xx = 0; xx < s.w / 2; ++xx)
          out.at(n, c, y, xx) =
              0.25 * (v.at(n, c, 2 * y, 2 * xx) + v.at(n, c, 2 * y, 2 * xx + 1) +
                      v.at(n, c, 2 * y + 1, 2 * xx) +
                      v.at(n, c, 2 * y + 1, 2 * xx + 1));
  return record(std::move(out), {x}, [s](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx)
            g.at(n, c, y, xx) += 0.25 * self.grad.at(n, c, y / 2, xx / 2);
  });
}

Var upsample2(const Var& x) {
  const Shape s = x.shape();
  Tensor out({s.n, s.c, s.h * 2, s.w * 2});
  const Tensor& v = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < 2 * s.h; ++y)
        for (int xx = 0; xx < 2 * s.w; ++xx)
          out.at(n, c, y, xx) = v.at(n, c, y / 2, xx / 2);
  return record(std::move(out), {x}, [s](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < 2 * s.h; ++y)
          for (int xx = 0; xx < 2 * s.w; ++xx)
            g.at(n, c, y / 2, xx / 2) += self.grad.at(n, c, y, xx);
  });
}

Var global_avg_pool(const Var& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor out({s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const double* p = x.value().data() + x.value().index(n, c, 0, 0);
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out.at(n, c, 0, 0) = acc / static_cast<double>(plane);
    }
  return record(std::move(out), {x}, [s, plane](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const double gv = self.grad.at(n, c, 0, 0) / static_cast<double>(plane);
        double* p = g.data() + g.index(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) p[i] += gv;
      }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  const int features = s.c * s.h * s.w;
  if (ws.c * ws.h * ws.w != features)
    throw std::invalid_argument("linear: weight " + ws.str() +
                                " incompatible with input " + s.str());
  const int out_f = ws.n;
  Tensor out({s.n, out_f, 1, 1});
  ConstMatMap xm(x.value().data(), s.n, features);
  ConstMatMap wm(weight.value().data(), out_f, features);
  MatMap om(out.data(), s.n, out_f);
  om.noalias() = xm * wm.transpose();
  for (int n = 0; n < s.n; ++n)
    for (int o = 0; o < out_f; ++o) om(n, o) += bias.value()[o];
  return record(std::move(out), {x, weight, bias},
                [n_batch = s.n, features, out_f](Node& self) {
                  Node& px = *self.parents[0];
                  Node& pw = *self.parents[1];
                  Node& pb = *self.parents[2];
                  ConstMatMap go(self.grad.data(), n_batch, out_f);
                  if (px.requires_grad) {
                    MatMap gx(px.grad_buffer().data(), n_batch, features);
                    gx.noalias() += go * ConstMatMap(pw.value.data(), out_f, features);
                  }
                  if (pw.requires_grad) {
                    MatMap gw(pw.grad_buffer().data(), out_f, features);
                    gw.noalias() +=
                        go.transpose() * ConstMatMap(px.value.data(), n_batch, features);
                  }
                  if (pb.requires_grad) {
                    Tensor& gb = pb.grad_buffer();
                    for (int b = 0; b < n_batch; ++b)
                      for (int o = 0; o < out_f; ++o) gb[o] += go(b, o);
                  }
                });
}

Var log_softmax(const Var& x) {
  const Shape s = x.shape();
  if (s.h != 1 || s.w != 1)
    throw std::invalid_argument("softmax expects (N,F,1,1), got " + s.str());
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    const double* p = x.value().data() + n * s.c;
    double mx = p[0];
    for (int i = 1; i < s.c; ++i) mx = std::max(mx, p[i]);
    double z = 0.0;
    for (int i = 0; i < s.c; ++i) z += std::exp(p[i] - mx);
    const double lz = mx + std::log(z);
    for (int i = 0; i < s.c; ++i) out[n * s.c + i] = p[i] - lz;
  }
  Tensor probs = out;
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(probs[i]);
  return record(std::move(out), {x}, [s, probs](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int n = 0; n < s.n; ++n) {
      double gsum = 0.0;
      for (int i = 0; i < s.c; ++i) gsum += self.grad[n * s.c + i];
      for (int i = 0; i < s.c; ++i)
        g[n * s.c + i] += self.grad[n * s.c + i] - probs[n * s.c + i] * gsum;
    }
  });
}

Var softmax(const Var& x) {
  const Shape s = x.shape();
  Tensor out = log_softmax(detach(x)).value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  Tensor probs = out;
  return record(std::move(out), {x}, [s, probs](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int n = 0; n < s.n; ++n) {
      double dot = 0.0;
      for (int i = 0; i < s.c; ++i)
        dot += self.grad[n * s.c + i] * probs[n * s.c + i];
      for (int i = 0; i < s.c; ++i)
        g[n * s.c + i] += probs[n * s.c + i] * (self.grad[n * s.c + i] - dot);
    }
  });
}

}  // namespace stainforge::ad
