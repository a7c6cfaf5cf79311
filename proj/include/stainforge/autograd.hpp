#pragma once

// Reverse-mode automatic differentiation over NCHW tensors.
//
// Every operation returns a new Var. When at least one input requires a
// gradient, the result records its parents and a backward closure; otherwise
// the graph is not recorded at all, so inference pays no bookkeeping cost.

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "stainforge/tensor.hpp"

namespace stainforge::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  /// Accumulated gradient; empty if backward never reached this node.
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  /// Replaces the stored value in place (parameters only).
  Tensor& mutable_value() { return node_->value; }

  double item() const { return node_->value.item(); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad = true);
Var scalar(double v);
/// Same value, cut from the graph.
Var detach(const Var& x);

/// Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
void backward(const Var& root);

/// While alive, no operation on this thread records a graph.
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

using BackwardFn = std::function<void(Node&)>;
Var record(Tensor value, std::vector<Var> parents, BackwardFn fn);

// Elementwise binary ops. `b` may also be a single-element tensor, which is
// broadcast over `a`.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var atan2(const Var& y, const Var& x);

Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
/// s - a
Var rsub_scalar(double s, const Var& a);

Var square(const Var& a);
Var sqrt(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var pow(const Var& a, double p);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
/// Values outside [lo, hi] are clamped and receive zero gradient.
Var clamp(const Var& a, double lo, double hi);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);

/// Pointwise map with an explicit derivative.
template <typename F, typename DF>
Var map(const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return record(std::move(out), {x}, [df](Node& self) {
    auto& p = *self.parents[0];
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * df(p.value[i]);
  });
}

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// Mean over (c, h, w) for every sample: result is (n, 1, 1, 1).
Var mean_per_sample(const Var& a);

// Channel manipulation.
Var slice_channels(const Var& x, int first, int count);
Var concat_channels(const std::vector<Var>& parts);
/// out[c] = sum_k m[c][k] * x[k] for a 3-channel input.
Var channel_mix(const Var& x, const std::array<std::array<double, 3>, 3>& m);
/// Per-sample affine map across channels. x is (N,C,H,W), coef is
/// (N,C*C+C,1,1) holding a row-major CxC matrix then C offsets:
/// out[n,c] = sum_k coef[n,c*C+k] * x[n,k] + coef[n,C*C+c].
Var channel_affine(const Var& x, const Var& coef);

enum class Boundary { kValid, kReflect };

/// Separable filtering with fixed kernels, applied per channel. `kValid`
/// evaluates only fully supported positions (optionally strided);
/// `kReflect` keeps the size and mirrors the border (sample at -1 is 1).
Var filter_separable(const Var& x, std::span<const double> kernel_rows,
                     std::span<const double> kernel_cols, Boundary boundary,
                     int stride = 1);

// Network layers.
/// x: (N,C,H,W), weight: (O,C,k,k), bias: (1,O,1,1) or undefined. Zero pad.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride,
           int pad);
Var avg_pool2(const Var& x);
Var upsample2(const Var& x);
Var global_avg_pool(const Var& x);
/// x: (N,F,1,1), weight: (O,F,1,1), bias: (1,O,1,1).
Var linear(const Var& x, const Var& weight, const Var& bias);
/// Softmax across channels of an (N,F,1,1) tensor.
Var softmax(const Var& x);
Var log_softmax(const Var& x);

}  // namespace stainforge::ad
