#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "jigmark/util.hpp"

namespace jigmark {
struct JigsawKey;
}

namespace jigmark::ad {

using real = double;

/// Fixed 4-D NCHW shape. Vectors live as [N,C,1,1], scalars as [1,1,1,1].
/// Conv weights use [Cout, Cin/groups, kh, kw]; linear weights [out, in, 1, 1].
struct Shape {
  int n = 1, c = 1, h = 1, w = 1;
  int64_t numel() const {
    return static_cast<int64_t>(n) * c * static_cast<int64_t>(h) * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

namespace detail {
struct Node {
  Shape shape;
  std::vector<real> val;
  std::vector<real> grad;  // sized lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backfn;  // adds into parents' grads
  int topo_flag = 0;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};
}  // namespace detail

/// Reverse-mode autodiff value. Copying is cheap (shared node).
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor constant(const Shape& s, real v);
  static Tensor from_vector(const Shape& s, std::vector<real> v,
                            bool requires_grad = false);
  static Tensor scalar(real v);
  static Tensor randn(const Shape& s, Rng& rng, real std,
                      bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return n_->shape.numel(); }
  std::vector<real>& values() { return n_->val; }
  const std::vector<real>& values() const { return n_->val; }
  real item() const;

  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }
  /// Gradient buffer (valid after backward reached this node).
  const std::vector<real>& grad() const;
  std::vector<real>& grad_mut();
  void zero_grad();

  /// Same data buffer, no graph history.
  Tensor detach() const;
  /// Deep copy of the data, no graph history.
  Tensor clone() const;

  std::shared_ptr<detail::Node> node() const { return n_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

private:
  std::shared_ptr<detail::Node> n_;
};

/// While alive, ops record no graph (inference mode).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
};
bool grad_enabled();

/// Backpropagate from a scalar root through the recorded graph.
void backward(const Tensor& root);

// ---------- elementwise ----------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// scale * x + shift
Tensor affine(const Tensor& x, real scale, real shift);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// log(1 + e^x), overflow-safe
Tensor softplus(const Tensor& x);
/// clamp to [lo,hi]; pass-through gradient inside the range, zero outside
Tensor clamp(const Tensor& x, real lo, real hi);

// ---------- linear algebra / conv ----------
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride, int pad);
/// x [N,in,1,1], w [out,in,1,1], b [1,out,1,1] -> [N,out,1,1]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---------- normalization ----------
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, real eps = 1e-5);
/// normalize across channels at each spatial position (convnet layer norm)
Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta, real eps = 1e-6);
/// global response normalization: y = gamma * x * (|x|_hw / mean_c|x|_hw) + beta + x
Tensor grn(const Tensor& x, const Tensor& gamma, const Tensor& beta,
           real eps = 1e-6);
/// unit-normalize the channel vector at each spatial position
Tensor channel_l2_normalize(const Tensor& x, real eps = 1e-10);

// ---------- shape / structure ----------
Tensor upsample_nearest2x(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor concat_batch(const std::vector<Tensor>& parts);
Tensor gather_batch(const Tensor& x, std::vector<int> indices);

// ---------- reductions / losses ----------
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor smooth_l1_mean(const Tensor& a, const Tensor& b);
/// mean over batch of -y log p - (1-y) log(1-p), p clamped to [eps, 1-eps]
Tensor bce_mean(const Tensor& p, const std::vector<real>& y, real eps = 1e-7);

// ---------- domain ops ----------
/// Apply per-sample jigsaw shuffles to a [N,3,H,W] batch (inverse=false)
/// or their inverses (inverse=true). Gradient is the opposite permutation.
Tensor shuffle_batch(const Tensor& x, const std::vector<JigsawKey>& keys,
                     bool inverse);
/// y = base * mask + x * (1 - mask); base is constant, mask is [H*W] in [0,1].
Tensor blend_with_mask(const Tensor& x, const std::vector<real>& base,
                       const std::vector<real>& mask);

}  // namespace jigmark::ad
