#include "jigmark/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace jigmark {

using ad::Shape;

double PerceptualMetric::value(const Image& a, const Image& b) const {
  ad::NoGradGuard ng;
  return distance(image_to_tensor(a), image_to_tensor(b)).item();
}

FrozenFeatureDistance::FrozenFeatureDistance(uint64_t seed) {
  Rng rng = Rng::seeded(seed);
  const int chans[4] = {3, 8, 16, 24};
  for (int i = 0; i < 3; ++i) {
    double std = std::sqrt(2.0 / (static_cast<double>(chans[i]) * 9));
    ws_.push_back(Tensor::randn(Shape{chans[i + 1], chans[i], 3, 3}, rng, std));
    bs_.push_back(Tensor::zeros(Shape{1, chans[i + 1], 1, 1}));
  }
}

std::vector<Tensor> FrozenFeatureDistance::features(const Tensor& x) const {
  std::vector<Tensor> feats;
  Tensor h = x;
  for (size_t i = 0; i < ws_.size(); ++i) {
    int stride = (i == 0) ? 1 : 2;
    h = ad::relu(ad::conv2d(h, ws_[i], bs_[i], stride, 1));
    feats.push_back(h);
  }
  return feats;
}

Tensor FrozenFeatureDistance::distance(const Tensor& a, const Tensor& b) const {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument("perceptual distance: shape mismatch");
  std::vector<Tensor> fa = features(a);
  std::vector<Tensor> fb = features(b);
  Tensor total = Tensor::scalar(0.0);
  for (size_t i = 0; i < fa.size(); ++i) {
    Tensor d = ad::sub(ad::channel_l2_normalize(fa[i]),
                       ad::channel_l2_normalize(fb[i]));
    total = ad::add(total, ad::mean_all(ad::mul(d, d)));
  }
  return total;
}

Tensor watermark_loss(const Tensor& k_pos, const Tensor& k_neg,
                      const LossWeights& w) {
  w.validate();
  if (k_pos.numel() == 0 || k_neg.numel() == 0)
    throw std::invalid_argument("watermark_loss: empty score list");
  // log(1 + e^{(lambda - k)/tau}) == softplus((lambda - k)/tau)
  Tensor pos_term =
      ad::mean_all(ad::softplus(ad::affine(k_pos, -1.0 / w.tau,
                                           w.lambda_margin / w.tau)));
  Tensor neg_term =
      ad::mean_all(ad::softplus(ad::affine(k_neg, 1.0 / w.tau,
                                           -w.lambda_margin / w.tau)));
  return ad::add(pos_term, neg_term);
}

double watermark_loss_value(const std::vector<double>& k_pos,
                            const std::vector<double>& k_neg,
                            const LossWeights& w) {
  ad::NoGradGuard ng;
  Tensor p = Tensor::from_vector(
      Shape{static_cast<int>(k_pos.size()), 1, 1, 1}, k_pos);
  Tensor n = Tensor::from_vector(
      Shape{static_cast<int>(k_neg.size()), 1, 1, 1}, k_neg);
  return watermark_loss(p, n, w).item();
}

Tensor visual_loss(const Tensor& x, const Tensor& x_w, const LossWeights& w,
                   const PerceptualMetric& perceptual) {
  w.validate();
  if (!(x.shape() == x_w.shape()))
    throw std::invalid_argument("visual_loss: shape mismatch");
  Tensor total = Tensor::scalar(0.0);
  if (w.alpha != 0.0)
    total = ad::add(total,
                    ad::affine(perceptual.distance(x, x_w), w.alpha, 0.0));
  if (w.beta != 0.0)
    total = ad::add(total, ad::affine(ad::smooth_l1_mean(x, x_w), w.beta, 0.0));
  return total;
}

double visual_loss_value(const Image& x, const Image& x_w,
                         const LossWeights& w,
                         const PerceptualMetric& perceptual) {
  ad::NoGradGuard ng;
  return visual_loss(image_to_tensor(x), image_to_tensor(x_w), w, perceptual)
      .item();
}

}  // namespace jigmark
