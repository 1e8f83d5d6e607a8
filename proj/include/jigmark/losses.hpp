#pragma once

#include <memory>

#include "jigmark/nets.hpp"
#include "jigmark/tensor.hpp"

namespace jigmark {

/// Coefficients of the two training losses. lambda_margin separates positive
/// from negative watermark scores, tau sharpens the boundary; alpha and beta
/// weight the perceptual and smooth-L1 terms of the visual loss.
struct LossWeights {
  double lambda_margin = 0.5;
  double tau = 0.1;
  double alpha = 1.0;
  double beta = 1.0;

  void validate() const {
    if (tau <= 0.0) throw std::invalid_argument("LossWeights: tau must be > 0");
    if (alpha < 0.0 || beta < 0.0)
      throw std::invalid_argument("LossWeights: alpha, beta must be >= 0");
  }
};

/// Pluggable perceptual distance with frozen weights.
class PerceptualMetric {
public:
  virtual ~PerceptualMetric() = default;
  /// >= 0, zero when a == b; differentiable in both inputs.
  virtual Tensor distance(const Tensor& a, const Tensor& b) const = 0;
  double value(const Image& a, const Image& b) const;
};

/// Small frozen conv stack; features are channel-unit-normalized per
/// position and compared by mean squared difference across three depths.
/// Weights are fixed at construction and never trained.
class FrozenFeatureDistance : public PerceptualMetric {
public:
  explicit FrozenFeatureDistance(uint64_t seed = 101);
  Tensor distance(const Tensor& a, const Tensor& b) const override;

private:
  std::vector<Tensor> ws_;
  std::vector<Tensor> bs_;
  std::vector<Tensor> features(const Tensor& x) const;
};

/// Temperature-scaled binomial deviance over watermark scores:
/// mean over positives of log(1+e^{(lambda-k)/tau}) plus
/// mean over negatives of log(1+e^{(k-lambda)/tau}).
/// Scores enter as [N,1,1,1] tensors so gradients flow to their producers.
Tensor watermark_loss(const Tensor& k_pos, const Tensor& k_neg,
                      const LossWeights& w);
double watermark_loss_value(const std::vector<double>& k_pos,
                            const std::vector<double>& k_neg,
                            const LossWeights& w);

/// alpha * perceptual(x, x_w) + beta * smooth_l1(x, x_w)
Tensor visual_loss(const Tensor& x, const Tensor& x_w, const LossWeights& w,
                   const PerceptualMetric& perceptual);
double visual_loss_value(const Image& x, const Image& x_w,
                         const LossWeights& w,
                         const PerceptualMetric& perceptual);

}  // namespace jigmark
