#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "jigmark/image.hpp"
#include "jigmark/nets.hpp"

namespace jigmark {

/// One ranked comparison unit: an original image, exactly five variants and
/// per-annotator ranks 0..4 (0 = most similar to the original).
struct RankingGroup {
  std::string original;                 // path (or synthetic id)
  std::vector<std::string> variants;    // exactly 5 paths
  std::vector<std::vector<int>> ranks;  // [annotators][5], each row a permutation

  void validate() const;
};

/// Line-delimited JSON: one group per line
/// {"original": path, "variants": [5 paths], "ranks": [[...], ...]}.
std::vector<RankingGroup> load_ranking_groups(const std::string& path);
void save_ranking_groups(const std::string& path,
                         const std::vector<RankingGroup>& groups);

/// Per-variant targets in [0,1]: mean over annotators of rank/max_rank.
std::vector<double> normalize_ranks(const RankingGroup& group);

/// P(i outranks j) = logistic(s_i - s_j).
double ranknet_prob(double s_i, double s_j);

/// Binary cross-entropy of the pairwise probability, eps-clamped.
double ranknet_loss(double y_ij, double p_ij, double eps = 1e-7);

/// Sum of absolute rank differences between two permutations.
int spearman_footrule(const std::vector<int>& rank_a,
                      const std::vector<int>& rank_b);

/// Ranking induced by scores: rank 0 for the lowest score.
std::vector<int> ranks_from_scores(const std::vector<double>& scores);

struct HavModelConfig {
  int input_size = 64;
  int base_channels = 16;
  int stages = 3;          // stride-2 residual stages after the stem
  int feature_dim = 64;    // backbone output width
  int head_hidden = 32;
  int gn_groups = 4;

  static HavModelConfig desk64();
};

/// Siamese variation scorer: shared residual backbone, feature difference
/// through an MLP, logistic squash to [0,1] (0 = low modification).
/// Pairwise rank training leaves the absolute scale free, so an optional
/// affine calibration on the pre-squash value can be fitted afterwards.
class HavModel {
public:
  explicit HavModel(const HavModelConfig& cfg, uint64_t init_seed = 61);

  /// Batched pre-squash head outputs for (original, variant) rows.
  Tensor forward_raw(const Tensor& originals, const Tensor& variants) const;
  Tensor forward_score(const Tensor& originals, const Tensor& variants) const;

  double score(const Image& original, const Image& variant) const;
  std::vector<double> score_batch(
      const std::vector<std::pair<const Image*, const Image*>>& pairs) const;

  void set_calibration(double scale, double offset);
  std::pair<double, double> calibration() const { return {calib_scale_, calib_offset_}; }

  const HavModelConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  void save(const std::string& path) const;
  static HavModel load(const std::string& path);

private:
  struct ResBlock {
    Tensor c1_w, c1_b, gn1_g, gn1_b;
    Tensor c2_w, c2_b, gn2_g, gn2_b;
  };
  struct DownStage {
    Tensor down_w, down_b, gn_g, gn_b;
    ResBlock block;
  };

  HavModelConfig cfg_;
  std::vector<Param> params_;
  Tensor stem_w_, stem_b_, stem_gn_g_, stem_gn_b_;
  std::vector<DownStage> stages_;
  Tensor proj_w_, proj_b_;  // backbone output -> feature_dim
  Tensor fc1_w_, fc1_b_, fc2_w_, fc2_b_;
  double calib_scale_ = 1.0;
  double calib_offset_ = 0.0;

  Tensor backbone(const Tensor& x) const;
};

struct HavTrainConfig {
  int steps = 2000;
  int pairs_per_step = 16;
  double lr = 1e-3;
  double weight_decay = 0.01;
  uint64_t seed = 7;
  HavModelConfig model;
};

/// Image loader hook: resolves a RankingGroup path to pixels (lets tests and
/// the synthetic pipeline feed in-memory images).
using ImageSource = std::function<Image(const std::string&)>;

/// Pairwise RankNet training: every step samples variant pairs from random
/// groups, labels each pair by mean-rank comparison (ties resampled) and
/// minimizes the ranknet cross-entropy on the score difference.
HavModel train_hav(const std::vector<RankingGroup>& groups,
                   const HavTrainConfig& cfg, const ImageSource& images,
                   std::ostream* progress = nullptr);

/// Fit the affine calibration of the pre-squash score against
/// normalize_ranks targets (least squares in logit space).
void calibrate_hav(HavModel& model, const std::vector<RankingGroup>& groups,
                   const ImageSource& images);

/// Mean footrule between the model ranking and the annotator-mean ranking.
double hav_spearman_eval(const HavModel& model,
                         const std::vector<RankingGroup>& groups,
                         const ImageSource& images,
                         double* ordered_fraction = nullptr,
                         int ordered_tolerance = 2);

/// Keep pairs whose score falls inside [lo, hi] (the evaluation band).
std::vector<size_t> hav_filter(
    const HavModel& model,
    const std::vector<std::pair<const Image*, const Image*>>& pairs,
    double lo = 0.3, double hi = 0.5);

}  // namespace jigmark
