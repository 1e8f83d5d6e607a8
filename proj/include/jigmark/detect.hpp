#pragma once

#include <string>
#include <vector>

#include "jigmark/jigsaw.hpp"
#include "jigmark/nets.hpp"

namespace jigmark {

/// Scores and threshold metrics for one (key, perturbation) condition.
struct DetectionReport {
  std::vector<double> pos_scores;
  std::vector<double> neg_scores;
  double auc = 0.0;
  double tpr_at_1pct_fpr = 0.0;
  double threshold = 0.0;
  std::string key_id;
  std::string perturbation = "clean";

  std::string to_json() const;
};

/// Deployment-path embedding: shuffle with the key, run the encoder,
/// unshuffle, blend the seam band, clamp to [0,1].
Image embed(const Image& img, const JigsawKey& key, const Encoder& encoder,
            int blend_width = 3);

/// Watermark likelihood of `img` under the claimed key: decoder applied to
/// the key-shuffled image. A wrong key scores low by training, not by
/// construction.
double detect(const Image& img, const JigsawKey& key, const Decoder& decoder);
std::vector<double> detect_batch(const std::vector<Image>& imgs,
                                 const JigsawKey& key, const Decoder& decoder);

/// Probability a random positive outranks a random negative; ties 0.5.
double roc_auc(const std::vector<double>& pos, const std::vector<double>& neg);

/// Threshold = smallest score with empirical FPR <= fpr (no interpolation);
/// returns {tpr at that threshold, threshold}.
std::pair<double, double> tpr_at_fpr(const std::vector<double>& pos,
                                     const std::vector<double>& neg,
                                     double fpr = 0.01);

DetectionReport make_report(std::vector<double> pos, std::vector<double> neg,
                            const std::string& key_id,
                            const std::string& perturbation);

/// Embed with `key`, detect with keys perturbed by n = 1..max_pairs swapped
/// block pairs (n = 0 matched-key control optional). Negatives are the clean
/// images under the same detection key.
std::vector<DetectionReport> mismatch_study(const std::vector<Image>& images,
                                            const JigsawKey& key,
                                            const Encoder& encoder,
                                            const Decoder& decoder,
                                            int max_pairs, uint64_t seed,
                                            bool include_control = false,
                                            int blend_width = 3);

}  // namespace jigmark
