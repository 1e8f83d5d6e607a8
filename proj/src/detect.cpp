#include "jigmark/detect.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace jigmark {

std::string DetectionReport::to_json() const {
  nlohmann::ordered_json j;
  j["key_id"] = key_id;
  j["perturbation"] = perturbation;
  j["n_pos"] = pos_scores.size();
  j["n_neg"] = neg_scores.size();
  j["auc"] = auc;
  j["tpr_at_1pct_fpr"] = tpr_at_1pct_fpr;
  j["threshold"] = threshold;
  return j.dump();
}

Image embed(const Image& img, const JigsawKey& key, const Encoder& encoder,
            int blend_width) {
  ad::NoGradGuard ng;
  Image shuffled = apply_shuffle(img, key);
  Tensor out = encoder.forward(image_to_tensor(shuffled));
  Image x_w = invert_shuffle(tensor_to_image(out), key);
  Image blended = blend_edges(img, x_w, key, blend_width);
  blended.clamp01();
  return blended;
}

double detect(const Image& img, const JigsawKey& key, const Decoder& decoder) {
  return decoder.score(apply_shuffle(img, key));
}

std::vector<double> detect_batch(const std::vector<Image>& imgs,
                                 const JigsawKey& key, const Decoder& decoder) {
  if (imgs.empty()) return {};
  ad::NoGradGuard ng;
  std::vector<double> scores;
  scores.reserve(imgs.size());
  // bounded batches keep activation memory flat
  const size_t kChunk = 32;
  for (size_t i = 0; i < imgs.size(); i += kChunk) {
    std::vector<Image> chunk;
    for (size_t j = i; j < std::min(imgs.size(), i + kChunk); ++j)
      chunk.push_back(apply_shuffle(imgs[j], key));
    Tensor out = decoder.forward(images_to_tensor(chunk));
    for (double v : out.values()) scores.push_back(v);
  }
  return scores;
}

double roc_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("roc_auc: empty score list");
  // midrank formulation of the Mann-Whitney statistic
  struct Entry {
    double score;
    bool is_pos;
  };
  std::vector<Entry> all;
  all.reserve(pos.size() + neg.size());
  for (double v : pos) all.push_back({v, true});
  for (double v : neg) all.push_back({v, false});
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    // ranks i+1 .. j (1-based); midrank = (i+1+j)/2
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k)
      if (all[k].is_pos) rank_sum_pos += midrank;
    i = j;
  }
  const double np = static_cast<double>(pos.size());
  const double nn = static_cast<double>(neg.size());
  double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  return u / (np * nn);
}

std::pair<double, double> tpr_at_fpr(const std::vector<double>& pos,
                                     const std::vector<double>& neg,
                                     double fpr) {
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("tpr_at_fpr: empty score list");
  if (fpr < 0.0 || fpr > 1.0)
    throw std::invalid_argument("tpr_at_fpr: fpr out of [0,1]");

  // candidate thresholds are the observed scores; pick the smallest one
  // whose empirical FPR stays within budget
  std::vector<double> candidates;
  candidates.reserve(pos.size() + neg.size());
  candidates.insert(candidates.end(), pos.begin(), pos.end());
  candidates.insert(candidates.end(), neg.begin(), neg.end());
  std::sort(candidates.begin(), candidates.end());

  std::vector<double> neg_sorted = neg;
  std::sort(neg_sorted.begin(), neg_sorted.end());
  auto count_ge = [](const std::vector<double>& sorted, double t) {
    return static_cast<double>(sorted.end() -
                               std::lower_bound(sorted.begin(), sorted.end(), t));
  };

  const double budget = fpr * static_cast<double>(neg.size());
  double threshold = std::numeric_limits<double>::quiet_NaN();
  bool found = false;
  for (double t : candidates) {
    if (count_ge(neg_sorted, t) <= budget) {
      threshold = t;
      found = true;
      break;
    }
  }
  if (!found) {
    // even the largest observed score flags too many negatives
    threshold = std::nextafter(neg_sorted.back(),
                               std::numeric_limits<double>::infinity());
  }
  std::vector<double> pos_sorted = pos;
  std::sort(pos_sorted.begin(), pos_sorted.end());
  double tpr = count_ge(pos_sorted, threshold) / static_cast<double>(pos.size());
  return {tpr, threshold};
}

DetectionReport make_report(std::vector<double> pos, std::vector<double> neg,
                            const std::string& key_id,
                            const std::string& perturbation) {
  DetectionReport r;
  r.auc = roc_auc(pos, neg);
  auto [tpr, thr] = tpr_at_fpr(pos, neg, 0.01);
  r.tpr_at_1pct_fpr = tpr;
  r.threshold = thr;
  r.pos_scores = std::move(pos);
  r.neg_scores = std::move(neg);
  r.key_id = key_id;
  r.perturbation = perturbation;
  return r;
}

std::vector<DetectionReport> mismatch_study(const std::vector<Image>& images,
                                            const JigsawKey& key,
                                            const Encoder& encoder,
                                            const Decoder& decoder,
                                            int max_pairs, uint64_t seed,
                                            bool include_control,
                                            int blend_width) {
  if (max_pairs < 0 || max_pairs > key.blocks() / 2)
    throw std::invalid_argument("mismatch_study: max_pairs out of range");
  std::vector<Image> watermarked;
  watermarked.reserve(images.size());
  for (const auto& img : images)
    watermarked.push_back(embed(img, key, encoder, blend_width));

  std::vector<DetectionReport> reports;
  for (int n = include_control ? 0 : 1; n <= max_pairs; ++n) {
    JigsawKey detect_key =
        (n == 0) ? key : perturb_key(key, n, derive_seed(seed, static_cast<uint64_t>(n)));
    std::vector<double> pos = detect_batch(watermarked, detect_key, decoder);
    std::vector<double> neg = detect_batch(images, detect_key, decoder);
    DetectionReport r = make_report(std::move(pos), std::move(neg), key.id(),
                                    "mismatch_pairs_" + std::to_string(n));
    reports.push_back(std::move(r));
  }
  return reports;
}

}  // namespace jigmark
