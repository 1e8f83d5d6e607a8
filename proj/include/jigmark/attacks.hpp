#pragma once

#include <string>
#include <vector>

#include "jigmark/detect.hpp"
#include "jigmark/hav.hpp"
#include "jigmark/oracle.hpp"

namespace jigmark {

struct AttackConfig {
  double linf_budget = 8.0 / 255.0;
  int steps = 40;
  double step_size = 0.0;  // 0 -> budget / 10

  double effective_step() const {
    return step_size > 0.0 ? step_size : linf_budget / 10.0;
  }
  void validate() const {
    if (linf_budget < 0.0) throw std::invalid_argument("attack: budget < 0");
    if (steps < 1) throw std::invalid_argument("attack: steps < 1");
  }
};

/// White-box removal: sign-gradient descent on the decoder score through the
/// key's decode transform; each step projects onto the l-inf ball around the
/// input and clamps to [0,1].
Image pgd_attack(const Image& x_w, const JigsawKey& key, const Decoder& decoder,
                 const AttackConfig& cfg);
std::vector<Image> pgd_attack_batch(const std::vector<Image>& x_w,
                                    const JigsawKey& key,
                                    const Decoder& decoder,
                                    const AttackConfig& cfg);

/// Compact residual classifier standing in for the decoder under the
/// black-box threat model.
class SurrogateModel {
public:
  explicit SurrogateModel(const HavModelConfig& cfg, uint64_t seed = 97);

  Tensor forward(const Tensor& imgs) const;  // [N,1,1,1] in [0,1]
  double score(const Image& img) const;

  std::vector<Param>& params() { return params_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }
  const HavModelConfig& config() const { return cfg_; }

private:
  HavModelConfig cfg_;
  std::vector<Param> params_;
  struct Stage {
    Tensor down_w, down_b, gn_g, gn_b;
    Tensor c1_w, c1_b, gn1_g, gn1_b;
    Tensor c2_w, c2_b, gn2_g, gn2_b;
  };
  Tensor stem_w_, stem_b_, stem_gn_g_, stem_gn_b_;
  std::vector<Stage> stages_;
  Tensor fc_w_, fc_b_;
  bool trained_ = false;
};

struct SurrogateTrainConfig {
  int steps = 600;
  int batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  uint64_t seed = 3;
};

/// Binary cross-entropy fit on watermarked-vs-clean samples.
void train_surrogate(SurrogateModel& model,
                     const std::vector<Image>& watermarked,
                     const std::vector<Image>& clean,
                     const SurrogateTrainConfig& cfg,
                     std::ostream* progress = nullptr);

/// PGD against the surrogate (no decoder gradients involved).
Image surrogate_attack(const Image& x_w, const SurrogateModel& surrogate,
                       const AttackConfig& cfg);
std::vector<Image> surrogate_attack_batch(const std::vector<Image>& x_w,
                                          const SurrogateModel& surrogate,
                                          const AttackConfig& cfg);

/// Regeneration through the oracle; unconstrained budget, quality judged by
/// the variation score.
Image regeneration_attack(const Image& x_w, OracleClient& oracle,
                          const std::string& instruction = "regenerate");

/// Fraction of attacked watermarked images scoring below the threshold.
double asr(const std::vector<double>& scores_after, double threshold);

struct AttackReport {
  std::string attack;
  double budget = 0.0;
  int steps = 0;
  double asr = 0.0;
  double mean_hav = 0.0;
  std::string to_json() const;
};

}  // namespace jigmark
