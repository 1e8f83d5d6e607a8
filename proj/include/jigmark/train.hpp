#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "jigmark/jigsaw.hpp"
#include "jigmark/losses.hpp"
#include "jigmark/nets.hpp"
#include "jigmark/oracle.hpp"
#include "jigmark/perturb.hpp"

namespace jigmark {

struct TrainConfig {
  int epochs = 100;
  int warmup_epochs = 10;
  double enc_lr = 1e-4, enc_wd = 0.02;
  double dec_lr = 2e-4, dec_wd = 0.05;
  double beta1 = 0.9, beta2 = 0.95;
  /// originals per optimizer step of the encoder
  int encoder_batch = 256;
  /// the decoder accumulates decoder_batch/encoder_batch sub-batches per
  /// update, so it sees proportionally more samples per step
  int decoder_batch = 768;
  double clip_percentile = 10.0;
  int perturbed_instances = 3;
  int image_size = 256;
  int grid_rows = 4, grid_cols = 4;
  int blend_width = 3;
  /// probability a wrong key is a near-miss (few swapped pairs, biased
  /// toward one) of the true key rather than an independent random key
  double near_miss_prob = 0.5;
  /// curriculum kind pool: "full" or "order_preserving"
  std::string curriculum_profile = "full";
  uint64_t seed = 0;
  LossWeights loss;
  EncoderConfig encoder;
  DecoderConfig decoder;

  int decoder_accum() const {
    return std::max(1, decoder_batch / std::max(1, encoder_batch));
  }
  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  static TrainConfig desk64();
};

/// Source of perturbed (x, x_w) pairs for training. Implementations must
/// keep each pair aligned: both images go through the same transformation
/// with the same draws.
class Perturber {
public:
  virtual ~Perturber() = default;
  virtual std::vector<std::pair<Image, Image>> perturb_pairs(
      const Image& x, const Image& x_w, int instance_count, int epoch,
      uint64_t seed) = 0;
};

/// Analytic curriculum chains; a configured oracle joins the sampling pool.
class ChainPerturber : public Perturber {
public:
  explicit ChainPerturber(CurriculumSchedule curriculum,
                          OracleClient* oracle = nullptr,
                          std::vector<std::string> instructions = {});
  std::vector<std::pair<Image, Image>> perturb_pairs(const Image& x,
                                                     const Image& x_w,
                                                     int instance_count,
                                                     int epoch,
                                                     uint64_t seed) override;

private:
  CurriculumSchedule curriculum_;
  OracleClient* oracle_;
  std::vector<std::string> instructions_;
};

/// Pass-through pairs; degeneracy checks in tests.
class IdentityPerturber : public Perturber {
public:
  std::vector<std::pair<Image, Image>> perturb_pairs(const Image& x,
                                                     const Image& x_w,
                                                     int instance_count, int,
                                                     uint64_t) override {
    return std::vector<std::pair<Image, Image>>(
        static_cast<size_t>(instance_count), {x, x_w});
  }
};

/// Every perturbed instance comes from the oracle alone (the fine-tuning
/// configuration for adapting to a new black-box editor).
class OracleOnlyPerturber : public Perturber {
public:
  OracleOnlyPerturber(OracleClient& client,
                      std::vector<std::string> instructions);
  std::vector<std::pair<Image, Image>> perturb_pairs(const Image& x,
                                                     const Image& x_w,
                                                     int instance_count, int,
                                                     uint64_t seed) override;

private:
  OracleClient& client_;
  std::vector<std::string> instructions_;
};

/// One original's contribution to a contrastive step. Positives decode
/// under the true key; negatives are the clean images and the wrong-key
/// shuffles of the watermarked ones. Only decoder_inputs[0] (the
/// unperturbed, correctly shuffled watermarked image) is connected to the
/// encoder graph; every perturbed or wrong-shuffled branch enters as a
/// constant.
struct ContrastiveBatch {
  Tensor x_w;                         // [1,3,H,W], graph-connected
  Image x_img;                        // original
  Image x_w_img;                      // detached deployment-domain snapshot
  std::vector<Tensor> decoder_inputs; // decode-oriented samples
  std::vector<bool> is_positive;      // parallel to decoder_inputs
  JigsawKey key;
  JigsawKey wrong_key;

  int positives() const;
  int negatives() const;
};

ContrastiveBatch build_contrastive_batch(const Image& x, const JigsawKey& key,
                                         const JigsawKey& wrong_key,
                                         const Encoder& encoder,
                                         Perturber& perturber,
                                         int perturbed_instances, int epoch,
                                         int blend_width, uint64_t seed);

/// Batched variant: one encoder pass covers every original, each item's
/// x_w staying graph-connected through a batch slice. Semantically equal to
/// calling build_contrastive_batch per item.
std::vector<ContrastiveBatch> build_contrastive_batches(
    const std::vector<Image>& xs, const std::vector<JigsawKey>& keys,
    const std::vector<JigsawKey>& wrong_keys, const Encoder& encoder,
    Perturber& perturber, int perturbed_instances, int epoch, int blend_width,
    const std::vector<uint64_t>& seeds);

/// 10th-percentile (by default) of the gradient-norm history with linear
/// interpolation; the current step's norm is clipped to this value.
/// Empty history disables clipping.
double autoclip_threshold(const std::vector<double>& grad_norm_history,
                          double percentile = 10.0);

/// Decoupled-weight-decay Adam.
class AdamW {
public:
  AdamW(double wd, double beta1, double beta2, double eps = 1e-8);
  void step(std::vector<Param>& params, double lr);
  void zero_grad(std::vector<Param>& params);

  void save(Archive& ar, const std::string& prefix,
            const std::vector<Param>& params) const;
  void load(const Archive& ar, const std::string& prefix,
            const std::vector<Param>& params);
  int64_t steps_taken() const { return t_; }

private:
  double wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
  void ensure_state(const std::vector<Param>& params);
};

/// Cosine decay with linear warmup, in fractional epochs.
double lr_schedule(const TrainConfig& cfg, double epoch_f, double base_lr);

double grad_norm(const std::vector<Param>& params);
void scale_grads(std::vector<Param>& params, double scale);

struct StepStats {
  double loss_w = 0.0, loss_v = 0.0, total = 0.0;
  double clip_enc = 0.0, clip_dec = 0.0;
  double lr_enc = 0.0, lr_dec = 0.0;
  bool skipped = false;
  bool decoder_stepped = false;
};

/// Persistent optimizer/clip state across steps.
struct TrainState {
  AdamW opt_enc, opt_dec;
  std::vector<double> clip_history_enc, clip_history_dec;
  int decoder_pending = 0;  // sub-batches accumulated since last decoder step

  explicit TrainState(const TrainConfig& cfg)
      : opt_enc(cfg.enc_wd, cfg.beta1, cfg.beta2),
        opt_dec(cfg.dec_wd, cfg.beta1, cfg.beta2) {}
};

/// One optimization step over a group of contrastive batches.
StepStats train_step(std::vector<ContrastiveBatch>& items, Encoder& encoder,
                     Decoder& decoder, const LossWeights& weights,
                     const TrainConfig& cfg, TrainState& state,
                     const PerceptualMetric& perceptual, double epoch_f);

/// Full training driver: owns the nets, optimizers and clip histories,
/// persists a checkpoint per epoch and a line-delimited JSON loss log.
class Trainer {
public:
  explicit Trainer(const TrainConfig& cfg);

  /// Resume training state (or start a fine-tune lineage) from a checkpoint.
  static Trainer load(const std::string& checkpoint_path);

  void fit(const std::vector<Image>& dataset, Perturber& perturber,
           const std::string& out_dir, std::ostream* progress = nullptr);

  /// Continue for a fixed number of optimizer steps with a (new) perturbation
  /// source; constant base learning rate, curriculum frozen at its stored
  /// position. Records this checkpoint as the parent.
  void finetune(const std::vector<Image>& dataset, Perturber& perturber,
                int steps, const std::string& out_dir,
                std::ostream* progress = nullptr);

  void save_checkpoint(const std::string& path) const;

  Encoder& encoder() { return encoder_; }
  Decoder& decoder() { return decoder_; }
  const Encoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }
  const TrainConfig& config() const { return cfg_; }
  int epochs_done() const { return epochs_done_; }
  const std::string& run_id() const { return run_id_; }
  const std::string& parent_id() const { return parent_id_; }
  double curriculum_position() const { return curriculum_t_; }

private:
  TrainConfig cfg_;
  Encoder encoder_;
  Decoder decoder_;
  TrainState state_;
  FrozenFeatureDistance perceptual_;
  int epochs_done_ = 0;
  int64_t global_step_ = 0;
  double curriculum_t_ = 0.0;
  std::string run_id_;
  std::string parent_id_;

  void run_epoch(const std::vector<Image>& dataset, Perturber& perturber,
                 int epoch, std::ostream& log, std::ostream* progress);
};

}  // namespace jigmark
