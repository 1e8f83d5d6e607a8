#include "jigmark/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace jigmark {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1 || warmup_epochs < 0 || warmup_epochs > epochs)
    throw ConfigError("train: need 0 <= warmup_epochs <= epochs, epochs >= 1");
  if (enc_lr <= 0 || dec_lr <= 0 || encoder_batch < 1 || decoder_batch < 1)
    throw ConfigError("train: rates and batch sizes must be positive");
  if (perturbed_instances < 1)
    throw ConfigError("train: perturbed_instances must be >= 1");
  if (image_size % (grid_rows * 2) != 0 || image_size % (grid_cols * 2) != 0)
    throw ConfigError("train: image_size must divide by the grid");
  if (near_miss_prob < 0.0 || near_miss_prob > 1.0)
    throw ConfigError("train: near_miss_prob out of [0,1]");
  if (curriculum_profile != "full" && curriculum_profile != "order_preserving" &&
      curriculum_profile != "desk64")
    throw ConfigError("train: unknown curriculum_profile " + curriculum_profile);
  loss.validate();
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["epochs"] = epochs;
  j["warmup_epochs"] = warmup_epochs;
  j["enc_lr"] = enc_lr;
  j["enc_wd"] = enc_wd;
  j["dec_lr"] = dec_lr;
  j["dec_wd"] = dec_wd;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["encoder_batch"] = encoder_batch;
  j["decoder_batch"] = decoder_batch;
  j["clip_percentile"] = clip_percentile;
  j["perturbed_instances"] = perturbed_instances;
  j["image_size"] = image_size;
  j["grid_rows"] = grid_rows;
  j["grid_cols"] = grid_cols;
  j["blend_width"] = blend_width;
  j["near_miss_prob"] = near_miss_prob;
  j["curriculum_profile"] = curriculum_profile;
  j["seed"] = seed;
  j["loss"] = {{"lambda", loss.lambda_margin},
               {"tau", loss.tau},
               {"alpha", loss.alpha},
               {"beta", loss.beta}};
  j["encoder"] = {{"unet_depth", encoder.unet_depth},
                  {"base_channels", encoder.base_channels},
                  {"downsample_factor", encoder.downsample_factor},
                  {"block_expand", encoder.block_expand},
                  {"max_channel_mult", encoder.max_channel_mult}};
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (const auto& st : decoder.stages) stages.push_back({st[0], st[1], st[2]});
  j["decoder"] = {{"stem_channels", decoder.stem_channels},
                  {"stages", stages},
                  {"head_hidden", decoder.head_hidden},
                  {"gn_groups", decoder.gn_groups},
                  {"input_size", decoder.input_size}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("train config: bad JSON: ") + e.what());
  }
  TrainConfig c = TrainConfig::desk64();
  auto opt = [&j](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  opt("epochs", c.epochs);
  opt("warmup_epochs", c.warmup_epochs);
  opt("enc_lr", c.enc_lr);
  opt("enc_wd", c.enc_wd);
  opt("dec_lr", c.dec_lr);
  opt("dec_wd", c.dec_wd);
  opt("beta1", c.beta1);
  opt("beta2", c.beta2);
  opt("encoder_batch", c.encoder_batch);
  opt("decoder_batch", c.decoder_batch);
  opt("clip_percentile", c.clip_percentile);
  opt("perturbed_instances", c.perturbed_instances);
  opt("image_size", c.image_size);
  opt("grid_rows", c.grid_rows);
  opt("grid_cols", c.grid_cols);
  opt("blend_width", c.blend_width);
  opt("near_miss_prob", c.near_miss_prob);
  opt("curriculum_profile", c.curriculum_profile);
  opt("seed", c.seed);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    if (l.contains("lambda")) c.loss.lambda_margin = l.at("lambda").get<double>();
    if (l.contains("tau")) c.loss.tau = l.at("tau").get<double>();
    if (l.contains("alpha")) c.loss.alpha = l.at("alpha").get<double>();
    if (l.contains("beta")) c.loss.beta = l.at("beta").get<double>();
  }
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    if (e.contains("unet_depth")) c.encoder.unet_depth = e.at("unet_depth");
    if (e.contains("base_channels"))
      c.encoder.base_channels = e.at("base_channels");
    if (e.contains("downsample_factor"))
      c.encoder.downsample_factor = e.at("downsample_factor");
    if (e.contains("block_expand")) c.encoder.block_expand = e.at("block_expand");
    if (e.contains("max_channel_mult"))
      c.encoder.max_channel_mult = e.at("max_channel_mult");
  }
  if (j.contains("decoder")) {
    const auto& d = j.at("decoder");
    if (d.contains("stem_channels")) c.decoder.stem_channels = d.at("stem_channels");
    if (d.contains("head_hidden")) c.decoder.head_hidden = d.at("head_hidden");
    if (d.contains("gn_groups")) c.decoder.gn_groups = d.at("gn_groups");
    if (d.contains("input_size")) c.decoder.input_size = d.at("input_size");
    if (d.contains("stages")) {
      c.decoder.stages.clear();
      for (const auto& st : d.at("stages"))
        c.decoder.stages.push_back(
            {st.at(0).get<int>(), st.at(1).get<int>(), st.at(2).get<int>()});
    }
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::desk64() {
  TrainConfig c;
  c.epochs = 10;
  c.warmup_epochs = 1;
  c.enc_lr = 4e-4;
  c.enc_wd = 0.02;
  c.dec_lr = 8e-4;
  c.dec_wd = 0.05;
  c.encoder_batch = 8;
  c.decoder_batch = 8;
  c.perturbed_instances = 3;
  c.image_size = 64;
  c.grid_rows = 4;
  c.grid_cols = 4;
  // one-pixel seam band: at 16px blocks the full 3px band would blank a
  // third of every block face and starve the decoder of seam evidence
  c.blend_width = 1;
  c.near_miss_prob = 0.7;
  c.curriculum_profile = "desk64";
  c.loss.lambda_margin = 0.5;
  c.loss.tau = 0.1;
  c.loss.alpha = 1.0;
  c.loss.beta = 6.0;
  c.encoder = EncoderConfig::desk64();
  c.decoder = DecoderConfig::desk64();
  return c;
}

// ------------------------------ perturbers ------------------------------

ChainPerturber::ChainPerturber(CurriculumSchedule curriculum,
                               OracleClient* oracle,
                               std::vector<std::string> instructions)
    : curriculum_(std::move(curriculum)),
      oracle_(oracle),
      instructions_(std::move(instructions)) {
  if (curriculum_.include_oracle && oracle_ == nullptr)
    throw ConfigError("curriculum includes oracle but no client configured");
  if (curriculum_.include_oracle && instructions_.empty())
    throw ConfigError("oracle perturbation requires an instruction list");
}

std::vector<std::pair<Image, Image>> ChainPerturber::perturb_pairs(
    const Image& x, const Image& x_w, int instance_count, int epoch,
    uint64_t seed) {
  std::vector<std::pair<Image, Image>> out;
  out.reserve(static_cast<size_t>(instance_count));
  for (int inst = 0; inst < instance_count; ++inst) {
    uint64_t inst_seed = derive_seed(seed, static_cast<uint64_t>(inst) + 1);
    std::vector<PerturbationSpec> chain =
        sample_chain(curriculum_, epoch, inst_seed);
    Image a = x, b = x_w;
    for (size_t i = 0; i < chain.size(); ++i) {
      uint64_t step_seed = derive_seed(inst_seed, i + 1);
      if (chain[i].kind == PerturbKind::kOracle) {
        Rng rng = Rng::seeded(step_seed);
        const std::string& instruction =
            instructions_[rng.below(instructions_.size())];
        std::vector<Image> res = oracle_->transform(instruction, {a, b});
        a = std::move(res[0]);
        b = std::move(res[1]);
      } else {
        // same spec and same seed on both halves keeps the pair aligned
        a = apply_perturbation(chain[i], a, step_seed);
        b = apply_perturbation(chain[i], b, step_seed);
      }
    }
    out.emplace_back(std::move(a), std::move(b));
  }
  return out;
}

OracleOnlyPerturber::OracleOnlyPerturber(OracleClient& client,
                                         std::vector<std::string> instructions)
    : client_(client), instructions_(std::move(instructions)) {
  if (instructions_.empty())
    throw ConfigError("oracle perturbation requires an instruction list");
}

std::vector<std::pair<Image, Image>> OracleOnlyPerturber::perturb_pairs(
    const Image& x, const Image& x_w, int instance_count, int /*epoch*/,
    uint64_t seed) {
  std::vector<std::pair<Image, Image>> pairs = {{x, x_w}};
  auto result = oracle_perturb(pairs, instructions_, client_, instance_count,
                               seed);
  return result;
}

// ------------------------------ batch build ------------------------------

int ContrastiveBatch::positives() const {
  int n = 0;
  for (bool p : is_positive) n += p ? 1 : 0;
  return n;
}

int ContrastiveBatch::negatives() const {
  return static_cast<int>(is_positive.size()) - positives();
}

namespace {

/// Fill everything downstream of x_w for one original.
void assemble_item(ContrastiveBatch& batch, const Image& x, Tensor x_w,
                   const JigsawKey& key, const JigsawKey& wrong_key,
                   Perturber& perturber, int perturbed_instances, int epoch,
                   uint64_t seed) {
  batch.key = key;
  batch.wrong_key = wrong_key;
  batch.x_img = x;
  batch.x_w = x_w;
  batch.x_w_img = tensor_to_image(batch.x_w.detach());

  std::vector<std::pair<Image, Image>> perturbed = perturber.perturb_pairs(
      x, batch.x_w_img, perturbed_instances, epoch, derive_seed(seed, 0xabcd));

  auto push_const = [&batch](const Image& img, const JigsawKey& k, bool pos) {
    batch.decoder_inputs.push_back(image_to_tensor(apply_shuffle(img, k)));
    batch.is_positive.push_back(pos);
  };

  // positives: the graph-connected S(x_w), then the perturbed instances
  batch.decoder_inputs.push_back(ad::shuffle_batch(batch.x_w, {key}, false));
  batch.is_positive.push_back(true);
  for (const auto& pr : perturbed) push_const(pr.second, key, true);

  // negatives: clean originals, their perturbed forms, and the watermarked
  // images reassembled under the wrong key
  push_const(x, key, false);
  for (const auto& pr : perturbed) push_const(pr.first, key, false);
  push_const(batch.x_w_img, wrong_key, false);
  for (const auto& pr : perturbed) push_const(pr.second, wrong_key, false);
}

}  // namespace

ContrastiveBatch build_contrastive_batch(const Image& x, const JigsawKey& key,
                                         const JigsawKey& wrong_key,
                                         const Encoder& encoder,
                                         Perturber& perturber,
                                         int perturbed_instances, int epoch,
                                         int blend_width, uint64_t seed) {
  if (key == wrong_key)
    throw std::invalid_argument("contrastive batch: wrong_key equals key");
  key.validate();
  wrong_key.validate();

  // x_w = blend(x, S^-1(E(S(x)))), clamped; stays on the graph
  Tensor xs = ad::shuffle_batch(image_to_tensor(x), {key}, false);
  Tensor enc_out = encoder.forward(xs);
  Tensor unshuffled = ad::shuffle_batch(enc_out, {key}, true);
  Tensor blended = blend_edges_t(unshuffled, {x}, key, blend_width);
  Tensor x_w = ad::clamp(blended, 0.0, 1.0);

  ContrastiveBatch batch;
  assemble_item(batch, x, x_w, key, wrong_key, perturber, perturbed_instances,
                epoch, seed);
  return batch;
}

std::vector<ContrastiveBatch> build_contrastive_batches(
    const std::vector<Image>& xs, const std::vector<JigsawKey>& keys,
    const std::vector<JigsawKey>& wrong_keys, const Encoder& encoder,
    Perturber& perturber, int perturbed_instances, int epoch, int blend_width,
    const std::vector<uint64_t>& seeds) {
  if (xs.empty() || xs.size() != keys.size() ||
      xs.size() != wrong_keys.size() || xs.size() != seeds.size())
    throw std::invalid_argument("contrastive batches: length mismatch");
  for (size_t i = 0; i < xs.size(); ++i) {
    if (keys[i] == wrong_keys[i])
      throw std::invalid_argument("contrastive batch: wrong_key equals key");
    keys[i].validate();
    wrong_keys[i].validate();
  }

  Tensor shuffled = ad::shuffle_batch(images_to_tensor(xs), keys, false);
  Tensor enc_out = encoder.forward(shuffled);
  Tensor unshuffled = ad::shuffle_batch(enc_out, keys, true);
  // grid geometry (hence the seam mask) is shared across keys
  Tensor blended = blend_edges_t(unshuffled, xs, keys[0], blend_width);
  Tensor x_w_all = ad::clamp(blended, 0.0, 1.0);

  std::vector<ContrastiveBatch> items(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    Tensor x_w_i = ad::gather_batch(x_w_all, {static_cast<int>(i)});
    assemble_item(items[i], xs[i], x_w_i, keys[i], wrong_keys[i], perturber,
                  perturbed_instances, epoch, seeds[i]);
  }
  return items;
}

// ------------------------------ optimizer ------------------------------

double autoclip_threshold(const std::vector<double>& grad_norm_history,
                          double percentile) {
  if (grad_norm_history.empty())
    return std::numeric_limits<double>::infinity();
  return percentile_interpolated(grad_norm_history, percentile);
}

AdamW::AdamW(double wd, double beta1, double beta2, double eps)
    : wd_(wd), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::ensure_state(const std::vector<Param>& params) {
  if (m_.size() == params.size()) return;
  m_.clear();
  v_.clear();
  for (const auto& p : params) {
    m_.emplace_back(p.value.values().size(), 0.0);
    v_.emplace_back(p.value.values().size(), 0.0);
  }
}

void AdamW::step(std::vector<Param>& params, double lr) {
  ensure_state(params);
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& val = params[i].value.values();
    auto& g = params[i].value.grad_mut();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t k = 0; k < val.size(); ++k) {
      val[k] -= lr * wd_ * val[k];  // decoupled decay
      m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
      double mhat = m[k] / bc1;
      double vhat = v[k] / bc2;
      val[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void AdamW::zero_grad(std::vector<Param>& params) {
  for (auto& p : params) p.value.zero_grad();
}

void AdamW::save(Archive& ar, const std::string& prefix,
                 const std::vector<Param>& params) const {
  ar.put(prefix + "t", {static_cast<double>(t_)});
  for (size_t i = 0; i < m_.size(); ++i) {
    ar.put(prefix + "m." + params[i].name, m_[i]);
    ar.put(prefix + "v." + params[i].name, v_[i]);
  }
}

void AdamW::load(const Archive& ar, const std::string& prefix,
                 const std::vector<Param>& params) {
  ensure_state(params);
  t_ = static_cast<int64_t>(ar.get(prefix + "t")[0]);
  for (size_t i = 0; i < params.size(); ++i) {
    m_[i] = ar.get(prefix + "m." + params[i].name);
    v_[i] = ar.get(prefix + "v." + params[i].name);
  }
}

double lr_schedule(const TrainConfig& cfg, double epoch_f, double base_lr) {
  if (epoch_f < 0) epoch_f = 0;
  if (cfg.warmup_epochs > 0 && epoch_f < cfg.warmup_epochs)
    return base_lr * epoch_f / static_cast<double>(cfg.warmup_epochs);
  double span = static_cast<double>(cfg.epochs - cfg.warmup_epochs);
  if (span <= 0) return base_lr;
  double t = std::min(1.0, (epoch_f - cfg.warmup_epochs) / span);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

double grad_norm(const std::vector<Param>& params) {
  double ss = 0.0;
  for (const auto& p : params) {
    const auto& node = p.value.node();
    if (node->grad.size() != node->val.size()) continue;
    for (double g : node->grad) ss += g * g;
  }
  return std::sqrt(ss);
}

void scale_grads(std::vector<Param>& params, double scale) {
  for (auto& p : params) {
    auto& node = *p.value.node();
    if (node.grad.size() != node.val.size()) continue;
    for (double& g : node.grad) g *= scale;
  }
}

// ------------------------------ step ------------------------------

StepStats train_step(std::vector<ContrastiveBatch>& items, Encoder& encoder,
                     Decoder& decoder, const LossWeights& weights,
                     const TrainConfig& cfg, TrainState& state,
                     const PerceptualMetric& perceptual, double epoch_f) {
  if (items.empty()) throw std::invalid_argument("train_step: empty batch");
  StepStats stats;
  stats.lr_enc = lr_schedule(cfg, epoch_f, cfg.enc_lr);
  stats.lr_dec = lr_schedule(cfg, epoch_f, cfg.dec_lr);

  // one decoder pass over every sample of every item
  std::vector<Tensor> all_inputs;
  std::vector<int> pos_idx, neg_idx;
  int cursor = 0;
  for (const auto& it : items)
    for (size_t k = 0; k < it.decoder_inputs.size(); ++k) {
      all_inputs.push_back(it.decoder_inputs[k]);
      (it.is_positive[k] ? pos_idx : neg_idx).push_back(cursor++);
    }
  Tensor scores = decoder.forward(ad::concat_batch(all_inputs));
  Tensor k_pos = ad::gather_batch(scores, pos_idx);
  Tensor k_neg = ad::gather_batch(scores, neg_idx);
  Tensor loss_w = watermark_loss(k_pos, k_neg, weights);

  Tensor loss_v = Tensor::scalar(0.0);
  for (const auto& it : items)
    loss_v = ad::add(loss_v, visual_loss(image_to_tensor(it.x_img), it.x_w,
                                         weights, perceptual));
  loss_v = ad::affine(loss_v, 1.0 / static_cast<double>(items.size()), 0.0);

  Tensor total = ad::add(loss_w, loss_v);
  stats.loss_w = loss_w.item();
  stats.loss_v = loss_v.item();
  stats.total = total.item();

  if (!std::isfinite(stats.total)) {
    // distorted generations can produce unusable gradients: skip the step
    stats.skipped = true;
    state.opt_enc.zero_grad(encoder.params());
    return stats;
  }

  ad::backward(total);

  // encoder: clip against its norm history, then step every batch
  {
    double norm = grad_norm(encoder.params());
    state.clip_history_enc.push_back(norm);
    double threshold =
        autoclip_threshold(state.clip_history_enc, cfg.clip_percentile);
    stats.clip_enc = threshold;
    if (std::isfinite(threshold) && norm > threshold && norm > 0)
      scale_grads(encoder.params(), threshold / norm);
    state.opt_enc.step(encoder.params(), stats.lr_enc);
    state.opt_enc.zero_grad(encoder.params());
  }

  // decoder: accumulate sub-batches; step once per decoder_accum batches
  state.decoder_pending += 1;
  if (state.decoder_pending >= cfg.decoder_accum()) {
    if (cfg.decoder_accum() > 1)
      scale_grads(decoder.params(), 1.0 / cfg.decoder_accum());
    double norm = grad_norm(decoder.params());
    state.clip_history_dec.push_back(norm);
    double threshold =
        autoclip_threshold(state.clip_history_dec, cfg.clip_percentile);
    stats.clip_dec = threshold;
    if (std::isfinite(threshold) && norm > threshold && norm > 0)
      scale_grads(decoder.params(), threshold / norm);
    state.opt_dec.step(decoder.params(), stats.lr_dec);
    state.opt_dec.zero_grad(decoder.params());
    state.decoder_pending = 0;
    stats.decoder_stepped = true;
  }
  return stats;
}

// ------------------------------ trainer ------------------------------

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg),
      encoder_(cfg.encoder, derive_seed(cfg.seed, 0x0e)),
      decoder_(cfg.decoder, derive_seed(cfg.seed, 0x0d)),
      state_(cfg),
      perceptual_(derive_seed(cfg.seed, 0x1f)) {
  cfg_.validate();
  run_id_ = hex64(derive_seed(cfg.seed, 0x5eed, static_cast<uint64_t>(cfg.epochs)));
}

Trainer Trainer::load(const std::string& checkpoint_path) {
  Archive ar = Archive::load(checkpoint_path);
  nlohmann::json meta = nlohmann::json::parse(ar.meta_json);
  TrainConfig cfg = TrainConfig::from_json(meta.at("train_config").dump());
  Trainer t(cfg);
  unpack_params(ar, "enc.", t.encoder_.params());
  unpack_params(ar, "dec.", t.decoder_.params());
  t.state_.opt_enc.load(ar, "opt_enc.", t.encoder_.params());
  t.state_.opt_dec.load(ar, "opt_dec.", t.decoder_.params());
  t.state_.clip_history_enc = ar.has("clip.enc") ? ar.get("clip.enc")
                                                 : std::vector<double>{};
  t.state_.clip_history_dec = ar.has("clip.dec") ? ar.get("clip.dec")
                                                 : std::vector<double>{};
  t.epochs_done_ = meta.at("epoch").get<int>();
  t.global_step_ = meta.at("step").get<int64_t>();
  t.curriculum_t_ = meta.at("curriculum_t").get<double>();
  t.run_id_ = meta.at("run_id").get<std::string>();
  t.parent_id_ = meta.value("parent_id", std::string());
  return t;
}

void Trainer::save_checkpoint(const std::string& path) const {
  Archive ar;
  nlohmann::json meta;
  meta["format"] = "jigmark-checkpoint/1";
  meta["train_config"] = nlohmann::json::parse(cfg_.to_json());
  meta["epoch"] = epochs_done_;
  meta["step"] = global_step_;
  meta["curriculum_t"] = curriculum_t_;
  meta["run_id"] = run_id_;
  meta["parent_id"] = parent_id_;
  ar.meta_json = meta.dump();
  pack_params(ar, "enc.", encoder_.params());
  pack_params(ar, "dec.", decoder_.params());
  state_.opt_enc.save(ar, "opt_enc.", encoder_.params());
  state_.opt_dec.save(ar, "opt_dec.", decoder_.params());
  ar.put("clip.enc", state_.clip_history_enc);
  ar.put("clip.dec", state_.clip_history_dec);
  ar.save(path);
}

void Trainer::run_epoch(const std::vector<Image>& dataset, Perturber& perturber,
                        int epoch, std::ostream& log, std::ostream* progress) {
  const int blocks = cfg_.grid_rows * cfg_.grid_cols;
  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng order_rng =
      Rng::seeded(derive_seed(cfg_.seed, 0x0bde, static_cast<uint64_t>(epoch)));
  order_rng.shuffle(order);

  const size_t steps_per_epoch =
      (order.size() + cfg_.encoder_batch - 1) / cfg_.encoder_batch;

  for (size_t step = 0; step < steps_per_epoch; ++step) {
    const size_t begin = step * cfg_.encoder_batch;
    const size_t end = std::min(order.size(), begin + cfg_.encoder_batch);
    std::vector<Image> xs;
    std::vector<JigsawKey> keys, wrong_keys;
    std::vector<uint64_t> seeds;
    for (size_t i = begin; i < end; ++i) {
      uint64_t item_seed = derive_seed(cfg_.seed, static_cast<uint64_t>(epoch),
                                       static_cast<uint64_t>(step), i);
      Rng rng = Rng::seeded(item_seed);
      JigsawKey key = new_key(cfg_.grid_rows, cfg_.grid_cols, rng.next_u64());
      JigsawKey wrong_key;
      if (rng.uniform() < cfg_.near_miss_prob) {
        // heavy bias toward single-pair swaps, the hardest negatives
        double r = rng.uniform();
        int max_pairs = std::max(1, blocks / 2);
        int pairs = r < 0.6   ? 1
                    : r < 0.85 ? std::min(2, max_pairs)
                               : 1 + static_cast<int>(rng.below(
                                         static_cast<uint64_t>(max_pairs)));
        wrong_key = perturb_key(key, pairs, rng.next_u64());
      } else {
        wrong_key = new_key_distinct(cfg_.grid_rows, cfg_.grid_cols, rng, key);
      }
      xs.push_back(dataset[order[i]]);
      keys.push_back(std::move(key));
      wrong_keys.push_back(std::move(wrong_key));
      seeds.push_back(derive_seed(item_seed, 0x9e));
    }
    std::vector<ContrastiveBatch> items = build_contrastive_batches(
        xs, keys, wrong_keys, encoder_, perturber, cfg_.perturbed_instances,
        epoch, cfg_.blend_width, seeds);

    double epoch_f = static_cast<double>(epoch) +
                     static_cast<double>(step) / static_cast<double>(steps_per_epoch);
    StepStats st = train_step(items, encoder_, decoder_, cfg_.loss, cfg_,
                              state_, perceptual_, epoch_f);
    ++global_step_;

    nlohmann::ordered_json entry;
    entry["epoch"] = epoch;
    entry["step"] = global_step_;
    entry["L_w"] = st.loss_w;
    entry["L_v"] = st.loss_v;
    entry["clip"] = {st.clip_enc, st.decoder_stepped ? st.clip_dec : 0.0};
    entry["lr"] = {st.lr_enc, st.lr_dec};
    if (st.skipped) entry["skipped"] = true;
    log << entry.dump() << "\n";
  }
  if (progress)
    (*progress) << "epoch " << epoch + 1 << "/" << cfg_.epochs << " done\n";
}

void Trainer::fit(const std::vector<Image>& dataset, Perturber& perturber,
                  const std::string& out_dir, std::ostream* progress) {
  if (dataset.empty()) throw std::invalid_argument("fit: empty dataset");
  for (const auto& img : dataset)
    if (img.height() != cfg_.image_size || img.width() != cfg_.image_size)
      throw std::invalid_argument("fit: dataset images must match image_size");
  fs::create_directories(out_dir);

  std::ofstream log(fs::path(out_dir) / "loss_log.jsonl",
                    epochs_done_ > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("fit: cannot open loss log");

  for (int epoch = epochs_done_; epoch < cfg_.epochs; ++epoch) {
    run_epoch(dataset, perturber, epoch, log, progress);
    epochs_done_ = epoch + 1;
    curriculum_t_ =
        static_cast<double>(epochs_done_) / static_cast<double>(cfg_.epochs);
    log.flush();
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03d.jmck", epochs_done_);
    save_checkpoint((fs::path(out_dir) / name).string());
    save_checkpoint((fs::path(out_dir) / "latest.jmck").string());
  }
}

void Trainer::finetune(const std::vector<Image>& dataset, Perturber& perturber,
                       int steps, const std::string& out_dir,
                       std::ostream* progress) {
  if (dataset.empty()) throw std::invalid_argument("finetune: empty dataset");
  if (steps < 1) throw std::invalid_argument("finetune: steps must be >= 1");
  fs::create_directories(out_dir);
  parent_id_ = run_id_;
  run_id_ = hex64(derive_seed(cfg_.seed, 0xf17e, static_cast<uint64_t>(steps),
                              static_cast<uint64_t>(global_step_)));

  std::ofstream log(fs::path(out_dir) / "loss_log.jsonl", std::ios::trunc);
  const int blocks = cfg_.grid_rows * cfg_.grid_cols;
  // curriculum position frozen where the parent run stopped
  const int epoch = std::min(cfg_.epochs, epochs_done_);

  for (int step = 0; step < steps; ++step) {
    std::vector<Image> xs;
    std::vector<JigsawKey> keys, wrong_keys;
    std::vector<uint64_t> seeds;
    for (int i = 0; i < cfg_.encoder_batch; ++i) {
      uint64_t item_seed = derive_seed(cfg_.seed, 0xf1, static_cast<uint64_t>(step),
                                       static_cast<uint64_t>(i) + static_cast<uint64_t>(global_step_));
      Rng rng = Rng::seeded(item_seed);
      size_t pick = static_cast<size_t>(rng.below(dataset.size()));
      JigsawKey key = new_key(cfg_.grid_rows, cfg_.grid_cols, rng.next_u64());
      JigsawKey wrong_key;
      if (rng.uniform() < cfg_.near_miss_prob) {
        // heavy bias toward single-pair swaps, the hardest negatives
        double r = rng.uniform();
        int max_pairs = std::max(1, blocks / 2);
        int pairs = r < 0.6   ? 1
                    : r < 0.85 ? std::min(2, max_pairs)
                               : 1 + static_cast<int>(rng.below(
                                         static_cast<uint64_t>(max_pairs)));
        wrong_key = perturb_key(key, pairs, rng.next_u64());
      } else {
        wrong_key = new_key_distinct(cfg_.grid_rows, cfg_.grid_cols, rng, key);
      }
      xs.push_back(dataset[pick]);
      keys.push_back(std::move(key));
      wrong_keys.push_back(std::move(wrong_key));
      seeds.push_back(derive_seed(item_seed, 0x9e));
    }
    std::vector<ContrastiveBatch> items = build_contrastive_batches(
        xs, keys, wrong_keys, encoder_, perturber, cfg_.perturbed_instances,
        epoch, cfg_.blend_width, seeds);
    // constant base rate: the parent schedule has already decayed to zero
    StepStats st;
    {
      TrainConfig flat = cfg_;
      flat.warmup_epochs = 0;
      st = train_step(items, encoder_, decoder_, cfg_.loss, flat, state_,
                      perceptual_, 0.0);
    }
    ++global_step_;
    nlohmann::ordered_json entry;
    entry["epoch"] = epoch;
    entry["step"] = global_step_;
    entry["L_w"] = st.loss_w;
    entry["L_v"] = st.loss_v;
    entry["clip"] = {st.clip_enc, st.decoder_stepped ? st.clip_dec : 0.0};
    entry["lr"] = {st.lr_enc, st.lr_dec};
    if (st.skipped) entry["skipped"] = true;
    log << entry.dump() << "\n";
    if (progress && (step + 1) % 10 == 0)
      (*progress) << "finetune step " << step + 1 << "/" << steps << "\n";
  }
  save_checkpoint((fs::path(out_dir) / "latest.jmck").string());
}

}  // namespace jigmark
