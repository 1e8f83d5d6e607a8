#include "jigmark/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "jigmark/train.hpp"
#include "json.hpp"

namespace jigmark {

using ad::Shape;

namespace {

/// Shared PGD core: minimize score_fn over the l-inf ball around each start.
std::vector<Image> pgd_core(
    const std::vector<Image>& starts, const AttackConfig& cfg,
    const std::function<Tensor(const Tensor&)>& score_fn) {
  cfg.validate();
  if (starts.empty()) return {};
  if (cfg.linf_budget == 0.0) return starts;

  const double eps = cfg.linf_budget;
  const double alpha = cfg.effective_step();
  const std::vector<double> origin = [&] {
    std::vector<double> v;
    for (const auto& im : starts)
      v.insert(v.end(), im.values().begin(), im.values().end());
    return v;
  }();

  Shape shape{static_cast<int>(starts.size()), 3, starts[0].height(),
              starts[0].width()};
  std::vector<double> current = origin;

  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x = Tensor::from_vector(shape, current, /*requires_grad=*/true);
    Tensor score_sum = ad::sum_all(score_fn(x));
    ad::backward(score_sum);
    const auto& g = x.grad();
    for (size_t i = 0; i < current.size(); ++i) {
      double step_v = current[i] - alpha * (g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0));
      step_v = std::min(origin[i] + eps, std::max(origin[i] - eps, step_v));
      current[i] = std::min(1.0, std::max(0.0, step_v));
    }
  }

  std::vector<Image> out;
  const size_t item = starts[0].size();
  for (size_t n = 0; n < starts.size(); ++n) {
    Image im(starts[0].height(), starts[0].width());
    std::copy(current.begin() + static_cast<long>(n * item),
              current.begin() + static_cast<long>((n + 1) * item),
              im.values().begin());
    out.push_back(std::move(im));
  }
  return out;
}

}  // namespace

std::vector<Image> pgd_attack_batch(const std::vector<Image>& x_w,
                                    const JigsawKey& key,
                                    const Decoder& decoder,
                                    const AttackConfig& cfg) {
  std::vector<JigsawKey> keys(x_w.size(), key);
  return pgd_core(x_w, cfg, [&](const Tensor& x) {
    return decoder.forward(ad::shuffle_batch(x, keys, false));
  });
}

Image pgd_attack(const Image& x_w, const JigsawKey& key, const Decoder& decoder,
                 const AttackConfig& cfg) {
  return pgd_attack_batch({x_w}, key, decoder, cfg)[0];
}

// ------------------------------ surrogate ------------------------------

namespace {

Tensor sconv(std::vector<Param>& reg, const std::string& name, int cout,
             int cin, int k, Rng& rng) {
  double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
  Tensor t = Tensor::randn(Shape{cout, cin, k, k}, rng, std, true);
  reg.push_back({name, t});
  return t;
}

Tensor sbias(std::vector<Param>& reg, const std::string& name, int c) {
  Tensor t = Tensor::zeros(Shape{1, c, 1, 1}, true);
  reg.push_back({name, t});
  return t;
}

Tensor sgamma(std::vector<Param>& reg, const std::string& name, int c) {
  Tensor t = Tensor::constant(Shape{1, c, 1, 1}, 1.0);
  t.set_requires_grad(true);
  reg.push_back({name, t});
  return t;
}

}  // namespace

SurrogateModel::SurrogateModel(const HavModelConfig& cfg, uint64_t seed)
    : cfg_(cfg) {
  Rng rng = Rng::seeded(seed);
  int c = cfg_.base_channels;
  stem_w_ = sconv(params_, "stem.w", c, 3, 3, rng);
  stem_b_ = sbias(params_, "stem.b", c);
  stem_gn_g_ = sgamma(params_, "stem.gn.g", c);
  stem_gn_b_ = sbias(params_, "stem.gn.b", c);
  for (int s = 0; s < cfg_.stages; ++s) {
    std::string p = "stage" + std::to_string(s);
    Stage st;
    int cout = c * 2;
    st.down_w = sconv(params_, p + ".down.w", cout, c, 3, rng);
    st.down_b = sbias(params_, p + ".down.b", cout);
    st.gn_g = sgamma(params_, p + ".down.gn.g", cout);
    st.gn_b = sbias(params_, p + ".down.gn.b", cout);
    st.c1_w = sconv(params_, p + ".c1.w", cout, cout, 3, rng);
    st.c1_b = sbias(params_, p + ".c1.b", cout);
    st.gn1_g = sgamma(params_, p + ".gn1.g", cout);
    st.gn1_b = sbias(params_, p + ".gn1.b", cout);
    st.c2_w = sconv(params_, p + ".c2.w", cout, cout, 3, rng);
    st.c2_b = sbias(params_, p + ".c2.b", cout);
    st.gn2_g = sgamma(params_, p + ".gn2.g", cout);
    st.gn2_b = sbias(params_, p + ".gn2.b", cout);
    stages_.push_back(std::move(st));
    c = cout;
  }
  fc_w_ = Tensor::randn(Shape{1, c, 1, 1}, rng, std::sqrt(2.0 / c), true);
  params_.push_back({"fc.w", fc_w_});
  fc_b_ = sbias(params_, "fc.b", 1);
}

Tensor SurrogateModel::forward(const Tensor& imgs) const {
  const int g = cfg_.gn_groups;
  Tensor h = ad::conv2d(imgs, stem_w_, stem_b_, 1, 1);
  h = ad::relu(ad::group_norm(h, stem_gn_g_, stem_gn_b_, g));
  for (const auto& st : stages_) {
    h = ad::conv2d(h, st.down_w, st.down_b, 2, 1);
    h = ad::relu(ad::group_norm(h, st.gn_g, st.gn_b, g));
    Tensor in = h;
    h = ad::conv2d(h, st.c1_w, st.c1_b, 1, 1);
    h = ad::relu(ad::group_norm(h, st.gn1_g, st.gn1_b, g));
    h = ad::conv2d(h, st.c2_w, st.c2_b, 1, 1);
    h = ad::group_norm(h, st.gn2_g, st.gn2_b, g);
    h = ad::relu(ad::add(h, in));
  }
  h = ad::global_avg_pool(h);
  return ad::sigmoid(ad::linear(h, fc_w_, fc_b_));
}

double SurrogateModel::score(const Image& img) const {
  ad::NoGradGuard ng;
  return forward(image_to_tensor(img)).item();
}

void train_surrogate(SurrogateModel& model,
                     const std::vector<Image>& watermarked,
                     const std::vector<Image>& clean,
                     const SurrogateTrainConfig& cfg, std::ostream* progress) {
  if (watermarked.empty() || clean.empty())
    throw std::invalid_argument("train_surrogate: need both classes");
  AdamW opt(cfg.weight_decay, 0.9, 0.95);
  Rng rng = Rng::seeded(cfg.seed);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Image> batch;
    std::vector<double> labels;
    for (int i = 0; i < cfg.batch; ++i) {
      if (rng.coin()) {
        batch.push_back(watermarked[rng.below(watermarked.size())]);
        labels.push_back(1.0);
      } else {
        batch.push_back(clean[rng.below(clean.size())]);
        labels.push_back(0.0);
      }
    }
    Tensor p = model.forward(images_to_tensor(batch));
    Tensor loss = ad::bce_mean(p, labels);
    ad::backward(loss);
    opt.step(model.params(), cfg.lr);
    opt.zero_grad(model.params());
    if (progress && (step + 1) % 100 == 0)
      (*progress) << "surrogate step " << step + 1 << "/" << cfg.steps
                  << " loss " << loss.item() << "\n";
  }
  model.mark_trained();
}

std::vector<Image> surrogate_attack_batch(const std::vector<Image>& x_w,
                                          const SurrogateModel& surrogate,
                                          const AttackConfig& cfg) {
  if (!surrogate.trained())
    throw std::logic_error("surrogate_attack: surrogate must be trained");
  return pgd_core(x_w, cfg,
                  [&](const Tensor& x) { return surrogate.forward(x); });
}

Image surrogate_attack(const Image& x_w, const SurrogateModel& surrogate,
                       const AttackConfig& cfg) {
  return surrogate_attack_batch({x_w}, surrogate, cfg)[0];
}

Image regeneration_attack(const Image& x_w, OracleClient& oracle,
                          const std::string& instruction) {
  std::vector<Image> out = oracle.transform(instruction, {x_w});
  out[0].clamp01();
  return out[0];
}

double asr(const std::vector<double>& scores_after, double threshold) {
  if (scores_after.empty())
    throw std::invalid_argument("asr: empty score list");
  size_t below = 0;
  for (double s : scores_after)
    if (s < threshold) ++below;
  return static_cast<double>(below) / static_cast<double>(scores_after.size());
}

std::string AttackReport::to_json() const {
  nlohmann::ordered_json j;
  j["attack"] = attack;
  j["budget"] = budget;
  j["steps"] = steps;
  j["asr"] = asr;
  j["mean_hav"] = mean_hav;
  return j.dump();
}

}  // namespace jigmark
