#include "jigmark/hav.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "jigmark/train.hpp"
#include "json.hpp"

namespace jigmark {

using ad::Shape;

void RankingGroup::validate() const {
  if (variants.size() != 5)
    throw std::invalid_argument("RankingGroup: exactly 5 variants required");
  if (ranks.empty())
    throw std::invalid_argument("RankingGroup: at least one annotator row");
  for (const auto& row : ranks) {
    if (row.size() != 5)
      throw std::invalid_argument("RankingGroup: rank row must have 5 entries");
    std::vector<bool> seen(5, false);
    for (int r : row) {
      if (r < 0 || r >= 5 || seen[static_cast<size_t>(r)])
        throw std::invalid_argument(
            "RankingGroup: rank row must be a permutation of 0..4");
      seen[static_cast<size_t>(r)] = true;
    }
  }
}

std::vector<RankingGroup> load_ranking_groups(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ranking file: " + path);
  std::vector<RankingGroup> groups;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    RankingGroup g;
    g.original = j.at("original").get<std::string>();
    g.variants = j.at("variants").get<std::vector<std::string>>();
    g.ranks = j.at("ranks").get<std::vector<std::vector<int>>>();
    g.validate();
    groups.push_back(std::move(g));
  }
  return groups;
}

void save_ranking_groups(const std::string& path,
                         const std::vector<RankingGroup>& groups) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write ranking file: " + path);
  for (const auto& g : groups) {
    nlohmann::ordered_json j;
    j["original"] = g.original;
    j["variants"] = g.variants;
    j["ranks"] = g.ranks;
    out << j.dump() << "\n";
  }
}

std::vector<double> normalize_ranks(const RankingGroup& group) {
  group.validate();
  const double max_rank = 4.0;
  std::vector<double> targets(5, 0.0);
  for (const auto& row : group.ranks)
    for (size_t i = 0; i < 5; ++i)
      targets[i] += static_cast<double>(row[i]) / max_rank;
  for (double& t : targets) t /= static_cast<double>(group.ranks.size());
  return targets;
}

double ranknet_prob(double s_i, double s_j) {
  double d = s_i - s_j;
  if (d >= 0) return 1.0 / (1.0 + std::exp(-d));
  double e = std::exp(d);
  return e / (1.0 + e);
}

double ranknet_loss(double y_ij, double p_ij, double eps) {
  double p = std::min(1.0 - eps, std::max(eps, p_ij));
  return -y_ij * std::log(p) - (1.0 - y_ij) * std::log(1.0 - p);
}

int spearman_footrule(const std::vector<int>& rank_a,
                      const std::vector<int>& rank_b) {
  if (rank_a.size() != rank_b.size())
    throw std::invalid_argument("spearman_footrule: length mismatch");
  int sum = 0;
  for (size_t i = 0; i < rank_a.size(); ++i)
    sum += std::abs(rank_a[i] - rank_b[i]);
  return sum;
}

std::vector<int> ranks_from_scores(const std::vector<double>& scores) {
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<int> ranks(scores.size());
  for (size_t r = 0; r < order.size(); ++r)
    ranks[order[r]] = static_cast<int>(r);
  return ranks;
}

// ------------------------------ model ------------------------------

HavModelConfig HavModelConfig::desk64() {
  HavModelConfig cfg;
  cfg.input_size = 64;
  cfg.base_channels = 8;  // 8 -> 16 -> 32 -> 64 over three stages
  cfg.stages = 3;
  cfg.feature_dim = 32;
  cfg.head_hidden = 16;
  return cfg;
}

namespace {

Tensor reg_conv(std::vector<Param>& reg, const std::string& name, int cout,
                int cin, int k, Rng& rng) {
  double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
  Tensor t = Tensor::randn(Shape{cout, cin, k, k}, rng, std, true);
  reg.push_back({name, t});
  return t;
}

Tensor reg_bias(std::vector<Param>& reg, const std::string& name, int c) {
  Tensor t = Tensor::zeros(Shape{1, c, 1, 1}, true);
  reg.push_back({name, t});
  return t;
}

Tensor reg_gamma(std::vector<Param>& reg, const std::string& name, int c) {
  Tensor t = Tensor::constant(Shape{1, c, 1, 1}, 1.0);
  t.set_requires_grad(true);
  reg.push_back({name, t});
  return t;
}

Tensor reg_linear(std::vector<Param>& reg, const std::string& name, int out,
                  int in, Rng& rng) {
  double std = std::sqrt(2.0 / static_cast<double>(in));
  Tensor t = Tensor::randn(Shape{out, in, 1, 1}, rng, std, true);
  reg.push_back({name, t});
  return t;
}

}  // namespace

HavModel::HavModel(const HavModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  Rng rng = Rng::seeded(init_seed);
  int c = cfg_.base_channels;
  stem_w_ = reg_conv(params_, "stem.w", c, 3, 3, rng);
  stem_b_ = reg_bias(params_, "stem.b", c);
  stem_gn_g_ = reg_gamma(params_, "stem.gn.g", c);
  stem_gn_b_ = reg_bias(params_, "stem.gn.b", c);

  for (int s = 0; s < cfg_.stages; ++s) {
    std::string p = "stage" + std::to_string(s);
    DownStage st;
    int cout = c * 2;
    st.down_w = reg_conv(params_, p + ".down.w", cout, c, 3, rng);
    st.down_b = reg_bias(params_, p + ".down.b", cout);
    st.gn_g = reg_gamma(params_, p + ".down.gn.g", cout);
    st.gn_b = reg_bias(params_, p + ".down.gn.b", cout);
    st.block.c1_w = reg_conv(params_, p + ".b.c1.w", cout, cout, 3, rng);
    st.block.c1_b = reg_bias(params_, p + ".b.c1.b", cout);
    st.block.gn1_g = reg_gamma(params_, p + ".b.gn1.g", cout);
    st.block.gn1_b = reg_bias(params_, p + ".b.gn1.b", cout);
    st.block.c2_w = reg_conv(params_, p + ".b.c2.w", cout, cout, 3, rng);
    st.block.c2_b = reg_bias(params_, p + ".b.c2.b", cout);
    st.block.gn2_g = reg_gamma(params_, p + ".b.gn2.g", cout);
    st.block.gn2_b = reg_bias(params_, p + ".b.gn2.b", cout);
    stages_.push_back(std::move(st));
    c = cout;
  }
  proj_w_ = reg_linear(params_, "proj.w", cfg_.feature_dim, c, rng);
  proj_b_ = reg_bias(params_, "proj.b", cfg_.feature_dim);
  fc1_w_ = reg_linear(params_, "head.fc1.w", cfg_.head_hidden, cfg_.feature_dim, rng);
  fc1_b_ = reg_bias(params_, "head.fc1.b", cfg_.head_hidden);
  fc2_w_ = reg_linear(params_, "head.fc2.w", 1, cfg_.head_hidden, rng);
  fc2_b_ = reg_bias(params_, "head.fc2.b", 1);
}

Tensor HavModel::backbone(const Tensor& x) const {
  const int g = cfg_.gn_groups;
  Tensor h = ad::conv2d(x, stem_w_, stem_b_, 1, 1);
  h = ad::relu(ad::group_norm(h, stem_gn_g_, stem_gn_b_, g));
  for (const auto& st : stages_) {
    h = ad::conv2d(h, st.down_w, st.down_b, 2, 1);
    h = ad::relu(ad::group_norm(h, st.gn_g, st.gn_b, g));
    Tensor in = h;
    h = ad::conv2d(h, st.block.c1_w, st.block.c1_b, 1, 1);
    h = ad::relu(ad::group_norm(h, st.block.gn1_g, st.block.gn1_b, g));
    h = ad::conv2d(h, st.block.c2_w, st.block.c2_b, 1, 1);
    h = ad::group_norm(h, st.block.gn2_g, st.block.gn2_b, g);
    h = ad::relu(ad::add(h, in));
  }
  h = ad::global_avg_pool(h);
  return ad::linear(h, proj_w_, proj_b_);
}

Tensor HavModel::forward_raw(const Tensor& originals,
                             const Tensor& variants) const {
  if (!(originals.shape() == variants.shape()))
    throw std::invalid_argument("hav: original/variant shape mismatch");
  Tensor fo = backbone(originals);
  Tensor fv = backbone(variants);
  Tensor d = ad::sub(fo, fv);
  Tensor h = ad::relu(ad::linear(d, fc1_w_, fc1_b_));
  return ad::linear(h, fc2_w_, fc2_b_);
}

Tensor HavModel::forward_score(const Tensor& originals,
                               const Tensor& variants) const {
  Tensor raw = forward_raw(originals, variants);
  return ad::sigmoid(ad::affine(raw, calib_scale_, calib_offset_));
}

double HavModel::score(const Image& original, const Image& variant) const {
  ad::NoGradGuard ng;
  return forward_score(image_to_tensor(original), image_to_tensor(variant))
      .item();
}

std::vector<double> HavModel::score_batch(
    const std::vector<std::pair<const Image*, const Image*>>& pairs) const {
  if (pairs.empty()) return {};
  ad::NoGradGuard ng;
  std::vector<double> out;
  out.reserve(pairs.size());
  const size_t kChunk = 32;
  for (size_t i = 0; i < pairs.size(); i += kChunk) {
    std::vector<Image> orig, vars;
    for (size_t j = i; j < std::min(pairs.size(), i + kChunk); ++j) {
      orig.push_back(*pairs[j].first);
      vars.push_back(*pairs[j].second);
    }
    Tensor s = forward_score(images_to_tensor(orig), images_to_tensor(vars));
    for (double v : s.values()) out.push_back(v);
  }
  return out;
}

void HavModel::set_calibration(double scale, double offset) {
  calib_scale_ = scale;
  calib_offset_ = offset;
}

void HavModel::save(const std::string& path) const {
  Archive ar;
  nlohmann::json meta;
  meta["format"] = "jigmark-hav/1";
  meta["config"] = {{"input_size", cfg_.input_size},
                    {"base_channels", cfg_.base_channels},
                    {"stages", cfg_.stages},
                    {"feature_dim", cfg_.feature_dim},
                    {"head_hidden", cfg_.head_hidden},
                    {"gn_groups", cfg_.gn_groups}};
  meta["calibration"] = {calib_scale_, calib_offset_};
  ar.meta_json = meta.dump();
  pack_params(ar, "hav.", params_);
  ar.save(path);
}

HavModel HavModel::load(const std::string& path) {
  Archive ar = Archive::load(path);
  nlohmann::json meta = nlohmann::json::parse(ar.meta_json);
  const auto& c = meta.at("config");
  HavModelConfig cfg;
  cfg.input_size = c.at("input_size");
  cfg.base_channels = c.at("base_channels");
  cfg.stages = c.at("stages");
  cfg.feature_dim = c.at("feature_dim");
  cfg.head_hidden = c.at("head_hidden");
  cfg.gn_groups = c.at("gn_groups");
  HavModel m(cfg);
  unpack_params(ar, "hav.", m.params_);
  m.calib_scale_ = meta.at("calibration").at(0).get<double>();
  m.calib_offset_ = meta.at("calibration").at(1).get<double>();
  return m;
}

// ------------------------------ training ------------------------------

HavModel train_hav(const std::vector<RankingGroup>& groups,
                   const HavTrainConfig& cfg, const ImageSource& images,
                   std::ostream* progress) {
  if (groups.empty()) throw std::invalid_argument("train_hav: no groups");
  for (const auto& g : groups) g.validate();

  HavModel model(cfg.model, derive_seed(cfg.seed, 0x4a));
  AdamW opt(cfg.weight_decay, 0.9, 0.95);
  Rng rng = Rng::seeded(derive_seed(cfg.seed, 0x4b));

  std::vector<std::vector<double>> targets;
  targets.reserve(groups.size());
  for (const auto& g : groups) targets.push_back(normalize_ranks(g));

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Image> orig, va, vb;
    std::vector<double> labels;
    int guard = 0;
    while (static_cast<int>(labels.size()) < cfg.pairs_per_step) {
      if (++guard > cfg.pairs_per_step * 64)
        throw std::runtime_error(
            "train_hav: could not sample untied pairs (all ranks tied?)");
      size_t gi = static_cast<size_t>(rng.below(groups.size()));
      int i = static_cast<int>(rng.below(5));
      int j = static_cast<int>(rng.below(5));
      if (i == j) continue;
      double ti = targets[gi][static_cast<size_t>(i)];
      double tj = targets[gi][static_cast<size_t>(j)];
      if (ti == tj) continue;  // tied mean ranks carry no pairwise signal
      orig.push_back(images(groups[gi].original));
      va.push_back(images(groups[gi].variants[static_cast<size_t>(i)]));
      vb.push_back(images(groups[gi].variants[static_cast<size_t>(j)]));
      labels.push_back(ti > tj ? 1.0 : 0.0);
    }

    Tensor so = images_to_tensor(orig);
    Tensor sa = model.forward_score(so, images_to_tensor(va));
    Tensor sb = model.forward_score(so, images_to_tensor(vb));
    // P(first pair more modified) = logistic(s_a - s_b)
    Tensor p = ad::sigmoid(ad::sub(sa, sb));
    Tensor loss = ad::bce_mean(p, labels);
    ad::backward(loss);
    opt.step(model.params(), cfg.lr);
    opt.zero_grad(model.params());
    if (progress && (step + 1) % 200 == 0)
      (*progress) << "hav step " << step + 1 << "/" << cfg.steps
                  << " loss " << loss.item() << "\n";
  }
  return model;
}

void calibrate_hav(HavModel& model, const std::vector<RankingGroup>& groups,
                   const ImageSource& images) {
  // least squares of (a*raw + b) against logit(target)
  std::vector<double> xs, ys;
  {
    ad::NoGradGuard ng;
    for (const auto& g : groups) {
      std::vector<double> targets = normalize_ranks(g);
      Image orig = images(g.original);
      for (size_t i = 0; i < 5; ++i) {
        Image var = images(g.variants[i]);
        Tensor raw = model.forward_raw(image_to_tensor(orig),
                                       image_to_tensor(var));
        double t = std::min(1.0 - 1e-4, std::max(1e-4, targets[i]));
        xs.push_back(raw.item());
        ys.push_back(std::log(t / (1.0 - t)));
      }
    }
  }
  double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  double denom = n * sxx - sx * sx;
  if (std::abs(denom) < 1e-12) return;  // degenerate; keep identity
  double a = (n * sxy - sx * sy) / denom;
  double b = (sy - a * sx) / n;
  if (a <= 0) return;  // never flip the learned ordering
  model.set_calibration(a, b);
}

double hav_spearman_eval(const HavModel& model,
                         const std::vector<RankingGroup>& groups,
                         const ImageSource& images, double* ordered_fraction,
                         int ordered_tolerance) {
  if (groups.empty()) throw std::invalid_argument("hav eval: no groups");
  double total = 0.0;
  int ordered = 0;
  for (const auto& g : groups) {
    Image orig = images(g.original);
    std::vector<Image> vars;
    for (const auto& v : g.variants) vars.push_back(images(v));
    std::vector<std::pair<const Image*, const Image*>> pairs;
    for (const auto& v : vars) pairs.emplace_back(&orig, &v);
    std::vector<double> scores = model.score_batch(pairs);
    std::vector<int> predicted = ranks_from_scores(scores);
    std::vector<int> reference = ranks_from_scores(normalize_ranks(g));
    int foot = spearman_footrule(predicted, reference);
    total += foot;
    if (foot <= ordered_tolerance) ++ordered;
  }
  if (ordered_fraction)
    *ordered_fraction = static_cast<double>(ordered) /
                        static_cast<double>(groups.size());
  return total / static_cast<double>(groups.size());
}

std::vector<size_t> hav_filter(
    const HavModel& model,
    const std::vector<std::pair<const Image*, const Image*>>& pairs, double lo,
    double hi) {
  std::vector<double> scores = model.score_batch(pairs);
  std::vector<size_t> keep;
  for (size_t i = 0; i < scores.size(); ++i)
    if (scores[i] >= lo && scores[i] <= hi) keep.push_back(i);
  return keep;
}

}  // namespace jigmark
