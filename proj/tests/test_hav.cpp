#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "jigmark/hav.hpp"
#include "jigmark/synth.hpp"
#include "jigmark/train.hpp"

using namespace jigmark;
using ad::Shape;
using ad::Tensor;

namespace {

HavModelConfig tiny_hav_cfg(int size) {
  HavModelConfig cfg;
  cfg.input_size = size;
  cfg.base_channels = 8;
  cfg.stages = 2;
  cfg.feature_dim = 16;
  cfg.head_hidden = 8;
  return cfg;
}

RankingGroup group_with_ranks(std::vector<std::vector<int>> ranks) {
  RankingGroup g;
  g.original = "orig";
  g.variants = {"v0", "v1", "v2", "v3", "v4"};
  g.ranks = std::move(ranks);
  return g;
}

}  // namespace

TEST_CASE("normalize_ranks on a single annotator is rank/4") {
  RankingGroup g = group_with_ranks({{0, 1, 2, 3, 4}});
  std::vector<double> t = normalize_ranks(g);
  CHECK(t == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
}

TEST_CASE("normalize_ranks averages annotators") {
  RankingGroup g = group_with_ranks({{0, 1, 2, 3, 4}, {4, 1, 2, 3, 0}});
  std::vector<double> t = normalize_ranks(g);
  CHECK(t[0] == 0.5);
  CHECK(t[4] == 0.5);
  CHECK(t[1] == 0.25);
}

TEST_CASE("agreeing annotators equal the single-annotator case") {
  RankingGroup one = group_with_ranks({{2, 0, 1, 4, 3}});
  RankingGroup three =
      group_with_ranks({{2, 0, 1, 4, 3}, {2, 0, 1, 4, 3}, {2, 0, 1, 4, 3}});
  CHECK(normalize_ranks(one) == normalize_ranks(three));
}

TEST_CASE("rank rows must be permutations of 0..4") {
  CHECK_THROWS_AS(normalize_ranks(group_with_ranks({{0, 1, 2, 3, 3}})),
                  std::invalid_argument);
  CHECK_THROWS_AS(normalize_ranks(group_with_ranks({{0, 1, 2, 3, 5}})),
                  std::invalid_argument);
  RankingGroup g = group_with_ranks({{0, 1, 2, 3, 4}});
  g.variants.pop_back();
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("ranknet probability follows the logistic of the difference") {
  CHECK(ranknet_prob(0.7, 0.7) == 0.5);
  CHECK(ranknet_prob(std::log(3.0), 0.0) == doctest::Approx(0.75).epsilon(1e-12));
  Rng rng = Rng::seeded(3);
  for (int i = 0; i < 50; ++i) {
    double a = rng.uniform(-5, 5), b = rng.uniform(-5, 5);
    CHECK(ranknet_prob(a, b) + ranknet_prob(b, a) ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ranknet_prob(a + 0.1, b) > ranknet_prob(a, b));
    CHECK(ranknet_prob(a, b + 0.1) < ranknet_prob(a, b));
  }
}

TEST_CASE("ranknet probability gradient matches finite differences") {
  // through the tensor graph used in training
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng = Rng::seeded(100 + static_cast<uint64_t>(trial));
    Tensor si = Tensor::from_vector(Shape{1, 1, 1, 1}, {rng.uniform(-2, 2)}, true);
    Tensor sj = Tensor::from_vector(Shape{1, 1, 1, 1}, {rng.uniform(-2, 2)}, true);
    auto prob = [&]() { return ad::sigmoid(ad::sub(si, sj)); };
    si.zero_grad();
    ad::backward(ad::mean_all(prob()));
    double analytic = si.grad()[0];
    const double h = 1e-7;
    double keep = si.values()[0];
    si.values()[0] = keep + h;
    double up = prob().item();
    si.values()[0] = keep - h;
    double down = prob().item();
    si.values()[0] = keep;
    double numeric = (up - down) / (2 * h);
    CHECK(std::abs(numeric - analytic) /
              std::max({std::abs(numeric), std::abs(analytic), 1e-8}) <
          1e-5);
  }
}

TEST_CASE("ranknet loss matches the cross-entropy values") {
  CHECK(ranknet_loss(1.0, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(ranknet_loss(0.0, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(ranknet_loss(1.0, 0.75) ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(ranknet_loss(1.0, 0.75) == doctest::Approx(0.2876820724).epsilon(1e-8));
  // clamped at the extremes instead of diverging
  CHECK(std::isfinite(ranknet_loss(1.0, 0.0)));
  CHECK(std::isfinite(ranknet_loss(0.0, 1.0)));
}

TEST_CASE("spearman footrule distances") {
  CHECK(spearman_footrule({0, 1, 2, 3, 4}, {0, 1, 2, 3, 4}) == 0);
  CHECK(spearman_footrule({0, 1, 2, 3, 4}, {4, 3, 2, 1, 0}) == 12);
  CHECK(spearman_footrule({0, 1, 2, 3, 4}, {1, 0, 2, 3, 4}) == 2);
  CHECK_THROWS_AS(spearman_footrule({0, 1}, {0, 1, 2}), std::invalid_argument);
}

TEST_CASE("spearman footrule is a metric on permutations") {
  Rng rng = Rng::seeded(4);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<int> a = {0, 1, 2, 3, 4}, b = a, c = a;
    rng.shuffle(a);
    rng.shuffle(b);
    rng.shuffle(c);
    CHECK(spearman_footrule(a, b) == spearman_footrule(b, a));
    CHECK((spearman_footrule(a, b) == 0) == (a == b));
    CHECK(spearman_footrule(a, c) <=
          spearman_footrule(a, b) + spearman_footrule(b, c));
  }
}

TEST_CASE("ranks_from_scores assigns rank 0 to the lowest score") {
  CHECK(ranks_from_scores({0.1, 0.9, 0.5}) == std::vector<int>{0, 2, 1});
  CHECK(ranks_from_scores({3, 2, 1}) == std::vector<int>{2, 1, 0});
}

TEST_CASE("hav model scores are bounded and deterministic") {
  HavModel model(tiny_hav_cfg(32), 5);
  Image a = synth_image(32, 800);
  Image b = synth_image(32, 801);
  double s = model.score(a, b);
  CHECK(s >= 0.0);
  CHECK(s <= 1.0);
  CHECK(model.score(a, b) == s);
  // batch and single paths agree
  std::vector<std::pair<const Image*, const Image*>> pairs = {{&a, &b}};
  CHECK(model.score_batch(pairs)[0] == s);
}

TEST_CASE("hav model rejects shape mismatches") {
  HavModel model(tiny_hav_cfg(32), 6);
  Tensor a = image_to_tensor(synth_image(32, 802));
  Tensor b = image_to_tensor(synth_image(16, 803));
  CHECK_THROWS_AS(model.forward_raw(a, b), std::invalid_argument);
}

TEST_CASE("hav loss on a frozen batch decreases over 100 steps") {
  HavModel model(tiny_hav_cfg(32), 7);
  AdamW opt(0.0, 0.9, 0.95);

  SynthHavDataset ds = synth_hav_dataset(4, 32, 900);
  ImageSource src = ds.source();
  std::vector<Image> orig, va, vb;
  std::vector<double> labels;
  for (const auto& g : ds.groups) {
    std::vector<double> t = normalize_ranks(g);
    orig.push_back(src(g.original));
    va.push_back(src(g.variants[4]));
    vb.push_back(src(g.variants[1]));
    labels.push_back(t[4] > t[1] ? 1.0 : 0.0);
  }
  Tensor to = images_to_tensor(orig);
  Tensor ta = images_to_tensor(va);
  Tensor tb = images_to_tensor(vb);

  double first = 0.0, last = 0.0;
  for (int step = 0; step < 100; ++step) {
    Tensor pa = model.forward_score(to, ta);
    Tensor pb = model.forward_score(to, tb);
    Tensor loss = ad::bce_mean(ad::sigmoid(ad::sub(pa, pb)), labels);
    if (step == 0) first = loss.item();
    last = loss.item();
    ad::backward(loss);
    opt.step(model.params(), 2e-3);
    opt.zero_grad(model.params());
  }
  CHECK(last < first);
}

TEST_CASE("train_hav rejects data with no pairwise signal") {
  // every variant identically ranked by construction is impossible for a
  // permutation row; tie the means across annotators instead
  RankingGroup g = group_with_ranks({{0, 1, 2, 3, 4}, {4, 3, 2, 1, 0}});
  // mean rank of every variant is 2 -> all pairs tied
  HavTrainConfig cfg;
  cfg.steps = 1;
  cfg.pairs_per_step = 2;
  cfg.model = tiny_hav_cfg(16);
  SynthHavDataset ds = synth_hav_dataset(1, 16, 901);
  g.original = ds.groups[0].original;
  g.variants = ds.groups[0].variants;
  CHECK_THROWS_AS(train_hav({g}, cfg, ds.source(), nullptr),
                  std::runtime_error);
}

TEST_CASE("train_hav learns the synthetic noise ordering on a small corpus") {
  SynthHavDataset train_ds = synth_hav_dataset(24, 32, 902);
  SynthHavDataset held_out = synth_hav_dataset(8, 32, 903);

  HavTrainConfig cfg;
  cfg.steps = 250;
  cfg.pairs_per_step = 8;
  cfg.lr = 2e-3;
  cfg.seed = 11;
  cfg.model = tiny_hav_cfg(32);

  HavModel model = train_hav(train_ds.groups, cfg, train_ds.source(), nullptr);
  double ordered = 0.0;
  double mean_foot = hav_spearman_eval(model, held_out.groups,
                                       held_out.source(), &ordered);
  // loose gate at unit scale; the acceptance suite runs the full criterion
  CHECK(mean_foot < 6.0);
  CHECK(ordered > 0.2);
}

TEST_CASE("hav_filter keeps exactly the pairs inside the band") {
  HavModel model(tiny_hav_cfg(32), 8);
  std::vector<Image> originals, variants;
  for (int i = 0; i < 6; ++i) {
    originals.push_back(synth_image(32, 920 + i));
    variants.push_back(synth_image(32, 940 + i));
  }
  std::vector<std::pair<const Image*, const Image*>> pairs;
  for (size_t i = 0; i < originals.size(); ++i)
    pairs.emplace_back(&originals[i], &variants[i]);

  std::vector<double> scores = model.score_batch(pairs);
  double lo = scores[2], hi = scores[2];  // band around one known score
  std::vector<size_t> kept = hav_filter(model, pairs, lo, hi);
  for (size_t idx : kept) CHECK(scores[idx] == scores[2]);
  CHECK_FALSE(kept.empty());

  CHECK(hav_filter(model, {}, 0.3, 0.5).empty());
  CHECK(hav_filter(model, pairs, 0.0, 1.0).size() == pairs.size());
}

TEST_CASE("hav model files round-trip including calibration") {
  namespace fs = std::filesystem;
  HavModel model(tiny_hav_cfg(32), 9);
  model.set_calibration(1.7, -0.3);
  fs::path path = fs::temp_directory_path() / "jigmark_hav_model.bin";
  model.save(path.string());

  HavModel loaded = HavModel::load(path.string());
  CHECK(loaded.calibration() == std::pair<double, double>{1.7, -0.3});
  Image a = synth_image(32, 960), b = synth_image(32, 961);
  CHECK(loaded.score(a, b) == model.score(a, b));
  fs::remove(path);
}

TEST_CASE("ranking group files round-trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "jigmark_groups_test";
  fs::create_directories(dir);
  std::string path = (dir / "groups.jsonl").string();

  std::vector<RankingGroup> groups = {
      group_with_ranks({{0, 1, 2, 3, 4}}),
      group_with_ranks({{4, 3, 2, 1, 0}, {0, 1, 2, 3, 4}})};
  save_ranking_groups(path, groups);
  std::vector<RankingGroup> loaded = load_ranking_groups(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].ranks == groups[0].ranks);
  CHECK(loaded[1].ranks == groups[1].ranks);
  CHECK(loaded[1].variants == groups[1].variants);
  fs::remove_all(dir);
}

TEST_CASE("synthetic groups order variants by noise level") {
  SynthGroup g = synth_ranking_group(32, 77, "t");
  g.group.validate();
  ImageSource src = [&](const std::string& id) {
    for (auto& [k, img] : g.images)
      if (k == id) return img;
    throw std::out_of_range(id);
  };
  Image base = src(g.group.original);
  // the variant ranked r must carry the r-th noise level: distances from the
  // base grow with the rank
  std::vector<double> dist_by_rank(5);
  for (size_t slot = 0; slot < 5; ++slot) {
    int rank = g.group.ranks[0][slot];
    dist_by_rank[static_cast<size_t>(rank)] =
        mean_abs_diff(base, src(g.group.variants[slot]));
  }
  for (size_t r = 1; r < 5; ++r) CHECK(dist_by_rank[r] > dist_by_rank[r - 1]);
}
