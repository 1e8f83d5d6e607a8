#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "jigmark/detect.hpp"
#include "jigmark/schema.hpp"
#include "jigmark/synth.hpp"
#include "jigmark/util.hpp"

using namespace jigmark;

namespace {

/// Brute-force pair-count oracle for the ranking probability.
double auc_oracle(const std::vector<double>& pos,
                  const std::vector<double>& neg) {
  double concordant = 0.0, ties = 0.0;
  for (double p : pos)
    for (double n : neg) {
      if (p > n)
        concordant += 1.0;
      else if (p == n)
        ties += 1.0;
    }
  return (concordant + 0.5 * ties) /
         (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

/// Exhaustive threshold-scan oracle over the union of observed scores.
std::pair<double, double> tpr_oracle(const std::vector<double>& pos,
                                     const std::vector<double>& neg,
                                     double fpr) {
  std::vector<double> candidates;
  candidates.insert(candidates.end(), pos.begin(), pos.end());
  candidates.insert(candidates.end(), neg.begin(), neg.end());
  std::sort(candidates.begin(), candidates.end());

  auto frac_ge = [](const std::vector<double>& v, double t) {
    size_t c = 0;
    for (double x : v)
      if (x >= t) ++c;
    return static_cast<double>(c) / static_cast<double>(v.size());
  };

  for (double t : candidates)
    if (frac_ge(neg, t) <= fpr) return {frac_ge(pos, t), t};
  double t = std::nextafter(*std::max_element(neg.begin(), neg.end()),
                            std::numeric_limits<double>::infinity());
  return {frac_ge(pos, t), t};
}

std::vector<double> random_scores(Rng& rng, size_t n, bool quantize) {
  std::vector<double> v(n);
  for (auto& x : v)
    x = quantize ? static_cast<double>(rng.below(20)) / 19.0 : rng.uniform();
  return v;
}

}  // namespace

TEST_CASE("roc_auc on the spec cases") {
  CHECK(roc_auc({1.0, 1.0}, {0.0, 0.0}) == 1.0);
  CHECK(roc_auc({0.3, 0.7}, {0.3, 0.7}) == 0.5);
  CHECK(roc_auc({0.9, 0.4}, {0.5, 0.1}) == 0.75);
}

TEST_CASE("roc_auc equals the brute-force pair count on random score sets") {
  Rng rng = Rng::seeded(17);
  for (int trial = 0; trial < 100; ++trial) {
    bool quantize = trial % 2 == 0;  // force ties half the time
    size_t np = 1 + rng.below(40), nn = 1 + rng.below(40);
    std::vector<double> pos = random_scores(rng, np, quantize);
    std::vector<double> neg = random_scores(rng, nn, quantize);
    CHECK(roc_auc(pos, neg) == auc_oracle(pos, neg));
  }
}

TEST_CASE("roc_auc symmetry and monotone-transform invariance") {
  Rng rng = Rng::seeded(18);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> pos = random_scores(rng, 15, trial % 2 == 0);
    std::vector<double> neg = random_scores(rng, 12, trial % 2 == 0);
    CHECK(roc_auc(pos, neg) + roc_auc(neg, pos) == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<double> pos_t = pos, neg_t = neg;
    for (double& v : pos_t) v = std::exp(3.0 * v);
    for (double& v : neg_t) v = std::exp(3.0 * v);
    CHECK(roc_auc(pos, neg) == doctest::Approx(roc_auc(pos_t, neg_t)).epsilon(1e-12));
  }
}

TEST_CASE("roc_auc rejects empty inputs") {
  CHECK_THROWS_AS(roc_auc({}, {0.1}), std::invalid_argument);
  CHECK_THROWS_AS(roc_auc({0.1}, {}), std::invalid_argument);
}

TEST_CASE("tpr_at_fpr equals the exhaustive threshold scan") {
  Rng rng = Rng::seeded(19);
  for (int trial = 0; trial < 100; ++trial) {
    bool quantize = trial % 2 == 0;
    std::vector<double> pos = random_scores(rng, 1 + rng.below(50), quantize);
    std::vector<double> neg = random_scores(rng, 1 + rng.below(50), quantize);
    double fpr = (trial % 3 == 0) ? 0.01 : rng.uniform(0.0, 0.3);
    auto [tpr, thr] = tpr_at_fpr(pos, neg, fpr);
    auto [otpr, othr] = tpr_oracle(pos, neg, fpr);
    CHECK(tpr == otpr);
    CHECK(thr == othr);
  }
}

TEST_CASE("tpr_at_fpr spec cases") {
  SUBCASE("one negative above the cut at 1% of 100") {
    Rng rng = Rng::seeded(20);
    std::vector<double> neg;
    for (int i = 0; i < 99; ++i) neg.push_back(rng.uniform(0.0, 0.6));
    neg.push_back(0.8);  // exactly one high negative
    std::vector<double> pos = {0.75, 0.85, 0.9};
    auto [tpr, thr] = tpr_at_fpr(pos, neg, 0.01);
    // the smallest admissible score leaves exactly that negative flagged
    CHECK(thr == 0.75);
    size_t flagged = 0;
    for (double n : neg)
      if (n >= thr) ++flagged;
    CHECK(flagged == 1);
    CHECK(tpr == 1.0);

    // without the 0.75 positive the cut moves above the second-highest
    // negative band and the budget still holds
    auto [tpr2, thr2] = tpr_at_fpr({0.85, 0.9}, neg, 0.01);
    CHECK(tpr2 == 1.0);
    CHECK(thr2 > 0.6);
    size_t flagged2 = 0;
    for (double n : neg)
      if (n >= thr2) ++flagged2;
    CHECK(flagged2 <= 1);
  }

  SUBCASE("positives above every negative reach tpr 1") {
    std::vector<double> pos = {0.8, 0.9, 0.95};
    std::vector<double> neg = {0.1, 0.2, 0.3, 0.4};
    auto [tpr, thr] = tpr_at_fpr(pos, neg, 0.01);
    CHECK(tpr == 1.0);
    CHECK(thr > 0.4);
  }

  SUBCASE("identical distributions stay near chance") {
    Rng rng = Rng::seeded(21);
    std::vector<double> scores = random_scores(rng, 200, false);
    auto [tpr, thr] = tpr_at_fpr(scores, scores, 0.01);
    CHECK(tpr <= 0.01 + 1.0 / 200.0);
    (void)thr;
  }
}

TEST_CASE("detection report JSON matches its published schema") {
  Rng rng = Rng::seeded(22);
  DetectionReport r = make_report(random_scores(rng, 30, false),
                                  random_scores(rng, 30, false), "k123",
                                  "jpeg");
  nlohmann::json instance = nlohmann::json::parse(r.to_json());
  nlohmann::json schema = nlohmann::json::parse(
      read_text_file(std::string(JIGMARK_SOURCE_DIR) +
                     "/schemas/report.schema.json"));
  std::string error;
  CHECK_MESSAGE(schema_validate(instance, schema, error), error);
  CHECK(instance["auc"].get<double>() >= 0.0);
  CHECK(instance["auc"].get<double>() <= 1.0);
}

TEST_CASE("embed and detect are deterministic end to end") {
  Encoder enc(EncoderConfig::desk64(), 3);
  Rng rng = Rng::seeded(23);
  for (auto& p : enc.params())
    if (p.name == "head.w")
      for (auto& v : p.value.values()) v = rng.normal() * 0.05;
  Decoder dec(DecoderConfig::desk64(), 4);
  JigsawKey key = new_key(4, 4, 5);

  Image img = synth_image(64, 400);
  Image w1 = embed(img, key, enc);
  Image w2 = embed(img, key, enc);
  CHECK(w1 == w2);
  CHECK(detect(w1, key, dec) == detect(w2, key, dec));

  std::vector<Image> batch = {img, w1};
  CHECK(detect_batch(batch, key, dec) == detect_batch(batch, key, dec));
  CHECK(detect_batch(batch, key, dec)[1] == detect(w1, key, dec));
}

TEST_CASE("mismatch study control reproduces the matched-key report") {
  Encoder enc(EncoderConfig::desk64(), 6);
  Rng rng = Rng::seeded(24);
  for (auto& p : enc.params())
    if (p.name == "head.w")
      for (auto& v : p.value.values()) v = rng.normal() * 0.05;
  Decoder dec(DecoderConfig::desk64(), 7);
  JigsawKey key = new_key(4, 4, 8);

  std::vector<Image> images;
  for (int i = 0; i < 6; ++i) images.push_back(synth_image(64, 500 + i));

  std::vector<DetectionReport> with_control =
      mismatch_study(images, key, enc, dec, 2, 99, /*include_control=*/true);
  REQUIRE(with_control.size() == 3);
  CHECK(with_control[0].perturbation == "mismatch_pairs_0");

  // the control equals a direct matched-key evaluation
  std::vector<Image> wm;
  for (const auto& img : images) wm.push_back(embed(img, key, enc));
  DetectionReport direct = make_report(detect_batch(wm, key, dec),
                                       detect_batch(images, key, dec),
                                       key.id(), "clean");
  CHECK(with_control[0].auc == direct.auc);
  CHECK(with_control[0].pos_scores == direct.pos_scores);

  std::vector<DetectionReport> plain =
      mismatch_study(images, key, enc, dec, 2, 99, false);
  REQUIRE(plain.size() == 2);
  CHECK(plain[0].perturbation == "mismatch_pairs_1");
  CHECK(plain[1].perturbation == "mismatch_pairs_2");
}

TEST_CASE("mismatch study validates the pair range") {
  Encoder enc(EncoderConfig::desk64(), 9);
  Decoder dec(DecoderConfig::desk64(), 10);
  JigsawKey key = new_key(4, 4, 11);
  std::vector<Image> images = {synth_image(64, 600)};
  CHECK_THROWS_AS(mismatch_study(images, key, enc, dec, 9, 1),
                  std::invalid_argument);
}
