#include "doctest.h"

#include <cmath>
#include <cstdlib>

#include "jigmark/attacks.hpp"
#include "jigmark/schema.hpp"
#include "jigmark/synth.hpp"
#include "json.hpp"

using namespace jigmark;

namespace {

DecoderConfig tiny_decoder(int size) {
  DecoderConfig cfg;
  cfg.stem_channels = 8;
  cfg.stages = {{2, 12, 2}, {2, 16, 2}};
  cfg.head_hidden = 12;
  cfg.input_size = size;
  return cfg;
}

HavModelConfig tiny_surrogate(int size) {
  HavModelConfig cfg;
  cfg.input_size = size;
  cfg.base_channels = 8;
  cfg.stages = 2;
  cfg.feature_dim = 16;
  cfg.head_hidden = 8;
  return cfg;
}

double linf(const Image& a, const Image& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i)
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace

TEST_CASE("pgd with zero budget returns the input") {
  Decoder dec(tiny_decoder(32), 1);
  JigsawKey key = new_key(4, 4, 2);
  Image img = synth_image(32, 1000);
  AttackConfig cfg;
  cfg.linf_budget = 0.0;
  cfg.steps = 5;
  CHECK(pgd_attack(img, key, dec, cfg) == img);
}

TEST_CASE("pgd respects the l-inf ball and the unit range") {
  Decoder dec(tiny_decoder(32), 3);
  JigsawKey key = new_key(4, 4, 4);
  AttackConfig cfg;
  cfg.linf_budget = 8.0 / 255.0;
  cfg.steps = 6;

  std::vector<Image> images;
  for (int i = 0; i < 3; ++i) images.push_back(synth_image(32, 1010 + i));
  std::vector<Image> attacked = pgd_attack_batch(images, key, dec, cfg);
  REQUIRE(attacked.size() == images.size());
  for (size_t i = 0; i < images.size(); ++i) {
    CHECK(linf(images[i], attacked[i]) <= cfg.linf_budget + 1e-12);
    CHECK(attacked[i].in_unit_range());
  }
}

TEST_CASE("pgd pushes decoder scores down for most inputs") {
  Decoder dec(tiny_decoder(32), 5);
  JigsawKey key = new_key(4, 4, 6);
  AttackConfig cfg;
  cfg.linf_budget = 16.0 / 255.0;
  cfg.steps = 12;

  int down = 0, total = 8;
  for (int i = 0; i < total; ++i) {
    Image img = synth_image(32, 1020 + i);
    double before = detect(img, key, dec);
    double after = detect(pgd_attack(img, key, dec, cfg), key, dec);
    if (after <= before) ++down;
  }
  CHECK(down >= (total * 9) / 10 - 1);  // >= 90% of images (rounded)
}

TEST_CASE("attack config validation and default step size") {
  AttackConfig cfg;
  CHECK(cfg.effective_step() == doctest::Approx(cfg.linf_budget / 10.0));
  cfg.step_size = 0.01;
  CHECK(cfg.effective_step() == 0.01);
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("surrogate must be trained before attacking") {
  SurrogateModel surrogate(tiny_surrogate(32), 7);
  AttackConfig cfg;
  CHECK_THROWS_AS(surrogate_attack(synth_image(32, 1030), surrogate, cfg),
                  std::logic_error);
}

TEST_CASE("surrogate training separates crude classes and transfers motion") {
  // classes distinguished by brightness offset: trivially learnable
  std::vector<Image> bright, dark;
  for (int i = 0; i < 12; ++i) {
    Image b = synth_image(32, 1040 + i);
    for (double& v : b.values()) v = 0.6 + 0.4 * v;
    bright.push_back(b);
    Image d = synth_image(32, 1060 + i);
    for (double& v : d.values()) v = 0.4 * v;
    dark.push_back(d);
  }
  SurrogateModel surrogate(tiny_surrogate(32), 8);
  SurrogateTrainConfig tcfg;
  tcfg.steps = 60;
  tcfg.batch = 8;
  tcfg.lr = 2e-3;
  train_surrogate(surrogate, bright, dark, tcfg, nullptr);
  CHECK(surrogate.trained());

  double sb = surrogate.score(bright[0]);
  double sd = surrogate.score(dark[0]);
  CHECK(sb > sd);

  AttackConfig cfg;
  cfg.linf_budget = 8.0 / 255.0;
  cfg.steps = 5;
  Image attacked = surrogate_attack(bright[0], surrogate, cfg);
  CHECK(linf(attacked, bright[0]) <= cfg.linf_budget + 1e-12);
  CHECK(surrogate.score(attacked) <= sb);
}

TEST_CASE("regeneration through an echo oracle is the identity") {
  const char* stub = std::getenv("JIGMARK_STUB");
  REQUIRE(stub != nullptr);
  OracleConfig cfg;
  cfg.endpoint = std::string("cmd:") + stub;
  cfg.timeout_ms = 20000;
  auto client = OracleClient::open(cfg);

  Rng rng = Rng::seeded(9);
  Image img(24, 24);
  for (double& v : img.values())
    v = static_cast<double>(rng.below(256)) / 255.0;
  Image out = regeneration_attack(img, *client, "echo");
  CHECK(out == img);
}

TEST_CASE("asr counts the scores pushed below the threshold") {
  CHECK(asr({0.9, 0.8, 0.7}, 0.5) == 0.0);
  CHECK(asr({0.1, 0.2}, 0.5) == 1.0);
  CHECK(asr({0.9, 0.2, 0.4}, 0.5) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(asr({}, 0.5), std::invalid_argument);
}

TEST_CASE("asr is non-decreasing in the threshold") {
  Rng rng = Rng::seeded(10);
  std::vector<double> scores(40);
  for (auto& v : scores) v = rng.uniform();
  double prev = 0.0;
  for (double t = 0.0; t <= 1.0001; t += 0.05) {
    double a = asr(scores, t);
    CHECK(a >= prev);
    prev = a;
  }
  CHECK(prev == 1.0);
}

TEST_CASE("attack report JSON matches its schema") {
  AttackReport r;
  r.attack = "pgd";
  r.budget = 8.0 / 255.0;
  r.steps = 40;
  r.asr = 0.85;
  r.mean_hav = 0.12;
  nlohmann::json instance = nlohmann::json::parse(r.to_json());
  nlohmann::json schema = nlohmann::json::parse(read_text_file(
      std::string(JIGMARK_SOURCE_DIR) + "/schemas/attack_report.schema.json"));
  std::string error;
  CHECK_MESSAGE(schema_validate(instance, schema, error), error);
}
