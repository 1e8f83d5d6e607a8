#include "jigmark/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include "CLI11.hpp"
#include "jigmark/attacks.hpp"
#include "jigmark/detect.hpp"
#include "jigmark/hav.hpp"
#include "jigmark/jigsaw.hpp"
#include "jigmark/oracle.hpp"
#include "jigmark/synth.hpp"
#include "jigmark/train.hpp"
#include "json.hpp"

namespace jigmark::cli {

namespace fs = std::filesystem;

std::vector<std::string> list_images(const std::string& dir) {
  if (!fs::is_directory(dir))
    throw ConfigError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      out.push_back(entry.path().string());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ConfigError("no .png images under " + dir);
  return out;
}

Image load_image_sized(const std::string& path, int size, std::ostream& warn) {
  Image img = read_png(path);
  if (img.height() == size && img.width() == size) return img;
  warn << "warning: " << path << " is " << img.width() << "x" << img.height()
       << ", letterboxing to " << size << "x" << size << "\n";
  return letterbox_cover(img, size, size);
}

namespace {

/// Referenced paths must exist before a command starts work.
void require_file(const std::string& path, const char* what) {
  if (path.empty() || !fs::exists(path))
    throw ConfigError(std::string(what) + " not found: " + path);
}

std::string timestamp_tag() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", std::gmtime(&t));
  return buf;
}

/// Append-only report naming: never overwrite an earlier run's file.
std::string fresh_path(const fs::path& dir, const std::string& stem,
                       const std::string& ext) {
  fs::create_directories(dir);
  std::string tag = timestamp_tag();
  for (int i = 0;; ++i) {
    fs::path p = dir / (stem + "_" + tag +
                        (i == 0 ? std::string() : "_" + std::to_string(i)) + ext);
    if (!fs::exists(p)) return p.string();
  }
}

std::vector<Image> load_dataset(const std::string& dir, int size) {
  std::vector<Image> imgs;
  for (const auto& path : list_images(dir))
    imgs.push_back(load_image_sized(path, size, std::cerr));
  return imgs;
}

std::vector<std::string> load_instructions(const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(read_text_file(path));
  std::vector<std::string> out;
  if (j.is_object()) {
    for (const auto& [file, instr] : j.items())
      out.push_back(instr.get<std::string>());
  } else if (j.is_array()) {
    for (const auto& instr : j) out.push_back(instr.get<std::string>());
  } else {
    throw ConfigError("instruction file must be a JSON object or array");
  }
  if (out.empty()) throw ConfigError("instruction file is empty");
  return out;
}

OracleConfig make_oracle_config(const std::string& endpoint,
                                int retries = 3) {
  OracleConfig cfg;
  cfg.endpoint = endpoint;
  cfg.timeout_ms = OracleConfig::timeout_from_env();
  cfg.retries = retries;
  return cfg;
}

ImageSource caching_png_source() {
  auto cache = std::make_shared<std::unordered_map<std::string, Image>>();
  return [cache](const std::string& path) -> Image {
    auto it = cache->find(path);
    if (it == cache->end()) it = cache->emplace(path, read_png(path)).first;
    return it->second;
  };
}

void write_scores_jsonl(const std::string& path,
                        const std::vector<std::string>& files,
                        const std::vector<double>& scores) {
  std::ofstream out(path, std::ios::trunc);
  for (size_t i = 0; i < files.size(); ++i) {
    nlohmann::ordered_json j;
    j["file"] = fs::path(files[i]).filename().string();
    j["score"] = scores[i];
    out << j.dump() << "\n";
  }
}

struct EvalData {
  std::vector<std::string> files;
  std::vector<Image> images;
  std::vector<Image> watermarked;
};

EvalData embed_dataset(const std::string& dir, const Trainer& trainer,
                       const JigsawKey& key) {
  EvalData d;
  d.files = list_images(dir);
  for (const auto& f : d.files) {
    Image img = load_image_sized(f, trainer.config().image_size, std::cerr);
    d.watermarked.push_back(
        embed(img, key, trainer.encoder(), trainer.config().blend_width));
    d.images.push_back(std::move(img));
  }
  return d;
}

// ------------------------------ commands ------------------------------

int cmd_key_new(const std::string& grid, uint64_t seed,
                const std::string& out) {
  int rows = 0, cols = 0;
  if (std::sscanf(grid.c_str(), "%dx%d", &rows, &cols) != 2)
    throw ConfigError("--grid must look like 4x4");
  JigsawKey key = new_key(rows, cols, seed);
  save_key(out, key);
  std::cout << "key " << key.id() << " -> " << out << "\n";
  return kExitOk;
}

int cmd_key_perturb(const std::string& key_path, int pairs, uint64_t seed,
                    const std::string& out) {
  require_file(key_path, "key file");
  JigsawKey key = load_key(key_path);
  JigsawKey perturbed = perturb_key(key, pairs, seed);
  save_key(out, perturbed);
  std::cout << "key " << perturbed.id() << " -> " << out << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, bool resume, int64_t seed_override,
              const std::string& oracle_endpoint,
              const std::string& instructions_path, int oracle_retries) {
  require_file(config_path, "train config");
  TrainConfig cfg = TrainConfig::from_json(read_text_file(config_path));
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);

  std::unique_ptr<OracleClient> oracle;
  std::vector<std::string> instructions;
  if (!oracle_endpoint.empty()) {
    oracle = OracleClient::open(
        make_oracle_config(oracle_endpoint, oracle_retries));
    if (instructions_path.empty())
      throw ConfigError("--oracle requires --instructions");
    instructions = load_instructions(instructions_path);
  }

  std::vector<Image> dataset = load_dataset(data_dir, cfg.image_size);

  CurriculumSchedule curriculum =
      cfg.curriculum_profile == "desk64"
          ? CurriculumSchedule::desk64(cfg.epochs, cfg.image_size)
      : cfg.curriculum_profile == "order_preserving"
          ? CurriculumSchedule::order_preserving(cfg.epochs, cfg.image_size)
          : CurriculumSchedule::training_defaults(cfg.epochs, cfg.image_size);
  curriculum.include_oracle = (oracle != nullptr);
  ChainPerturber perturber(curriculum, oracle.get(), instructions);

  std::string latest = (fs::path(out_dir) / "latest.jmck").string();
  Trainer trainer = (resume && fs::exists(latest)) ? Trainer::load(latest)
                                                   : Trainer(cfg);
  if (resume && fs::exists(latest))
    std::cout << "resuming run " << trainer.run_id() << " at epoch "
              << trainer.epochs_done() << "\n";
  trainer.fit(dataset, perturber, out_dir, &std::cout);
  std::cout << "checkpoint: " << latest << "\n";
  return kExitOk;
}

int cmd_finetune(const std::string& checkpoint, int steps,
                 const std::string& oracle_endpoint,
                 const std::string& instructions_path,
                 const std::string& data_dir, const std::string& out_dir,
                 int oracle_retries) {
  require_file(checkpoint, "checkpoint");
  require_file(instructions_path, "instruction file");
  Trainer trainer = Trainer::load(checkpoint);
  std::unique_ptr<OracleClient> oracle = OracleClient::open(
      make_oracle_config(oracle_endpoint, oracle_retries));
  OracleOnlyPerturber perturber(*oracle, load_instructions(instructions_path));
  std::vector<Image> dataset =
      load_dataset(data_dir, trainer.config().image_size);
  trainer.finetune(dataset, perturber, steps, out_dir, &std::cout);
  std::cout << "checkpoint: " << (fs::path(out_dir) / "latest.jmck").string()
            << " (parent " << trainer.parent_id() << ")\n";
  return kExitOk;
}

int cmd_embed(const std::string& checkpoint, const std::string& key_path,
              const std::string& data_dir, const std::string& out_dir) {
  require_file(checkpoint, "checkpoint");
  require_file(key_path, "key file");
  Trainer trainer = Trainer::load(checkpoint);
  JigsawKey key = load_key(key_path);
  fs::create_directories(out_dir);
  for (const auto& f : list_images(data_dir)) {
    Image img = load_image_sized(f, trainer.config().image_size, std::cerr);
    Image wm = embed(img, key, trainer.encoder(), trainer.config().blend_width);
    write_png((fs::path(out_dir) / fs::path(f).filename()).string(), wm);
  }
  std::cout << "watermarked images -> " << out_dir << "\n";
  return kExitOk;
}

int cmd_detect(const std::string& checkpoint, const std::string& key_path,
               const std::string& watermarked_dir, const std::string& clean_dir,
               const std::string& out_dir) {
  require_file(checkpoint, "checkpoint");
  require_file(key_path, "key file");
  Trainer trainer = Trainer::load(checkpoint);
  JigsawKey key = load_key(key_path);
  const int size = trainer.config().image_size;

  auto score_dir = [&](const std::string& dir, const std::string& label) {
    std::vector<std::string> files = list_images(dir);
    std::vector<Image> imgs;
    for (const auto& f : files)
      imgs.push_back(load_image_sized(f, size, std::cerr));
    std::vector<double> scores = detect_batch(imgs, key, trainer.decoder());
    std::string path = fresh_path(out_dir, "scores_" + label, ".jsonl");
    write_scores_jsonl(path, files, scores);
    std::cout << "scores: " << path << "\n";
    return scores;
  };

  if (!watermarked_dir.empty() && !clean_dir.empty()) {
    std::vector<double> pos = score_dir(watermarked_dir, "watermarked");
    std::vector<double> neg = score_dir(clean_dir, "clean");
    DetectionReport report =
        make_report(std::move(pos), std::move(neg), key.id(), "clean");
    std::string path = fresh_path(out_dir, "report", ".json");
    write_text_file(path, report.to_json() + "\n");
    std::cout << "report: " << path << "\n";
  } else if (!watermarked_dir.empty()) {
    score_dir(watermarked_dir, "watermarked");
  } else if (!clean_dir.empty()) {
    score_dir(clean_dir, "clean");
  } else {
    throw ConfigError("detect: provide --watermarked and/or --clean");
  }
  return kExitOk;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& key_path,
                 const std::string& data_dir, const std::string& out_dir,
                 const std::string& suite, int mismatch_max, uint64_t seed,
                 const std::string& oracle_endpoint,
                 const std::string& instructions_path,
                 const std::string& hav_model_path, double hav_lo,
                 double hav_hi, int oracle_retries) {
  require_file(checkpoint, "checkpoint");
  require_file(key_path, "key file");
  Trainer trainer = Trainer::load(checkpoint);
  JigsawKey key = load_key(key_path);

  if (suite == "type1") {
    EvalData d = embed_dataset(data_dir, trainer, key);
    for (const auto& [label, spec] : type1_eval_suite()) {
      std::vector<Image> pos_imgs, neg_imgs;
      for (size_t i = 0; i < d.images.size(); ++i) {
        uint64_t s = derive_seed(seed, fnv1a64(label.data(), label.size()), i);
        pos_imgs.push_back(apply_perturbation(spec, d.watermarked[i], s));
        neg_imgs.push_back(apply_perturbation(spec, d.images[i], s));
      }
      DetectionReport r = make_report(
          detect_batch(pos_imgs, key, trainer.decoder()),
          detect_batch(neg_imgs, key, trainer.decoder()), key.id(), label);
      std::string path = fresh_path(out_dir, "report_" + label, ".json");
      write_text_file(path, r.to_json() + "\n");
      std::cout << "report: " << path << "\n";
    }
    return kExitOk;
  }

  if (suite == "mismatch") {
    std::vector<Image> imgs;
    for (const auto& f : list_images(data_dir))
      imgs.push_back(
          load_image_sized(f, trainer.config().image_size, std::cerr));
    std::vector<DetectionReport> reports =
        mismatch_study(imgs, key, trainer.encoder(), trainer.decoder(),
                       mismatch_max, seed, false, trainer.config().blend_width);
    for (const auto& r : reports) {
      std::string path = fresh_path(out_dir, "report_" + r.perturbation, ".json");
      write_text_file(path, r.to_json() + "\n");
      std::cout << "report: " << path << "\n";
    }
    return kExitOk;
  }

  if (suite == "oracle") {
    if (oracle_endpoint.empty() || instructions_path.empty())
      throw ConfigError("oracle suite requires --oracle and --instructions");
    std::unique_ptr<OracleClient> oracle = OracleClient::open(
        make_oracle_config(oracle_endpoint, oracle_retries));
    std::vector<std::string> instructions =
        load_instructions(instructions_path);
    EvalData d = embed_dataset(data_dir, trainer, key);

    std::vector<std::pair<Image, Image>> pairs;
    for (size_t i = 0; i < d.images.size(); ++i)
      pairs.emplace_back(d.images[i], d.watermarked[i]);
    std::vector<std::pair<Image, Image>> edited =
        oracle_perturb(pairs, instructions, *oracle, 1, seed);

    std::vector<size_t> keep(edited.size());
    for (size_t i = 0; i < keep.size(); ++i) keep[i] = i;
    if (!hav_model_path.empty()) {
      HavModel hav = HavModel::load(hav_model_path);
      std::vector<std::pair<const Image*, const Image*>> hav_pairs;
      for (size_t i = 0; i < edited.size(); ++i)
        hav_pairs.emplace_back(&d.watermarked[i], &edited[i].second);
      keep = hav_filter(hav, hav_pairs, hav_lo, hav_hi);
      std::cout << "variation band [" << hav_lo << "," << hav_hi << "] keeps "
                << keep.size() << "/" << edited.size() << " pairs\n";
    }
    if (keep.empty()) throw ConfigError("no pairs left after the score band");

    std::vector<Image> pos_imgs, neg_imgs;
    for (size_t i : keep) {
      pos_imgs.push_back(edited[i].second);
      neg_imgs.push_back(edited[i].first);
    }
    DetectionReport r = make_report(
        detect_batch(pos_imgs, key, trainer.decoder()),
        detect_batch(neg_imgs, key, trainer.decoder()), key.id(), "oracle");
    std::string path = fresh_path(out_dir, "report_oracle", ".json");
    write_text_file(path, r.to_json() + "\n");
    std::cout << "report: " << path << "\n";
    return kExitOk;
  }

  throw ConfigError("unknown suite: " + suite);
}

int cmd_attack(const std::string& checkpoint, const std::string& key_path,
               const std::string& data_dir, const std::string& method,
               const std::string& out_path, double budget, int steps,
               const std::string& oracle_endpoint,
               const std::string& hav_model_path, int surrogate_n,
               uint64_t seed, int oracle_retries) {
  require_file(checkpoint, "checkpoint");
  require_file(key_path, "key file");
  Trainer trainer = Trainer::load(checkpoint);
  JigsawKey key = load_key(key_path);
  EvalData d = embed_dataset(data_dir, trainer, key);

  // operating point: threshold at 1% FPR on the un-attacked distribution
  DetectionReport base =
      make_report(detect_batch(d.watermarked, key, trainer.decoder()),
                  detect_batch(d.images, key, trainer.decoder()), key.id(),
                  "pre_attack");
  AttackConfig cfg;
  cfg.linf_budget = budget;
  cfg.steps = steps;

  std::vector<Image> attacked;
  if (method == "pgd") {
    attacked = pgd_attack_batch(d.watermarked, key, trainer.decoder(), cfg);
  } else if (method == "surrogate") {
    std::vector<Image> wm_train, clean_train;
    for (int i = 0; i < surrogate_n; ++i) {
      Image img = synth_image(trainer.config().image_size,
                              derive_seed(seed, 0x5a, static_cast<uint64_t>(i)));
      JigsawKey k = new_key(key.grid_rows, key.grid_cols,
                            derive_seed(seed, 0x5b, static_cast<uint64_t>(i)));
      wm_train.push_back(embed(img, k, trainer.encoder(),
                               trainer.config().blend_width));
      clean_train.push_back(std::move(img));
    }
    HavModelConfig scfg;
    scfg.input_size = trainer.config().image_size;
    SurrogateModel surrogate(scfg, derive_seed(seed, 0x5c));
    SurrogateTrainConfig tcfg;
    tcfg.seed = derive_seed(seed, 0x5d);
    train_surrogate(surrogate, wm_train, clean_train, tcfg, &std::cout);
    attacked = surrogate_attack_batch(d.watermarked, surrogate, cfg);
  } else if (method == "regen") {
    if (oracle_endpoint.empty())
      throw ConfigError("regen attack requires --oracle");
    std::unique_ptr<OracleClient> oracle = OracleClient::open(
        make_oracle_config(oracle_endpoint, oracle_retries));
    for (const auto& img : d.watermarked)
      attacked.push_back(regeneration_attack(img, *oracle));
    cfg.linf_budget = 0.0;
    cfg.steps = 0;
  } else {
    throw ConfigError("unknown attack method: " + method);
  }

  AttackReport report;
  report.attack = method;
  report.budget = cfg.linf_budget;
  report.steps = cfg.steps;
  report.asr = asr(detect_batch(attacked, key, trainer.decoder()),
                   base.threshold);
  if (!hav_model_path.empty()) {
    HavModel hav = HavModel::load(hav_model_path);
    std::vector<std::pair<const Image*, const Image*>> pairs;
    for (size_t i = 0; i < attacked.size(); ++i)
      pairs.emplace_back(&d.watermarked[i], &attacked[i]);
    std::vector<double> scores = hav.score_batch(pairs);
    double sum = 0;
    for (double s : scores) sum += s;
    report.mean_hav = scores.empty() ? 0.0 : sum / scores.size();
  } else {
    std::cerr << "note: no --hav-model given; mean_hav reported as 0\n";
  }
  write_text_file(out_path, report.to_json() + "\n");
  std::cout << "attack report: " << out_path << " (asr " << report.asr << ")\n";
  return kExitOk;
}

int cmd_hav_train(const std::string& groups_path, const std::string& out_path,
                  int steps, uint64_t seed, bool calibrate) {
  require_file(groups_path, "ranking file");
  std::vector<RankingGroup> groups = load_ranking_groups(groups_path);
  HavTrainConfig cfg;
  cfg.steps = steps;
  cfg.seed = seed;
  ImageSource source = caching_png_source();
  // infer resolution from the first original
  cfg.model.input_size = source(groups.at(0).original).height();
  HavModel model = train_hav(groups, cfg, source, &std::cout);
  if (calibrate) calibrate_hav(model, groups, source);
  model.save(out_path);
  std::cout << "hav model -> " << out_path << "\n";
  return kExitOk;
}

int cmd_hav_score(const std::string& model_path, const std::string& original,
                  const std::string& variant) {
  require_file(model_path, "model file");
  require_file(original, "image");
  require_file(variant, "image");
  HavModel model = HavModel::load(model_path);
  Image a = read_png(original);
  Image b = read_png(variant);
  std::cout << model.score(a, b) << "\n";
  return kExitOk;
}

int cmd_hav_eval(const std::string& model_path, const std::string& groups_path) {
  require_file(model_path, "model file");
  require_file(groups_path, "ranking file");
  HavModel model = HavModel::load(model_path);
  std::vector<RankingGroup> groups = load_ranking_groups(groups_path);
  double ordered = 0.0;
  double mean_foot = hav_spearman_eval(model, groups, caching_png_source(),
                                       &ordered);
  nlohmann::ordered_json j;
  j["groups"] = groups.size();
  j["mean_footrule"] = mean_foot;
  j["ordered_fraction"] = ordered;
  std::cout << j.dump() << "\n";
  return kExitOk;
}

int cmd_hav_filter(const std::string& model_path, const std::string& originals,
                   const std::string& variants, double lo, double hi) {
  require_file(model_path, "model file");
  HavModel model = HavModel::load(model_path);
  std::vector<std::string> ofiles = list_images(originals);
  std::vector<std::string> vfiles = list_images(variants);
  if (ofiles.size() != vfiles.size())
    throw ConfigError("hav filter: directory sizes differ");
  std::vector<Image> oimgs, vimgs;
  for (size_t i = 0; i < ofiles.size(); ++i) {
    oimgs.push_back(read_png(ofiles[i]));
    vimgs.push_back(read_png(vfiles[i]));
  }
  std::vector<std::pair<const Image*, const Image*>> pairs;
  for (size_t i = 0; i < oimgs.size(); ++i)
    pairs.emplace_back(&oimgs[i], &vimgs[i]);
  for (size_t idx : hav_filter(model, pairs, lo, hi))
    std::cout << fs::path(vfiles[idx]).filename().string() << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"jigmark: jigsaw-keyed invisible image watermarking"};
  app.require_subcommand(1);
  std::function<int()> action;

  uint64_t seed = 0;

  // ---- key ----
  auto* key = app.add_subcommand("key", "create and derive jigsaw keys");
  key->require_subcommand(1);
  {
    auto* neu = key->add_subcommand("new", "sample a fresh key");
    auto grid = std::make_shared<std::string>("4x4");
    auto out = std::make_shared<std::string>();
    neu->add_option("--grid", *grid, "grid as RxC (default 4x4)");
    neu->add_option("--seed", seed, "rng seed");
    neu->add_option("--out", *out, "output key file")->required();
    neu->callback([&action, grid, &seed, out]() {
      action = [grid, &seed, out]() { return cmd_key_new(*grid, seed, *out); };
    });

    auto* pert = key->add_subcommand("perturb", "swap block pairs of a key");
    auto kpath = std::make_shared<std::string>();
    auto pout = std::make_shared<std::string>();
    auto pairs = std::make_shared<int>(1);
    pert->add_option("--key", *kpath, "input key file")->required();
    pert->add_option("--pairs", *pairs, "number of swapped pairs");
    pert->add_option("--seed", seed, "rng seed");
    pert->add_option("--out", *pout, "output key file")->required();
    pert->callback([&action, kpath, pairs, &seed, pout]() {
      action = [kpath, pairs, &seed, pout]() {
        return cmd_key_perturb(*kpath, *pairs, seed, *pout);
      };
    });
  }

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate desk-scale datasets");
  synth->require_subcommand(1);
  {
    auto* imgs = synth->add_subcommand("images", "procedural PNG corpus");
    auto n = std::make_shared<int>(128);
    auto size = std::make_shared<int>(64);
    auto out = std::make_shared<std::string>();
    imgs->add_option("--n", *n, "image count");
    imgs->add_option("--size", *size, "square size");
    imgs->add_option("--seed", seed, "rng seed");
    imgs->add_option("--out", *out, "output directory")->required();
    imgs->callback([&action, n, size, &seed, out]() {
      action = [n, size, &seed, out]() {
        write_synth_dataset(*out, *n, *size, seed);
        std::cout << *n << " images -> " << *out << "\n";
        return kExitOk;
      };
    });

    auto* hav = synth->add_subcommand("hav", "noise-ladder ranking groups");
    auto groups = std::make_shared<int>(100);
    auto size2 = std::make_shared<int>(64);
    auto out2 = std::make_shared<std::string>();
    hav->add_option("--groups", *groups, "group count");
    hav->add_option("--size", *size2, "square size");
    hav->add_option("--seed", seed, "rng seed");
    hav->add_option("--out", *out2, "output directory")->required();
    hav->callback([&action, groups, size2, &seed, out2]() {
      action = [groups, size2, &seed, out2]() {
        std::string path = write_synth_hav_dataset(*out2, *groups, *size2, seed);
        std::cout << "groups -> " << path << "\n";
        return kExitOk;
      };
    });
  }

  // ---- train ----
  {
    auto* train = app.add_subcommand("train", "contrastive watermark training");
    auto config = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto resume = std::make_shared<bool>(false);
    auto oracle = std::make_shared<std::string>();
    auto instructions = std::make_shared<std::string>();
    auto seed_override = std::make_shared<int64_t>(-1);
    train->add_option("--config", *config, "train config JSON")->required();
    train->add_option("--data", *data, "dataset directory")->required();
    train->add_option("--out", *out, "output directory")->required();
    train->add_flag("--resume", *resume, "continue from latest checkpoint");
    train->add_option("--oracle", *oracle, "oracle endpoint (cmd:|http://)");
    train->add_option("--instructions", *instructions, "instruction JSON");
    train->add_option("--seed", *seed_override, "seed override");
    auto retries = std::make_shared<int>(3);
    train->add_option("--oracle-retries", *retries, "oracle retry count");
    train->callback([=, &action]() {
      action = [=]() {
        return cmd_train(*config, *data, *out, *resume, *seed_override,
                         *oracle, *instructions, *retries);
      };
    });
  }

  // ---- finetune ----
  {
    auto* ft = app.add_subcommand("finetune",
                                  "adapt a checkpoint to a new oracle");
    auto ckpt = std::make_shared<std::string>();
    auto steps = std::make_shared<int>(600);
    auto oracle = std::make_shared<std::string>();
    auto instructions = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    ft->add_option("--checkpoint", *ckpt)->required();
    ft->add_option("--steps", *steps, "optimizer steps");
    ft->add_option("--oracle", *oracle, "oracle endpoint")->required();
    ft->add_option("--instructions", *instructions)->required();
    ft->add_option("--data", *data, "dataset directory")->required();
    ft->add_option("--out", *out, "output directory")->required();
    auto retries = std::make_shared<int>(3);
    ft->add_option("--oracle-retries", *retries, "oracle retry count");
    ft->callback([=, &action]() {
      action = [=]() {
        return cmd_finetune(*ckpt, *steps, *oracle, *instructions, *data,
                            *out, *retries);
      };
    });
  }

  // ---- embed / detect ----
  {
    auto* em = app.add_subcommand("embed", "watermark a directory of images");
    auto ckpt = std::make_shared<std::string>();
    auto kpath = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    em->add_option("--checkpoint", *ckpt)->required();
    em->add_option("--key", *kpath)->required();
    em->add_option("--data", *data)->required();
    em->add_option("--out", *out)->required();
    em->callback([=, &action]() {
      action = [=]() { return cmd_embed(*ckpt, *kpath, *data, *out); };
    });

    auto* de = app.add_subcommand("detect", "score images under a key");
    auto ckpt2 = std::make_shared<std::string>();
    auto kpath2 = std::make_shared<std::string>();
    auto wm = std::make_shared<std::string>();
    auto clean = std::make_shared<std::string>();
    auto out2 = std::make_shared<std::string>();
    de->add_option("--checkpoint", *ckpt2)->required();
    de->add_option("--key", *kpath2)->required();
    de->add_option("--watermarked", *wm, "watermarked image dir");
    de->add_option("--clean", *clean, "clean image dir");
    de->add_option("--out", *out2, "report directory")->required();
    de->callback([=, &action]() {
      action = [=]() {
        return cmd_detect(*ckpt2, *kpath2, *wm, *clean, *out2);
      };
    });
  }

  // ---- evaluate ----
  {
    auto* ev = app.add_subcommand("evaluate", "robustness report suites");
    auto ckpt = std::make_shared<std::string>();
    auto kpath = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto suite = std::make_shared<std::string>("type1");
    auto mismatch_max = std::make_shared<int>(8);
    auto oracle = std::make_shared<std::string>();
    auto instructions = std::make_shared<std::string>();
    auto hav_model = std::make_shared<std::string>();
    auto hav_lo = std::make_shared<double>(0.3);
    auto hav_hi = std::make_shared<double>(0.5);
    ev->add_option("--checkpoint", *ckpt)->required();
    ev->add_option("--key", *kpath)->required();
    ev->add_option("--data", *data)->required();
    ev->add_option("--out", *out)->required();
    ev->add_option("--suite", *suite, "type1 | mismatch | oracle");
    ev->add_option("--mismatch-max", *mismatch_max, "largest swapped-pair count");
    ev->add_option("--oracle", *oracle, "oracle endpoint");
    ev->add_option("--instructions", *instructions, "instruction JSON");
    ev->add_option("--hav-model", *hav_model, "variation scorer for the band");
    ev->add_option("--hav-lo", *hav_lo);
    ev->add_option("--hav-hi", *hav_hi);
    ev->add_option("--seed", seed, "rng seed");
    auto retries = std::make_shared<int>(3);
    ev->add_option("--oracle-retries", *retries, "oracle retry count");
    ev->callback([=, &action, &seed]() {
      action = [=, &seed]() {
        return cmd_evaluate(*ckpt, *kpath, *data, *out, *suite, *mismatch_max,
                            seed, *oracle, *instructions, *hav_model, *hav_lo,
                            *hav_hi, *retries);
      };
    });
  }

  // ---- attack ----
  {
    auto* at = app.add_subcommand("attack", "watermark removal attacks");
    auto ckpt = std::make_shared<std::string>();
    auto kpath = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto method = std::make_shared<std::string>("pgd");
    auto out = std::make_shared<std::string>();
    auto budget = std::make_shared<double>(8.0 / 255.0);
    auto steps = std::make_shared<int>(40);
    auto oracle = std::make_shared<std::string>();
    auto hav_model = std::make_shared<std::string>();
    auto surrogate_n = std::make_shared<int>(2000);
    at->add_option("--checkpoint", *ckpt)->required();
    at->add_option("--key", *kpath)->required();
    at->add_option("--data", *data)->required();
    at->add_option("--method", *method, "pgd | surrogate | regen");
    at->add_option("--out", *out, "report path")->required();
    at->add_option("--budget", *budget, "l-inf budget");
    at->add_option("--steps", *steps, "attack iterations");
    at->add_option("--oracle", *oracle, "oracle endpoint (regen)");
    at->add_option("--hav-model", *hav_model, "variation scorer");
    at->add_option("--surrogate-n", *surrogate_n,
                   "surrogate training images per class");
    at->add_option("--seed", seed, "rng seed");
    auto retries = std::make_shared<int>(3);
    at->add_option("--oracle-retries", *retries, "oracle retry count");
    at->callback([=, &action, &seed]() {
      action = [=, &seed]() {
        return cmd_attack(*ckpt, *kpath, *data, *method, *out, *budget, *steps,
                          *oracle, *hav_model, *surrogate_n, seed, *retries);
      };
    });
  }

  // ---- hav ----
  auto* hav = app.add_subcommand("hav", "human-aligned variation scorer");
  hav->require_subcommand(1);
  {
    auto* tr = hav->add_subcommand("train", "fit the scorer on ranked groups");
    auto groups = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto steps = std::make_shared<int>(2000);
    auto calibrate = std::make_shared<bool>(true);
    tr->add_option("--groups", *groups, "ranking JSONL")->required();
    tr->add_option("--out", *out, "model path")->required();
    tr->add_option("--steps", *steps);
    tr->add_flag("--no-calibrate{false}", *calibrate,
                 "skip affine calibration");
    tr->add_option("--seed", seed);
    tr->callback([=, &action, &seed]() {
      action = [=, &seed]() {
        return cmd_hav_train(*groups, *out, *steps, seed, *calibrate);
      };
    });

    auto* sc = hav->add_subcommand("score", "score one (original, variant)");
    auto model = std::make_shared<std::string>();
    auto orig = std::make_shared<std::string>();
    auto variant = std::make_shared<std::string>();
    sc->add_option("--model", *model)->required();
    sc->add_option("--original", *orig)->required();
    sc->add_option("--variant", *variant)->required();
    sc->callback([=, &action]() {
      action = [=]() { return cmd_hav_score(*model, *orig, *variant); };
    });

    auto* ev = hav->add_subcommand("eval", "footrule against annotator ranks");
    auto model2 = std::make_shared<std::string>();
    auto groups2 = std::make_shared<std::string>();
    ev->add_option("--model", *model2)->required();
    ev->add_option("--groups", *groups2)->required();
    ev->callback([=, &action]() {
      action = [=]() { return cmd_hav_eval(*model2, *groups2); };
    });

    auto* fi = hav->add_subcommand("filter", "keep pairs inside a score band");
    auto model3 = std::make_shared<std::string>();
    auto originals = std::make_shared<std::string>();
    auto variants = std::make_shared<std::string>();
    auto lo = std::make_shared<double>(0.3);
    auto hi = std::make_shared<double>(0.5);
    fi->add_option("--model", *model3)->required();
    fi->add_option("--originals", *originals)->required();
    fi->add_option("--variants", *variants)->required();
    fi->add_option("--lo", *lo);
    fi->add_option("--hi", *hi);
    fi->callback([=, &action]() {
      action = [=]() {
        return cmd_hav_filter(*model3, *originals, *variants, *lo, *hi);
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    return action ? action() : kExitConfig;
  } catch (const OracleTransportError& e) {
    std::cerr << "oracle error: " << e.what() << "\n";
    return kExitOracle;
  } catch (const OracleProtocolError& e) {
    std::cerr << "oracle error: " << e.what() << "\n";
    return kExitOracle;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace jigmark::cli
