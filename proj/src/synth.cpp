#include "jigmark/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <unordered_map>

#include "jigmark/perturb.hpp"

namespace jigmark {

namespace fs = std::filesystem;

namespace {

/// Smooth value noise: bilinearly interpolated random lattice.
void add_value_noise(Image& img, Rng& rng, int cells, double amplitude) {
  const int gh = cells + 1, gw = cells + 1;
  std::vector<double> lattice(static_cast<size_t>(gh) * gw * 3);
  for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) {
        double fy = static_cast<double>(y) / img.height() * cells;
        double fx = static_cast<double>(x) / img.width() * cells;
        int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
        double wy = fy - y0, wx = fx - x0;
        auto at = [&](int yy, int xx) {
          return lattice[(static_cast<size_t>(c) * gh + yy) * gw + xx];
        };
        double v = at(y0, x0) * (1 - wy) * (1 - wx) +
                   at(y0, x0 + 1) * (1 - wy) * wx +
                   at(y0 + 1, x0) * wy * (1 - wx) + at(y0 + 1, x0 + 1) * wy * wx;
        img.at(c, y, x) += amplitude * v;
      }
}

}  // namespace

Image synth_image(int size, uint64_t seed) {
  Rng rng = Rng::seeded(seed);
  Image img(size, size);

  // base: random linear gradient per channel
  for (int c = 0; c < 3; ++c) {
    double v0 = rng.uniform(0.15, 0.85);
    double gx = rng.uniform(-0.5, 0.5), gy = rng.uniform(-0.5, 0.5);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img.at(c, y, x) = v0 + gx * (static_cast<double>(x) / size - 0.5) +
                          gy * (static_cast<double>(y) / size - 0.5);
  }

  // soft ellipses and rectangles
  const int shapes = 3 + static_cast<int>(rng.below(5));
  for (int s = 0; s < shapes; ++s) {
    double cx = rng.uniform(0.1, 0.9) * size;
    double cy = rng.uniform(0.1, 0.9) * size;
    double rx = rng.uniform(0.08, 0.35) * size;
    double ry = rng.uniform(0.08, 0.35) * size;
    double col[3] = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0),
                     rng.uniform(0.0, 1.0)};
    double opacity = rng.uniform(0.35, 0.9);
    bool rect = rng.coin();
    double angle = rng.uniform(0.0, 3.14159265);
    double ca = std::cos(angle), sa = std::sin(angle);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double dx = (x - cx), dy = (y - cy);
        double u = (dx * ca + dy * sa) / rx;
        double v = (-dx * sa + dy * ca) / ry;
        double d = rect ? std::max(std::abs(u), std::abs(v))
                        : std::sqrt(u * u + v * v);
        if (d < 1.0) {
          double a = opacity * std::min(1.0, (1.0 - d) * 6.0);
          for (int c = 0; c < 3; ++c)
            img.at(c, y, x) = (1 - a) * img.at(c, y, x) + a * col[c];
        }
      }
  }

  add_value_noise(img, rng, 6, 0.10);
  add_value_noise(img, rng, 16, 0.05);

  // light blur so the statistics resemble photographs rather than noise
  PerturbationSpec blur;
  blur.kind = PerturbKind::kGaussianBlur;
  blur.blur_kernel = 3;
  blur.blur_sigma = 0.7;
  img.clamp01();
  img = apply_perturbation(blur, img, 0);
  img.clamp01();
  return img;
}

std::vector<Image> synth_dataset(int count, int size, uint64_t seed) {
  std::vector<Image> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(synth_image(size, derive_seed(seed, static_cast<uint64_t>(i))));
  return out;
}

std::vector<std::string> write_synth_dataset(const std::string& dir, int count,
                                             int size, uint64_t seed) {
  fs::create_directories(dir);
  std::vector<std::string> paths;
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.png", i);
    std::string path = (fs::path(dir) / name).string();
    write_png(path, synth_image(size, derive_seed(seed, static_cast<uint64_t>(i))));
    paths.push_back(std::move(path));
  }
  return paths;
}

const std::vector<double>& synth_noise_levels() {
  static const std::vector<double> levels = {0.02, 0.06, 0.12, 0.22, 0.38};
  return levels;
}

SynthGroup synth_ranking_group(int size, uint64_t seed,
                               const std::string& id_prefix) {
  SynthGroup out;
  Image base = synth_image(size, derive_seed(seed, 0xba5e));
  out.images.emplace_back(id_prefix + "_orig", base);
  out.group.original = id_prefix + "_orig";

  const auto& levels = synth_noise_levels();
  // present variants in a shuffled order; ranks recover the noise ladder
  std::vector<int> order = {0, 1, 2, 3, 4};
  Rng rng = Rng::seeded(derive_seed(seed, 0x0bd));
  rng.shuffle(order);

  std::vector<int> rank_row(5, 0);
  for (size_t slot = 0; slot < 5; ++slot) {
    int level = order[slot];
    PerturbationSpec noise;
    noise.kind = PerturbKind::kGaussianNoise;
    noise.noise_std = levels[static_cast<size_t>(level)];
    Image variant = apply_perturbation(
        noise, base, derive_seed(seed, 0x70, static_cast<uint64_t>(slot)));
    std::string id = id_prefix + "_v" + std::to_string(slot);
    out.images.emplace_back(id, std::move(variant));
    out.group.variants.push_back(id);
    rank_row[slot] = level;  // rank 0 = weakest noise = most similar
  }
  out.group.ranks.push_back(rank_row);
  out.group.validate();
  return out;
}

ImageSource SynthHavDataset::source() const {
  auto index = std::make_shared<std::unordered_map<std::string, const Image*>>();
  for (const auto& [key, img] : images) (*index)[key] = &img;
  return [index](const std::string& id) -> Image {
    auto it = index->find(id);
    if (it == index->end())
      throw std::out_of_range("synth hav dataset: unknown image id " + id);
    return *it->second;
  };
}

SynthHavDataset synth_hav_dataset(int group_count, int size, uint64_t seed) {
  SynthHavDataset ds;
  for (int i = 0; i < group_count; ++i) {
    SynthGroup g = synth_ranking_group(
        size, derive_seed(seed, static_cast<uint64_t>(i), 0x9a0),
        "g" + std::to_string(i));
    ds.groups.push_back(std::move(g.group));
    for (auto& kv : g.images) ds.images.push_back(std::move(kv));
  }
  return ds;
}

std::string write_synth_hav_dataset(const std::string& dir, int group_count,
                                    int size, uint64_t seed) {
  fs::create_directories(dir);
  SynthHavDataset ds = synth_hav_dataset(group_count, size, seed);
  // rewrite ids as real file paths
  std::vector<RankingGroup> groups = ds.groups;
  for (auto& [id, img] : ds.images) {
    std::string path = (fs::path(dir) / (id + ".png")).string();
    write_png(path, img);
    for (auto& g : groups) {
      if (g.original == id) g.original = path;
      for (auto& v : g.variants)
        if (v == id) v = path;
    }
  }
  std::string groups_path = (fs::path(dir) / "groups.jsonl").string();
  save_ranking_groups(groups_path, groups);
  return groups_path;
}

}  // namespace jigmark
