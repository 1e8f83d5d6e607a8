#include "jigmark/jigsaw.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace jigmark {

bool JigsawKey::is_identity() const {
  for (int i = 0; i < blocks(); ++i)
    if (permutation[static_cast<size_t>(i)] != i) return false;
  for (const auto& f : flips)
    if (f.first || f.second) return false;
  return true;
}

void JigsawKey::validate() const {
  if (grid_rows <= 0 || grid_cols <= 0)
    throw std::invalid_argument("JigsawKey: grid dims must be positive");
  const size_t n = static_cast<size_t>(blocks());
  if (permutation.size() != n)
    throw std::invalid_argument("JigsawKey: permutation length mismatch");
  if (flips.size() != n)
    throw std::invalid_argument("JigsawKey: flips length mismatch");
  std::vector<bool> seen(n, false);
  for (int p : permutation) {
    if (p < 0 || p >= blocks() || seen[static_cast<size_t>(p)])
      throw std::invalid_argument("JigsawKey: permutation is not a bijection");
    seen[static_cast<size_t>(p)] = true;
  }
}

std::string JigsawKey::id() const {
  std::string s = key_to_json(*this);
  return hex64(fnv1a64(s.data(), s.size()));
}

JigsawKey new_key(int grid_rows, int grid_cols, uint64_t seed) {
  if (grid_rows <= 0 || grid_cols <= 0 || grid_rows * grid_cols < 2)
    throw std::invalid_argument("new_key: grid must have at least 2 blocks");
  Rng rng = Rng::seeded(seed);
  JigsawKey key;
  key.grid_rows = grid_rows;
  key.grid_cols = grid_cols;
  key.permutation.resize(static_cast<size_t>(key.blocks()));
  std::iota(key.permutation.begin(), key.permutation.end(), 0);
  rng.shuffle(key.permutation);
  key.flips.reserve(static_cast<size_t>(key.blocks()));
  for (int i = 0; i < key.blocks(); ++i)
    key.flips.emplace_back(rng.coin(), rng.coin());
  return key;
}

JigsawKey new_key_distinct(int grid_rows, int grid_cols, Rng& rng,
                           const JigsawKey& avoid) {
  for (int attempt = 0; attempt < 1024; ++attempt) {
    JigsawKey k = new_key(grid_rows, grid_cols, rng.next_u64());
    if (!(k == avoid)) return k;
  }
  throw std::runtime_error("new_key_distinct: could not sample a distinct key");
}

JigsawKey identity_key(int grid_rows, int grid_cols) {
  JigsawKey key;
  key.grid_rows = grid_rows;
  key.grid_cols = grid_cols;
  key.permutation.resize(static_cast<size_t>(key.blocks()));
  std::iota(key.permutation.begin(), key.permutation.end(), 0);
  key.flips.assign(static_cast<size_t>(key.blocks()), {false, false});
  return key;
}

JigsawKey perturb_key(const JigsawKey& key, int n_swapped_pairs,
                      uint64_t seed) {
  key.validate();
  const int n = key.blocks();
  if (n_swapped_pairs < 1 || n_swapped_pairs > n / 2)
    throw std::invalid_argument(
        "perturb_key: n_swapped_pairs must be in [1, blocks/2]");
  Rng rng = Rng::seeded(seed);
  std::vector<int> positions(static_cast<size_t>(n));
  std::iota(positions.begin(), positions.end(), 0);
  rng.shuffle(positions);
  JigsawKey out = key;
  for (int p = 0; p < n_swapped_pairs; ++p) {
    int a = positions[static_cast<size_t>(2 * p)];
    int b = positions[static_cast<size_t>(2 * p + 1)];
    std::swap(out.permutation[static_cast<size_t>(a)],
              out.permutation[static_cast<size_t>(b)]);
  }
  return out;
}

namespace {

void check_divisible(const Image& img, const JigsawKey& key) {
  if (img.height() % key.grid_rows != 0 || img.width() % key.grid_cols != 0)
    throw std::invalid_argument(
        "shuffle: image dimensions must divide evenly by the key grid");
}

/// Copy source block sb into destination block db of `out`, flipping as told.
void move_block(const Image& in, Image& out, const JigsawKey& key, int db,
                int sb, bool fh, bool fv, bool inverse) {
  const int bh = in.height() / key.grid_rows;
  const int bw = in.width() / key.grid_cols;
  const int dy0 = (db / key.grid_cols) * bh;
  const int dx0 = (db % key.grid_cols) * bw;
  const int sy0 = (sb / key.grid_cols) * bh;
  const int sx0 = (sb % key.grid_cols) * bw;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < bh; ++y)
      for (int x = 0; x < bw; ++x) {
        int yy = fv ? bh - 1 - y : y;
        int xx = fh ? bw - 1 - x : x;
        if (!inverse)
          out.at(c, dy0 + y, dx0 + x) = in.at(c, sy0 + yy, sx0 + xx);
        else
          out.at(c, sy0 + yy, sx0 + xx) = in.at(c, dy0 + y, dx0 + x);
      }
}

}  // namespace

Image apply_shuffle(const Image& img, const JigsawKey& key) {
  key.validate();
  check_divisible(img, key);
  Image out(img.height(), img.width());
  for (int b = 0; b < key.blocks(); ++b)
    move_block(img, out, key, b, key.permutation[static_cast<size_t>(b)],
               key.flips[static_cast<size_t>(b)].first,
               key.flips[static_cast<size_t>(b)].second, false);
  return out;
}

Image invert_shuffle(const Image& img, const JigsawKey& key) {
  key.validate();
  check_divisible(img, key);
  Image out(img.height(), img.width());
  for (int b = 0; b < key.blocks(); ++b)
    move_block(img, out, key, b, key.permutation[static_cast<size_t>(b)],
               key.flips[static_cast<size_t>(b)].first,
               key.flips[static_cast<size_t>(b)].second, true);
  return out;
}

double permutation_entropy_bits(int blocks) {
  double bits = 0.0;
  for (int i = 2; i <= blocks; ++i) bits += std::log2(static_cast<double>(i));
  return bits;
}

std::string key_to_json(const JigsawKey& key) {
  key.validate();
  nlohmann::ordered_json j;
  j["version"] = key.version;
  j["grid"] = {key.grid_rows, key.grid_cols};
  j["permutation"] = key.permutation;
  auto flips = nlohmann::ordered_json::array();
  for (const auto& f : key.flips) flips.push_back({f.first, f.second});
  j["flips"] = flips;
  return j.dump();
}

JigsawKey key_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  JigsawKey key;
  key.version = j.at("version").get<std::string>();
  if (key.version != JigsawKey::kVersion)
    throw std::invalid_argument("key file: unsupported version " + key.version);
  key.grid_rows = j.at("grid").at(0).get<int>();
  key.grid_cols = j.at("grid").at(1).get<int>();
  key.permutation = j.at("permutation").get<std::vector<int>>();
  for (const auto& f : j.at("flips"))
    key.flips.emplace_back(f.at(0).get<bool>(), f.at(1).get<bool>());
  key.validate();
  return key;
}

void save_key(const std::string& path, const JigsawKey& key) {
  write_text_file(path, key_to_json(key) + "\n");
}

JigsawKey load_key(const std::string& path) {
  return key_from_json(read_text_file(path));
}

}  // namespace jigmark
