#pragma once

#include <string>
#include <vector>

#include "jigmark/image.hpp"
#include "jigmark/util.hpp"

namespace jigmark {

/// A jigsaw shuffle key: the image is cut into an equal grid of square-ish
/// blocks, the blocks are permuted and each is independently flipped.
/// The key is the watermarking secret; its inverse restores semantic order.
struct JigsawKey {
  int grid_rows = 0;
  int grid_cols = 0;
  /// shuffled block b shows source block permutation[b]
  std::vector<int> permutation;
  /// per destination block: {horizontal flip, vertical flip}
  std::vector<std::pair<bool, bool>> flips;
  std::string version = kVersion;

  static constexpr const char* kVersion = "jigsaw-key/1";

  int blocks() const { return grid_rows * grid_cols; }
  bool is_identity() const;
  void validate() const;

  /// Stable identifier derived from the canonical serialization.
  std::string id() const;

  bool operator==(const JigsawKey& o) const {
    return grid_rows == o.grid_rows && grid_cols == o.grid_cols &&
           permutation == o.permutation && flips == o.flips &&
           version == o.version;
  }
};

/// Uniformly random permutation + independent fair-coin flips,
/// fully determined by the seed. Requires at least 2 blocks.
JigsawKey new_key(int grid_rows, int grid_cols, uint64_t seed);

/// Sample a fresh key guaranteed to differ from `avoid`.
JigsawKey new_key_distinct(int grid_rows, int grid_cols, Rng& rng,
                           const JigsawKey& avoid);

JigsawKey identity_key(int grid_rows, int grid_cols);

/// A key whose permutation differs from `key` by exactly `n_swapped_pairs`
/// disjoint transpositions; flips unchanged.
JigsawKey perturb_key(const JigsawKey& key, int n_swapped_pairs, uint64_t seed);

/// Rearrange the image per the key. Output block b is input block
/// permutation[b] with its flips applied. Dimensions must divide evenly.
Image apply_shuffle(const Image& img, const JigsawKey& key);

/// Exact inverse of apply_shuffle.
Image invert_shuffle(const Image& img, const JigsawKey& key);

/// Bits of key material contributed by the permutation alone: log2(blocks!).
double permutation_entropy_bits(int blocks);

// Canonical JSON text record; serialization round-trips bit-exactly.
std::string key_to_json(const JigsawKey& key);
JigsawKey key_from_json(const std::string& text);
void save_key(const std::string& path, const JigsawKey& key);
JigsawKey load_key(const std::string& path);

}  // namespace jigmark
