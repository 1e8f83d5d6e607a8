#pragma once

#include <string>
#include <vector>

#include "jigmark/hav.hpp"
#include "jigmark/image.hpp"

namespace jigmark {

/// Procedural photo-like image: layered gradients, soft shapes and value
/// noise. Deterministic in the seed; used for desk-scale datasets.
Image synth_image(int size, uint64_t seed);

std::vector<Image> synth_dataset(int count, int size, uint64_t seed);

/// Write `count` PNGs (img_00000.png, ...) under dir; returns the paths.
std::vector<std::string> write_synth_dataset(const std::string& dir, int count,
                                             int size, uint64_t seed);

/// Noise ladder used by the synthetic variation groups, weakest first.
const std::vector<double>& synth_noise_levels();

/// One ranking group with noise-level ground truth: five variants of a base
/// image at increasing noise, ranks = noise order. Returns the group plus
/// its six images (original first) keyed by the ids used in the group.
struct SynthGroup {
  RankingGroup group;
  std::vector<std::pair<std::string, Image>> images;
};
SynthGroup synth_ranking_group(int size, uint64_t seed,
                               const std::string& id_prefix);

/// In-memory corpus of groups plus an ImageSource resolving their ids.
struct SynthHavDataset {
  std::vector<RankingGroup> groups;
  std::vector<std::pair<std::string, Image>> images;

  ImageSource source() const;
};
SynthHavDataset synth_hav_dataset(int group_count, int size, uint64_t seed);

/// Persist a synthetic HAV dataset: PNGs under dir plus groups.jsonl.
std::string write_synth_hav_dataset(const std::string& dir, int group_count,
                                    int size, uint64_t seed);

}  // namespace jigmark
