#pragma once

#include <string>
#include <vector>

#include "jigmark/image.hpp"
#include "jigmark/util.hpp"

namespace jigmark {

/// The analytic perturbation bank plus the external oracle hook. None of
/// these provide gradients; training never needs them.
enum class PerturbKind {
  kJpeg,
  kGaussianNoise,
  kGaussianBlur,
  kRandomRotate,
  kMask,
  kCropResize,
  kContrast,
  kBrightness,
  kOracle,
};

const char* perturb_kind_name(PerturbKind kind);
PerturbKind perturb_kind_from_name(const std::string& name);

struct PerturbationSpec {
  PerturbKind kind = PerturbKind::kJpeg;
  int jpeg_quality = 90;
  double noise_mean = 0.0;
  double noise_std = 0.0;
  int blur_kernel = 5;
  double blur_sigma = 0.3;
  double flip_probability = 0.5;
  int mask_size_px = 0;
  double crop_ratio = 1.0;
  double contrast_factor = 1.0;
  double brightness_value = 0.0;
  std::string oracle_instruction;

  void validate() const;
  std::string label() const;
};

/// Linear curriculum: each parameter interval interpolates from its epoch-0
/// range to its final-epoch range. Endpoint pairs are (weak, strong), so
/// intervals may run downward (crop ratio shrinks as training progresses).
struct CurriculumSchedule {
  struct Range {
    double a0, b0;  // interval endpoints at epoch 0
    double a1, b1;  // interval endpoints at total_epochs
    double lo(double t) const;
    double hi(double t) const;
  };

  int total_epochs = 100;
  /// Mask sizes are pixel counts at this resolution and scale
  /// proportionally to target_resolution.
  int reference_resolution = 256;
  int target_resolution = 256;

  Range jpeg_quality{10, 30, 20, 90};
  Range mask_size{25, 65, 80, 200};
  Range crop_ratio{0.9, 0.8, 0.7, 0.3};
  double rotate_probability = 0.5;
  Range contrast{0.16, 0.3, 0.8, 1.5};
  Range brightness{0.0, 0.1, 0.0, 0.25};
  int blur_kernel = 7;
  Range blur_sigma{0.1, 0.5, 0.3, 1.5};
  double noise_mean = 0.0;
  Range noise_std{0.01, 0.05, 0.05, 0.15};

  bool include_oracle = false;
  /// Analytic kinds eligible for sampling (the full bank by default).
  std::vector<PerturbKind> enabled_kinds = {
      PerturbKind::kJpeg,         PerturbKind::kGaussianNoise,
      PerturbKind::kGaussianBlur, PerturbKind::kRandomRotate,
      PerturbKind::kMask,         PerturbKind::kCropResize,
      PerturbKind::kContrast,     PerturbKind::kBrightness};

  static CurriculumSchedule training_defaults(int epochs, int resolution);
  /// The bank without the geometry-scrambling members (whole-image flips,
  /// strong crops), for small models that must stay key-order sensitive.
  static CurriculumSchedule order_preserving(int epochs, int resolution);
  /// Desk profile: order-preserving pool with end ranges softened for small
  /// resolutions, where full-strength distortions drown the per-seam
  /// evidence that near-miss key rejection depends on.
  static CurriculumSchedule desk64(int epochs, int resolution);

  double fraction(int epoch) const;
};

/// Apply one analytic perturbation. Oracle specs cannot be applied here and
/// raise ConfigError; they go through OracleClient (see oracle.hpp).
Image apply_perturbation(const PerturbationSpec& spec, const Image& img,
                         uint64_t seed);

/// Apply a chain in order, splitting the seed per element.
Image apply_chain(const std::vector<PerturbationSpec>& chain, const Image& img,
                  uint64_t seed);

/// Draw 1-3 distinct perturbation kinds with parameters uniform in the
/// epoch-interpolated ranges.
std::vector<PerturbationSpec> sample_chain(const CurriculumSchedule& curriculum,
                                           int epoch, uint64_t seed);

/// The fixed six-family evaluation suite (labels mirror the robustness
/// report rows): jpeg, rotate, contrast, brightness, blur, noise.
std::vector<std::pair<std::string, PerturbationSpec>> type1_eval_suite();

}  // namespace jigmark
