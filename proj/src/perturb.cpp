#include "jigmark/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace jigmark {

const char* perturb_kind_name(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::kJpeg: return "jpeg";
    case PerturbKind::kGaussianNoise: return "gaussian_noise";
    case PerturbKind::kGaussianBlur: return "gaussian_blur";
    case PerturbKind::kRandomRotate: return "random_rotate";
    case PerturbKind::kMask: return "mask";
    case PerturbKind::kCropResize: return "crop_resize";
    case PerturbKind::kContrast: return "contrast";
    case PerturbKind::kBrightness: return "brightness";
    case PerturbKind::kOracle: return "oracle";
  }
  return "?";
}

PerturbKind perturb_kind_from_name(const std::string& name) {
  for (PerturbKind k :
       {PerturbKind::kJpeg, PerturbKind::kGaussianNoise,
        PerturbKind::kGaussianBlur, PerturbKind::kRandomRotate,
        PerturbKind::kMask, PerturbKind::kCropResize, PerturbKind::kContrast,
        PerturbKind::kBrightness, PerturbKind::kOracle})
    if (name == perturb_kind_name(k)) return k;
  throw ConfigError("unknown perturbation kind: " + name);
}

void PerturbationSpec::validate() const {
  switch (kind) {
    case PerturbKind::kJpeg:
      if (jpeg_quality < 1 || jpeg_quality > 100)
        throw ConfigError("jpeg quality out of range");
      break;
    case PerturbKind::kGaussianNoise:
      if (noise_std < 0.0) throw ConfigError("noise std must be >= 0");
      break;
    case PerturbKind::kGaussianBlur:
      if (blur_kernel < 1 || blur_kernel % 2 == 0)
        throw ConfigError("blur kernel must be odd and positive");
      if (blur_sigma <= 0.0) throw ConfigError("blur sigma must be > 0");
      break;
    case PerturbKind::kRandomRotate:
      if (flip_probability < 0.0 || flip_probability > 1.0)
        throw ConfigError("flip probability out of [0,1]");
      break;
    case PerturbKind::kMask:
      if (mask_size_px < 1) throw ConfigError("mask size must be >= 1 px");
      break;
    case PerturbKind::kCropResize:
      if (crop_ratio <= 0.0 || crop_ratio > 1.0)
        throw ConfigError("crop ratio out of (0,1]");
      break;
    case PerturbKind::kContrast:
      if (contrast_factor < 0.0) throw ConfigError("contrast factor < 0");
      break;
    case PerturbKind::kBrightness:
      if (brightness_value < 0.0) throw ConfigError("brightness value < 0");
      break;
    case PerturbKind::kOracle:
      break;
  }
}

std::string PerturbationSpec::label() const {
  std::ostringstream ss;
  ss << perturb_kind_name(kind);
  switch (kind) {
    case PerturbKind::kJpeg: ss << "_q" << jpeg_quality; break;
    case PerturbKind::kGaussianNoise: ss << "_std" << noise_std; break;
    case PerturbKind::kGaussianBlur:
      ss << "_k" << blur_kernel << "_s" << blur_sigma;
      break;
    case PerturbKind::kRandomRotate: ss << "_p" << flip_probability; break;
    case PerturbKind::kMask: ss << "_" << mask_size_px << "px"; break;
    case PerturbKind::kCropResize: ss << "_r" << crop_ratio; break;
    case PerturbKind::kContrast: ss << "_f" << contrast_factor; break;
    case PerturbKind::kBrightness: ss << "_v" << brightness_value; break;
    case PerturbKind::kOracle: break;
  }
  return ss.str();
}

double CurriculumSchedule::Range::lo(double t) const {
  double a = a0 * (1.0 - t) + a1 * t;
  double b = b0 * (1.0 - t) + b1 * t;
  return std::min(a, b);
}

double CurriculumSchedule::Range::hi(double t) const {
  double a = a0 * (1.0 - t) + a1 * t;
  double b = b0 * (1.0 - t) + b1 * t;
  return std::max(a, b);
}

CurriculumSchedule CurriculumSchedule::training_defaults(int epochs,
                                                         int resolution) {
  CurriculumSchedule c;
  c.total_epochs = epochs;
  c.target_resolution = resolution;
  return c;
}

CurriculumSchedule CurriculumSchedule::order_preserving(int epochs,
                                                        int resolution) {
  CurriculumSchedule c = training_defaults(epochs, resolution);
  c.enabled_kinds = {PerturbKind::kJpeg,     PerturbKind::kGaussianNoise,
                     PerturbKind::kGaussianBlur, PerturbKind::kMask,
                     PerturbKind::kContrast, PerturbKind::kBrightness};
  return c;
}

CurriculumSchedule CurriculumSchedule::desk64(int epochs, int resolution) {
  CurriculumSchedule c = order_preserving(epochs, resolution);
  c.jpeg_quality = {40, 70, 40, 90};
  c.noise_std = {0.01, 0.03, 0.03, 0.08};
  c.blur_kernel = 5;
  c.blur_sigma = {0.1, 0.3, 0.3, 0.9};
  c.mask_size = {25, 65, 60, 120};
  return c;
}

double CurriculumSchedule::fraction(int epoch) const {
  if (epoch < 0 || epoch > total_epochs)
    throw std::invalid_argument("curriculum: epoch out of [0, total_epochs]");
  if (total_epochs == 0) return 1.0;
  return static_cast<double>(epoch) / static_cast<double>(total_epochs);
}

namespace {

Image gaussian_noise(const Image& img, double mean, double std, uint64_t seed) {
  Image out = img;
  if (std == 0.0 && mean == 0.0) return out;
  Rng rng = Rng::seeded(seed);
  for (double& v : out.values()) v += rng.normal(mean, std);
  out.clamp01();
  return out;
}

Image gaussian_blur(const Image& img, int kernel, double sigma) {
  const int r = kernel / 2;
  std::vector<double> k(static_cast<size_t>(kernel) * kernel);
  double sum = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      k[static_cast<size_t>(dy + r) * kernel + (dx + r)] = v;
      sum += v;
    }
  for (double& v : k) v /= sum;

  Image out(img.height(), img.width());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          int yy = std::clamp(y + dy, 0, img.height() - 1);
          for (int dx = -r; dx <= r; ++dx) {
            int xx = std::clamp(x + dx, 0, img.width() - 1);
            acc += k[static_cast<size_t>(dy + r) * kernel + (dx + r)] *
                   img.at(c, yy, xx);
          }
        }
        out.at(c, y, x) = acc;
      }
  out.clamp01();  // convex combination up to rounding dust
  return out;
}

Image flip_image(const Image& img, bool horizontal) {
  Image out(img.height(), img.width());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        out.at(c, y, x) = horizontal ? img.at(c, y, img.width() - 1 - x)
                                     : img.at(c, img.height() - 1 - y, x);
  return out;
}

Image mask_square(const Image& img, int size, uint64_t seed) {
  Image out = img;
  const int s = std::min(size, std::min(img.height(), img.width()));
  Rng rng = Rng::seeded(seed);
  int y0 = (img.height() > s)
               ? static_cast<int>(rng.below(static_cast<uint64_t>(img.height() - s + 1)))
               : 0;
  int x0 = (img.width() > s)
               ? static_cast<int>(rng.below(static_cast<uint64_t>(img.width() - s + 1)))
               : 0;
  for (int c = 0; c < 3; ++c)
    for (int y = y0; y < y0 + s; ++y)
      for (int x = x0; x < x0 + s; ++x) out.at(c, y, x) = 0.0;
  return out;
}

Image crop_resize(const Image& img, double ratio, uint64_t seed) {
  const int side = std::max(
      1, static_cast<int>(std::round(ratio * std::min(img.height(), img.width()))));
  Rng rng = Rng::seeded(seed);
  int y0 = (img.height() > side)
               ? static_cast<int>(rng.below(static_cast<uint64_t>(img.height() - side + 1)))
               : 0;
  int x0 = (img.width() > side)
               ? static_cast<int>(rng.below(static_cast<uint64_t>(img.width() - side + 1)))
               : 0;
  Image crop(side, side);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        crop.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  Image out = resize_bilinear(crop, img.height(), img.width());
  out.clamp01();
  return out;
}

Image adjust_contrast(const Image& img, double factor) {
  if (factor == 1.0) return img;
  double mean = 0.0;
  for (double v : img.values()) mean += v;
  mean /= static_cast<double>(img.size());
  Image out = img;
  for (double& v : out.values()) v = mean + factor * (v - mean);
  out.clamp01();
  return out;
}

Image adjust_brightness(const Image& img, double value) {
  Image out = img;
  for (double& v : out.values()) v += value;
  out.clamp01();
  return out;
}

}  // namespace

Image apply_perturbation(const PerturbationSpec& spec, const Image& img,
                         uint64_t seed) {
  if (img.empty()) throw std::invalid_argument("apply_perturbation: empty image");
  spec.validate();
  switch (spec.kind) {
    case PerturbKind::kJpeg:
      return jpeg_roundtrip(img, spec.jpeg_quality);
    case PerturbKind::kGaussianNoise:
      return gaussian_noise(img, spec.noise_mean, spec.noise_std, seed);
    case PerturbKind::kGaussianBlur:
      return gaussian_blur(img, spec.blur_kernel, spec.blur_sigma);
    case PerturbKind::kRandomRotate: {
      Rng rng = Rng::seeded(seed);
      if (rng.uniform() < spec.flip_probability)
        return flip_image(img, rng.coin());
      return img;
    }
    case PerturbKind::kMask:
      return mask_square(img, spec.mask_size_px, seed);
    case PerturbKind::kCropResize:
      return crop_resize(img, spec.crop_ratio, seed);
    case PerturbKind::kContrast:
      return adjust_contrast(img, spec.contrast_factor);
    case PerturbKind::kBrightness:
      return adjust_brightness(img, spec.brightness_value);
    case PerturbKind::kOracle:
      throw ConfigError(
          "oracle perturbation requires a configured oracle endpoint");
  }
  throw std::logic_error("apply_perturbation: unhandled kind");
}

Image apply_chain(const std::vector<PerturbationSpec>& chain, const Image& img,
                  uint64_t seed) {
  Image out = img;
  for (size_t i = 0; i < chain.size(); ++i)
    out = apply_perturbation(chain[i], out, derive_seed(seed, i + 1));
  return out;
}

std::vector<PerturbationSpec> sample_chain(const CurriculumSchedule& curriculum,
                                           int epoch, uint64_t seed) {
  const double t = curriculum.fraction(epoch);
  Rng rng = Rng::seeded(seed);

  std::vector<PerturbKind> pool = curriculum.enabled_kinds;
  if (pool.empty()) throw ConfigError("curriculum: no perturbation kinds");
  if (curriculum.include_oracle) pool.push_back(PerturbKind::kOracle);

  const int len =
      1 + static_cast<int>(rng.below(std::min<uint64_t>(3, pool.size())));
  rng.shuffle(pool);
  pool.resize(static_cast<size_t>(len));

  const double scale = static_cast<double>(curriculum.target_resolution) /
                       static_cast<double>(curriculum.reference_resolution);

  std::vector<PerturbationSpec> chain;
  for (PerturbKind kind : pool) {
    PerturbationSpec s;
    s.kind = kind;
    switch (kind) {
      case PerturbKind::kJpeg:
        s.jpeg_quality = static_cast<int>(std::lround(rng.uniform(
            curriculum.jpeg_quality.lo(t), curriculum.jpeg_quality.hi(t))));
        break;
      case PerturbKind::kGaussianNoise:
        s.noise_mean = curriculum.noise_mean;
        s.noise_std =
            rng.uniform(curriculum.noise_std.lo(t), curriculum.noise_std.hi(t));
        break;
      case PerturbKind::kGaussianBlur:
        s.blur_kernel = curriculum.blur_kernel;
        s.blur_sigma = rng.uniform(curriculum.blur_sigma.lo(t),
                                   curriculum.blur_sigma.hi(t));
        break;
      case PerturbKind::kRandomRotate:
        s.flip_probability = curriculum.rotate_probability;
        break;
      case PerturbKind::kMask: {
        double ref =
            rng.uniform(curriculum.mask_size.lo(t), curriculum.mask_size.hi(t));
        s.mask_size_px = std::max(1, static_cast<int>(std::lround(ref * scale)));
        break;
      }
      case PerturbKind::kCropResize:
        s.crop_ratio = rng.uniform(curriculum.crop_ratio.lo(t),
                                   curriculum.crop_ratio.hi(t));
        break;
      case PerturbKind::kContrast:
        s.contrast_factor =
            rng.uniform(curriculum.contrast.lo(t), curriculum.contrast.hi(t));
        break;
      case PerturbKind::kBrightness:
        s.brightness_value =
            rng.uniform(curriculum.brightness.lo(t), curriculum.brightness.hi(t));
        break;
      case PerturbKind::kOracle:
        break;  // instruction chosen by the caller that owns the pool
    }
    chain.push_back(std::move(s));
  }
  return chain;
}

std::vector<std::pair<std::string, PerturbationSpec>> type1_eval_suite() {
  std::vector<std::pair<std::string, PerturbationSpec>> suite;
  PerturbationSpec s;

  s = {};
  s.kind = PerturbKind::kJpeg;
  s.jpeg_quality = 90;
  suite.emplace_back("jpeg", s);

  s = {};
  s.kind = PerturbKind::kRandomRotate;
  s.flip_probability = 0.5;
  suite.emplace_back("rotate", s);

  s = {};
  s.kind = PerturbKind::kContrast;
  s.contrast_factor = 1.0;
  suite.emplace_back("contrast", s);

  s = {};
  s.kind = PerturbKind::kBrightness;
  s.brightness_value = 0.2;
  suite.emplace_back("brightness", s);

  s = {};
  s.kind = PerturbKind::kGaussianBlur;
  s.blur_kernel = 5;
  s.blur_sigma = 0.3;
  suite.emplace_back("gaussian_blur", s);

  s = {};
  s.kind = PerturbKind::kGaussianNoise;
  s.noise_mean = 0.0;
  s.noise_std = 0.03;
  suite.emplace_back("gaussian_noise", s);

  return suite;
}

}  // namespace jigmark
