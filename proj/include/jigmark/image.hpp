#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace jigmark {

/// RGB image with values in [0,1], stored channel-major (CHW).
/// The unit every transform in this library consumes and produces.
class Image {
public:
  Image() = default;
  Image(int height, int width)
      : h_(height), w_(width), data_(static_cast<size_t>(3) * height * width, 0.0) {
    if (height <= 0 || width <= 0)
      throw std::invalid_argument("Image: dimensions must be positive");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  static constexpr int channels() { return 3; }
  bool empty() const { return data_.empty(); }
  size_t size() const { return data_.size(); }

  double& at(int c, int y, int x) {
    return data_[(static_cast<size_t>(c) * h_ + y) * w_ + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<size_t>(c) * h_ + y) * w_ + x];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  void clamp01();
  bool in_unit_range(double slack = 0.0) const;

  bool operator==(const Image& o) const {
    return h_ == o.h_ && w_ == o.w_ && data_ == o.data_;
  }

private:
  int h_ = 0;
  int w_ = 0;
  std::vector<double> data_;
};

// ---- 8-bit conversions (round-to-nearest, clamped) ----
std::vector<uint8_t> to_rgb8(const Image& img);
Image from_rgb8(const std::vector<uint8_t>& rgb, int height, int width);

// ---- PNG (lossless, the storage format for every intermediate) ----
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);
std::vector<uint8_t> encode_png(const Image& img);
Image decode_png(const std::vector<uint8_t>& bytes);

// ---- JPEG (used only as a perturbation; real codec round-trip) ----
std::vector<uint8_t> encode_jpeg(const Image& img, int quality);
Image decode_jpeg(const std::vector<uint8_t>& bytes);
Image jpeg_roundtrip(const Image& img, int quality);

// ---- geometry ----
Image resize_bilinear(const Image& img, int out_h, int out_w);
/// Aspect-preserving resize so the image covers (out_h, out_w), then
/// center-crop. The policy applied to inputs whose size does not match
/// the model resolution.
Image letterbox_cover(const Image& img, int out_h, int out_w);

// ---- metrics ----
double mean_abs_diff(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);

}  // namespace jigmark
