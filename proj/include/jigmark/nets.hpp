#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "jigmark/image.hpp"
#include "jigmark/jigsaw.hpp"
#include "jigmark/tensor.hpp"

namespace jigmark {

using ad::Tensor;

/// Named trainable tensor. Copies share the underlying node, so a layer and
/// the flat parameter list view the same storage.
struct Param {
  std::string name;
  Tensor value;
};

/// Convert between Image and [1,3,H,W] / [N,3,H,W] tensors.
Tensor image_to_tensor(const Image& img);
Tensor images_to_tensor(const std::vector<Image>& imgs);
Image tensor_to_image(const Tensor& t, int sample = 0);

// ---------------------------------------------------------------- encoder

/// Residual image-to-image watermark embedder: a U-Net over depthwise-conv
/// blocks with global response normalization. The final layer is
/// zero-initialized so training starts from the identity embedding, and the
/// encoder takes only the (shuffled) image; there is no message branch.
struct EncoderConfig {
  int unet_depth = 4;
  int base_channels = 128;
  int downsample_factor = 2;  // one of {1,2,4}; internal working resolution
  int block_expand = 4;
  int max_channel_mult = 8;

  /// Input dims must divide by this.
  int divisor() const { return downsample_factor * (1 << unet_depth); }
  int level_channels(int level) const;

  static EncoderConfig desk64();
};

class Encoder {
public:
  explicit Encoder(const EncoderConfig& cfg, uint64_t init_seed = 17);

  /// [N,3,H,W] -> [N,3,H,W]; residual output (input + predicted watermark).
  Tensor forward(const Tensor& shuffled_img) const;

  const EncoderConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  struct Block {
    Tensor dw_w, dw_b;    // depthwise 7x7
    Tensor ln_g, ln_b;    // channel layer norm
    Tensor pw1_w, pw1_b;  // 1x1 expand
    Tensor grn_g, grn_b;  // global response normalization
    Tensor pw2_w, pw2_b;  // 1x1 project
  };

private:
  struct Level {
    Tensor down_w, down_b;
    Block block;
  };
  struct UpLevel {
    Tensor up_w, up_b;      // 3x3 after nearest upsample
    Tensor fuse_w, fuse_b;  // 1x1 after skip concat
    Block block;
  };

  EncoderConfig cfg_;
  std::vector<Param> params_;
  Tensor stem_w_, stem_b_;
  Block stem_block_;
  std::vector<Level> down_;
  std::vector<UpLevel> up_;
  std::vector<std::array<Tensor, 2>> exit_convs_;  // restore stem downsample
  Tensor head_w_, head_b_;

  Tensor run_block(const Block& b, const Tensor& x) const;
};

// ---------------------------------------------------------------- decoder

/// Lightweight mobile-class score classifier: inverted-residual stages with
/// group normalization (batch-composition independent), global pooling and a
/// single logistic output in [0,1].
struct DecoderConfig {
  int stem_channels = 16;
  /// per stage: {expansion, out_channels, stride}
  std::vector<std::array<int, 3>> stages = {
      {4, 24, 2}, {4, 40, 2}, {4, 80, 2}, {4, 112, 1}};
  int head_hidden = 128;
  int gn_groups = 4;
  int input_size = 256;

  static DecoderConfig desk64();
};

class Decoder {
public:
  explicit Decoder(const DecoderConfig& cfg, uint64_t init_seed = 29);

  /// [N,3,H,W] -> [N,1,1,1] watermark scores in [0,1].
  Tensor forward(const Tensor& img) const;
  /// Single-image score (no graph).
  double score(const Image& img) const;

  const DecoderConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

private:
  struct Stage {
    Tensor pw1_w, pw1_b, gn1_g, gn1_b;
    Tensor dw_w, dw_b, gn2_g, gn2_b;
    Tensor pw2_w, pw2_b, gn3_g, gn3_b;
    int stride = 1;
    bool residual = false;
  };

  DecoderConfig cfg_;
  std::vector<Param> params_;
  Tensor stem_w_, stem_b_, stem_gn_g_, stem_gn_b_;
  std::vector<Stage> stages_;
  Tensor fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

// ---------------------------------------------------------------- blending

/// Mask over [H*W]: 1.0 on pixels within `width` of an internal block
/// boundary of the key grid, else 0.0.
std::vector<double> edge_mask(int height, int width, const JigsawKey& key,
                              int band_width);

/// Replace a band along the jigsaw seams of x_w with pixels from x,
/// hiding block-edge artifacts: x*M + x_w*(1-M).
Image blend_edges(const Image& x, const Image& x_w, const JigsawKey& key,
                  int width = 3);

/// Differentiable version used in the training graph (x and mask constant).
Tensor blend_edges_t(const Tensor& x_w, const std::vector<Image>& x,
                     const JigsawKey& key, int width);

// ---------------------------------------------------------------- archive

/// Self-describing checkpoint archive: JSON header (configs + training-state
/// metadata) followed by named little-endian double arrays.
class Archive {
public:
  std::string meta_json = "{}";

  void put(const std::string& name, const std::vector<double>& data);
  const std::vector<double>& get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<std::string> names() const;

  void save(const std::string& path) const;
  static Archive load(const std::string& path);

private:
  std::map<std::string, std::vector<double>> arrays_;
};

void pack_params(Archive& ar, const std::string& prefix,
                 const std::vector<Param>& params);
void unpack_params(const Archive& ar, const std::string& prefix,
                   std::vector<Param>& params);

}  // namespace jigmark
