#include "jigmark/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace jigmark {

using ad::Shape;

Tensor image_to_tensor(const Image& img) {
  return Tensor::from_vector(Shape{1, 3, img.height(), img.width()},
                             img.values());
}

Tensor images_to_tensor(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("images_to_tensor: empty");
  const int h = imgs[0].height(), w = imgs[0].width();
  std::vector<double> data;
  data.reserve(imgs.size() * imgs[0].size());
  for (const auto& im : imgs) {
    if (im.height() != h || im.width() != w)
      throw std::invalid_argument("images_to_tensor: mixed sizes");
    data.insert(data.end(), im.values().begin(), im.values().end());
  }
  return Tensor::from_vector(Shape{static_cast<int>(imgs.size()), 3, h, w},
                             std::move(data));
}

Image tensor_to_image(const Tensor& t, int sample) {
  const Shape s = t.shape();
  if (s.c != 3) throw std::invalid_argument("tensor_to_image: need 3 channels");
  if (sample < 0 || sample >= s.n)
    throw std::invalid_argument("tensor_to_image: sample out of range");
  Image img(s.h, s.w);
  const size_t item = static_cast<size_t>(3) * s.h * s.w;
  std::copy(t.values().begin() + static_cast<long>(sample * item),
            t.values().begin() + static_cast<long>((sample + 1) * item),
            img.values().begin());
  return img;
}

// ---------------------------------------------------------------- init

namespace {

Tensor conv_weight(std::vector<Param>& reg, const std::string& name, int cout,
                   int cin, int k, Rng& rng) {
  double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
  Tensor t = Tensor::randn(Shape{cout, cin, k, k}, rng, std, true);
  reg.push_back({name, t});
  return t;
}

Tensor dw_weight(std::vector<Param>& reg, const std::string& name, int c,
                 int k, Rng& rng) {
  double std = std::sqrt(2.0 / (static_cast<double>(k) * k));
  Tensor t = Tensor::randn(Shape{c, 1, k, k}, rng, std, true);
  reg.push_back({name, t});
  return t;
}

Tensor bias(std::vector<Param>& reg, const std::string& name, int c) {
  Tensor t = Tensor::zeros(Shape{1, c, 1, 1}, true);
  reg.push_back({name, t});
  return t;
}

Tensor norm_gamma(std::vector<Param>& reg, const std::string& name, int c,
                  double v = 1.0) {
  Tensor t = Tensor::constant(Shape{1, c, 1, 1}, v);
  t.set_requires_grad(true);
  reg.push_back({name, t});
  return t;
}

Tensor linear_weight(std::vector<Param>& reg, const std::string& name, int out,
                     int in, Rng& rng) {
  double std = std::sqrt(2.0 / static_cast<double>(in));
  Tensor t = Tensor::randn(Shape{out, in, 1, 1}, rng, std, true);
  reg.push_back({name, t});
  return t;
}

}  // namespace

// ---------------------------------------------------------------- encoder

int EncoderConfig::level_channels(int level) const {
  int mult = std::min(1 << level, max_channel_mult);
  return base_channels * mult;
}

EncoderConfig EncoderConfig::desk64() {
  EncoderConfig cfg;
  cfg.unet_depth = 2;
  cfg.base_channels = 32;
  cfg.downsample_factor = 2;
  cfg.block_expand = 2;
  cfg.max_channel_mult = 4;
  return cfg;
}

Encoder::Encoder(const EncoderConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  if (cfg.downsample_factor != 1 && cfg.downsample_factor != 2 &&
      cfg.downsample_factor != 4)
    throw std::invalid_argument("Encoder: downsample_factor must be 1, 2 or 4");
  Rng rng = Rng::seeded(init_seed);

  auto make_block = [&](const std::string& p, int c) {
    Block b;
    b.dw_w = dw_weight(params_, p + ".dw.w", c, 7, rng);
    b.dw_b = bias(params_, p + ".dw.b", c);
    b.ln_g = norm_gamma(params_, p + ".ln.g", c);
    b.ln_b = bias(params_, p + ".ln.b", c);
    b.pw1_w = conv_weight(params_, p + ".pw1.w", c * cfg_.block_expand, c, 1, rng);
    b.pw1_b = bias(params_, p + ".pw1.b", c * cfg_.block_expand);
    b.grn_g = norm_gamma(params_, p + ".grn.g", c * cfg_.block_expand, 0.0);
    b.grn_b = bias(params_, p + ".grn.b", c * cfg_.block_expand);
    b.pw2_w = conv_weight(params_, p + ".pw2.w", c, c * cfg_.block_expand, 1, rng);
    b.pw2_b = bias(params_, p + ".pw2.b", c);
    return b;
  };

  const int c0 = cfg_.level_channels(0);
  stem_w_ = conv_weight(params_, "stem.w", c0, 3, 3, rng);
  stem_b_ = bias(params_, "stem.b", c0);
  stem_block_ = make_block("stem.block", c0);

  for (int d = 0; d < cfg_.unet_depth; ++d) {
    Level lv;
    const int cin = cfg_.level_channels(d);
    const int cout = cfg_.level_channels(d + 1);
    std::string p = "down" + std::to_string(d);
    lv.down_w = conv_weight(params_, p + ".w", cout, cin, 3, rng);
    lv.down_b = bias(params_, p + ".b", cout);
    lv.block = make_block(p + ".block", cout);
    down_.push_back(std::move(lv));
  }

  for (int d = cfg_.unet_depth - 1; d >= 0; --d) {
    UpLevel lv;
    const int cin = cfg_.level_channels(d + 1);
    const int cout = cfg_.level_channels(d);
    std::string p = "up" + std::to_string(d);
    lv.up_w = conv_weight(params_, p + ".w", cout, cin, 3, rng);
    lv.up_b = bias(params_, p + ".b", cout);
    lv.fuse_w = conv_weight(params_, p + ".fuse.w", cout, 2 * cout, 1, rng);
    lv.fuse_b = bias(params_, p + ".fuse.b", cout);
    lv.block = make_block(p + ".block", cout);
    up_.push_back(std::move(lv));
  }

  int ds = cfg_.downsample_factor;
  int idx = 0;
  while (ds > 1) {
    std::string p = "exit" + std::to_string(idx++);
    std::array<Tensor, 2> conv = {conv_weight(params_, p + ".w", c0, c0, 3, rng),
                                  bias(params_, p + ".b", c0)};
    exit_convs_.push_back(conv);
    ds /= 2;
  }

  // zero init: the embedder starts as the identity map
  head_w_ = Tensor::zeros(Shape{3, c0, 3, 3}, true);
  params_.push_back({"head.w", head_w_});
  head_b_ = bias(params_, "head.b", 3);
}

Tensor Encoder::run_block(const Block& b, const Tensor& x) const {
  Tensor h = ad::depthwise_conv2d(x, b.dw_w, b.dw_b, 1, 3);
  h = ad::layer_norm_channels(h, b.ln_g, b.ln_b);
  h = ad::conv2d(h, b.pw1_w, b.pw1_b, 1, 0);
  h = ad::gelu(h);
  h = ad::grn(h, b.grn_g, b.grn_b);
  h = ad::conv2d(h, b.pw2_w, b.pw2_b, 1, 0);
  return ad::add(x, h);
}

Tensor Encoder::forward(const Tensor& input) const {
  const Shape s = input.shape();
  if (s.c != 3) throw std::invalid_argument("Encoder: need 3 channels");
  if (s.h % cfg_.divisor() != 0 || s.w % cfg_.divisor() != 0)
    throw std::invalid_argument("Encoder: dims must divide by " +
                                std::to_string(cfg_.divisor()));

  Tensor h = ad::conv2d(input, stem_w_, stem_b_, cfg_.downsample_factor, 1);
  h = run_block(stem_block_, h);

  std::vector<Tensor> skips;
  for (const auto& lv : down_) {
    skips.push_back(h);
    h = ad::conv2d(h, lv.down_w, lv.down_b, 2, 1);
    h = run_block(lv.block, h);
  }

  for (size_t i = 0; i < up_.size(); ++i) {
    const auto& lv = up_[i];
    h = ad::upsample_nearest2x(h);
    h = ad::conv2d(h, lv.up_w, lv.up_b, 1, 1);
    h = ad::concat_channels(h, skips[skips.size() - 1 - i]);
    h = ad::conv2d(h, lv.fuse_w, lv.fuse_b, 1, 0);
    h = run_block(lv.block, h);
  }

  for (const auto& conv : exit_convs_) {
    h = ad::upsample_nearest2x(h);
    h = ad::gelu(ad::conv2d(h, conv[0], conv[1], 1, 1));
  }

  Tensor residual = ad::conv2d(h, head_w_, head_b_, 1, 1);
  return ad::add(input, residual);
}

// ---------------------------------------------------------------- decoder

DecoderConfig DecoderConfig::desk64() {
  DecoderConfig cfg;
  cfg.stem_channels = 16;
  // final stage keeps stride 1: at 64px inputs the 8x8 tail resolution
  // leaves two cells per jigsaw block, enough to localize seam breaks
  cfg.stages = {{2, 24, 2}, {2, 32, 2}, {2, 48, 1}};
  cfg.head_hidden = 48;
  cfg.gn_groups = 4;
  cfg.input_size = 64;
  return cfg;
}

Decoder::Decoder(const DecoderConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  Rng rng = Rng::seeded(init_seed);
  const int c0 = cfg_.stem_channels;
  stem_w_ = conv_weight(params_, "stem.w", c0, 3, 3, rng);
  stem_b_ = bias(params_, "stem.b", c0);
  stem_gn_g_ = norm_gamma(params_, "stem.gn.g", c0);
  stem_gn_b_ = bias(params_, "stem.gn.b", c0);

  int cin = c0;
  for (size_t i = 0; i < cfg_.stages.size(); ++i) {
    auto [expand, cout, stride] = cfg_.stages[i];
    const int mid = cin * expand;
    std::string p = "stage" + std::to_string(i);
    Stage st;
    st.pw1_w = conv_weight(params_, p + ".pw1.w", mid, cin, 1, rng);
    st.pw1_b = bias(params_, p + ".pw1.b", mid);
    st.gn1_g = norm_gamma(params_, p + ".gn1.g", mid);
    st.gn1_b = bias(params_, p + ".gn1.b", mid);
    st.dw_w = dw_weight(params_, p + ".dw.w", mid, 3, rng);
    st.dw_b = bias(params_, p + ".dw.b", mid);
    st.gn2_g = norm_gamma(params_, p + ".gn2.g", mid);
    st.gn2_b = bias(params_, p + ".gn2.b", mid);
    st.pw2_w = conv_weight(params_, p + ".pw2.w", cout, mid, 1, rng);
    st.pw2_b = bias(params_, p + ".pw2.b", cout);
    st.gn3_g = norm_gamma(params_, p + ".gn3.g", cout);
    st.gn3_b = bias(params_, p + ".gn3.b", cout);
    st.stride = stride;
    st.residual = (stride == 1 && cin == cout);
    stages_.push_back(std::move(st));
    cin = cout;
  }

  fc1_w_ = linear_weight(params_, "head.fc1.w", cfg_.head_hidden, cin, rng);
  fc1_b_ = bias(params_, "head.fc1.b", cfg_.head_hidden);
  fc2_w_ = linear_weight(params_, "head.fc2.w", 1, cfg_.head_hidden, rng);
  fc2_b_ = bias(params_, "head.fc2.b", 1);
}

Tensor Decoder::forward(const Tensor& img) const {
  const Shape s = img.shape();
  if (s.c != 3) throw std::invalid_argument("Decoder: need 3 channels");
  if (s.h != cfg_.input_size || s.w != cfg_.input_size)
    throw std::invalid_argument(
        "Decoder: resolution mismatch, expected " +
        std::to_string(cfg_.input_size) + ", got " + std::to_string(s.h) + "x" +
        std::to_string(s.w));

  const int g = cfg_.gn_groups;
  Tensor h = ad::conv2d(img, stem_w_, stem_b_, 2, 1);
  h = ad::relu(ad::group_norm(h, stem_gn_g_, stem_gn_b_, g));

  for (const auto& st : stages_) {
    Tensor in = h;
    h = ad::conv2d(h, st.pw1_w, st.pw1_b, 1, 0);
    h = ad::relu(ad::group_norm(h, st.gn1_g, st.gn1_b, g));
    h = ad::depthwise_conv2d(h, st.dw_w, st.dw_b, st.stride, 1);
    h = ad::relu(ad::group_norm(h, st.gn2_g, st.gn2_b, g));
    h = ad::conv2d(h, st.pw2_w, st.pw2_b, 1, 0);
    h = ad::group_norm(h, st.gn3_g, st.gn3_b, g);
    if (st.residual) h = ad::add(h, in);
  }

  h = ad::global_avg_pool(h);
  h = ad::relu(ad::linear(h, fc1_w_, fc1_b_));
  h = ad::linear(h, fc2_w_, fc2_b_);
  return ad::sigmoid(h);
}

double Decoder::score(const Image& img) const {
  ad::NoGradGuard ng;
  return forward(image_to_tensor(img)).item();
}

// ---------------------------------------------------------------- blending

std::vector<double> edge_mask(int height, int width, const JigsawKey& key,
                              int band_width) {
  std::vector<double> mask(static_cast<size_t>(height) * width, 0.0);
  if (band_width <= 0) return mask;
  const int bh = height / key.grid_rows;
  const int bw = width / key.grid_cols;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      bool near = false;
      for (int r = 1; r < key.grid_rows && !near; ++r) {
        int cut = r * bh;
        if (y >= cut - band_width && y <= cut + band_width - 1) near = true;
      }
      for (int c = 1; c < key.grid_cols && !near; ++c) {
        int cut = c * bw;
        if (x >= cut - band_width && x <= cut + band_width - 1) near = true;
      }
      if (near) mask[static_cast<size_t>(y) * width + x] = 1.0;
    }
  return mask;
}

Image blend_edges(const Image& x, const Image& x_w, const JigsawKey& key,
                  int width) {
  if (x.height() != x_w.height() || x.width() != x_w.width())
    throw std::invalid_argument("blend_edges: shape mismatch");
  std::vector<double> mask = edge_mask(x.height(), x.width(), key, width);
  Image out(x.height(), x.width());
  const size_t plane = static_cast<size_t>(x.height()) * x.width();
  for (int c = 0; c < 3; ++c)
    for (size_t i = 0; i < plane; ++i)
      out.values()[c * plane + i] = x.values()[c * plane + i] * mask[i] +
                                    x_w.values()[c * plane + i] * (1.0 - mask[i]);
  return out;
}

Tensor blend_edges_t(const Tensor& x_w, const std::vector<Image>& x,
                     const JigsawKey& key, int width) {
  const Shape s = x_w.shape();
  if (static_cast<int>(x.size()) != s.n)
    throw std::invalid_argument("blend_edges_t: batch size mismatch");
  std::vector<double> base;
  base.reserve(static_cast<size_t>(s.numel()));
  for (const auto& im : x)
    base.insert(base.end(), im.values().begin(), im.values().end());
  std::vector<double> mask = edge_mask(s.h, s.w, key, width);
  return ad::blend_with_mask(x_w, base, mask);
}

// ---------------------------------------------------------------- archive

namespace {
constexpr char kMagic[8] = {'J', 'G', 'M', 'K', '0', '1', '\n', '\0'};
}

void Archive::put(const std::string& name, const std::vector<double>& data) {
  arrays_[name] = data;
}

const std::vector<double>& Archive::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end())
    throw std::out_of_range("archive: missing array " + name);
  return it->second;
}

bool Archive::has(const std::string& name) const {
  return arrays_.count(name) > 0;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : arrays_) out.push_back(k);
  return out;
}

void Archive::save(const std::string& path) const {
  nlohmann::json header;
  header["meta"] = nlohmann::json::parse(meta_json);
  auto list = nlohmann::json::array();
  for (const auto& [name, data] : arrays_)
    list.push_back({{"name", name}, {"count", data.size()}});
  header["arrays"] = list;
  std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("archive: cannot write " + path);
  out.write(kMagic, 8);
  uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& [name, data] : arrays_)
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("archive: write failed " + path);
}

Archive Archive::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("archive: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("archive: bad magic in " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  nlohmann::json header = nlohmann::json::parse(htext);

  Archive ar;
  ar.meta_json = header.at("meta").dump();
  for (const auto& item : header.at("arrays")) {
    std::string name = item.at("name").get<std::string>();
    size_t count = item.at("count").get<size_t>();
    std::vector<double> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw std::runtime_error("archive: truncated array " + name);
    ar.arrays_[name] = std::move(data);
  }
  return ar;
}

void pack_params(Archive& ar, const std::string& prefix,
                 const std::vector<Param>& params) {
  for (const auto& p : params) ar.put(prefix + p.name, p.value.values());
}

void unpack_params(const Archive& ar, const std::string& prefix,
                   std::vector<Param>& params) {
  for (auto& p : params) {
    const auto& data = ar.get(prefix + p.name);
    if (data.size() != p.value.values().size())
      throw std::runtime_error("archive: size mismatch for " + prefix + p.name);
    std::copy(data.begin(), data.end(), p.value.values().begin());
  }
}

}  // namespace jigmark
