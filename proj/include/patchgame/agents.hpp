#pragma once

// Speaker (PatchSymbol + PatchRank) and listener (message transformer +
// image encoder) networks.
//
// Image batches are NHWC tensors [B, H, W, C]. Patches are numbered
// row-major over the grid, and a flattened patch is laid out (c, y, x), the
// same order as a C x S x S block of a CHW image.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchgame/nn.hpp"
#include "patchgame/relaxations.hpp"
#include "patchgame/softrank.hpp"

namespace patchgame {

struct PatchGridSpec {
  std::size_t channels = 3, height = 64, width = 64, patch = 16;

  void validate() const {
    if (channels == 0 || height == 0 || width == 0 || patch == 0)
      throw std::invalid_argument("PatchGridSpec: zero extent");
    if (height % patch || width % patch)
      throw std::invalid_argument("PatchGridSpec: patch side " + std::to_string(patch) + " does not divide " +
                                  std::to_string(height) + "x" + std::to_string(width));
  }
  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t num_patches() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return channels * patch * patch; }
  std::size_t image_size() const { return channels * height * width; }
};

enum class VisionKind { conv, vit };

struct AgentConfig {
  PatchGridSpec grid;
  std::size_t vocab = 32;
  std::size_t symbols_per_patch = 1;
  std::size_t embed_dim = 64;

  std::size_t symbol_hidden = 64;
  std::vector<std::size_t> rank_widths{8, 16, 16, 32};
  bool rank_zero_init = false;
  double rank_eps = 1.0;

  std::size_t text_width = 64, text_layers = 4, text_heads = 2, text_mlp = 128;

  VisionKind vision = VisionKind::conv;
  std::vector<std::size_t> vision_widths{8, 16, 16, 32, 32, 64};
  std::vector<std::size_t> vision_strides{2, 2, 1, 2, 1, 2};
  std::size_t vit_patch = 8, vit_width = 64, vit_layers = 2, vit_heads = 2, vit_mlp = 128;

  std::size_t proj_expansion = 4;

  std::size_t message_length() const { return grid.num_patches() * symbols_per_patch; }

  void validate() const {
    grid.validate();
    if (vocab < 1 || symbols_per_patch < 1 || embed_dim < 1) throw std::invalid_argument("AgentConfig: zero size");
    if (rank_widths.empty()) throw std::invalid_argument("AgentConfig: rank CNN needs at least one block");
    if (vision_widths.size() != vision_strides.size() || vision_widths.empty())
      throw std::invalid_argument("AgentConfig: vision widths and strides differ in length");
    if (!(rank_eps > 0)) throw std::invalid_argument("AgentConfig: rank_eps must be > 0");
  }
};

// Listener-visible token: `position` is grid index * l + symbol slot.
struct Token {
  std::size_t position;
  std::size_t symbol;
  bool operator==(const Token&) const = default;
};

template <class T>
struct Message {
  std::size_t batch = 0, patches = 0, per_patch = 0, vocab = 0;
  Tensor<T> patch_symbols;  // [B, K*l, V] sampled rows before masking
  Tensor<T> scores;         // [B, K] PatchRank outputs
  Tensor<T> ranks;          // [B, K] soft ranks
  Tensor<T> mask;           // [B, K] relaxed Bernoulli keep-mask
  Tensor<T> symbols;        // [B, K*l, V] symbols * mask, what the listener reads
  std::vector<std::uint8_t> keep;   // [B*K]
  std::vector<std::size_t> symbol_ids;  // [B*K*l] argmax of each row

  std::size_t length() const { return patches * per_patch; }
  bool kept(std::size_t b, std::size_t k) const { return keep[b * patches + k] != 0; }
  std::size_t kept_count(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < patches; ++k) n += kept(b, k);
    return n;
  }
  // Kept symbols of image b in grid order; empty means the NULL token.
  std::vector<Token> tokens(std::size_t b) const {
    std::vector<Token> out;
    for (std::size_t k = 0; k < patches; ++k)
      if (kept(b, k))
        for (std::size_t j = 0; j < per_patch; ++j) {
          const std::size_t pos = k * per_patch + j;
          out.push_back({pos, symbol_ids[b * length() + pos]});
        }
    return out;
  }
};

template <class T>
struct ImageEncoding {
  Tensor<T> features;   // [B, F] pooled encoder output, before the projection head
  Tensor<T> embedding;  // [B, d], unit rows
};

// [B, H, W, C] -> [B*K, C*S*S].
template <class T>
Tensor<T> patchify(const Tensor<T>& images, const PatchGridSpec& g) {
  g.validate();
  if (images.ndim() != 4 || images.dim(1) != g.height || images.dim(2) != g.width || images.dim(3) != g.channels)
    throw ShapeError("patchify: expected [B, " + std::to_string(g.height) + ", " + std::to_string(g.width) + ", " +
                     std::to_string(g.channels) + "], got " + shape_str(images.shape()));
  const std::size_t b = images.dim(0), s = g.patch;
  auto x = reshape(images, {b, g.grid_h(), s, g.grid_w(), s, g.channels});
  return reshape(permute(x, {0, 1, 3, 5, 2, 4}), {b * g.num_patches(), g.patch_dim()});
}

// Patches of one CHW image as K flat vectors in (c, y, x) order.
inline std::vector<std::vector<float>> patchify_chw(std::span<const float> image, const PatchGridSpec& g) {
  g.validate();
  if (image.size() != g.image_size())
    throw std::invalid_argument("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                                std::to_string(g.image_size()));
  std::vector<std::vector<float>> out;
  out.reserve(g.num_patches());
  for (std::size_t gy = 0; gy < g.grid_h(); ++gy)
    for (std::size_t gx = 0; gx < g.grid_w(); ++gx) {
      std::vector<float> p;
      p.reserve(g.patch_dim());
      for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t y = 0; y < g.patch; ++y)
          for (std::size_t x = 0; x < g.patch; ++x)
            p.push_back(image[(c * g.height + gy * g.patch + y) * g.width + gx * g.patch + x]);
      out.push_back(std::move(p));
    }
  return out;
}

// Stacks CHW images into an NHWC batch.
template <class T>
Tensor<T> nhwc_batch(const std::vector<std::span<const float>>& images, const PatchGridSpec& g) {
  const std::size_t hw = g.height * g.width, c = g.channels;
  Buffer<T> v(images.size() * g.image_size());
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].size() != g.image_size()) throw ShapeError("nhwc_batch: image size mismatch");
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) v[(b * hw + i) * c + ch] = static_cast<T>(images[b][ch * hw + i]);
  }
  return Tensor<T>::adopt({images.size(), g.height, g.width, c}, std::move(v));
}

// [B, H, W, C] -> [B, C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  return mean(reshape(x, {x.dim(0), x.dim(1) * x.dim(2), x.dim(3)}), 1);
}

template <class T>
class Agents {
 public:
  Agents(AgentConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& g = cfg_.grid;
    const std::size_t l = cfg_.symbols_per_patch, v = cfg_.vocab, d = cfg_.embed_dim;

    // PatchSymbol: 2-hidden-layer MLP.
    symb_ = {Linear<T>(ps_, "speaker.symb.fc1", g.patch_dim(), cfg_.symbol_hidden, seed),
             Linear<T>(ps_, "speaker.symb.fc2", cfg_.symbol_hidden, cfg_.symbol_hidden, seed),
             Linear<T>(ps_, "speaker.symb.out", cfg_.symbol_hidden, l * v, seed, Init::xavier)};

    // PatchRank: strided conv blocks down toward the patch grid, then a 1x1 score.
    std::size_t sh = g.height, sw = g.width, in = g.channels;
    for (std::size_t i = 0; i < cfg_.rank_widths.size(); ++i) {
      const bool halve = sh % 2 == 0 && sw % 2 == 0 && sh / 2 >= g.grid_h() && sw / 2 >= g.grid_w();
      const std::size_t stride = halve ? 2 : 1;
      rank_.push_back(Conv2d<T>(ps_, "speaker.rank.conv" + std::to_string(i), in, cfg_.rank_widths[i], 3, stride, seed));
      sh /= stride;
      sw /= stride;
      in = cfg_.rank_widths[i];
    }
    if (sh % g.grid_h() || sw % g.grid_w() || sh / g.grid_h() != sw / g.grid_w())
      throw std::invalid_argument("AgentConfig: rank CNN output " + std::to_string(sh) + "x" + std::to_string(sw) +
                                  " does not pool evenly onto the patch grid");
    rank_pool_ = sh / g.grid_h();
    rank_head_ = Conv2d<T>(ps_, "speaker.rank.score", in, 1, 1, 1, seed,
                           cfg_.rank_zero_init ? Init::zero : Init::xavier);

    // Message encoder.
    const std::size_t w = cfg_.text_width;
    sym_embed_ = init_normal(ps_, "listener.text.symbol_embed", {v, w}, 0.5, seed);
    pos_embed_ = init_normal(ps_, "listener.text.position_embed", {cfg_.message_length(), w}, 0.5, seed);
    special_ = init_normal(ps_, "listener.text.special_embed", {2, w}, 0.5, seed);  // CLS, NULL
    text_ = TransformerEncoder<T>(ps_, "listener.text.encoder", cfg_.text_layers, w, cfg_.text_heads, cfg_.text_mlp, seed);
    text_head_ = ProjectionHead<T>(ps_, "listener.text.head", w, cfg_.proj_expansion * d, d, seed);

    // Image encoder.
    if (cfg_.vision == VisionKind::conv) {
      in = g.channels;
      for (std::size_t i = 0; i < cfg_.vision_widths.size(); ++i) {
        vision_.push_back(Conv2d<T>(ps_, "listener.vision.conv" + std::to_string(i), in, cfg_.vision_widths[i], 3,
                                    cfg_.vision_strides[i], seed));
        in = cfg_.vision_widths[i];
      }
      feature_dim_ = in;
      vision_norm_ = LayerNorm<T>(ps_, "listener.vision.norm", in);
    } else {
      vit_grid_ = PatchGridSpec{g.channels, g.height, g.width, cfg_.vit_patch};
      vit_grid_.validate();
      vit_embed_ = Linear<T>(ps_, "listener.vision.patch_embed", vit_grid_.patch_dim(), cfg_.vit_width, seed, Init::xavier);
      vit_pos_ = init_normal(ps_, "listener.vision.position_embed", {vit_grid_.num_patches() + 1, cfg_.vit_width}, 0.5, seed);
      vit_cls_ = init_normal(ps_, "listener.vision.cls", {1, cfg_.vit_width}, 0.5, seed);
      vit_ = TransformerEncoder<T>(ps_, "listener.vision.encoder", cfg_.vit_layers, cfg_.vit_width, cfg_.vit_heads,
                                   cfg_.vit_mlp, seed);
      feature_dim_ = cfg_.vit_width;
    }
    vision_head_ = ProjectionHead<T>(ps_, "listener.vision.head", feature_dim_, cfg_.proj_expansion * d, d, seed);
  }

  const AgentConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return ps_; }
  const ParamSet<T>& params() const { return ps_; }
  std::size_t feature_dim() const { return feature_dim_; }

  // [N, C*S*S] -> [N*l, V] symbol logits.
  Tensor<T> symbol_logits(const Tensor<T>& patches) const {
    auto h = relu(symb_[1](relu(symb_[0](standardize(patches)))));
    return reshape(symb_[2](h), {patches.dim(0) * cfg_.symbols_per_patch, cfg_.vocab});
  }

  // Deterministic symbol of every patch row: argmax of the logits, lowest id on ties.
  std::vector<std::size_t> symbol_argmax(const Tensor<T>& patches) const {
    NoGradGuard ng;
    auto z = symbol_logits(patches);
    const std::size_t rows = z.dim(0), v = z.dim(1);
    std::vector<std::size_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (z.at(r * v + j) > z.at(r * v + best)) best = j;
      out[r] = best;
    }
    return out;
  }

  // [B, H, W, C] -> [B, K] importance scores.
  Tensor<T> importance(const Tensor<T>& images) const {
    auto h = standardize(images);
    for (const auto& c : rank_) h = relu(c(h));
    h = rank_head_(h);
    if (rank_pool_ > 1) h = avg_pool2d(h, rank_pool_);
    return reshape(h, {images.dim(0), cfg_.grid.num_patches()});
  }

  Message<T> speak(const Tensor<T>& images, double tau, Rng& rng, bool hard = true) const {
    const std::size_t b = images.dim(0), k = cfg_.grid.num_patches(), l = cfg_.symbols_per_patch, v = cfg_.vocab;
    Message<T> m;
    m.batch = b;
    m.patches = k;
    m.per_patch = l;
    m.vocab = v;
    auto y = gumbel_softmax(symbol_logits(patchify(images, cfg_.grid)), GumbelConfig{tau, hard}, rng);
    m.patch_symbols = reshape(y, {b, k * l, v});
    m.scores = importance(images);
    m.ranks = soft_rank(m.scores, cfg_.rank_eps);
    m.mask = bernoulli_relaxed(scale(m.ranks, static_cast<T>(1.0 / static_cast<double>(k))), GumbelConfig{tau, hard}, rng);
    m.symbols = reshape(mul(reshape(y, {b, k, l, v}), reshape(m.mask, {b, k, 1, 1})), {b, k * l, v});
    m.keep.resize(b * k);
    for (std::size_t i = 0; i < b * k; ++i) m.keep[i] = m.mask.at(i) > T(0.5);
    m.symbol_ids.resize(b * k * l);
    for (std::size_t r = 0; r < b * k * l; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (y.at(r * v + j) > y.at(r * v + best)) best = j;
      m.symbol_ids[r] = best;
    }
    return m;
  }

  // Differentiable path: reads m.symbols so gradients reach both speaker nets.
  Tensor<T> embed_message(const Message<T>& m) const {
    const std::size_t b = m.batch, len = m.length(), w = cfg_.text_width;
    check_length(len);
    auto tok = add(reshape(matmul(reshape(m.symbols, {b * len, m.vocab}), sym_embed_), {b, len, w}), pos_embed_);
    auto table = concat(std::vector<Tensor<T>>{reshape(tok, {b * len, w}), special_}, 0);
    std::vector<std::vector<std::ptrdiff_t>> rows(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < m.patches; ++k)
        if (m.kept(i, k))
          for (std::size_t j = 0; j < m.per_patch; ++j)
            rows[i].push_back(static_cast<std::ptrdiff_t>(i * len + k * m.per_patch + j));
    return encode(table, rows, static_cast<std::ptrdiff_t>(b * len));
  }

  // Discrete path over explicit token lists; empty lists become NULL.
  Tensor<T> embed_tokens(const std::vector<std::vector<Token>>& seqs) const {
    const std::size_t len = cfg_.message_length();
    std::vector<std::ptrdiff_t> sym_idx, pos_idx;
    std::vector<std::vector<std::ptrdiff_t>> rows(seqs.size());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      if (seqs[i].size() > len)
        throw std::invalid_argument("embed_message: sequence of length " + std::to_string(seqs[i].size() + 1) +
                                    " exceeds L + 1 = " + std::to_string(len + 1));
      for (const auto& t : seqs[i]) {
        if (t.symbol >= cfg_.vocab || t.position >= len) throw std::out_of_range("embed_message: token out of range");
        rows[i].push_back(static_cast<std::ptrdiff_t>(sym_idx.size()));
        sym_idx.push_back(static_cast<std::ptrdiff_t>(t.symbol));
        pos_idx.push_back(static_cast<std::ptrdiff_t>(t.position));
      }
    }
    const auto n = static_cast<std::ptrdiff_t>(sym_idx.size());
    auto table = n ? concat(std::vector<Tensor<T>>{add(gather_rows(sym_embed_, sym_idx), gather_rows(pos_embed_, pos_idx)), special_}, 0)
                   : special_;
    return encode(table, rows, n);
  }

  ImageEncoding<T> embed_image(const Tensor<T>& images) const {
    Tensor<T> f;
    if (cfg_.vision == VisionKind::conv) {
      auto h = standardize(images);
      for (const auto& c : vision_) h = relu(c(h));
      f = vision_norm_(global_avg_pool(h));
    } else {
      const std::size_t b = images.dim(0), n = vit_grid_.num_patches(), w = cfg_.vit_width;
      auto tok = reshape(vit_embed_(standardize(patchify(images, vit_grid_))), {b, n, w});
      std::vector<std::ptrdiff_t> cls_rows(b, 0);
      auto seq = add(concat(std::vector<Tensor<T>>{reshape(gather_rows(vit_cls_, cls_rows), {b, 1, w}), tok}, 1), vit_pos_);
      f = reshape(slice(vit_(seq, std::vector<std::uint8_t>(b * (n + 1), 1)), 1, 0, 1), {b, w});
    }
    return {f, l2_normalize(vision_head_(f))};
  }

 private:
  // Pixels in [0, 1] -> roughly zero-mean, unit-scale inputs.
  static Tensor<T> standardize(const Tensor<T>& x) { return scale(add_scalar(x, T(-0.5)), T(4)); }

  void check_length(std::size_t len) const {
    if (len != cfg_.message_length())
      throw ShapeError("embed_message: message length " + std::to_string(len) + " differs from L = " +
                       std::to_string(cfg_.message_length()));
  }

  // table rows [special_base] = CLS, [special_base + 1] = NULL.
  Tensor<T> encode(const Tensor<T>& table, const std::vector<std::vector<std::ptrdiff_t>>& rows,
                   std::ptrdiff_t special_base) const {
    const std::size_t b = rows.size(), w = cfg_.text_width;
    std::size_t t = 2;
    for (const auto& r : rows) t = std::max(t, r.size() + 1);
    std::vector<std::ptrdiff_t> idx(b * t, -1);
    std::vector<std::uint8_t> valid(b * t, 0);
    for (std::size_t i = 0; i < b; ++i) {
      idx[i * t] = special_base;
      valid[i * t] = 1;
      if (rows[i].empty()) {
        idx[i * t + 1] = special_base + 1;
        valid[i * t + 1] = 1;
      }
      for (std::size_t j = 0; j < rows[i].size(); ++j) {
        idx[i * t + 1 + j] = rows[i][j];
        valid[i * t + 1 + j] = 1;
      }
    }
    auto h = text_(reshape(gather_rows(table, idx), {b, t, w}), valid);
    return l2_normalize(text_head_(reshape(slice(h, 1, 0, 1), {b, w})));
  }

  AgentConfig cfg_;
  ParamSet<T> ps_;
  std::vector<Linear<T>> symb_;
  std::vector<Conv2d<T>> rank_;
  Conv2d<T> rank_head_;
  std::size_t rank_pool_ = 1;
  Tensor<T> sym_embed_, pos_embed_, special_;
  TransformerEncoder<T> text_;
  ProjectionHead<T> text_head_;
  std::vector<Conv2d<T>> vision_;
  LayerNorm<T> vision_norm_;
  PatchGridSpec vit_grid_;
  Linear<T> vit_embed_;
  Tensor<T> vit_pos_, vit_cls_;
  TransformerEncoder<T> vit_;
  ProjectionHead<T> vision_head_;
  std::size_t feature_dim_ = 0;
};

}  // namespace patchgame
