#pragma once

// Parameter registry and the small set of layers the agents are built from.

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "patchgame/ops.hpp"
#include "patchgame/rng.hpp"

namespace patchgame {

// Ordered name -> tensor registry. Names are unique; insertion order is the
// iteration order used by the optimizer and the checkpoint writer.
template <class T>
class ParamSet {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamSet: no parameter " + name);
    return items_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (const auto& [n, t] : items_) out.push_back(t);
    return out;
  }

  // Parameters whose name starts with `prefix`.
  std::vector<Tensor<T>> tensors(const std::string& prefix) const {
    std::vector<Tensor<T>> out;
    for (const auto& [n, t] : items_)
      if (n.rfind(prefix, 0) == 0) out.push_back(t);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [k, t] : items_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [n, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

// Each parameter draws from its own stream derived from (seed, name), so
// adding a parameter elsewhere never shifts another's initial values.
template <class T>
Tensor<T> init_normal(ParamSet<T>& ps, const std::string& name, Shape shape, double sd, std::uint64_t seed) {
  Rng rng(derive_seed(seed, name));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(sd * rng.normal());
  return ps.add(name, Tensor<T>::from(std::move(shape), std::move(v), true));
}

template <class T>
Tensor<T> init_constant(ParamSet<T>& ps, const std::string& name, Shape shape, double value) {
  return ps.add(name, Tensor<T>::full(std::move(shape), static_cast<T>(value), true));
}

enum class Init { he, xavier, zero };

template <class T>
struct Linear {
  Tensor<T> weight, bias;

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed,
         Init init = Init::he) {
    const double sd = init == Init::zero ? 0.0 : std::sqrt((init == Init::he ? 2.0 : 1.0) / static_cast<double>(in));
    weight = init_normal(ps, name + ".weight", {in, out}, sd, seed);
    bias = init_constant(ps, name + ".bias", {out}, 0.0);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <class T>
struct Conv2d {
  Tensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t stride_, std::uint64_t seed, Init init = Init::he)
      : stride(stride_), pad(kernel / 2) {
    const double fan_in = static_cast<double>(in * kernel * kernel);
    const double sd = init == Init::zero ? 0.0 : std::sqrt((init == Init::he ? 2.0 : 1.0) / fan_in);
    weight = init_normal(ps, name + ".weight", {kernel, kernel, in, out}, sd, seed);
    bias = init_constant(ps, name + ".bias", {out}, 0.0);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, std::size_t dim) {
    gamma = init_constant(ps, name + ".gamma", {dim}, 1.0);
    beta = init_constant(ps, name + ".beta", {dim}, 0.0);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

// Linear -> ReLU -> Linear, used as the projection head in front of the loss.
template <class T>
struct ProjectionHead {
  Linear<T> fc1, fc2;

  ProjectionHead() = default;
  ProjectionHead(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                 std::uint64_t seed)
      : fc1(ps, name + ".fc1", in, hidden, seed), fc2(ps, name + ".fc2", hidden, out, seed, Init::xavier) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(x))); }
};

// Pre-norm transformer encoder with a key-padding mask.
template <class T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(ParamSet<T>& ps, const std::string& name, std::size_t layers, std::size_t width,
                     std::size_t heads, std::size_t mlp, std::uint64_t seed)
      : width_(width), heads_(heads) {
    if (heads == 0 || width % heads)
      throw std::invalid_argument("TransformerEncoder: width " + std::to_string(width) +
                                  " not divisible by heads " + std::to_string(heads));
    for (std::size_t i = 0; i < layers; ++i) {
      const std::string p = name + ".layer" + std::to_string(i);
      blocks_.push_back({LayerNorm<T>(ps, p + ".ln1", width), Linear<T>(ps, p + ".qkv", width, 3 * width, seed, Init::xavier),
                         Linear<T>(ps, p + ".out", width, width, seed, Init::xavier), LayerNorm<T>(ps, p + ".ln2", width),
                         Linear<T>(ps, p + ".fc1", width, mlp, seed), Linear<T>(ps, p + ".fc2", mlp, width, seed, Init::xavier)});
    }
    final_ln_ = LayerNorm<T>(ps, name + ".ln_final", width);
  }

  // x: [B, T, width]; valid: B*T flags, false marks padding keys.
  Tensor<T> operator()(Tensor<T> x, const std::vector<std::uint8_t>& valid) const {
    const std::size_t b = x.dim(0), t = x.dim(1), dh = width_ / heads_;
    if (valid.size() != b * t) throw ShapeError("TransformerEncoder: mask size mismatch for " + shape_str(x.shape()));
    std::vector<T> bias(b * heads_ * t, T(0));
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t h = 0; h < heads_; ++h)
        for (std::size_t j = 0; j < t; ++j)
          if (!valid[i * t + j]) bias[(i * heads_ + h) * t + j] = T(-1e9);
    const auto key_mask = Tensor<T>::from({b * heads_, 1, t}, std::move(bias));
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    for (const auto& blk : blocks_) {
      auto qkv = permute(reshape(blk.qkv(blk.ln1(x)), {b, t, 3, heads_, dh}), {2, 0, 3, 1, 4});
      auto q = reshape(slice(qkv, 0, 0, 1), {b * heads_, t, dh});
      auto k = reshape(slice(qkv, 0, 1, 2), {b * heads_, t, dh});
      auto v = reshape(slice(qkv, 0, 2, 3), {b * heads_, t, dh});
      auto att = softmax(add(scale(bmm(q, permute(k, {0, 2, 1})), inv_sqrt), key_mask));
      auto ctx = reshape(permute(reshape(bmm(att, v), {b, heads_, t, dh}), {0, 2, 1, 3}), {b, t, width_});
      x = add(x, blk.out(ctx));
      x = add(x, blk.fc2(gelu(blk.fc1(blk.ln2(x)))));
    }
    return final_ln_(x);
  }

  std::size_t width() const { return width_; }

 private:
  struct Block {
    LayerNorm<T> ln1;
    Linear<T> qkv, out;
    LayerNorm<T> ln2;
    Linear<T> fc1, fc2;
  };
  std::vector<Block> blocks_;
  LayerNorm<T> final_ln_;
  std::size_t width_ = 0, heads_ = 1;
};

}  // namespace patchgame
