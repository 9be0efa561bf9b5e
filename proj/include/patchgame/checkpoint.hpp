#pragma once

// Parameter checkpoints.
//
// Layout (little-endian):
//   magic "PGCKPT01", u32 version,
//   manifest: u64 config hash, i32 epoch, u8 bytes per value, string config text,
//   u32 tensor count, then per tensor: string name, u32 ndim, u64 dims..., raw values.
// Optimizer momentum buffers are stored as tensors named "opt/<param name>".

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "patchgame/binio.hpp"
#include "patchgame/nn.hpp"
#include "patchgame/optim.hpp"

namespace patchgame {

inline constexpr char kCheckpointMagic[9] = "PGCKPT01";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointManifest {
  std::uint64_t config_hash = 0;
  std::int32_t epoch = -1;
  std::uint8_t value_bytes = 4;
  std::string config_text;
};

struct StoredTensor {
  Shape shape;
  std::vector<char> raw;
};

// Written to a sibling temp file and renamed into place.
template <class T>
void save_checkpoint(const std::string& path, CheckpointManifest manifest, const ParamSet<T>& params,
                     const SgdMomentum<T>* opt = nullptr) {
  manifest.value_bytes = sizeof(T);
  const std::string tmp = path + ".tmp";
  {
    BinaryWriter w(tmp);
    w.put_bytes(kCheckpointMagic, 8);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint64_t>(manifest.config_hash);
    w.put<std::int32_t>(manifest.epoch);
    w.put<std::uint8_t>(manifest.value_bytes);
    w.put_string(manifest.config_text);
    const std::size_t n_opt = opt ? opt->buffers().size() : 0;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size() + n_opt));
    auto put_tensor = [&w](const std::string& name, const Shape& shape, const std::vector<T>& values) {
      w.put_string(name);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
      for (auto d : shape) w.put<std::uint64_t>(d);
      w.put_array(values);
    };
    for (const auto& [name, t] : params.items()) put_tensor(name, t.shape(), t.to_vector());
    if (opt) {
      if (opt->buffers().size() != params.size()) throw std::logic_error("save_checkpoint: optimizer/parameter mismatch");
      for (std::size_t i = 0; i < params.size(); ++i)
        put_tensor("opt/" + params.items()[i].first, params.items()[i].second.shape(), opt->buffers()[i]);
    }
    w.close();
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointManifest read_checkpoint(const std::string& path, std::map<std::string, StoredTensor>* tensors) {
  BinaryReader r(path);
  r.expect_magic(kCheckpointMagic);
  r.expect_version(kCheckpointVersion);
  CheckpointManifest m;
  m.config_hash = r.get<std::uint64_t>();
  m.epoch = r.get<std::int32_t>();
  m.value_bytes = r.get<std::uint8_t>();
  if (m.value_bytes != 4 && m.value_bytes != 8) throw FormatError(path + ": unsupported value width");
  m.config_text = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string(4096);
    StoredTensor st;
    const auto nd = r.get<std::uint32_t>();
    if (nd > 8) throw FormatError(path + ": tensor " + name + " has implausible rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < nd; ++k) {
      st.shape.push_back(r.get<std::uint64_t>());
      n *= st.shape.back();
    }
    if (n > (1u << 28)) throw FormatError(path + ": tensor " + name + " too large");
    st.raw = r.get_array<char>(n * m.value_bytes);
    if (tensors) (*tensors)[name] = std::move(st);
  }
  if (!r.at_end()) throw FormatError(path + ": trailing bytes");
  return m;
}

namespace detail {
template <class T>
void copy_stored(const StoredTensor& st, std::uint8_t width, std::span<T> dst) {
  if (width == sizeof(T)) {
    std::memcpy(dst.data(), st.raw.data(), dst.size() * sizeof(T));
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (width == 4) {
      float v;
      std::memcpy(&v, st.raw.data() + i * 4, 4);
      dst[i] = static_cast<T>(v);
    } else {
      double v;
      std::memcpy(&v, st.raw.data() + i * 8, 8);
      dst[i] = static_cast<T>(v);
    }
  }
}
}  // namespace detail

// Loads into existing parameters; names and shapes must match exactly.
template <class T>
CheckpointManifest load_checkpoint(const std::string& path, ParamSet<T>& params, SgdMomentum<T>* opt = nullptr) {
  std::map<std::string, StoredTensor> stored;
  auto m = read_checkpoint(path, &stored);
  for (auto& [name, t] : params.items()) {
    auto it = stored.find(name);
    if (it == stored.end()) throw FormatError(path + ": missing parameter " + name);
    if (it->second.shape != t.shape())
      throw FormatError(path + ": parameter " + name + " has shape " + shape_str(it->second.shape) + ", expected " +
                        shape_str(t.shape()));
    Tensor<T> handle = t;
    detail::copy_stored(it->second, m.value_bytes, handle.mutable_data());
  }
  if (opt) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto it = stored.find("opt/" + params.items()[i].first);
      if (it == stored.end()) throw FormatError(path + ": checkpoint has no optimizer state");
      detail::copy_stored(it->second, m.value_bytes, std::span<T>(opt->buffers()[i]));
    }
  }
  return m;
}

}  // namespace patchgame
