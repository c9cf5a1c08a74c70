#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hemaseg/config.hpp"
#include "hemaseg/io.hpp"
#include "hemaseg/optim.hpp"
#include "hemaseg/unetr.hpp"

namespace hemaseg {

// Checkpoint layout (all integers little-endian):
//   magic "HSCK", version u32, config length u64, config text (JSON),
//   record count u64, then per record:
//   name length u32, name bytes, dtype u8, rank u8, dims u64 × rank, payload.

inline constexpr std::array<char, 4> kCheckpointMagic = {'H', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Dtype : std::uint8_t { f32 = 1, f64 = 2, u64 = 3 };

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f64:
    case Dtype::u64: return 8;
  }
  throw FormatError("checkpoint: unknown dtype");
}

template <typename T>
constexpr Dtype dtype_of() {
  if constexpr (std::is_same_v<T, float>) return Dtype::f32;
  else if constexpr (std::is_same_v<T, double>) return Dtype::f64;
  else {
    static_assert(std::is_same_v<T, std::uint64_t>);
    return Dtype::u64;
  }
}

struct TensorRecord {
  std::string name;
  Dtype dtype = Dtype::f32;
  Shape shape;
  std::vector<char> bytes;  // little-endian payload

  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct Checkpoint {
  std::string config;  // JSON snapshot
  std::vector<TensorRecord> records;

  [[nodiscard]] const TensorRecord* find(const std::string& name) const {
    auto it = std::find_if(records.begin(), records.end(), [&](const TensorRecord& r) { return r.name == name; });
    return it == records.end() ? nullptr : &*it;
  }

  [[nodiscard]] bool contains(const std::string& name) const { return find(name) != nullptr; }

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    if (contains(name)) throw std::invalid_argument("checkpoint: duplicate tensor '" + name + "'");
    TensorRecord r{name, dtype_of<T>(), t.shape(), {}};
    std::ostringstream os;
    if constexpr (std::is_floating_point_v<T>) {
      io::put_floats(os, t.ptr(), t.size());
    } else {
      for (auto v : t.data()) io::put_le(os, v);
    }
    const std::string s = os.str();
    r.bytes.assign(s.begin(), s.end());
    records.push_back(std::move(r));
  }

  void put_u64(const std::string& name, std::uint64_t v) { put(name, Tensor<std::uint64_t>(Shape{}, {v})); }

  template <typename T>
  [[nodiscard]] Tensor<T> get(const std::string& name) const {
    const TensorRecord* r = find(name);
    if (!r) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (r->dtype != dtype_of<T>()) throw FormatError("checkpoint: tensor '" + name + "' has a different dtype");
    Tensor<T> t(r->shape);
    std::istringstream is(std::string(r->bytes.begin(), r->bytes.end()));
    if constexpr (std::is_floating_point_v<T>) {
      io::get_floats(is, t.ptr(), t.size());
    } else {
      for (auto& v : t.data()) v = io::get_le<T>(is);
    }
    return t;
  }

  [[nodiscard]] std::uint64_t get_u64(const std::string& name) const { return get<std::uint64_t>(name)[0]; }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  os.write(kCheckpointMagic.data(), 4);
  io::put_le(os, kCheckpointVersion);
  io::put_le(os, std::uint64_t(c.config.size()));
  os.write(c.config.data(), std::streamsize(c.config.size()));
  io::put_le(os, std::uint64_t(c.records.size()));
  for (const auto& r : c.records) {
    if (r.shape.size() > 255) throw FormatError("checkpoint: rank too large");
    io::put_le(os, std::uint32_t(r.name.size()));
    os.write(r.name.data(), std::streamsize(r.name.size()));
    io::put_le(os, static_cast<std::uint8_t>(r.dtype));
    io::put_le(os, static_cast<std::uint8_t>(r.shape.size()));
    for (auto d : r.shape) io::put_le(os, std::uint64_t(d));
    os.write(r.bytes.data(), std::streamsize(r.bytes.size()));
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw FormatError("checkpoint: bad magic");
  const auto version = io::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  c.config.resize(io::get_le<std::uint64_t>(is));
  if (!is.read(c.config.data(), std::streamsize(c.config.size()))) throw FormatError("checkpoint: truncated config");
  const auto count = io::get_le<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    r.name.resize(io::get_le<std::uint32_t>(is));
    if (!is.read(r.name.data(), std::streamsize(r.name.size()))) throw FormatError("checkpoint: truncated record name");
    r.dtype = static_cast<Dtype>(io::get_le<std::uint8_t>(is));
    const auto rank = io::get_le<std::uint8_t>(is);
    for (std::uint8_t d = 0; d < rank; ++d) r.shape.push_back(io::get_le<std::uint64_t>(is));
    r.bytes.resize(numel(r.shape) * dtype_size(r.dtype));
    if (!is.read(r.bytes.data(), std::streamsize(r.bytes.size()))) {
      throw FormatError("checkpoint: truncated payload for '" + r.name + "'");
    }
    if (c.contains(r.name)) throw FormatError("checkpoint: tensor '" + r.name + "' appears twice");
    c.records.push_back(std::move(r));
  }
  return c;
}

inline std::string serialize(const Checkpoint& c) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, c);
  return os.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  auto os = io::open_out(path);
  write_checkpoint(os, c);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  return read_checkpoint(is);
}

// ---------------------------------------------------------------------------
// Module and optimizer state

/// Stores every parameter of `module` as "<prefix>.<name>".
template <typename T, typename M>
void store_module(Checkpoint& c, M& module, const std::string& prefix) {
  module.visit(prefix, [&](const std::string& name, Parameter<T>& p) {
    if (!p.materialized()) throw std::logic_error("checkpoint: parameter '" + name + "' is not initialized");
    c.put(name, p.value);
  });
}

/// Lists parameters of `module` that "<prefix>.<name>" records in `c` cannot
/// fill: missing tensors and shape or dtype mismatches.
template <typename T, typename M>
std::vector<std::string> module_mismatches(M& module, const Checkpoint& c, const std::string& prefix) {
  std::vector<std::string> problems;
  module.visit(prefix, [&](const std::string& name, Parameter<T>& p) {
    const TensorRecord* r = c.find(name);
    if (!r) {
      problems.push_back(name + " (missing)");
    } else if (r->shape != p.shape) {
      problems.push_back(name + " (checkpoint " + to_string(r->shape) + " vs model " + to_string(p.shape) + ")");
    } else if (r->dtype != dtype_of<T>()) {
      problems.push_back(name + " (dtype)");
    }
  });
  return problems;
}

/// Restores every parameter of `module` from "<prefix>.<name>". Nothing is
/// modified unless every tensor matches; all mismatches are reported together.
template <typename T, typename M>
void restore_module(M& module, const Checkpoint& c, const std::string& prefix) {
  const auto problems = module_mismatches<T>(module, c, prefix);
  if (!problems.empty()) {
    std::string msg = "checkpoint: " + std::to_string(problems.size()) + " mismatched tensor(s):";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  module.visit(prefix, [&](const std::string& name, Parameter<T>& p) { p.value = c.get<T>(name); });
}

template <typename T>
void store_optimizer(Checkpoint& c, const Adam<T>& opt, const std::string& prefix) {
  for (const auto& [name, slot] : opt.slots()) {
    c.put(prefix + ".m." + name, slot.m);
    c.put(prefix + ".v." + name, slot.v);
    c.put_u64(prefix + ".step." + name, slot.step);
  }
}

template <typename T>
void restore_optimizer(Adam<T>& opt, const Checkpoint& c, const std::string& prefix) {
  opt.slots().clear();
  const std::string mp = prefix + ".m.";
  for (const auto& r : c.records) {
    if (!r.name.starts_with(mp)) continue;
    const std::string name = r.name.substr(mp.size());
    AdamSlot<T> s;
    s.m = c.get<T>(r.name);
    s.v = c.get<T>(prefix + ".v." + name);
    s.step = c.get_u64(prefix + ".step." + name);
    opt.slots().emplace(name, std::move(s));
  }
}

/// Vision-transformer settings recorded in a checkpoint's config snapshot
/// under `key` (e.g. "pretrain.mae.vit").
inline std::optional<ViTConfig> snapshot_vit(const Checkpoint& c, const std::string& key) {
  Json j;
  try {
    j = Json::parse(c.config);
  } catch (const nlohmann::json::parse_error&) {
    return std::nullopt;
  }
  const Json* node = &j;
  std::size_t start = 0;
  while (start <= key.size()) {
    const std::size_t dot = std::min(key.find('.', start), key.size());
    const std::string part = key.substr(start, dot - start);
    if (!node->is_object() || !node->contains(part)) return std::nullopt;
    node = &(*node)[part];
    start = dot + 1;
  }
  ViTConfig v;
  cfg::from_json(*node, key, v);
  return v;
}

/// Replaces the UNETR encoder with the MAE encoder stored in `c` (records
/// "mae.encoder.*"). The decoder is untouched.
template <typename T>
void load_pretrained_encoder(Unetr<T>& model, const Checkpoint& c) {
  if (auto v = snapshot_vit(c, "pretrain.mae.vit"); v && !(*v == model.config.vit)) {
    std::vector<std::string> fields;
    const ViTConfig& m = model.config.vit;
    if (v->patch_size != m.patch_size) fields.push_back("patch_size " + std::to_string(v->patch_size) + " vs " + std::to_string(m.patch_size));
    if (v->embed_dim != m.embed_dim) fields.push_back("embed_dim " + std::to_string(v->embed_dim) + " vs " + std::to_string(m.embed_dim));
    if (v->mlp_dim != m.mlp_dim) fields.push_back("mlp_dim " + std::to_string(v->mlp_dim) + " vs " + std::to_string(m.mlp_dim));
    if (v->num_layers != m.num_layers) fields.push_back("num_layers " + std::to_string(v->num_layers) + " vs " + std::to_string(m.num_layers));
    if (v->num_heads != m.num_heads) fields.push_back("num_heads " + std::to_string(v->num_heads) + " vs " + std::to_string(m.num_heads));
    if (v->image_size != m.image_size) fields.push_back("image_size " + std::to_string(v->image_size) + " vs " + std::to_string(m.image_size));
    if (v->channels != m.channels) fields.push_back("channels " + std::to_string(v->channels) + " vs " + std::to_string(m.channels));
    if (v->use_cls_token != m.use_cls_token) fields.push_back("use_cls_token");
    if (v->layernorm_eps != m.layernorm_eps) fields.push_back("layernorm_eps");
    std::string msg = "load_pretrained_encoder: checkpoint encoder config differs from model:";
    for (const auto& f : fields) msg += "\n  " + f;
    for (const auto& p : module_mismatches<T>(model.encoder, c, "mae.encoder")) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  restore_module<T>(model.encoder, c, "mae.encoder");
}

}  // namespace hemaseg
