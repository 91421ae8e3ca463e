#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "skeleguide/autograd.hpp"
#include "skeleguide/backbone.hpp"
#include "skeleguide/errors.hpp"
#include "skeleguide/image.hpp"
#include "skeleguide/rng.hpp"

namespace skeleguide {

inline constexpr char kCheckpointMagic[4] = {'S', 'K', 'G', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

/// One named array of a checkpoint file.
struct CheckpointEntry {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::f32;
  std::vector<std::uint8_t> data;  // little-endian element bytes

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  std::size_t element_size() const { return dtype == DType::f32 ? 4 : 1; }

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

inline CheckpointEntry matrix_entry(const std::string& name, const ag::Mat<float>& m) {
  CheckpointEntry e{name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, DType::f32, {}};
  e.data.resize(static_cast<std::size_t>(m.size()) * 4);
  // little-endian hosts only; checked below
  std::memcpy(e.data.data(), m.data(), e.data.size());
  return e;
}

inline CheckpointEntry text_entry(const std::string& name, const std::string& text) {
  CheckpointEntry e{name, {text.size()}, DType::u8, {}};
  e.data.assign(text.begin(), text.end());
  return e;
}

inline ag::Mat<float> entry_matrix(const CheckpointEntry& e) {
  if (e.dtype != DType::f32 || e.dims.size() != 2) throw FormatError("entry '" + e.name + "' is not a float32 matrix");
  ag::Mat<float> m(static_cast<Eigen::Index>(e.dims[0]), static_cast<Eigen::Index>(e.dims[1]));
  std::memcpy(m.data(), e.data.data(), e.data.size());
  return m;
}

inline std::string entry_text(const CheckpointEntry& e) {
  if (e.dtype != DType::u8) throw FormatError("entry '" + e.name + "' is not a byte blob");
  return std::string(e.data.begin(), e.data.end());
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class U>
void put(std::vector<std::uint8_t>& out, U v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, p_ + off_, sizeof(U));
    off_ += sizeof(U);
    return v;
  }
  void bytes(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, p_ + off_, n);
    off_ += n;
  }
  std::size_t remaining() const { return n_ - off_; }

 private:
  void need(std::size_t k, const char* what) const {
    if (k > n_ - off_)
      throw FormatError("truncated checkpoint: need " + std::to_string(k) + " bytes for " + what + " at offset " +
                        std::to_string(off_) + ", have " + std::to_string(n_ - off_));
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t off_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, entries.size());
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw FormatError("entry name too long: " + e.name.substr(0, 64));
    if (e.dims.size() > 0xFF) throw FormatError("entry rank too large: " + e.name);
    if (e.data.size() != e.element_count() * e.element_size()) throw FormatError("entry size mismatch: " + e.name);
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) detail::put<std::uint64_t>(out, d);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    out.insert(out.end(), e.data.begin(), e.data.end());
  }
  return out;
}

inline std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::Reader r(bytes.data(), bytes.size());
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("bad magic: expected 'SKGD', found '" + std::string(magic, 4) + "'");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  const auto count = r.get<std::uint64_t>("entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.get<std::uint16_t>("name length");
    e.name.resize(len);
    r.bytes(e.name.data(), len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    for (int k = 0; k < rank; ++k) e.dims.push_back(r.get<std::uint64_t>("dims"));
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw FormatError("entry '" + e.name + "' has unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const std::uint64_t n = e.element_count();
    if (n > r.remaining() / e.element_size())
      throw FormatError("truncated checkpoint: entry '" + e.name + "' needs " + std::to_string(n * e.element_size()) +
                        " bytes, have " + std::to_string(r.remaining()));
    e.data.resize(static_cast<std::size_t>(n * e.element_size()));
    r.bytes(e.data.data(), e.data.size(), "data");
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after " + std::to_string(count) + " entries");
  return entries;
}

/// Optimizer and loop state carried between runs.
struct TrainState {
  std::string phase;  // empty for a freshly initialised model
  std::uint64_t step = 0;
  std::uint64_t config_hash = 0;
  std::string rng_state;
  double avg_reason = 0.0, avg_render = 0.0, avg_total = 0.0;
  nlohmann::json log = nlohmann::json::array();  // loss history and phase records
  std::map<std::string, ag::Mat<float>> adam_m, adam_v;

  friend bool operator==(const TrainState& a, const TrainState& b) {
    return a.phase == b.phase && a.step == b.step && a.config_hash == b.config_hash && a.rng_state == b.rng_state &&
           a.avg_reason == b.avg_reason && a.avg_render == b.avg_render && a.avg_total == b.avg_total &&
           a.log == b.log && a.adam_m == b.adam_m && a.adam_v == b.adam_v;
  }
};

struct Checkpoint {
  Backbone<float> model;
  TrainState state;
};

inline std::vector<CheckpointEntry> checkpoint_entries(const Backbone<float>& model, const TrainState& state) {
  std::vector<CheckpointEntry> entries;
  entries.push_back(text_entry("meta/model_config", nlohmann::json(model.config()).dump()));
  nlohmann::json meta{{"phase", state.phase},
                      {"step", state.step},
                      {"config_hash", hex64(state.config_hash)},
                      {"rng", state.rng_state},
                      {"avg_reason", state.avg_reason},
                      {"avg_render", state.avg_render},
                      {"avg_total", state.avg_total},
                      {"log", state.log}};
  entries.push_back(text_entry("meta/train_state", meta.dump()));
  for (const auto& [name, v] : model.params()) entries.push_back(matrix_entry("param/" + name, v.value()));
  for (const auto& [name, m] : state.adam_m) entries.push_back(matrix_entry("opt/m/" + name, m));
  for (const auto& [name, m] : state.adam_v) entries.push_back(matrix_entry("opt/v/" + name, m));
  return entries;
}

inline Checkpoint checkpoint_from_entries(const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto find = [&](const std::string& n) -> const CheckpointEntry& {
    auto it = by_name.find(n);
    if (it == by_name.end()) throw FormatError("checkpoint lacks entry '" + n + "'");
    return *it->second;
  };
  ModelConfig config;
  TrainState state;
  try {
    config = nlohmann::json::parse(entry_text(find("meta/model_config"))).get<ModelConfig>();
    const auto meta = nlohmann::json::parse(entry_text(find("meta/train_state")));
    state.phase = meta.at("phase").get<std::string>();
    state.step = meta.at("step").get<std::uint64_t>();
    state.config_hash = std::stoull(meta.at("config_hash").get<std::string>(), nullptr, 16);
    state.rng_state = meta.at("rng").get<std::string>();
    state.avg_reason = meta.at("avg_reason").get<double>();
    state.avg_render = meta.at("avg_render").get<double>();
    state.avg_total = meta.at("avg_total").get<double>();
    state.log = meta.at("log");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  Backbone<float> model(config);
  for (const auto& [name, v] : model.params()) {
    const auto& e = find("param/" + name);
    ag::Mat<float> m = entry_matrix(e);
    if (m.rows() != v.rows() || m.cols() != v.cols()) throw FormatError("parameter '" + name + "' has the wrong shape");
    model.param(name).mutable_value() = std::move(m);
  }
  for (const auto& e : entries) {
    if (e.name.compare(0, 6, "opt/m/") == 0) state.adam_m[e.name.substr(6)] = entry_matrix(e);
    if (e.name.compare(0, 6, "opt/v/") == 0) state.adam_v[e.name.substr(6)] = entry_matrix(e);
  }
  return {std::move(model), std::move(state)};
}

/// Writes to a sibling temporary file and renames, so readers never see a partial file.
inline void save_checkpoint(const Backbone<float>& model, const TrainState& state, const std::string& path) {
  const auto bytes = encode_checkpoint(checkpoint_entries(model, state));
  const std::string tmp = path + ".tmp";
  write_bytes(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path, ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_entries(decode_checkpoint(read_bytes(path))); }

/// Content hash of a checkpoint file, echoed by reports and the service.
inline std::string checkpoint_hash(const std::string& path) {
  const auto bytes = read_bytes(path);
  return hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
}

}  // namespace skeleguide
