#pragma once

// Binary checkpoint container.
//
// Little-endian layout: "ERSN", u32 version (1), u8 variant (3 or 4),
// u32 entry count, then per entry: u16 name length, name bytes, u8 rank,
// u32 dims[rank], and a payload of 32-bit words (count = product of dims).
// A u32 CRC-32 of every preceding byte closes the file.
//
// Parameters, batch-norm statistics and Adam moments are stored as floats.
// Integer and double-precision state (step counters, learning rate, RNG
// engine words) is stored as raw 32-bit words in the same float-sized slots.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "erasenet/model.hpp"
#include "erasenet/optim.hpp"
#include "erasenet/rng.hpp"

namespace erasenet {

namespace fs = std::filesystem;

class CheckpointError : public std::runtime_error {
 public:
  enum class Code { Io, BadMagic, BadVersion, Truncated, CrcMismatch, UnknownName, MissingName, ShapeMismatch, VariantMismatch };

  CheckpointError(Code code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint32_t> words;

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

struct Checkpoint {
  Variant variant = Variant::EraseNet4;
  std::vector<CheckpointEntry> entries;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  const CheckpointEntry& get(const std::string& name) const {
    if (const auto* e = find(name)) return *e;
    throw CheckpointError(CheckpointError::Code::MissingName, "checkpoint: missing entry " + name);
  }

  void put_words(std::string name, std::vector<std::uint32_t> dims, std::vector<std::uint32_t> words) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    if (n != words.size()) throw std::logic_error("checkpoint: dims do not match payload for " + name);
    entries.push_back({std::move(name), std::move(dims), std::move(words)});
  }

  template <class T>
  void put_floats(std::string name, std::vector<std::uint32_t> dims, std::span<const T> values) {
    std::vector<std::uint32_t> w(values.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    put_words(std::move(name), std::move(dims), std::move(w));
  }

  void put_u64s(std::string name, const std::vector<std::uint64_t>& values) {
    std::vector<std::uint32_t> w;
    for (auto v : values) {
      w.push_back(static_cast<std::uint32_t>(v));
      w.push_back(static_cast<std::uint32_t>(v >> 32));
    }
    std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(w.size())};
    put_words(std::move(name), std::move(dims), std::move(w));
  }

  void put_u64(std::string name, std::uint64_t v) { put_u64s(std::move(name), {v}); }
  void put_f64(std::string name, double v) { put_u64(std::move(name), std::bit_cast<std::uint64_t>(v)); }

  std::vector<std::uint64_t> get_u64s(const std::string& name) const {
    const auto& e = get(name);
    if (e.words.size() % 2 != 0) throw CheckpointError(CheckpointError::Code::ShapeMismatch, "checkpoint: odd word count in " + name);
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < e.words.size(); i += 2) out.push_back(e.words[i] | (std::uint64_t{e.words[i + 1]} << 32));
    return out;
  }

  std::uint64_t get_u64(const std::string& name) const {
    const auto v = get_u64s(name);
    if (v.size() != 1) throw CheckpointError(CheckpointError::Code::ShapeMismatch, "checkpoint: " + name + " is not a scalar");
    return v[0];
  }

  double get_f64(const std::string& name) const { return std::bit_cast<double>(get_u64(name)); }

  template <class T>
  void get_floats(const std::string& name, std::span<T> out) const {
    const auto& e = get(name);
    if (e.words.size() != out.size()) {
      throw CheckpointError(CheckpointError::Code::ShapeMismatch, "checkpoint: " + name + " holds " + std::to_string(e.words.size()) +
                                                                   " values, expected " + std::to_string(out.size()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(std::bit_cast<float>(e.words[i]));
  }
};

// ---- serialization -------------------------------------------------------------

namespace detail {

struct ByteWriter {
  std::string bytes;
  void u8(std::uint8_t v) { bytes.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::size_t end;

  void need(std::size_t n) const {
    if (pos + n > end) throw CheckpointError(CheckpointError::Code::Truncated, "checkpoint: truncated payload");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
  std::uint16_t u16() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | (std::uint16_t{u8()} << 8));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<std::uint8_t>(bytes[pos++])} << (8 * i);
    return v;
  }
};

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.bytes = "ERSN";
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(c.variant));
  w.u32(static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) throw std::invalid_argument("checkpoint: name too long");
    if (e.dims.size() > 255) throw std::invalid_argument("checkpoint: rank too large");
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.bytes += e.name;
    w.u8(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.u32(d);
    for (auto x : e.words) w.u32(x);
  }
  w.u32(detail::crc32_of(w.bytes, w.bytes.size()));
  return w.bytes;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  using Code = CheckpointError::Code;
  if (bytes.size() < 4 || bytes.compare(0, 4, "ERSN") != 0) {
    throw CheckpointError(bytes.size() < 4 ? Code::Truncated : Code::BadMagic, "checkpoint: bad magic");
  }
  // the trailing CRC is excluded from the parse window
  detail::ByteReader r{bytes, 4, bytes.size() >= 4 ? bytes.size() - 4 : 0};
  if (r.end < 4) r.end = 4;
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Code::BadVersion, "checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  const std::uint8_t variant = r.u8();
  if (variant != 3 && variant != 4) throw CheckpointError(Code::BadVersion, "checkpoint: unknown variant tag " + std::to_string(variant));
  c.variant = static_cast<Variant>(variant);
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const std::uint16_t len = r.u16();
    r.need(len);
    e.name = bytes.substr(r.pos, len);
    r.pos += len;
    const std::uint8_t rank = r.u8();
    std::uint64_t n = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      e.dims.push_back(r.u32());
      n *= e.dims.back();
    }
    r.need(n * 4);
    e.words.resize(n);
    for (auto& x : e.words) x = r.u32();
    c.entries.push_back(std::move(e));
  }
  if (r.pos != r.end) throw CheckpointError(Code::Truncated, "checkpoint: trailing bytes or truncated CRC");
  r.end = bytes.size();
  const std::uint32_t stored = r.u32();
  if (stored != detail::crc32_of(bytes, bytes.size() - 4)) throw CheckpointError(Code::CrcMismatch, "checkpoint: CRC mismatch");
  return c;
}

/// Writes to a sibling temporary and renames it into place.
inline void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  const std::string bytes = encode_checkpoint(c);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Code::Io, "checkpoint: cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError(CheckpointError::Code::Io, "checkpoint: write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Code::Io, "checkpoint: rename to " + path.string() + " failed: " + ec.message());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Code::Io, "checkpoint: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// ---- model and training state ----------------------------------------------------

/// Everything besides the model that a resumed run needs.
struct TrainState {
  AdamState<float> adam;
  PlateauState plateau;
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;
  double best_val = std::numeric_limits<double>::infinity();
  Rng rng;
};

inline std::vector<std::uint32_t> dims_of(const Shape& s) {
  return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
          static_cast<std::uint32_t>(s.w)};
}

inline void put_model(Checkpoint& c, ModelGraph<float>& model) {
  c.variant = model.variant();
  c.put_f64("meta.width_scale", model.width_scale());
  for (const auto& [name, p] : model.parameters()) c.put_floats<float>(name, dims_of(p.shape()), p.data());
  for (const auto& [name, buf] : model.buffers()) {
    c.put_floats<float>(name, {static_cast<std::uint32_t>(buf->size())}, std::span<const float>(*buf));
  }
  for (const auto& [name, bn] : model.batchnorms()) c.put_u64(name + ".updates", bn->updates);
}

inline Checkpoint capture(ModelGraph<float>& model, const TrainState* state = nullptr) {
  Checkpoint c;
  put_model(c, model);
  if (state) {
    const auto& params = model.parameters();
    for (std::size_t k = 0; k < state->adam.m.size() && k < params.size(); ++k) {
      const auto d = dims_of(params[k].second.shape());
      c.put_floats<float>("adam.m." + params[k].first, d, std::span<const float>(state->adam.m[k]));
      c.put_floats<float>("adam.v." + params[k].first, d, std::span<const float>(state->adam.v[k]));
    }
    c.put_u64("adam.t", state->adam.t);
    c.put_f64("adam.lr", state->adam.lr);
    c.put_f64("plateau.best", state->plateau.best);
    c.put_u64("plateau.counter", state->plateau.counter);
    c.put_u64("state.epoch", state->epoch);
    c.put_u64("state.step", state->step);
    c.put_f64("state.best_val", state->best_val);
    c.put_u64s("rng.state", state->rng.state());
  }
  return c;
}

/// Validates the whole checkpoint against the model before touching it, so
/// a failed restore leaves model and state unchanged.
inline void restore(const Checkpoint& c, ModelGraph<float>& model, TrainState* state = nullptr) {
  using Code = CheckpointError::Code;
  if (c.variant != model.variant()) {
    throw CheckpointError(Code::VariantMismatch, "checkpoint holds " + to_string(c.variant) + ", model is " +
                                                     to_string(model.variant()));
  }
  std::set<std::string> known{"meta.width_scale"};
  for (const auto& [name, p] : model.parameters()) {
    known.insert(name);
    known.insert("adam.m." + name);
    known.insert("adam.v." + name);
  }
  for (const auto& [name, buf] : model.buffers()) known.insert(name);
  for (const auto& [name, bn] : model.batchnorms()) known.insert(name + ".updates");
  for (const char* n : {"adam.t", "adam.lr", "plateau.best", "plateau.counter", "state.epoch", "state.step",
                        "state.best_val", "rng.state"}) {
    known.insert(n);
  }
  for (const auto& e : c.entries)
    if (!known.contains(e.name)) throw CheckpointError(Code::UnknownName, "checkpoint: unknown entry " + e.name);

  const double ws = c.get_f64("meta.width_scale");
  if (ws != model.width_scale()) {
    throw CheckpointError(Code::ShapeMismatch, "checkpoint width scale " + std::to_string(ws) + " differs from model " +
                                                   std::to_string(model.width_scale()));
  }
  // dry run over every entry the restore will read
  for (const auto& [name, p] : model.parameters()) {
    if (c.get(name).dims != dims_of(p.shape())) throw CheckpointError(Code::ShapeMismatch, "checkpoint: shape mismatch for " + name);
  }
  for (const auto& [name, buf] : model.buffers()) {
    if (c.get(name).words.size() != buf->size()) throw CheckpointError(Code::ShapeMismatch, "checkpoint: size mismatch for " + name);
  }
  for (const auto& [name, bn] : model.batchnorms()) c.get_u64(name + ".updates");
  Rng restored_rng;
  if (state) {
    for (const auto& [name, p] : model.parameters()) {
      if (c.get("adam.m." + name).words.size() != p.size() || c.get("adam.v." + name).words.size() != p.size()) {
        throw CheckpointError(Code::ShapeMismatch, "checkpoint: moment size mismatch for " + name);
      }
    }
    try {
      restored_rng.set_state(c.get_u64s("rng.state"));
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(Code::ShapeMismatch, std::string("checkpoint: ") + e.what());
    }
    for (const char* n : {"adam.t", "adam.lr", "plateau.best", "plateau.counter", "state.epoch", "state.step", "state.best_val"}) {
      c.get_u64(n);
    }
  }

  for (const auto& [name, p] : model.parameters()) {
    Tensor<float> t = p;
    c.get_floats<float>(name, t.mutable_data());
  }
  for (const auto& [name, buf] : model.buffers()) c.get_floats<float>(name, std::span<float>(*buf));
  for (const auto& [name, bn] : model.batchnorms()) bn->updates = c.get_u64(name + ".updates");
  if (state) {
    const auto& params = model.parameters();
    state->adam.m.assign(params.size(), {});
    state->adam.v.assign(params.size(), {});
    for (std::size_t k = 0; k < params.size(); ++k) {
      state->adam.m[k].resize(params[k].second.size());
      state->adam.v[k].resize(params[k].second.size());
      c.get_floats<float>("adam.m." + params[k].first, std::span<float>(state->adam.m[k]));
      c.get_floats<float>("adam.v." + params[k].first, std::span<float>(state->adam.v[k]));
    }
    state->adam.t = c.get_u64("adam.t");
    state->adam.lr = c.get_f64("adam.lr");
    state->plateau.best = c.get_f64("plateau.best");
    state->plateau.counter = c.get_u64("plateau.counter");
    state->epoch = c.get_u64("state.epoch");
    state->step = c.get_u64("state.step");
    state->best_val = c.get_f64("state.best_val");
    state->rng = restored_rng;
  }
}

/// Reads only the variant and width scale, e.g. to build a matching model.
inline std::pair<Variant, double> checkpoint_architecture(const Checkpoint& c) {
  return {c.variant, c.get_f64("meta.width_scale")};
}

}  // namespace erasenet
