#pragma once

// Versioned binary checkpoint container.
//
// Layout (little-endian): "ALCK", u32 version, u64 header length, header text
// (key = value lines), u32 blob count, then per blob: u32 name length, name,
// u8 dtype, u64 rows, u64 cols, rows * cols values in row-major order.

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "alct/config.hpp"
#include "alct/corpus.hpp"
#include "alct/errors.hpp"
#include "alct/model.hpp"
#include "alct/optim.hpp"

namespace alct {

enum class DType : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kFloat32 : DType::kFloat64;
}

struct Blob {
  std::string name;
  DType dtype = DType::kFloat32;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<char> bytes;

  template <class T>
  static Blob from(std::string name, const Matrix<T>& m) {
    Blob b;
    b.name = std::move(name);
    b.dtype = dtype_of<T>();
    b.rows = std::uint64_t(m.rows());
    b.cols = std::uint64_t(m.cols());
    b.bytes.resize(std::size_t(m.size()) * sizeof(T));
    std::memcpy(b.bytes.data(), m.data(), b.bytes.size());
    return b;
  }

  template <class T>
  Matrix<T> as() const {
    Matrix<T> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    if (dtype == dtype_of<T>()) {
      std::memcpy(m.data(), bytes.data(), bytes.size());
    } else if (dtype == DType::kFloat32) {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        float f;
        std::memcpy(&f, bytes.data() + std::size_t(i) * 4, 4);
        m.data()[i] = T(f);
      }
    } else {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        double d;
        std::memcpy(&d, bytes.data() + std::size_t(i) * 8, 8);
        m.data()[i] = T(d);
      }
    }
    return m;
  }
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  KeyValues header;
  std::vector<Blob> blobs;

  const Blob& blob(const std::string& name) const {
    for (const auto& b : blobs) {
      if (b.name == name) return b;
    }
    throw FormatError("checkpoint has no blob named " + name);
  }

  bool has_blob(const std::string& name) const {
    for (const auto& b : blobs) {
      if (b.name == name) return true;
    }
    return false;
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  // Write to a sibling file first so an interrupted save never truncates a
  // previous checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot open " + tmp + " for writing");
    out.write("ALCK", 4);
    io::write_pod(out, Checkpoint::kVersion);
    const std::string header = ckpt.header.str();
    io::write_pod(out, std::uint64_t(header.size()));
    out.write(header.data(), std::streamsize(header.size()));
    io::write_pod(out, std::uint32_t(ckpt.blobs.size()));
    for (const auto& b : ckpt.blobs) {
      io::write_pod(out, std::uint32_t(b.name.size()));
      out.write(b.name.data(), std::streamsize(b.name.size()));
      io::write_pod(out, std::uint8_t(b.dtype));
      io::write_pod(out, b.rows);
      io::write_pod(out, b.cols);
      out.write(b.bytes.data(), std::streamsize(b.bytes.size()));
    }
    if (!out) throw Error("failed writing " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move " + tmp + " to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || std::memcmp(magic.data(), "ALCK", 4) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  const auto version = io::read_pod<std::uint32_t>(in, "version");
  if (version != Checkpoint::kVersion) throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  const auto header_len = io::read_pod<std::uint64_t>(in, "header length");
  if (header_len > (1u << 24)) throw FormatError(path + ": implausible header length");
  std::string header(header_len, '\0');
  in.read(header.data(), std::streamsize(header_len));
  if (!in) throw FormatError(path + ": truncated header");
  c.header = KeyValues::parse(header);
  const auto n = io::read_pod<std::uint32_t>(in, "blob count");
  for (std::uint32_t i = 0; i < n; ++i) {
    Blob b;
    const auto name_len = io::read_pod<std::uint32_t>(in, "blob name length");
    if (name_len > 4096) throw FormatError(path + ": implausible blob name length");
    b.name.resize(name_len);
    in.read(b.name.data(), name_len);
    const auto dtype = io::read_pod<std::uint8_t>(in, "dtype");
    if (dtype != 1 && dtype != 2) throw FormatError(path + ": unknown dtype tag " + std::to_string(dtype));
    b.dtype = DType(dtype);
    b.rows = io::read_pod<std::uint64_t>(in, "rows");
    b.cols = io::read_pod<std::uint64_t>(in, "cols");
    const std::size_t width = b.dtype == DType::kFloat32 ? 4 : 8;
    if (b.rows * b.cols > (std::uint64_t(1) << 34) / width) throw FormatError(path + ": implausible blob size");
    b.bytes.resize(std::size_t(b.rows * b.cols) * width);
    in.read(b.bytes.data(), std::streamsize(b.bytes.size()));
    if (!in) throw FormatError(path + ": truncated blob " + b.name);
    c.blobs.push_back(std::move(b));
  }
  return c;
}

/// Model weights as named blobs, in parameter order.
template <class T>
void add_model_blobs(Checkpoint& ckpt, const LatentModel<T>& model) {
  for (const auto& p : model.parameters()) ckpt.blobs.push_back(Blob::from<T>(p.name, p.var->value));
}

template <class T>
void load_model_weights(const Checkpoint& ckpt, LatentModel<T>& model) {
  for (const auto& p : model.parameters()) {
    const auto& b = ckpt.blob(p.name);
    if (Eigen::Index(b.rows) != p.var->value.rows() || Eigen::Index(b.cols) != p.var->value.cols()) {
      throw FormatError("shape mismatch for " + p.name);
    }
    p.var->value = b.template as<T>();
  }
}

/// Builds a model from the checkpoint's model.* header and weights.
template <class T>
LatentModel<T> load_model(const Checkpoint& ckpt) {
  LatentModel<T> model(ModelConfig::from(ckpt.header, "model."), 0);
  load_model_weights(ckpt, model);
  return model;
}

template <class T>
LatentModel<T> load_model(const std::string& path) {
  return load_model<T>(load_checkpoint(path));
}

/// Everything needed to continue training bit-identically.
struct TrainingState {
  long long step = 0;
  WindowSampler::State sampler;
  long long tokens_seen = 0;
  double flops_cum = 0.0;
};

template <class T>
Checkpoint make_training_checkpoint(const TrainConfig& config, const LatentModel<T>& model, const AdamW<T>& opt,
                                    const TrainingState& state) {
  Checkpoint c;
  c.header = config.to_key_values();
  c.header.set("state.step", std::to_string(state.step));
  c.header.set("state.sampler_epoch", std::to_string(state.sampler.epoch));
  c.header.set("state.sampler_cursor", std::to_string(state.sampler.cursor));
  c.header.set("state.tokens_seen", std::to_string(state.tokens_seen));
  c.header.set("state.flops_cum", detail::format_double(state.flops_cum));
  c.header.set("state.optimizer_steps", std::to_string(opt.steps_taken()));
  add_model_blobs(c, model);
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.blobs.push_back(Blob::from<T>("opt.m." + params[i].name, opt.first_moments()[i]));
    c.blobs.push_back(Blob::from<T>("opt.v." + params[i].name, opt.second_moments()[i]));
  }
  return c;
}

template <class T>
TrainingState restore_training_state(const Checkpoint& c, LatentModel<T>& model, AdamW<T>& opt) {
  using detail::parse_number;
  load_model_weights(c, model);
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.first_moments()[i] = c.blob("opt.m." + params[i].name).template as<T>();
    opt.second_moments()[i] = c.blob("opt.v." + params[i].name).template as<T>();
  }
  TrainingState s;
  s.step = parse_number<long long>("state.step", c.header.get("state.step"));
  s.sampler.epoch = parse_number<std::uint64_t>("state.sampler_epoch", c.header.get("state.sampler_epoch"));
  s.sampler.cursor = parse_number<std::uint64_t>("state.sampler_cursor", c.header.get("state.sampler_cursor"));
  s.tokens_seen = parse_number<long long>("state.tokens_seen", c.header.get("state.tokens_seen"));
  s.flops_cum = parse_number<double>("state.flops_cum", c.header.get("state.flops_cum"));
  opt.set_steps_taken(parse_number<long long>("state.optimizer_steps", c.header.get("state.optimizer_steps")));
  return s;
}

}  // namespace alct
