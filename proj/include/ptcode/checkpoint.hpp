#pragma once

#include "ptcode/encoder.hpp"
#include "ptcode/error.hpp"
#include "ptcode/tensor.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>

// Checkpoint archive layout (all integers little-endian):
//
//   8 bytes   magic "PTCODE\0\1"
//   u64       manifest length in bytes
//   ...       manifest, UTF-8 JSON: {"format", "model", "seed", "step",
//             "epoch", "extra", "tensors": [{"name","rows","cols","trainable"}]}
//   per tensor, in manifest order:
//     u64 rows, u64 cols, rows*cols IEEE-754 binary64 values, row-major

namespace ptcode {

struct CheckpointMeta {
  ModelConfig model;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  CheckpointMeta meta;
  ParameterStore<double> tensors;
};

namespace detail {

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'T', 'C', 'O', 'D', 'E', '\0', '\1'};

inline void write_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b.data(), 8);
}

inline std::uint64_t read_u64(std::istream& in, const std::string& path) {
  std::array<unsigned char, 8> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 8)) throw DataError(path + ": truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const ParameterStore<S>& params, const CheckpointMeta& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : params.all())
    tensors.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"trainable", p.trainable}});
  nlohmann::json manifest = {{"format", 1},          {"model", meta.model}, {"seed", meta.seed},
                             {"step", meta.step},    {"epoch", meta.epoch}, {"extra", meta.extra},
                             {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(detail::kCheckpointMagic.data(), 8);
  detail::write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params.all()) {
    detail::write_u64(out, static_cast<std::uint64_t>(p.value.rows()));
    detail::write_u64(out, static_cast<std::uint64_t>(p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i)
      detail::write_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>(p.value.data()[i])));
  }
  if (!out) throw DataError("error writing checkpoint: " + path);
}

template <class S>
void save_checkpoint(const std::string& path, const CodeModel<S>& model, CheckpointMeta meta) {
  meta.model = model.config();
  save_checkpoint(path, model.params, meta);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint: " + path);
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), 8) || magic != detail::kCheckpointMagic) throw DataError(path + ": not a checkpoint");
  const auto len = detail::read_u64(in, path);
  if (len > (1ULL << 32)) throw DataError(path + ": implausible manifest length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw DataError(path + ": truncated manifest");

  Checkpoint ck;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
    ck.meta.model = manifest.at("model").get<ModelConfig>();
    ck.meta.seed = manifest.at("seed").get<std::uint64_t>();
    ck.meta.step = manifest.at("step").get<std::uint64_t>();
    ck.meta.epoch = manifest.at("epoch").get<std::size_t>();
    ck.meta.extra = manifest.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad manifest: " + e.what());
  }
  for (const auto& t : manifest.at("tensors")) {
    const auto rows = detail::read_u64(in, path);
    const auto cols = detail::read_u64(in, path);
    if (rows != t.at("rows").get<std::uint64_t>() || cols != t.at("cols").get<std::uint64_t>())
      throw DataError(path + ": shape header disagrees with manifest for " + t.at("name").get<std::string>());
    auto id = ck.tensors.add(t.at("name").get<std::string>(), rows, cols, t.value("trainable", true));
    auto& m = ck.tensors[id].value;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(detail::read_u64(in, path));
  }
  return ck;
}

/// Copies tensors from a checkpoint into `params` for every name accepted by
/// `select`. Returns the number of tensors copied.
template <class S>
std::size_t load_tensors(ParameterStore<S>& params, const Checkpoint& ck,
                         const std::function<bool(const std::string&)>& select = {}) {
  std::size_t copied = 0;
  for (auto& p : params.all()) {
    if (select && !select(p.name)) continue;
    if (!ck.tensors.contains(p.name)) continue;
    const auto& src = ck.tensors[p.name].value;
    if (src.rows() != p.value.rows() || src.cols() != p.value.cols())
      throw DataError("checkpoint tensor " + p.name + " has shape " + std::to_string(src.rows()) + "x" +
                      std::to_string(src.cols()) + ", model expects " + std::to_string(p.value.rows()) + "x" +
                      std::to_string(p.value.cols()));
    p.value = src.template cast<S>();
    ++copied;
  }
  return copied;
}

}  // namespace ptcode
