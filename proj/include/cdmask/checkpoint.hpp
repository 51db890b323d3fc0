// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cdmask/optimizer.hpp"

namespace cdmask {

// Binary checkpoint: magic + version, config JSON snapshot, global step,
// named parameter tensors as raw little-endian scalars, then (optionally)
// Adam first/second moments and its step counter. Loading restores bytes
// verbatim, so forward outputs round-trip bit-exactly on the same platform.
inline constexpr char kCheckpointMagic[8] = {'C', 'D', 'M', 'K', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename S>
void write_pod(std::ofstream& out, const S& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(S));
}

template <typename S>
S read_pod(std::ifstream& in) {
  S v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(S));
  return v;
}

inline void write_string(std::ofstream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::ifstream& in) {
  const auto n = read_pod<uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

template <typename T>
void write_tensor(std::ofstream& out, const Tensor<T>& t) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) write_pod<int32_t>(out, t.dim(i));
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <typename T>
Tensor<T> read_tensor(std::ifstream& in) {
  const auto rank = read_pod<uint32_t>(in);
  std::vector<int> shape(rank);
  for (auto& d : shape) d = read_pod<int32_t>(in);
  Tensor<T> t(shape);
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  return t;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const std::string& config_json,
                     const nn::ParamStore<T>& store, int64_t step,
                     Adam<T>* optimizer = nullptr) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "save_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<uint32_t>(out, kCheckpointVersion);
  detail::write_pod<uint8_t>(out, sizeof(T));
  detail::write_string(out, config_json);
  detail::write_pod<int64_t>(out, step);
  detail::write_pod<uint8_t>(out, optimizer ? 1 : 0);
  detail::write_pod<uint32_t>(out, static_cast<uint32_t>(store.params().size()));
  for (const auto& p : store.params()) {
    detail::write_string(out, p.name);
    detail::write_tensor(out, p.var.value());
  }
  if (optimizer) {
    detail::write_pod<int64_t>(out, optimizer->step_count());
    for (auto& m : optimizer->first_moments()) detail::write_tensor(out, m);
    for (auto& v : optimizer->second_moments()) detail::write_tensor(out, v);
  }
  check(out.good(), "save_checkpoint: write failed for " + path);
}

struct CheckpointInfo {
  std::string config_json;
  int64_t step = 0;
  bool has_optimizer = false;
};

/// Loads parameters into an existing store (names and shapes must match the
/// constructed model) and optionally the optimizer state.
template <typename T>
CheckpointInfo load_checkpoint(const std::string& path, nn::ParamStore<T>& store,
                               Adam<T>* optimizer = nullptr) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  check(std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0,
        "load_checkpoint: not a checkpoint file: " + path);
  const auto version = detail::read_pod<uint32_t>(in);
  check(version == kCheckpointVersion, "load_checkpoint: unsupported version");
  const auto scalar_size = detail::read_pod<uint8_t>(in);
  check(scalar_size == sizeof(T), "load_checkpoint: scalar width mismatch");
  CheckpointInfo info;
  info.config_json = detail::read_string(in);
  info.step = detail::read_pod<int64_t>(in);
  info.has_optimizer = detail::read_pod<uint8_t>(in) != 0;
  const auto n = detail::read_pod<uint32_t>(in);
  check(n == store.params().size(), "load_checkpoint: parameter count mismatch");
  for (auto& p : store.params()) {
    const std::string name = detail::read_string(in);
    check(name == p.name, "load_checkpoint: parameter order mismatch at " + name);
    Tensor<T> t = detail::read_tensor<T>(in);
    check(t.same_shape(p.var.value()),
          "load_checkpoint: shape mismatch for " + name + " (checkpoint " +
              t.shape_str() + " vs model " + p.var.value().shape_str() + ")");
    p.var.value() = std::move(t);
  }
  if (info.has_optimizer && optimizer) {
    optimizer->set_step_count(detail::read_pod<int64_t>(in));
    for (auto& m : optimizer->first_moments()) m = detail::read_tensor<T>(in);
    for (auto& v : optimizer->second_moments()) v = detail::read_tensor<T>(in);
  }
  check(in.good(), "load_checkpoint: truncated file " + path);
  return info;
}

}  // namespace cdmask
