// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <type_traits>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gcv/error.hpp"
#include "gcv/signal.hpp"

namespace gcv {

struct RawRecording {
  double sample_rate = 256.0;
  std::size_t channels = 0;
  std::vector<double> samples;  // channels x T, row-major
  std::uint16_t subject = 0, task = 0, paradigm = 0;

  std::size_t length() const { return channels == 0 ? 0 : samples.size() / channels; }
};

/// One preprocessed channels x samples segment with its labels.
struct Epoch {
  std::vector<float> data;
  std::uint16_t subject = 0, task = 0, paradigm = 0;
};

struct Dataset {
  std::size_t channels = 30;
  std::size_t samples = 256;
  std::size_t n_subjects = 0, n_tasks = 0, n_paradigms = 0;
  std::vector<Epoch> epochs;

  std::size_t size() const { return epochs.size(); }

  void validate() const {
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      const auto& e = epochs[i];
      if (e.data.size() != channels * samples)
        throw ShapeError("epoch " + std::to_string(i) + " holds " + std::to_string(e.data.size()) + " values, expected " +
                         std::to_string(channels * samples));
      if (e.subject >= n_subjects || e.task >= n_tasks || e.paradigm >= n_paradigms)
        throw ValueError("epoch " + std::to_string(i) + " has a label outside the declared class counts");
      for (float v : e.data)
        if (!std::isfinite(v)) throw NumericError("epoch " + std::to_string(i) + " contains a non-finite value");
    }
  }
};

enum class LabelAxis { Subject, Task, Paradigm };

inline std::uint16_t label_of(const Epoch& e, LabelAxis axis) {
  switch (axis) {
    case LabelAxis::Subject: return e.subject;
    case LabelAxis::Task: return e.task;
    case LabelAxis::Paradigm: return e.paradigm;
  }
  return 0;
}

inline std::vector<int> labels(const Dataset& ds, LabelAxis axis) {
  std::vector<int> out;
  out.reserve(ds.size());
  for (const auto& e : ds.epochs) out.push_back(label_of(e, axis));
  return out;
}

/// floor((T - window) / stride) + 1 windows; an empty list (with a warning)
/// when the window exceeds the recording.
inline std::vector<Epoch> epoch_signal(const RawRecording& rec, std::size_t window, std::size_t stride) {
  const std::size_t t = rec.length();
  const std::size_t n = signal::epoch_count(t, window, stride);
  if (n == 0) {
    diag::warn("epoch_signal: window of " + std::to_string(window) + " samples exceeds recording length " + std::to_string(t));
    return {};
  }
  std::vector<Epoch> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto& e = out[k];
    e.subject = rec.subject;
    e.task = rec.task;
    e.paradigm = rec.paradigm;
    e.data.resize(rec.channels * window);
    for (std::size_t c = 0; c < rec.channels; ++c)
      for (std::size_t i = 0; i < window; ++i)
        e.data[c * window + i] = static_cast<float>(rec.samples[c * t + k * stride + i]);
  }
  return out;
}

/// Per-channel zero mean / unit variance (variance floor 1e-8).
inline Epoch standardize(Epoch e, std::size_t channels) {
  signal::standardize_inplace(std::span<float>(e.data), channels);
  return e;
}

// ---------------------------------------------------------------------------
// GCVZ container: "GCVZ", u16 version, six u32 counts, then per epoch three
// u16 labels followed by channels * samples f32 values. Little-endian.

inline constexpr std::array<char, 4> kContainerMagic{'G', 'C', 'V', 'Z'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 4 + 2 + 6 * 4;

namespace detail {

template <typename T>
void put_le(std::string& buf, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

template <typename T>
T get_le(const char* p) {
  static_assert(std::is_unsigned_v<T>);
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v = static_cast<T>(v | (static_cast<T>(static_cast<unsigned char>(p[i])) << (8 * i)));
  return v;
}

inline void put_f32(std::string& buf, float f) { put_le(buf, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(const char* p) { return std::bit_cast<float>(get_le<std::uint32_t>(p)); }

}  // namespace detail

inline std::string encode_dataset(const Dataset& ds) {
  ds.validate();
  std::string buf;
  buf.reserve(kContainerHeaderBytes + ds.size() * (6 + 4 * ds.channels * ds.samples));
  buf.append(kContainerMagic.data(), 4);
  detail::put_le<std::uint16_t>(buf, kContainerVersion);
  for (std::size_t v : {ds.size(), ds.channels, ds.samples, ds.n_subjects, ds.n_tasks, ds.n_paradigms})
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(v));
  for (const auto& e : ds.epochs) {
    detail::put_le(buf, e.subject);
    detail::put_le(buf, e.task);
    detail::put_le(buf, e.paradigm);
    for (float f : e.data) detail::put_f32(buf, f);
  }
  return buf;
}

inline Dataset decode_dataset(const std::string& buf) {
  if (buf.size() < kContainerHeaderBytes)
    throw IoError("dataset: truncated header, expected " + std::to_string(kContainerHeaderBytes) + " bytes, got " +
                  std::to_string(buf.size()));
  if (std::memcmp(buf.data(), kContainerMagic.data(), 4) != 0) throw IoError("dataset: bad magic, not a GCVZ container");
  const auto version = detail::get_le<std::uint16_t>(buf.data() + 4);
  if (version != kContainerVersion) throw IoError("dataset: unsupported container version " + std::to_string(version));
  std::array<std::uint32_t, 6> c{};
  for (std::size_t i = 0; i < 6; ++i) c[i] = detail::get_le<std::uint32_t>(buf.data() + 6 + 4 * i);
  Dataset ds;
  const std::size_t n = c[0];
  ds.channels = c[1];
  ds.samples = c[2];
  ds.n_subjects = c[3];
  ds.n_tasks = c[4];
  ds.n_paradigms = c[5];
  if (ds.channels == 0 || ds.samples == 0) throw IoError("dataset: zero channels or samples in header");
  const std::size_t per = 6 + 4 * ds.channels * ds.samples;
  const std::size_t expected = kContainerHeaderBytes + n * per;
  if (buf.size() != expected)
    throw IoError("dataset: size mismatch, expected " + std::to_string(expected) + " bytes, got " + std::to_string(buf.size()));
  ds.epochs.resize(n);
  const char* p = buf.data() + kContainerHeaderBytes;
  for (auto& e : ds.epochs) {
    e.subject = detail::get_le<std::uint16_t>(p);
    e.task = detail::get_le<std::uint16_t>(p + 2);
    e.paradigm = detail::get_le<std::uint16_t>(p + 4);
    p += 6;
    e.data.resize(ds.channels * ds.samples);
    for (auto& f : e.data) {
      f = detail::get_f32(p);
      p += 4;
    }
  }
  try {
    ds.validate();
  } catch (const Error& err) {
    throw IoError(std::string("dataset: invalid contents: ") + err.what());
  }
  return ds;
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
  const auto buf = encode_dataset(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Dataset read_dataset(const std::string& path) {
  try {
    return decode_dataset(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV ingestion: a manifest with header "file,subject,task,paradigm"; each
// epoch file holds `channels` rows of `samples` comma-separated values.

inline std::vector<double> read_matrix_csv(const std::string& path, std::size_t rows, std::size_t cols) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<double> out;
  out.reserve(rows * cols);
  std::string line;
  std::size_t r = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::stringstream ls(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        out.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw IoError(path + ": non-numeric cell at row " + std::to_string(r + 1) + " column " + std::to_string(c + 1));
      }
      ++c;
    }
    if (c != cols) throw IoError(path + ": row " + std::to_string(r + 1) + " has " + std::to_string(c) + " columns, expected " + std::to_string(cols));
    ++r;
  }
  if (r != rows) throw IoError(path + ": found " + std::to_string(r) + " rows, expected " + std::to_string(rows));
  return out;
}

/// Builds a dataset from a manifest. Paths in the manifest are resolved
/// relative to the manifest's directory. When `standardize_epochs` is set each
/// epoch is standardized per channel.
inline Dataset ingest_csv(const std::string& manifest_path, std::size_t channels, std::size_t samples, bool standardize_epochs = true) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path);
  const auto base = std::filesystem::path(manifest_path).parent_path();
  Dataset ds;
  ds.channels = channels;
  ds.samples = samples;
  std::string line;
  if (!std::getline(in, line)) throw IoError(manifest_path + ": empty manifest");
  if (line.rfind("file,subject,task,paradigm", 0) != 0)
    throw IoError(manifest_path + ": expected header 'file,subject,task,paradigm'");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::stringstream ls(line);
    std::string file, s, t, p;
    if (!std::getline(ls, file, ',') || !std::getline(ls, s, ',') || !std::getline(ls, t, ',') || !std::getline(ls, p, ','))
      throw IoError(manifest_path + ": malformed line " + std::to_string(lineno));
    Epoch e;
    try {
      e.subject = static_cast<std::uint16_t>(std::stoul(s));
      e.task = static_cast<std::uint16_t>(std::stoul(t));
      e.paradigm = static_cast<std::uint16_t>(std::stoul(p));
    } catch (const std::exception&) {
      throw IoError(manifest_path + ": bad label on line " + std::to_string(lineno));
    }
    auto path = std::filesystem::path(file);
    if (path.is_relative()) path = base / path;
    const auto values = read_matrix_csv(path.string(), channels, samples);
    e.data.assign(values.begin(), values.end());
    if (standardize_epochs) e = standardize(std::move(e), channels);
    ds.n_subjects = std::max<std::size_t>(ds.n_subjects, e.subject + 1u);
    ds.n_tasks = std::max<std::size_t>(ds.n_tasks, e.task + 1u);
    ds.n_paradigms = std::max<std::size_t>(ds.n_paradigms, e.paradigm + 1u);
    ds.epochs.push_back(std::move(e));
  }
  ds.validate();
  return ds;
}

}  // namespace gcv
