// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gcv {

/// Base exception. `code()` is a short machine-readable tag used by the CLI
/// when reporting failures (e.g. "shape", "numeric", "io").
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

class ValueError : public Error {
 public:
  explicit ValueError(const std::string& m) : Error("value", m) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& m) : Error("state", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

namespace diag {

using Sink = std::function<void(const std::string&)>;

namespace detail {
inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}
inline Sink& sink() {
  static Sink s = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return s;
}
inline bool& info_enabled() {
  static bool on = false;
  return on;
}
}  // namespace detail

/// Replace the warning sink; returns the previous one. Tests use this to
/// capture warnings.
inline Sink set_warning_sink(Sink s) {
  std::lock_guard lock(detail::sink_mutex());
  return std::exchange(detail::sink(), std::move(s));
}

inline void warn(const std::string& msg) {
  std::lock_guard lock(detail::sink_mutex());
  if (detail::sink()) detail::sink()(msg);
}

inline void set_info(bool on) { detail::info_enabled() = on; }

inline void info(const std::string& msg) {
  if (detail::info_enabled()) std::cerr << msg << '\n';
}

/// Collects warnings for the lifetime of the guard.
class CaptureWarnings {
 public:
  CaptureWarnings()
      : previous_(set_warning_sink([this](const std::string& m) { messages_.push_back(m); })) {}
  ~CaptureWarnings() { set_warning_sink(std::move(previous_)); }
  CaptureWarnings(const CaptureWarnings&) = delete;
  CaptureWarnings& operator=(const CaptureWarnings&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }
  bool any_contains(const std::string& needle) const {
    for (const auto& m : messages_)
      if (m.find(needle) != std::string::npos) return true;
    return false;
  }

 private:
  std::vector<std::string> messages_;
  Sink previous_;
};

}  // namespace diag
}  // namespace gcv
