// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gcv/error.hpp"

namespace gcv::signal {

/// Hamming-windowed sinc low-pass FIR, normalized to unity DC gain.
inline std::vector<double> design_sinc_lowpass(double cutoff_hz, double sample_rate_hz, std::size_t n_taps) {
  if (!(sample_rate_hz > 0.0)) throw ValueError("design_sinc_lowpass: sample rate must be positive");
  const double nyquist = 0.5 * sample_rate_hz;
  if (!(cutoff_hz > 0.0) || cutoff_hz >= nyquist)
    throw ValueError("design_sinc_lowpass: cutoff " + std::to_string(cutoff_hz) + " Hz must lie in (0, " +
                     std::to_string(nyquist) + ") Hz");
  if (n_taps == 0 || n_taps % 2 == 0)
    throw ValueError("design_sinc_lowpass: n_taps must be odd, got " + std::to_string(n_taps));
  const double fc = cutoff_hz / sample_rate_hz;  // cycles per sample
  const auto mid = static_cast<double>(n_taps / 2);
  std::vector<double> h(n_taps);
  double total = 0.0;
  for (std::size_t i = 0; i < n_taps; ++i) {
    const double t = static_cast<double>(i) - mid;
    const double sinc = t == 0.0 ? 2.0 * fc : std::sin(2.0 * std::numbers::pi * fc * t) / (std::numbers::pi * t);
    const double w = n_taps == 1 ? 1.0 : 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n_taps - 1));
    h[i] = sinc * w;
    total += h[i];
  }
  for (auto& v : h) v /= total;
  return h;
}

/// Tap count for a 5-lobe sinc truncation: 2 * 5 * (rate / cutoff), rounded
/// up to the next odd integer.
inline std::size_t sinc_taps(double cutoff_hz, double sample_rate_hz, int lobes = 5) {
  auto n = static_cast<std::size_t>(std::ceil(2.0 * lobes * sample_rate_hz / cutoff_hz));
  return n % 2 == 0 ? n + 1 : n;
}

namespace detail {

// Odd (point-symmetric) extension used by zero-phase filtering.
inline std::vector<double> odd_extend(std::span<const double> x, std::size_t pad) {
  const std::size_t n = x.size();
  std::vector<double> out;
  out.reserve(n + 2 * pad);
  for (std::size_t i = pad; i > 0; --i) out.push_back(2.0 * x[0] - x[i]);
  out.insert(out.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) out.push_back(2.0 * x[n - 1] - x[n - 1 - i]);
  return out;
}

}  // namespace detail

/// Linear-phase FIR applied without delay: output sample i is centered on
/// input sample i. Edges use an odd extension.
inline std::vector<double> fir_filter_centered(std::span<const double> x, std::span<const double> h) {
  const std::size_t half = h.size() / 2;
  if (x.size() <= half) throw ValueError("fir_filter_centered: signal of length " + std::to_string(x.size()) + " shorter than filter half-width " + std::to_string(half + 1));
  const auto ext = detail::odd_extend(x, half);
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k) acc += h[k] * ext[i + h.size() - 1 - k];
    y[i] = acc;
  }
  return y;
}

inline std::vector<double> decimate(std::span<const double> x, std::size_t factor) {
  if (factor == 0) throw ValueError("decimate: factor must be positive");
  std::vector<double> y;
  y.reserve(x.size() / factor + 1);
  for (std::size_t i = 0; i < x.size(); i += factor) y.push_back(x[i]);
  return y;
}

/// Low-pass with a centered FIR and keep every `factor`-th sample; only the
/// retained outputs are computed.
inline std::vector<double> fir_decimate(std::span<const double> x, std::span<const double> h, std::size_t factor) {
  if (factor == 0) throw ValueError("fir_decimate: factor must be positive");
  const std::size_t half = h.size() / 2;
  if (x.size() <= half) throw ValueError("fir_decimate: signal shorter than filter half-width");
  const auto ext = detail::odd_extend(x, half);
  std::vector<double> y;
  y.reserve(x.size() / factor + 1);
  for (std::size_t i = 0; i < x.size(); i += factor) {
    double acc = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k) acc += h[k] * ext[i + h.size() - 1 - k];
    y.push_back(acc);
  }
  return y;
}

/// In-place iterative radix-2 FFT; size must be a power of two. The inverse
/// is scaled by 1/n.
inline void fft(std::vector<std::complex<double>>& a, bool inverse = false) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ValueError("fft: length " + std::to_string(n) + " is not a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (auto& v : a) v /= static_cast<double>(n);
}

/// First-order Butterworth high-pass (bilinear transform, prewarped).
struct FirstOrderSection {
  double b0, b1, a1;  // y[n] = b0 x[n] + b1 x[n-1] - a1 y[n-1]
};

inline FirstOrderSection butter_highpass_design(double cutoff_hz, double sample_rate_hz) {
  const double k = std::tan(std::numbers::pi * cutoff_hz / sample_rate_hz);
  const double norm = 1.0 / (1.0 + k);
  return {norm, -norm, (k - 1.0) * norm};
}

/// Edge padding used by butter_highpass_filtfilt: 3 * max(len(a), len(b)).
inline constexpr std::size_t kFiltfiltPad = 6;

/// Zero-phase first-order Butterworth high-pass: the section runs forward then
/// backward, so the magnitude response is squared (12 dB/octave roll-off) and
/// the phase cancels. Each pass starts from the steady state for the first
/// sample, which removes start-up transients for DC.
inline std::vector<double> butter_highpass_filtfilt(std::span<const double> x, double cutoff_hz, double sample_rate_hz) {
  if (!(sample_rate_hz > 0.0) || !(cutoff_hz > 0.0) || cutoff_hz >= 0.5 * sample_rate_hz)
    throw ValueError("butter_highpass_filtfilt: cutoff " + std::to_string(cutoff_hz) + " Hz must lie in (0, Nyquist)");
  if (x.size() <= kFiltfiltPad)
    throw ValueError("butter_highpass_filtfilt: signal of length " + std::to_string(x.size()) + " is too short; minimum length is " +
                     std::to_string(kFiltfiltPad + 1));
  const auto s = butter_highpass_design(cutoff_hz, sample_rate_hz);
  // Transposed direct form: y = b0 x + z, z' = b1 x - a1 y. A constant input
  // c is in steady state at y = 0, z = -b0 c.
  auto run = [&](std::vector<double>& v) {
    double z = -s.b0 * v.front();
    for (auto& xv : v) {
      const double y = s.b0 * xv + z;
      z = s.b1 * xv - s.a1 * y;
      xv = y;
    }
  };
  auto ext = detail::odd_extend(x, kFiltfiltPad);
  run(ext);
  std::reverse(ext.begin(), ext.end());
  run(ext);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + kFiltfiltPad, ext.end() - kFiltfiltPad};
}

/// Number of frames produced by epoching T samples.
inline std::size_t epoch_count(std::size_t total, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ValueError("epoch_count: window and stride must be positive");
  if (window > total) return 0;
  return (total - window) / stride + 1;
}

/// STFT settings for aligning a single-channel 30-s window onto the
/// channels x samples grid.
struct StftAlignConfig {
  double window_seconds = 2.0;
  double min_duration_seconds = 30.0;
  std::size_t n_bins = 30;
  std::size_t n_frames = 256;
};

/// Log-magnitude STFT of one channel, lowest `n_bins` non-DC bins, resampled
/// linearly along time to exactly `n_frames`. Returns n_bins x n_frames
/// row-major. The hop is chosen so at least n_frames frames exist.
inline std::vector<double> stft_align(std::span<const double> x, double sample_rate_hz, const StftAlignConfig& cfg = {}) {
  if (!(sample_rate_hz > 0.0)) throw ValueError("stft_align: sample rate must be positive");
  const auto min_len = static_cast<std::size_t>(std::ceil(cfg.min_duration_seconds * sample_rate_hz));
  if (x.size() < min_len)
    throw ValueError("stft_align: window of " + std::to_string(x.size()) + " samples is shorter than " +
                     std::to_string(cfg.min_duration_seconds) + " s (" + std::to_string(min_len) + " samples)");
  const auto win = std::max<std::size_t>(2 * cfg.n_bins + 2, static_cast<std::size_t>(std::lround(cfg.window_seconds * sample_rate_hz)));
  if (win > x.size()) throw ValueError("stft_align: STFT window longer than the signal");
  const std::size_t hop = std::max<std::size_t>(1, (x.size() - win) / (cfg.n_frames - 1));
  const std::size_t frames = (x.size() - win) / hop + 1;

  std::vector<double> hann(win);
  for (std::size_t i = 0; i < win; ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(win));

  // Twiddles for bins 1..n_bins.
  std::vector<std::complex<double>> tw(cfg.n_bins * win);
  for (std::size_t b = 0; b < cfg.n_bins; ++b)
    for (std::size_t i = 0; i < win; ++i) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>((b + 1) * i % win) / static_cast<double>(win);
      tw[b * win + i] = {std::cos(ang), std::sin(ang)};
    }

  std::vector<double> spec(cfg.n_bins * frames);
  std::vector<double> seg(win);
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t i = 0; i < win; ++i) seg[i] = x[f * hop + i] * hann[i];
    for (std::size_t b = 0; b < cfg.n_bins; ++b) {
      std::complex<double> acc{0.0, 0.0};
      for (std::size_t i = 0; i < win; ++i) acc += seg[i] * tw[b * win + i];
      spec[b * frames + f] = std::log1p(std::abs(acc));
    }
  }

  std::vector<double> out(cfg.n_bins * cfg.n_frames);
  for (std::size_t t = 0; t < cfg.n_frames; ++t) {
    const double pos = cfg.n_frames == 1 ? 0.0 : static_cast<double>(t) * static_cast<double>(frames - 1) / static_cast<double>(cfg.n_frames - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, frames - 1);
    const double w = pos - static_cast<double>(lo);
    for (std::size_t b = 0; b < cfg.n_bins; ++b)
      out[b * cfg.n_frames + t] = (1.0 - w) * spec[b * frames + lo] + w * spec[b * frames + hi];
  }
  return out;
}

/// Center frequency (Hz) of output row `row` of stft_align.
inline double stft_row_frequency(std::size_t row, double sample_rate_hz, const StftAlignConfig& cfg = {}) {
  const auto win = std::max<std::size_t>(2 * cfg.n_bins + 2, static_cast<std::size_t>(std::lround(cfg.window_seconds * sample_rate_hz)));
  return static_cast<double>(row + 1) * sample_rate_hz / static_cast<double>(win);
}

inline constexpr double kVarianceFloor = 1e-8;

/// Per-channel zero mean, unit variance over a channels x samples block.
template <typename T>
void standardize_inplace(std::span<T> data, std::size_t channels) {
  if (channels == 0 || data.size() % channels != 0) throw ShapeError("standardize: data size not divisible by channel count");
  const std::size_t n = data.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    auto row = data.subspan(c * n, n);
    double mu = 0.0;
    for (auto v : row) mu += static_cast<double>(v);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (auto v : row) var += (static_cast<double>(v) - mu) * (static_cast<double>(v) - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(std::max(var, kVarianceFloor));
    for (auto& v : row) v = static_cast<T>((static_cast<double>(v) - mu) * inv);
  }
}

}  // namespace gcv::signal
