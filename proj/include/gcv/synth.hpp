// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <thread>
#include <vector>

#include "gcv/dataset.hpp"
#include "gcv/graph.hpp"
#include "gcv/rng.hpp"
#include "gcv/signal.hpp"

namespace gcv::synth {

inline constexpr std::size_t kSources = 4;  // alpha + three ERP components
inline constexpr std::size_t kErpComponents = 3;
inline constexpr std::size_t kDecimation = 4;
inline constexpr std::size_t kOutputSamples = 256;

struct SynthSpec {
  std::size_t n_subjects = 8;
  std::size_t n_tasks = 4;
  std::size_t epochs_per_cell = 50;
  double snr = 4.0;  // linear power ratio; infinity disables noise
  std::uint64_t seed = 0;
  double sample_rate = 1024.0;
  std::size_t n_channels = 30;
  std::vector<double> task_snr_scale;  // optional, one multiplier per task
  std::size_t threads = 0;             // 0: hardware concurrency

  void validate() const {
    if (n_subjects < 1 || n_tasks < 1 || epochs_per_cell < 1 || n_channels < 1)
      throw ConfigError("synth: all counts must be at least 1");
    if (!(snr > 0.0)) throw ConfigError("synth: snr must be positive");
    if (!(sample_rate > 0.0)) throw ConfigError("synth: sample_rate must be positive");
    if (n_subjects > 65535 || n_tasks > 65535) throw ConfigError("synth: label counts exceed 16 bits");
    if (!task_snr_scale.empty()) {
      if (task_snr_scale.size() != n_tasks) throw ConfigError("synth: task_snr_scale needs one entry per task");
      for (double s : task_snr_scale)
        if (!(s > 0.0)) throw ConfigError("synth: task_snr_scale entries must be positive");
    }
  }

  double cell_snr(std::size_t task) const { return task_snr_scale.empty() ? snr : snr * task_snr_scale[task]; }
};

struct ErpComponent {
  double latency;    // seconds after epoch onset
  double amplitude;
  double width;      // Gaussian standard deviation, seconds
};

struct GroundTruth {
  std::vector<std::vector<double>> mixing;  // per subject, n_channels x kSources row-major
  std::vector<double> alpha_hz;             // per subject
  std::vector<std::array<ErpComponent, kErpComponents>> templates;  // per task
  std::vector<double> noise_rms;            // per epoch, in dataset order
  std::vector<double> alpha_phase;          // per epoch, in dataset order
};

namespace detail {

// Raw synthesis span: 2 s at the input rate, with the 1 s epoch centered.
inline std::size_t raw_length(double fs) {
  std::size_t n = 1;
  while (static_cast<double>(n) < 2.0 * fs) n <<= 1;
  return n;
}

inline bool full_column_rank(const std::vector<double>& m, std::size_t rows, std::size_t cols) {
  std::vector<std::vector<double>> q;
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<double> v(rows);
    for (std::size_t r = 0; r < rows; ++r) v[r] = m[r * cols + c];
    double orig = 0.0;
    for (double x : v) orig += x * x;
    for (const auto& u : q) {
      double d = 0.0;
      for (std::size_t r = 0; r < rows; ++r) d += u[r] * v[r];
      for (std::size_t r = 0; r < rows; ++r) v[r] -= d * u[r];
    }
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    if (!(nrm > 1e-6 * orig) || orig == 0.0) return false;
    nrm = std::sqrt(nrm);
    for (auto& x : v) x /= nrm;
    q.push_back(std::move(v));
  }
  return true;
}

// Spatially smooth topographies: each source projects through two Gaussian
// blobs on the scalp plus a small per-channel term.
inline std::vector<double> draw_mixing(Rng rng, const std::vector<graph::Coord>& coords) {
  const std::size_t n = coords.size();
  constexpr double blob_sigma = 0.6;
  for (int attempt = 0;; ++attempt) {
    std::vector<double> m(n * kSources, 0.0);
    for (std::size_t s = 0; s < kSources; ++s) {
      for (int b = 0; b < 2; ++b) {
        const double polar = std::acos(rng.uniform(-0.2, 1.0)) * 180.0 / std::numbers::pi;
        const auto centre = graph::spherical(polar, rng.uniform(-180.0, 180.0));
        const double w = rng.normal();
        for (std::size_t c = 0; c < n; ++c) {
          double d2 = 0.0;
          for (int k = 0; k < 3; ++k) d2 += (coords[c][k] - centre[k]) * (coords[c][k] - centre[k]);
          m[c * kSources + s] += w * std::exp(-d2 / (2 * blob_sigma * blob_sigma));
        }
      }
      for (std::size_t c = 0; c < n; ++c) m[c * kSources + s] += 0.1 * rng.normal();
    }
    if (n < kSources || full_column_rank(m, n, kSources) || attempt > 100) return m;
  }
}

inline std::vector<double> pink_noise(Rng& rng, std::size_t len) {
  std::vector<std::complex<double>> w(len);
  for (auto& v : w) v = {rng.normal(), 0.0};
  signal::fft(w);
  w[0] = 0.0;
  for (std::size_t k = 1; k <= len / 2; ++k) {
    const double g = 1.0 / std::sqrt(static_cast<double>(k));  // power ~ 1/f
    w[k] *= g;
    if (k != len - k) w[len - k] *= g;
  }
  signal::fft(w, true);
  std::vector<double> out(len);
  for (std::size_t i = 0; i < len; ++i) out[i] = w[i].real();
  return out;
}

}  // namespace detail

/// Draws subject and task parameters; epochs are rendered separately.
inline GroundTruth draw_ground_truth(const SynthSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  const auto coords = graph::build_montage(spec.n_channels);
  GroundTruth gt;
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    Rng r = root.split("subject").split(s);
    gt.mixing.push_back(detail::draw_mixing(r.split("mixing"), coords));
    // Evenly spread peaks over 8-13 Hz with jitter inside each slot.
    const double slot = 5.0 / static_cast<double>(spec.n_subjects);
    gt.alpha_hz.push_back(8.0 + slot * (static_cast<double>(s) + r.split("alpha").uniform(0.25, 0.75)));
  }
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    Rng r = root.split("task").split(t);
    std::array<ErpComponent, kErpComponents> tpl{};
    for (auto& c : tpl) {
      c.latency = r.uniform(0.1, 0.8);
      c.amplitude = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(1.5, 3.0);
      c.width = r.uniform(0.03, 0.12);
    }
    gt.templates.push_back(tpl);
  }
  return gt;
}

/// Noise-free sources mixed into channels, n_channels x raw_length at the
/// input rate. The epoch onset sits one quarter into the span.
inline std::vector<double> render_sources(const SynthSpec& spec, const GroundTruth& gt, std::size_t subject, std::size_t task,
                                          double alpha_phase) {
  const double fs = spec.sample_rate;
  const std::size_t len = detail::raw_length(fs);
  const std::size_t onset = len / 4;
  const auto& mix = gt.mixing[subject];
  const auto& tpl = gt.templates[task];
  std::vector<double> src(kSources * len);
  for (std::size_t i = 0; i < len; ++i) {
    const double tau = (static_cast<double>(i) - static_cast<double>(onset)) / fs;
    src[i] = std::sin(2 * std::numbers::pi * gt.alpha_hz[subject] * tau + alpha_phase);
    for (std::size_t j = 0; j < kErpComponents; ++j) {
      const double z = (tau - tpl[j].latency) / tpl[j].width;
      src[(j + 1) * len + i] = tpl[j].amplitude * std::exp(-0.5 * z * z);
    }
  }
  std::vector<double> x(spec.n_channels * len, 0.0);
  for (std::size_t c = 0; c < spec.n_channels; ++c)
    for (std::size_t s = 0; s < kSources; ++s) {
      const double w = mix[c * kSources + s];
      for (std::size_t i = 0; i < len; ++i) x[c * len + i] += w * src[s * len + i];
    }
  return x;
}

/// Low-pass, decimate to a quarter of the input rate, high-pass, crop the
/// epoch and standardize each channel.
inline std::vector<float> preprocess_raw(const std::vector<double>& x, std::size_t channels, double fs) {
  const std::size_t len = x.size() / channels;
  const double cutoff = 0.2 * fs;
  const auto h = signal::design_sinc_lowpass(cutoff, fs, signal::sinc_taps(cutoff, fs));
  const double fs_out = fs / static_cast<double>(kDecimation);
  const std::size_t start = len / 4 / kDecimation;
  std::vector<double> out(channels * kOutputSamples);
  for (std::size_t c = 0; c < channels; ++c) {
    const auto d = signal::fir_decimate(std::span<const double>(x.data() + c * len, len), h, kDecimation);
    const auto y = signal::butter_highpass_filtfilt(d, 0.1, fs_out);
    if (start + kOutputSamples > y.size()) throw ValueError("synth: sample rate too low for a 256-sample epoch");
    std::copy_n(y.begin() + static_cast<std::ptrdiff_t>(start), kOutputSamples, out.begin() + static_cast<std::ptrdiff_t>(c * kOutputSamples));
  }
  signal::standardize_inplace(std::span<double>(out), channels);
  return {out.begin(), out.end()};
}

struct SynthResult {
  Dataset dataset;
  GroundTruth truth;
};

/// Epochs are ordered by subject, then task, then repetition. Each (subject,
/// task) cell draws from its own stream, so the output does not depend on the
/// thread count.
inline SynthResult generate(const SynthSpec& spec) {
  auto gt = draw_ground_truth(spec);
  const Rng root(spec.seed);
  const std::size_t per = spec.epochs_per_cell;
  const std::size_t cells = spec.n_subjects * spec.n_tasks;
  const std::size_t len = detail::raw_length(spec.sample_rate);
  const std::size_t onset = len / 4;
  const auto win = static_cast<std::size_t>(spec.sample_rate);

  SynthResult res;
  auto& ds = res.dataset;
  ds.channels = spec.n_channels;
  ds.samples = kOutputSamples;
  ds.n_subjects = spec.n_subjects;
  ds.n_tasks = spec.n_tasks;
  ds.n_paradigms = spec.n_tasks;
  ds.epochs.resize(cells * per);
  gt.noise_rms.assign(cells * per, 0.0);
  gt.alpha_phase.assign(cells * per, 0.0);

  auto run_cell = [&](std::size_t cell) {
    const std::size_t s = cell / spec.n_tasks, t = cell % spec.n_tasks;
    Rng rng = root.split("cell").split(s).split(t);
    const double snr = spec.cell_snr(t);
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t idx = cell * per + k;
      Rng er = rng.split(k);
      const double phase = er.split("phase").uniform(0.0, 2 * std::numbers::pi);
      auto x = render_sources(spec, gt, s, t, phase);
      double rms = 0.0;
      if (std::isfinite(snr)) {
        double p_sig = 0.0;
        for (std::size_t c = 0; c < spec.n_channels; ++c)
          for (std::size_t i = onset; i < onset + win; ++i) p_sig += x[c * len + i] * x[c * len + i];
        p_sig /= static_cast<double>(spec.n_channels * win);
        rms = std::sqrt(p_sig / snr);
        Rng nr = er.split("noise");
        for (std::size_t c = 0; c < spec.n_channels; ++c) {
          auto n = detail::pink_noise(nr, len);
          double p = 0.0;
          for (std::size_t i = onset; i < onset + win; ++i) p += n[i] * n[i];
          const double g = rms / std::sqrt(p / static_cast<double>(win));
          for (std::size_t i = 0; i < len; ++i) x[c * len + i] += g * n[i];
        }
      }
      auto& e = ds.epochs[idx];
      e.data = preprocess_raw(x, spec.n_channels, spec.sample_rate);
      e.subject = static_cast<std::uint16_t>(s);
      e.task = static_cast<std::uint16_t>(t);
      e.paradigm = static_cast<std::uint16_t>(t);
      gt.noise_rms[idx] = rms;
      gt.alpha_phase[idx] = phase;
    }
  };

  std::size_t n_threads = spec.threads ? spec.threads : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min(n_threads, cells);
  if (n_threads <= 1) {
    for (std::size_t c = 0; c < cells; ++c) run_cell(c);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_threads; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < cells; c += n_threads) run_cell(c);
      });
  }
  ds.validate();
  res.truth = std::move(gt);
  return res;
}

}  // namespace gcv::synth
