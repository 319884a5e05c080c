// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <limits>
#include <numeric>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gcv/batch.hpp"
#include "gcv/losses.hpp"
#include "gcv/model.hpp"
#include "gcv/probe.hpp"

namespace gcv {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 200;
  std::size_t batch_size = 256;  // epochs per batch, K = batch_size / 2 pairs
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t steps_per_epoch = 0;  // 0: train size / batch size (at least 1)
  std::size_t dev_eval_every = 1;   // training epochs between dev evaluations, 0 disables
  std::size_t finetune_epochs = 20;
  double finetune_fraction = 0.70;
  double finetune_lr = 1e-4;
  GbtHyper probe;

  void validate() const {
    if (!(learning_rate > 0.0) || !(finetune_lr > 0.0)) throw ConfigError("train: learning rates must be positive");
    if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
    if (batch_size < 4 || batch_size % 2 != 0) throw ConfigError("train: batch_size must be an even number >= 4");
    if (!(finetune_fraction > 0.0 && finetune_fraction < 1.0)) throw ConfigError("train: finetune_fraction must lie in (0, 1)");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) throw ConfigError("train: invalid Adam hyperparameters");
  }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

using AdamState = OptimizerState;

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;
};

/// One bias-corrected Adam update over the trainable tensors. A non-finite
/// gradient skips the whole step. tau is clamped afterwards.
inline StepReport adam_step(Model& model, AdamState& st, const AdamHyper& hp, const LossConfig& lc) {
  auto& entries = model.params().entries();
  const auto& mask = model.trainable();
  if (st.m.empty()) {
    for (const auto& [_, t] : entries) {
      st.m.emplace_back(t.size(), 0.0);
      st.v.emplace_back(t.size(), 0.0);
    }
  }
  if (st.m.size() != entries.size()) throw StateError("adam_step: optimizer state does not match the parameter list");
  StepReport rep;
  double sq = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!mask[i]) continue;
    for (double g : entries[i].second.grad_data()) {
      if (!std::isfinite(g)) {
        diag::warn("adam_step: non-finite gradient in '" + entries[i].first + "'; step skipped");
        return rep;
      }
      sq += g * g;
    }
  }
  rep.grad_norm = std::sqrt(sq);
  ++st.t;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!mask[i]) continue;
    auto& t = entries[i].second;
    auto w = t.data();
    const auto g = t.grad_data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = hp.beta1 * m[j] + (1 - hp.beta1) * gj;
      v[j] = hp.beta2 * v[j] + (1 - hp.beta2) * gj * gj;
      w[j] -= hp.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + hp.eps);
    }
  }
  auto& tau = model.params().at("tau").data()[0];
  tau = std::clamp(tau, lc.tau_min, lc.tau_max);
  rep.applied = true;
  return rep;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepRow {
  std::size_t step = 0, epoch = 0;
  LabelAxis axis = LabelAxis::Subject;
  double total = 0, rec = 0, kl_s = 0, kl_t = 0, clip_s = 0, clip_t = 0, tau = 0, grad_norm = 0;
  bool skipped = false;
};

struct DevRow {
  std::size_t epoch = 0;
  double subject_balanced_accuracy = 0;
};

struct TrainHistory {
  std::vector<StepRow> steps;
  std::vector<DevRow> dev;
  double wall_seconds = 0;
  bool aborted = false;
  std::size_t best_epoch = 0;
};

struct TrainResult {
  Model final_model;
  Model best_model;
  TrainHistory history;
};

inline constexpr std::size_t kMaxNonFiniteSteps = 3;

inline void copy_values(const Model& from, Model& to) {
  auto& dst = to.params().entries();
  const auto& src = from.params().entries();
  for (std::size_t i = 0; i < src.size(); ++i) std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.data().begin());
  to.optimizer() = from.optimizer();
}

/// Snapshot with detached parameters.
inline Model snapshot(const Model& m) {
  Model out(m.config(), m.seed());
  if (m.has_adapter()) out.attach_adapter();
  copy_values(m, out);
  return out;
}

namespace detail {

// Runs `steps_per_epoch` K-pair steps per epoch on `indices`, alternating
// the pairing axis. Returns false when training diverged.
struct LoopOptions {
  std::size_t epochs = 1;
  std::size_t steps_per_epoch = 1;
  std::size_t pairs = 2;
  AdamHyper adam;
  Rng rng;
  std::function<void(std::size_t epoch)> on_epoch_end;
};

inline bool run_loop(Model& model, const Tensor& adj, const Dataset& ds, const std::vector<std::size_t>& indices, const LossConfig& lc,
                     LoopOptions opt, TrainHistory& hist) {
  const PairSampler by_subject(indices, labels(ds, LabelAxis::Subject), LabelAxis::Subject);
  const PairSampler by_task(indices, labels(ds, LabelAxis::Task), LabelAxis::Task);
  AdamState& st = model.optimizer();
  std::size_t bad = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    for (std::size_t s = 0; s < opt.steps_per_epoch; ++s, ++step) {
      const auto axis = axis_for_step(step);
      Rng batch_rng = opt.rng.split("batch").split(step);
      Rng noise_rng = opt.rng.split("noise").split(step);
      const auto batch = (axis == LabelAxis::Subject ? by_subject : by_task).sample(opt.pairs, batch_rng);
      StepRow row;
      row.step = step;
      row.epoch = epoch;
      row.axis = axis;
      model.params().zero_grad();
      try {
        const auto br = total_objective(model, adj, ds, batch, lc, noise_rng);
        backprop(br.total_tensor);
        const auto rep = adam_step(model, st, opt.adam, lc);
        row.total = br.total;
        row.rec = br.reconstruction;
        row.kl_s = br.kl_s;
        row.kl_t = br.kl_t;
        row.clip_s = br.clip_subject;
        row.clip_t = br.clip_task;
        row.grad_norm = rep.grad_norm;
        row.skipped = !rep.applied;
      } catch (const NumericError& e) {
        diag::warn(std::string("train: step ") + std::to_string(step) + " skipped: " + e.what());
        row.total = std::numeric_limits<double>::quiet_NaN();
        row.skipped = true;
      }
      model.params().zero_grad();
      row.tau = model.tau();
      hist.steps.push_back(row);
      bad = row.skipped ? bad + 1 : 0;
      if (bad >= kMaxNonFiniteSteps) {
        diag::warn("train: " + std::to_string(bad) + " consecutive non-finite steps; aborting");
        hist.aborted = true;
        return false;
      }
    }
    if (opt.on_epoch_end) opt.on_epoch_end(epoch);
  }
  return true;
}

}  // namespace detail

inline double dev_subject_accuracy(const Model& model, const Tensor& adj, const Dataset& ds, const SplitPlan& plan, const GbtHyper& hp) {
  std::vector<std::size_t> both = plan.train;
  both.insert(both.end(), plan.dev.begin(), plan.dev.end());
  Dataset sub;
  sub.channels = ds.channels;
  sub.samples = ds.samples;
  sub.n_subjects = ds.n_subjects;
  sub.n_tasks = ds.n_tasks;
  sub.n_paradigms = ds.n_paradigms;
  for (auto i : both) sub.epochs.push_back(ds.epochs[i]);
  const auto lat = encode_latents(model, sub, adj);
  std::vector<std::size_t> tr(plan.train.size()), dv(plan.dev.size());
  std::iota(tr.begin(), tr.end(), std::size_t{0});
  std::iota(dv.begin(), dv.end(), plan.train.size());
  return evaluate_features(lat.s, sub, tr, dv, LabelAxis::Subject, hp).balanced_accuracy;
}

/// Trains from `seed` on plan.train; dev-split subject balanced accuracy
/// selects the best checkpoint.
inline TrainResult train(const Dataset& ds, const SplitPlan& plan, const Tensor& adj, const TrainConfig& tc, const ModelConfig& mc,
                         const LossConfig& lc, std::uint64_t seed) {
  tc.validate();
  lc.validate();
  if (ds.n_subjects < 2 || ds.n_tasks < 2) throw ValueError("train: need at least 2 subjects and 2 tasks");
  if (ds.channels != mc.n_channels || ds.samples != mc.n_samples)
    throw ShapeError("train: dataset epochs are " + std::to_string(ds.channels) + "x" + std::to_string(ds.samples) + ", model expects " +
                     std::to_string(mc.n_channels) + "x" + std::to_string(mc.n_samples));
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res{Model(mc, seed), Model(), {}};
  res.final_model.params().at("tau").data()[0] = lc.tau_init;
  res.best_model = snapshot(res.final_model);
  double best = -1.0;

  detail::LoopOptions opt;
  opt.epochs = tc.epochs;
  opt.pairs = tc.batch_size / 2;
  opt.steps_per_epoch = tc.steps_per_epoch ? tc.steps_per_epoch : std::max<std::size_t>(1, plan.train.size() / tc.batch_size);
  opt.adam = {tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps};
  opt.rng = Rng(seed).split("train");
  opt.on_epoch_end = [&](std::size_t epoch) {
    if (plan.dev.empty() || tc.dev_eval_every == 0) return;
    if (epoch % tc.dev_eval_every != 0 && epoch != tc.epochs) return;
    const double ba = dev_subject_accuracy(res.final_model, adj, ds, plan, tc.probe);
    res.history.dev.push_back({epoch, ba});
    diag::info("epoch " + std::to_string(epoch) + " dev subject balanced accuracy " + std::to_string(ba));
    if (ba > best) {
      best = ba;
      res.history.best_epoch = epoch;
      copy_values(res.final_model, res.best_model);
    }
  };
  const bool ok = detail::run_loop(res.final_model, adj, ds, plan.train, lc, opt, res.history);
  if (best < 0.0) {
    copy_values(res.final_model, res.best_model);
    res.history.best_epoch = ok ? tc.epochs : 0;
  }
  res.history.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Adapter fine-tuning

struct FinetuneResult {
  Model model;
  std::vector<std::size_t> adapt, held_out;  // 70% / 30% portions
  std::vector<double> epoch_loss;            // mean total per fine-tune epoch
  TrainHistory history;
};

/// Per subject, shuffles its epochs among `indices` and cuts them at
/// `fraction`. Subjects with fewer than 4 epochs are skipped with a warning.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> subject_portions(const Dataset& ds, const std::vector<std::size_t>& indices,
                                                                                      double fraction, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_subject;
  for (auto i : indices) by_subject[ds.epochs.at(i).subject].push_back(i);
  std::vector<std::size_t> a, b;
  for (auto& [s, idx] : by_subject) {
    if (idx.size() < 4) {
      diag::warn("finetune: subject " + std::to_string(s) + " has " + std::to_string(idx.size()) + " epochs, fewer than 4; skipped");
      continue;
    }
    Rng rng = Rng(seed).split("finetune-split").split(static_cast<std::uint64_t>(s));
    rng.shuffle(idx);
    auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    cut = std::clamp<std::size_t>(cut, 2, idx.size() - 1);
    a.insert(a.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
    b.insert(b.end(), idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {a, b};
}

/// Attaches an adapter to a copy of `backbone`, freezes everything else and
/// trains on the adaptation portion of `indices` with the full objective.
/// The held-out portion is never read.
inline FinetuneResult finetune_adapter(const Model& backbone, const Dataset& ds, const std::vector<std::size_t>& indices, const Tensor& adj,
                                       const TrainConfig& tc, const LossConfig& lc, std::uint64_t seed) {
  tc.validate();
  if (backbone.has_adapter()) throw StateError("finetune_adapter: checkpoint already has an adapter");
  if (indices.empty()) throw ValueError("finetune_adapter: no test-subject epochs");
  FinetuneResult res{snapshot(backbone), {}, {}, {}, {}};
  std::tie(res.adapt, res.held_out) = subject_portions(ds, indices, tc.finetune_fraction, seed);
  if (res.adapt.empty()) throw ValueError("finetune_adapter: no subject has enough epochs to split");
  res.model.attach_adapter();
  res.model.freeze_backbone();
  if (tc.finetune_epochs == 0) return res;

  detail::LoopOptions opt;
  opt.epochs = tc.finetune_epochs;
  opt.pairs = std::max<std::size_t>(2, std::min(tc.batch_size, res.adapt.size()) / 2);
  opt.steps_per_epoch = std::max<std::size_t>(1, res.adapt.size() / (2 * opt.pairs));
  opt.adam = {tc.finetune_lr, tc.beta1, tc.beta2, tc.adam_eps};
  opt.rng = Rng(seed).split("finetune");
  std::size_t seen = 0;
  opt.on_epoch_end = [&](std::size_t) {
    double s = 0;
    std::size_t n = 0;
    for (; seen < res.history.steps.size(); ++seen)
      if (!res.history.steps[seen].skipped) s += res.history.steps[seen].total, ++n;
    res.epoch_loss.push_back(n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN());
  };
  detail::run_loop(res.model, adj, ds, res.adapt, lc, opt, res.history);
  return res;
}

// ---------------------------------------------------------------------------
// Reports

inline void write_history_csv(const std::string& path, const TrainHistory& h) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << std::setprecision(17) << "step,total,rec,kl_S,kl_T,clip_S,clip_T,tau\n";
  for (const auto& r : h.steps)
    out << r.step << "," << r.total << "," << r.rec << "," << r.kl_s << "," << r.kl_t << "," << r.clip_s << "," << r.clip_t << "," << r.tau << "\n";
}

struct MetricSummary {
  std::string name;
  double mean = 0, stddev = 0;
  std::size_t n = 0;
  std::vector<double> values;
};

struct SeedReport {
  std::vector<MetricSummary> metrics;
  bool complete = true;
  std::vector<std::string> failures;
};

/// Runs `run(seed)` for every seed and aggregates each named metric as mean
/// and sample standard deviation. A seed that throws marks the report
/// incomplete.
inline SeedReport run_seeds(const std::vector<std::uint64_t>& seeds, const std::function<std::map<std::string, double>(std::uint64_t)>& run) {
  if (seeds.empty()) throw ConfigError("run_seeds: need at least one seed");
  SeedReport rep;
  std::map<std::string, std::vector<double>> values;
  std::vector<std::string> order;
  for (auto s : seeds) {
    try {
      for (const auto& [k, v] : run(s)) {
        if (!values.count(k)) order.push_back(k);
        values[k].push_back(v);
      }
    } catch (const std::exception& e) {
      rep.complete = false;
      rep.failures.push_back("seed " + std::to_string(s) + ": " + e.what());
    }
  }
  for (const auto& k : order) {
    MetricSummary m;
    m.name = k;
    m.values = values[k];
    m.n = m.values.size();
    for (double v : m.values) m.mean += v;
    m.mean /= static_cast<double>(m.n);
    if (m.n > 1) {
      for (double v : m.values) m.stddev += (v - m.mean) * (v - m.mean);
      m.stddev = std::sqrt(m.stddev / static_cast<double>(m.n - 1));
    }
    rep.metrics.push_back(std::move(m));
  }
  return rep;
}

/// metric,mean,stddev,n_seeds (stddev "n/a" for a single seed).
inline std::string format_report(const SeedReport& rep) {
  std::ostringstream out;
  out << std::setprecision(10) << "metric,mean,stddev,n_seeds\n";
  for (const auto& m : rep.metrics) {
    out << m.name << "," << m.mean << ",";
    if (m.n > 1) out << m.stddev;
    else out << "n/a";
    out << "," << m.n << "\n";
  }
  if (!rep.complete) {
    out << "# INCOMPLETE\n";
    for (const auto& f : rep.failures) out << "# " << f << "\n";
  }
  return out.str();
}

}  // namespace gcv
