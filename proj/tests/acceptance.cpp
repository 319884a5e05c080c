// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Criteria 5-7 train on the desk-scale synthetic dataset.

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <iostream>
#include <sstream>

#include "gcv/gradcheck.hpp"
#include "gcv/graph.hpp"
#include "gcv/signal.hpp"
#include "gcv/synth.hpp"
#include "gcv/train.hpp"

using namespace gcv;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << std::fixed << v;
  return s.str();
}

std::string sci(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3g", v);
  return b;
}

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("criterion %d [%s]: %s (%s; %.1f s)\n", id, name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
  std::fflush(stdout);
}

ModelConfig toy_config() {
  ModelConfig c;
  c.n_channels = 4;
  c.n_samples = 16;
  c.segment_size = 4;
  c.d_model = 8;
  c.latent_dim = 4;
  c.n_gcn_layers = 1;
  c.n_transformer_layers = 1;
  c.n_heads = 2;
  c.adapter_heads = 2;
  return c;
}

Tensor toy_adj() { return graph::build_graph(4, {0.5, 0.0, ""}).normalized; }

// Desk-scale setup shared by criteria 5-8.
ModelConfig desk_model() {
  ModelConfig c;
  c.segment_size = 16;
  c.d_model = 32;
  c.latent_dim = 32;
  c.n_gcn_layers = 1;
  c.n_transformer_layers = 1;
  c.n_heads = 2;
  c.adapter_heads = 2;
  return c;
}

TrainConfig desk_train() {
  TrainConfig t;
  t.learning_rate = 2e-3;
  t.finetune_lr = 2e-3;
  t.epochs = 30;
  t.batch_size = 64;
  t.dev_eval_every = 5;
  t.finetune_epochs = 20;
  return t;
}

constexpr std::array<std::uint64_t, 3> kSeeds{0, 1, 2};

// --- criterion 1 -----------------------------------------------------------

Outcome gradient_correctness() {
  Model m(toy_config(), 1);
  const auto adj = toy_adj();
  Rng rng(2);
  const auto xa = Tensor::randn({3, 4, 16}, rng), xb = Tensor::randn({3, 4, 16}, rng);
  std::vector<Tensor> leaves;
  for (auto& [_, t] : m.params().entries()) leaves.push_back(t);
  double worst = 0;
  std::size_t n = 0;
  for (auto axis : {LabelAxis::Subject, LabelAxis::Task}) {
    const auto rep = gradcheck(
        [&] {
          Rng r(3);
          return total_objective(m, adj, xa, xb, axis, LossConfig{}, r).total_tensor;
        },
        leaves, 1e-6);
    worst = std::max(worst, rep.max_rel_error);
    n += rep.n_checked;
  }
  return {worst <= 1e-4, "max rel error " + sci(worst) + " over " + std::to_string(n) + " components"};
}

// --- criterion 2 -----------------------------------------------------------

Outcome loss_identities() {
  std::vector<std::string> bad;
  Rng rng(11);
  for (std::size_t k : {2u, 5u, 16u}) {
    const auto z = Tensor::randn({1, 6}, rng);
    std::vector<double> rows;
    for (std::size_t i = 0; i < k; ++i) rows.insert(rows.end(), z.data().begin(), z.data().end());
    const Tensor same({k, 6}, rows);
    LossConfig inc, lit;
    lit.denominator = Denominator::LiteralEq1;
    const auto tau = Tensor::scalar(7.0);
    const double a = nt_xent(same, same, 0, tau, inc).item();
    const double b = nt_xent(same, same, k - 1, tau, lit).item();
    if (std::abs(a - std::log(static_cast<double>(k))) > 1e-9) bad.push_back("ln K at K=" + std::to_string(k));
    if (std::abs(b - std::log(static_cast<double>(k - 1))) > 1e-9) bad.push_back("ln(K-1) at K=" + std::to_string(k));
  }
  for (int it = 0; it < 20; ++it) {
    const auto a = Tensor::randn({6, 5}, rng), b = Tensor::randn({6, 5}, rng);
    const auto tau = Tensor::scalar(rng.uniform(1, 100));
    if (clip_loss(a, b, tau, {}).item() != clip_loss(b, a, tau, {}).item()) bad.push_back("clip symmetry");
  }
  if (kl_divergence(Tensor::zeros({3, 4}), Tensor::zeros({3, 4})).item() != 0.0) bad.push_back("kl(0,0)");
  double min_kl = 1e300;
  for (int it = 0; it < 10000; ++it) {
    const auto mu = Tensor::randn({1, 4}, rng, 3.0), lv = Tensor::randn({1, 4}, rng, 3.0);
    min_kl = std::min(min_kl, kl_divergence(mu, lv).item());
  }
  if (min_kl < 0.0) bad.push_back("kl negative");
  Model m(toy_config(), 1);
  const auto adj = toy_adj();
  const auto x = Tensor::randn({3, 4, 16}, rng);
  const auto zs = Tensor::randn({3, 4}, rng), zt = Tensor::randn({3, 4}, rng);
  const double plain = mse(m.decode(zs, zt, adj), x).item();
  double perm_err = 0;
  for (auto axis : {LabelAxis::Subject, LabelAxis::Task})
    perm_err = std::max(perm_err, std::abs(latent_permutation_loss(m, adj, x, x, {zs, zt, zs, zt}, axis).item() - plain));
  if (perm_err > 1e-12) bad.push_back("latent permutation");
  std::string d = "min kl " + fmt(min_kl, 6) + ", permutation gap " + sci(perm_err);
  for (const auto& b : bad) d += "; failed " + b;
  return {bad.empty(), d};
}

// --- criterion 3 -----------------------------------------------------------

std::vector<double> sine(double f, double fs, std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(2 * std::numbers::pi * f * static_cast<double>(i) / fs);
  return x;
}

double rms(const std::vector<double>& x, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(to - from));
}

Outcome signal_suite() {
  const double fs = 256.0;
  std::vector<double> dc(4096, 1.0);
  const auto y = signal::butter_highpass_filtfilt(dc, 0.1, fs);
  double peak = 0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  const double atten_db = peak == 0.0 ? std::numeric_limits<double>::infinity() : -20 * std::log10(peak);

  const auto x10 = sine(10.0, fs, 256 * 20);
  const auto y10 = signal::butter_highpass_filtfilt(x10, 0.1, fs);
  const double gain10 = rms(y10, 256 * 5, 256 * 15) / rms(x10, 256 * 5, 256 * 15);

  double worst_dc = 0;
  for (auto [fc, rate] : {std::pair{204.8, 1024.0}, {64.0, 1024.0}, {30.0, 256.0}}) {
    const auto h = signal::design_sinc_lowpass(fc, rate, signal::sinc_taps(fc, rate));
    double s = 0;
    for (double v : h) s += v;
    worst_dc = std::max(worst_dc, std::abs(s - 1.0));
  }

  bool shape_ok = true;
  Rng rng(5);
  for (double rate : {50.0, 100.0, 128.0, 256.0, 500.0}) {
    for (double secs : {30.0, 31.7, 90.0}) {
      std::vector<double> x(static_cast<std::size_t>(std::ceil(rate * secs)));
      for (auto& v : x) v = rng.normal();
      shape_ok = shape_ok && signal::stft_align(x, rate).size() == 30u * 256u;
    }
  }
  const bool pass = atten_db >= 60.0 && std::abs(gain10 - 1.0) <= 0.01 && worst_dc <= 1e-6 && shape_ok;
  return {pass, "DC attenuation " + (std::isinf(atten_db) ? std::string("complete") : fmt(atten_db, 1) + " dB") + ", 10 Hz gain " + fmt(gain10, 6) + ", sinc DC error " + sci(worst_dc) +
                    ", stft_align shape " + (shape_ok ? "30x256" : "wrong")};
}

// --- criterion 4 -----------------------------------------------------------

Outcome graph_suite() {
  double err = 0;
  const auto two = graph::normalize_adjacency(Tensor({2, 2}, {0, 1, 1, 0}));
  for (double v : two.values()) err = std::max(err, std::abs(v - 0.5));
  const auto three = graph::normalize_adjacency(Tensor({3, 3}, {0, 1, 0, 1, 0, 1, 0, 1, 0}));
  const double s6 = 1.0 / std::sqrt(6.0);
  const std::vector<double> want{0.5, s6, 0.0, s6, 1.0 / 3.0, s6, 0.0, s6, 0.5};
  for (std::size_t i = 0; i < 9; ++i) err = std::max(err, std::abs(three.values()[i] - want[i]));

  const auto g = graph::build_graph(30).normalized;
  Eigen::MatrixXd m(30, 30);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 30; ++j) m(i, j) = g.values()[static_cast<std::size_t>(i * 30 + j)];
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  const bool pass = err <= 1e-12 && lo >= -1 - 1e-9 && hi <= 1 + 1e-9;
  return {pass, "hand-case error " + sci(err) + ", eigenvalues in [" + fmt(lo, 6) + ", " + fmt(hi, 6) + "]"};
}

// --- criteria 5-7 ----------------------------------------------------------

struct Desk {
  Dataset ds;
  SplitPlan plan;
  Tensor adj;
};

struct SeedRun {
  Model model;
  double s_subject = 0, t_task = 0, t_subject = 0, s_task = 0;
  double wall = 0;
};

SeedRun run_variant(const Desk& d, ModelConfig mc, LossConfig lc, std::uint64_t seed) {
  const auto res = train(d.ds, d.plan, d.adj, desk_train(), mc, lc, seed);
  if (res.history.aborted) throw NumericError("training diverged for seed " + std::to_string(seed));
  SeedRun r{res.best_model, 0, 0, 0, 0, res.history.wall_seconds};
  const auto lat = encode_latents(r.model, d.ds, d.adj);
  const auto hp = desk_train().probe;
  r.s_subject = evaluate_latents(lat, d.ds, d.plan, LatentRole::S, LabelAxis::Subject, hp).balanced_accuracy;
  r.t_subject = evaluate_latents(lat, d.ds, d.plan, LatentRole::T, LabelAxis::Subject, hp).balanced_accuracy;
  r.t_task = evaluate_latents(lat, d.ds, d.plan, LatentRole::T, LabelAxis::Task, hp).balanced_accuracy;
  r.s_task = evaluate_latents(lat, d.ds, d.plan, LatentRole::S, LabelAxis::Task, hp).balanced_accuracy;
  std::printf("  seed %llu: S-subject %.4f, T-subject %.4f, T-task %.4f, S-task %.4f, best epoch %zu, %.0f s\n",
              static_cast<unsigned long long>(seed), r.s_subject, r.t_subject, r.t_task, r.s_task, res.history.best_epoch, r.wall);
  std::fflush(stdout);
  return r;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

int main() {
  report(1, "gradient correctness", gradient_correctness);
  report(2, "loss identities", loss_identities);
  report(3, "signal suite", signal_suite);
  report(4, "graph suite", graph_suite);

  Desk desk;
  {
    const auto t0 = std::chrono::steady_clock::now();
    synth::SynthSpec spec;
    spec.seed = 2026;
    desk.ds = synth::generate(spec).dataset;
    desk.plan = holdout_split(desk.ds, {70, 10, 20}, 0);
    desk.adj = graph::build_graph(30).normalized;
    std::printf("desk dataset: %zu epochs (%zu train / %zu dev / %zu test), generated in %.1f s\n", desk.ds.size(), desk.plan.train.size(),
                desk.plan.dev.size(), desk.plan.test.size(), std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::fflush(stdout);
  }

  std::vector<SeedRun> full;
  report(5, "desk-scale disentanglement", [&]() -> Outcome {
    for (auto s : kSeeds) full.push_back(run_variant(desk, desk_model(), LossConfig{}, s));
    std::vector<double> ss, tt;
    int ordered = 0;
    double slowest = 0;
    for (const auto& r : full) {
      ss.push_back(r.s_subject);
      tt.push_back(r.t_task);
      ordered += r.s_subject > r.t_subject;
      slowest = std::max(slowest, r.wall);
    }
    const bool pass = mean(ss) >= 0.80 && mean(tt) >= 0.70 && ordered >= 2 && slowest < 900.0;
    return {pass, "S-subject " + fmt(mean(ss)) + ", T-task " + fmt(mean(tt)) + ", ordering held in " + std::to_string(ordered) +
                      "/3 seeds, slowest seed " + fmt(slowest, 0) + " s"};
  });

  report(6, "ablation direction", [&]() -> Outcome {
    if (full.size() != kSeeds.size()) return {false, "full-model runs unavailable"};
    std::vector<double> base, no_con, no_gcn;
    for (const auto& r : full) base.push_back(r.s_subject);
    LossConfig lc;
    lc.no_contrastive = true;
    std::printf("  without contrastive loss:\n");
    for (auto s : kSeeds) no_con.push_back(run_variant(desk, desk_model(), lc, s).s_subject);
    auto mc = desk_model();
    mc.no_gcnn = true;
    std::printf("  without GCNN layers:\n");
    for (auto s : kSeeds) no_gcn.push_back(run_variant(desk, mc, LossConfig{}, s).s_subject);
    const double d_con = 100 * (mean(base) - mean(no_con)), d_gcn = 100 * (mean(base) - mean(no_gcn));
    return {d_con >= 3.0 && d_gcn >= 2.0, "drop without contrastive " + fmt(d_con, 2) + " points, without GCNN " + fmt(d_gcn, 2) + " points"};
  });

  report(7, "adapter contract", [&]() -> Outcome {
    if (full.size() != kSeeds.size()) return {false, "full-model runs unavailable"};
    double identity_gap = 0;
    bool frozen = true;
    std::vector<double> gains;
    const auto tc = desk_train();
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
      const auto& base = full[i].model;
      auto attached = snapshot(base);
      attached.attach_adapter();
      const auto before = encode_latents(base, desk.ds, desk.adj), after = encode_latents(attached, desk.ds, desk.adj);
      for (std::size_t r = 0; r < before.s.size(); ++r)
        for (std::size_t c = 0; c < before.s[r].size(); ++c)
          identity_gap = std::max({identity_gap, std::abs(before.s[r][c] - after.s[r][c]), std::abs(before.t[r][c] - after.t[r][c])});

      const auto ft = finetune_adapter(base, desk.ds, desk.plan.test, desk.adj, tc, LossConfig{}, kSeeds[i]);
      const auto& fe = ft.model.params().entries();
      const auto& be = base.params().entries();
      for (std::size_t p = 0; p < be.size(); ++p)
        frozen = frozen && std::equal(be[p].second.data().begin(), be[p].second.data().end(), fe[p].second.data().begin());

      const auto lat_ft = encode_latents(ft.model, desk.ds, desk.adj);
      const double refit = evaluate_features(before.s, desk.ds, ft.adapt, ft.held_out, LabelAxis::Subject, tc.probe).balanced_accuracy;
      const double tuned = evaluate_features(lat_ft.s, desk.ds, ft.adapt, ft.held_out, LabelAxis::Subject, tc.probe).balanced_accuracy;
      gains.push_back(100 * (tuned - refit));
      // Axes alternate per step, so compare equal numbers of each.
      const auto& st = ft.history.steps;
      const std::size_t w = std::min<std::size_t>(6, st.size() / 2 * 2);
      double first = 0, last = 0;
      for (std::size_t k = 0; k < w; ++k) first += st[k].total / w, last += st[st.size() - w + k].total / w;
      std::printf("  seed %llu: probe refit only %.4f, fine-tuned %.4f (FT loss %.4f -> %.4f over %zu-step windows)\n",
                  static_cast<unsigned long long>(kSeeds[i]), refit, tuned, first, last, w);
      std::fflush(stdout);
    }
    const bool pass = identity_gap <= 1e-12 && frozen && mean(gains) >= 2.0;
    return {pass, "attach gap " + sci(identity_gap) + ", backbone " + (frozen ? "bit-identical" : "CHANGED") + ", mean FT gain " +
                      fmt(mean(gains), 2) + " points"};
  });

  report(8, "determinism and persistence", [&]() -> Outcome {
    auto tc = desk_train();
    tc.epochs = 2;
    const auto a = train(desk.ds, desk.plan, desk.adj, tc, desk_model(), LossConfig{}, 9);
    const auto b = train(desk.ds, desk.plan, desk.adj, tc, desk_model(), LossConfig{}, 9);
    bool same = a.history.steps.size() == b.history.steps.size() && a.history.dev.size() == b.history.dev.size() &&
                a.history.best_epoch == b.history.best_epoch && a.history.aborted == b.history.aborted;
    for (std::size_t i = 0; same && i < a.history.steps.size(); ++i) {
      const auto &x = a.history.steps[i], &y = b.history.steps[i];
      same = x.total == y.total && x.rec == y.rec && x.kl_s == y.kl_s && x.kl_t == y.kl_t && x.clip_s == y.clip_s && x.clip_t == y.clip_t &&
             x.tau == y.tau && x.grad_norm == y.grad_norm && x.skipped == y.skipped;
    }
    for (std::size_t i = 0; same && i < a.history.dev.size(); ++i) same = a.history.dev[i].subject_balanced_accuracy == b.history.dev[i].subject_balanced_accuracy;

    const auto ckpt = (std::filesystem::temp_directory_path() / "gcv_acceptance.gcvk").string();
    save_checkpoint(ckpt, a.final_model);
    const auto loaded = load_checkpoint(ckpt);
    std::filesystem::remove(ckpt);
    const auto la = encode_latents(a.final_model, desk.ds, desk.adj), lb = encode_latents(loaded, desk.ds, desk.adj);
    const bool latents_same = la.s == lb.s && la.t == lb.t;

    const auto bytes = encode_dataset(desk.ds);
    const auto back = decode_dataset(bytes);
    bool ds_same = encode_dataset(back) == bytes && back.size() == desk.ds.size();
    for (std::size_t i = 0; ds_same && i < back.size(); ++i)
      ds_same = std::memcmp(back.epochs[i].data.data(), desk.ds.epochs[i].data.data(), back.epochs[i].data.size() * sizeof(float)) == 0 &&
                back.epochs[i].subject == desk.ds.epochs[i].subject && back.epochs[i].task == desk.ds.epochs[i].task;
    return {same && latents_same && ds_same, std::string("history ") + (same ? "identical" : "differs") + ", checkpoint latents " +
                                                 (latents_same ? "identical" : "differ") + ", GCVZ " + (ds_same ? "bit-exact" : "differs")};
  });

  report(9, "probe correctness", []() -> Outcome {
    std::vector<std::string> bad;
    if (balanced_accuracy({0, 1, 2}, {0, 1, 2}) != 1.0) bad.push_back("BA perfect");
    if (balanced_accuracy({0, 0, 1, 1}, {0, 0, 1, 0}) != 0.75) bad.push_back("BA 0.75");
    if (balanced_accuracy({0, 0, 1, 1, 2, 2, 3, 3}, std::vector<int>(8, 2)) != 0.25) bad.push_back("BA constant");
    if (macro_f1({0, 1, 1}, {0, 1, 1}) != 1.0) bad.push_back("F1 perfect");
    if (std::abs(macro_f1({0, 0, 1, 1}, {0, 0, 1, 0}) - 11.0 / 15.0) > 1e-15) bad.push_back("F1 11/15");
    if (std::abs(macro_f1({0, 1, 2}, {0, 1, 1}) - 5.0 / 9.0) > 1e-15) bad.push_back("F1 unpredicted class");

    Matrix x;
    std::vector<int> y;
    Rng rng(1);
    for (std::size_t i = 0; i < 200; ++i) {
      const int c = static_cast<int>(i % 2);
      x.push_back({(c ? 1.0 : -1.0) * rng.uniform(0.05, 2.0), rng.normal()});
      y.push_back(c);
    }
    const auto m = fit_gbt(x, y);
    const double acc = accuracy(y, predict(m, x).labels);
    bool monotone = true;
    for (std::size_t r = 1; r < m.train_logloss.size(); ++r) monotone = monotone && m.train_logloss[r] <= m.train_logloss[r - 1];
    if (acc < 0.99) bad.push_back("GBT train accuracy");
    if (!monotone) bad.push_back("GBT log-loss increased");
    std::string d = "GBT train accuracy " + fmt(acc) + ", log-loss " + fmt(m.train_logloss.front()) + " -> " + fmt(m.train_logloss.back(), 6);
    for (const auto& b : bad) d += "; failed " + b;
    return {bad.empty(), d};
  });

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
