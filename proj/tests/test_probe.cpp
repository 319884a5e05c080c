// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gcv/graph.hpp"
#include "gcv/probe.hpp"

using namespace gcv;

namespace {

// Two 1-D classes separated at 0.
void separable(Matrix& x, std::vector<int>& y, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    x.push_back({(c ? 1.0 : -1.0) * rng.uniform(0.05, 2.0)});
    y.push_back(c);
  }
}

void blobs(Matrix& x, std::vector<int>& y, std::size_t per_class, std::size_t classes, std::size_t dims, double spread, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> row(dims);
      for (std::size_t d = 0; d < dims; ++d) row[d] = (d == c % dims ? 2.0 : 0.0) + (c / dims) * 1.5 + spread * rng.normal();
      x.push_back(row);
      y.push_back(static_cast<int>(c));
    }
}

bool trees_equal(const GbtModel& a, const GbtModel& b, double tol) {
  if (a.rounds.size() != b.rounds.size() || a.round_scale != b.round_scale) return false;
  for (std::size_t r = 0; r < a.rounds.size(); ++r)
    for (std::size_t c = 0; c < a.rounds[r].size(); ++c) {
      const auto& na = a.rounds[r][c].nodes;
      const auto& nb = b.rounds[r][c].nodes;
      if (na.size() != nb.size()) return false;
      for (std::size_t i = 0; i < na.size(); ++i) {
        if (na[i].feature != nb[i].feature || na[i].threshold != nb[i].threshold) return false;
        if (std::abs(na[i].value - nb[i].value) > tol) return false;
      }
    }
  return true;
}

}  // namespace

TEST(Metrics, BalancedAccuracyExamples) {
  EXPECT_EQ(balanced_accuracy({0, 1, 2}, {0, 1, 2}), 1.0);
  EXPECT_DOUBLE_EQ(balanced_accuracy({0, 0, 1, 1}, {0, 0, 1, 0}), 0.75);
  EXPECT_DOUBLE_EQ(balanced_accuracy({0, 0, 1, 1, 2, 2, 3, 3}, std::vector<int>(8, 2)), 0.25);
  EXPECT_THROW(balanced_accuracy({}, {}), ValueError);
  EXPECT_THROW(balanced_accuracy({0}, {0, 1}), ShapeError);
}

TEST(Metrics, MacroF1Examples) {
  EXPECT_EQ(macro_f1({0, 1, 1}, {0, 1, 1}), 1.0);
  EXPECT_NEAR(macro_f1({0, 0, 1, 1}, {0, 0, 1, 0}), 11.0 / 15.0, 1e-15);
  // Class 2 never predicted: its F1 of 0 is part of the mean.
  EXPECT_NEAR(macro_f1({0, 1, 2}, {0, 1, 1}), (1.0 + 2.0 / 3.0 + 0.0) / 3.0, 1e-15);
}

TEST(Metrics, BalancedAccuracyRelabelInvariance) {
  Rng rng(2);
  for (int it = 0; it < 20; ++it) {
    std::vector<int> t, p;
    for (int i = 0; i < 50; ++i) t.push_back(static_cast<int>(rng.below(4))), p.push_back(static_cast<int>(rng.below(4)));
    std::vector<int> perm{0, 1, 2, 3};
    rng.shuffle(perm);
    std::vector<int> t2, p2;
    for (int i = 0; i < 50; ++i) t2.push_back(perm[static_cast<std::size_t>(t[static_cast<std::size_t>(i)])]), p2.push_back(perm[static_cast<std::size_t>(p[static_cast<std::size_t>(i)])]);
    EXPECT_NEAR(balanced_accuracy(t, p), balanced_accuracy(t2, p2), 1e-15);
  }
}

TEST(Metrics, ClosedSetVersusBalanced) {
  // Majority class over-predicted: accuracy exceeds balanced accuracy.
  std::vector<int> t{0, 0, 0, 0, 0, 0, 1, 1}, p{0, 0, 0, 0, 0, 0, 0, 1};
  auto m = compute_metrics(t, p);
  EXPECT_GT(m.closed_set_accuracy, m.balanced_accuracy);
  // Balanced classes with equal recall: the two coincide.
  auto e = compute_metrics({0, 0, 1, 1}, {0, 1, 1, 0});
  EXPECT_DOUBLE_EQ(e.closed_set_accuracy, e.balanced_accuracy);
  EXPECT_DOUBLE_EQ(m.balanced_accuracy, (m.per_class_recall[0] + m.per_class_recall[1]) / 2);
  EXPECT_EQ(m.confusion[1][0], 1u);
}

TEST(Gbt, SeparableToySet) {
  Matrix x;
  std::vector<int> y;
  separable(x, y, 200, 1);
  auto m = fit_gbt(x, y);
  auto p = predict(m, x);
  EXPECT_GE(accuracy(y, p.labels), 0.99);
  for (const auto& row : p.probabilities) EXPECT_NEAR(row[0] + row[1], 1.0, 1e-9);
  EXPECT_EQ(predict(m, x).labels, p.labels);
}

TEST(Gbt, DuplicatedRowsGiveIdenticalModel) {
  Matrix x;
  std::vector<int> y;
  blobs(x, y, 30, 4, 3, 0.8, 3);
  auto x2 = x;
  auto y2 = y;
  x2.insert(x2.end(), x.begin(), x.end());
  y2.insert(y2.end(), y.begin(), y.end());
  GbtHyper hp;
  hp.rounds = 20;
  EXPECT_TRUE(trees_equal(fit_gbt(x, y, hp), fit_gbt(x2, y2, hp), 1e-9));
}

TEST(Gbt, ZeroRoundsIsPriorOnly) {
  Matrix x{{0}, {1}, {2}, {3}, {4}};
  std::vector<int> y{0, 0, 0, 1, 2};
  GbtHyper hp;
  hp.rounds = 0;
  auto m = fit_gbt(x, y, hp);
  auto p = predict(m, x);
  for (const auto& row : p.probabilities)
    for (double v : row) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(accuracy(y, p.labels), 0.6);  // class 0 is the majority
}

TEST(Gbt, TrainingLossNonIncreasing) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    Matrix x;
    std::vector<int> y;
    blobs(x, y, 25, 5, 4, 1.5, seed);
    auto m = fit_gbt(x, y);
    ASSERT_EQ(m.train_logloss.size(), 101u);
    for (std::size_t r = 1; r < m.train_logloss.size(); ++r) EXPECT_LE(m.train_logloss[r], m.train_logloss[r - 1]);
    EXPECT_LT(m.train_logloss.back(), m.train_logloss.front());
  }
}

TEST(Gbt, TreeInvariantsAndErrors) {
  Matrix x;
  std::vector<int> y;
  blobs(x, y, 20, 3, 3, 1.0, 5);
  auto m = fit_gbt(x, y);
  for (const auto& round : m.rounds)
    for (const auto& t : round)
      for (const auto& n : t.nodes) {
        EXPECT_LT(n.feature, 3);
        EXPECT_TRUE(std::isfinite(n.value));
      }
  EXPECT_THROW(fit_gbt({{1}, {2}}, {0, 0}), ValueError);
  EXPECT_THROW(fit_gbt({{1}, {std::nan("")}}, {0, 1}), ValueError);
  EXPECT_THROW(predict(m, {{1, 2}}), ShapeError);
}

TEST(Evaluate, DeterministicAndNearChanceForRandomModel) {
  ModelConfig cfg;
  cfg.n_channels = 30;
  cfg.n_samples = 64;
  cfg.segment_size = 8;
  cfg.d_model = 8;
  cfg.latent_dim = 4;
  cfg.n_gcn_layers = 1;
  cfg.n_transformer_layers = 1;
  cfg.n_heads = 2;
  cfg.adapter_heads = 2;
  Model model(cfg, 1);
  // Pure-noise epochs: labels carry no signal.
  Dataset ds;
  ds.channels = 30;
  ds.samples = 64;
  ds.n_subjects = 4;
  ds.n_tasks = 2;
  ds.n_paradigms = 2;
  Rng rng(7);
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t t = 0; t < 2; ++t)
      for (int k = 0; k < 100; ++k) {
        Epoch e;
        for (std::size_t i = 0; i < 30 * 64; ++i) e.data.push_back(static_cast<float>(rng.normal()));
        e.subject = static_cast<std::uint16_t>(s);
        e.task = e.paradigm = static_cast<std::uint16_t>(t);
        ds.epochs.push_back(std::move(e));
      }
  const auto adj = graph::build_graph(30).normalized;
  const auto plan = holdout_split(ds, {70, 10, 20}, 1);
  const auto a = evaluate_latents(model, adj, ds, plan, LatentRole::S, LabelAxis::Subject);
  const auto b = evaluate_latents(model, adj, ds, plan, LatentRole::S, LabelAxis::Subject);
  EXPECT_EQ(a.balanced_accuracy, b.balanced_accuracy);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_NEAR(a.balanced_accuracy, 0.25, 0.10);

  const auto lat = encode_latents(model, ds, adj);
  auto rows = paradigm_breakdown(lat, ds, plan);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows.back().paradigm, "average");
  EXPECT_DOUBLE_EQ(rows.back().balanced, (rows[0].balanced + rows[1].balanced) / 2);

  const auto path = (std::filesystem::temp_directory_path() / "gcv_latents.csv").string();
  write_latents_csv(path, lat, ds);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch_index,subject,task,paradigm,z_S_0,z_S_1,z_S_2,z_S_3,z_T_0,z_T_1,z_T_2,z_T_3");
}

TEST(Evaluate, SingleParadigmBreakdownMatchesOverall) {
  Matrix x;
  std::vector<int> y;
  blobs(x, y, 20, 3, 3, 0.7, 9);
  Dataset ds;
  ds.channels = ds.samples = 1;
  ds.n_subjects = 3;
  ds.n_tasks = ds.n_paradigms = 1;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Epoch e;
    e.data = {0.0f};
    e.subject = static_cast<std::uint16_t>(y[i]);
    ds.epochs.push_back(e);
  }
  Latents lat{x, x};
  const auto plan = holdout_split(ds, {70, 10, 20}, 2);
  const auto overall = evaluate_latents(lat, ds, plan, LatentRole::S, LabelAxis::Subject);
  const auto rows = paradigm_breakdown(lat, ds, plan);
  EXPECT_DOUBLE_EQ(rows[0].balanced, overall.balanced_accuracy);
  EXPECT_DOUBLE_EQ(rows[0].closed_set, overall.closed_set_accuracy);
}

TEST(Evaluate, UnseenTestClassIsDroppedWithWarning) {
  Dataset ds;
  ds.channels = ds.samples = 1;
  ds.n_subjects = 3;
  ds.n_tasks = ds.n_paradigms = 1;
  Matrix feats;
  for (int i = 0; i < 12; ++i) {
    Epoch e;
    e.data = {0.0f};
    e.subject = static_cast<std::uint16_t>(i < 10 ? i % 2 : 2);
    ds.epochs.push_back(e);
    feats.push_back({static_cast<double>(e.subject) + 0.01 * i});
  }
  diag::CaptureWarnings cap;
  auto m = evaluate_features(feats, ds, {0, 1, 2, 3, 4, 5, 6, 7}, {8, 9, 10, 11}, LabelAxis::Subject);
  EXPECT_TRUE(cap.any_contains("absent from training"));
  EXPECT_EQ(m.per_class_recall.size(), 2u);
}
