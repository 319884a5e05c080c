// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "gcv/batch.hpp"
#include "gcv/model.hpp"

namespace gcv {

using Matrix = std::vector<std::vector<double>>;  // rows of features

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double balanced_accuracy = 0;
  double closed_set_accuracy = 0;
  double macro_f1 = 0;
  std::vector<int> classes;               // label of each row/column below
  std::vector<double> per_class_recall;   // over classes present in y_true
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred] over `classes`
};

namespace detail {

inline void check_labels(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
  if (y_true.empty()) throw ValueError("metrics: empty input");
  if (y_true.size() != y_pred.size()) throw ShapeError("metrics: y_true and y_pred differ in length");
}

}  // namespace detail

/// Mean recall over the classes that occur in y_true.
inline double balanced_accuracy(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
  detail::check_labels(y_true, y_pred);
  std::map<int, std::pair<double, double>> r;  // class -> (hits, total)
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    auto& [hit, tot] = r[y_true[i]];
    tot += 1;
    hit += y_true[i] == y_pred[i];
  }
  double s = 0;
  for (const auto& [_, v] : r) s += v.first / v.second;
  return s / static_cast<double>(r.size());
}

inline double accuracy(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
  detail::check_labels(y_true, y_pred);
  double hit = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) hit += y_true[i] == y_pred[i];
  return hit / static_cast<double>(y_true.size());
}

/// Unweighted mean F1 over `classes` (default: every label seen in either
/// vector). A class with no true positives scores 0.
inline double macro_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::vector<int> classes = {}) {
  detail::check_labels(y_true, y_pred);
  if (classes.empty()) {
    std::set<int> u(y_true.begin(), y_true.end());
    u.insert(y_pred.begin(), y_pred.end());
    classes.assign(u.begin(), u.end());
  }
  double s = 0;
  for (int c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
      tp += (y_true[i] == c && y_pred[i] == c);
      fp += (y_true[i] != c && y_pred[i] == c);
      fn += (y_true[i] == c && y_pred[i] != c);
    }
    s += tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return s / static_cast<double>(classes.size());
}

inline Metrics compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
  detail::check_labels(y_true, y_pred);
  Metrics m;
  std::set<int> u(y_true.begin(), y_true.end());
  u.insert(y_pred.begin(), y_pred.end());
  m.classes.assign(u.begin(), u.end());
  std::map<int, std::size_t> pos;
  for (std::size_t i = 0; i < m.classes.size(); ++i) pos[m.classes[i]] = i;
  m.confusion.assign(m.classes.size(), std::vector<std::size_t>(m.classes.size(), 0));
  for (std::size_t i = 0; i < y_true.size(); ++i) ++m.confusion[pos[y_true[i]]][pos[y_pred[i]]];
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    const auto tot = std::accumulate(m.confusion[c].begin(), m.confusion[c].end(), std::size_t{0});
    if (tot > 0) m.per_class_recall.push_back(static_cast<double>(m.confusion[c][c]) / static_cast<double>(tot));
  }
  m.balanced_accuracy = balanced_accuracy(y_true, y_pred);
  m.closed_set_accuracy = accuracy(y_true, y_pred);
  m.macro_f1 = macro_f1(y_true, y_pred, m.classes);
  return m;
}

// ---------------------------------------------------------------------------
// Gradient-boosted trees, softmax objective

struct GbtHyper {
  std::size_t rounds = 100;
  std::size_t max_depth = 4;
  double shrinkage = 0.1;
  std::size_t min_child = 2;  // distinct split-feature values required on each side
  double lambda = 0.0;        // L2 on leaf weights
  double min_hessian = 1e-16;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0;
  int left = -1, right = -1;
  double value = 0;
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict(const std::vector<double>& x) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      i = x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
  }
};

struct GbtModel {
  std::vector<int> classes;  // label of each output column
  std::size_t n_features = 0;
  std::vector<std::vector<Tree>> rounds;  // [round][class]
  std::vector<double> round_scale;        // effective shrinkage per round
  std::vector<double> train_logloss;      // after 0..R rounds

  std::vector<double> scores(const std::vector<double>& x) const {
    std::vector<double> f(classes.size(), 0.0);
    for (std::size_t r = 0; r < rounds.size(); ++r)
      for (std::size_t c = 0; c < classes.size(); ++c) f[c] += round_scale[r] * rounds[r][c].predict(x);
    return f;
  }
};

// Splits must beat this fraction of the parent score, so gains that are zero
// up to rounding do not create nodes; near-equal gains keep the earlier
// (feature, threshold) candidate.
inline constexpr double kMinRelGain = 1e-9;

namespace detail {

inline void softmax_inplace(std::vector<double>& f) {
  const double m = *std::max_element(f.begin(), f.end());
  double s = 0;
  for (auto& v : f) s += (v = std::exp(v - m));
  for (auto& v : f) v /= s;
}

inline double mean_logloss(const std::vector<std::vector<double>>& f, const std::vector<std::size_t>& y) {
  double s = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double m = *std::max_element(f[i].begin(), f[i].end());
    double z = 0;
    for (double v : f[i]) z += std::exp(v - m);
    s += m + std::log(z) - f[i][y[i]];
  }
  return s / static_cast<double>(f.size());
}

// Level-wise exact greedy tree on (g, h) with presorted feature orders.
inline Tree grow_tree(const Matrix& x, const std::vector<std::vector<std::size_t>>& order, const std::vector<double>& g,
                      const std::vector<double>& h, const GbtHyper& hp) {
  const std::size_t n = x.size(), nf = order.size();
  Tree tree;
  tree.nodes.push_back({});
  std::vector<int> node_of(n, 0);
  auto leaf_value = [&](double gs, double hs) { return -gs / (hs + hp.lambda); };
  auto score = [&](double gs, double hs) { return gs * gs / (hs + hp.lambda); };

  std::vector<int> frontier{0};
  for (std::size_t depth = 0; depth <= hp.max_depth && !frontier.empty(); ++depth) {
    const std::size_t nn = tree.nodes.size();
    std::vector<double> gs(nn, 0), hs(nn, 0);
    for (std::size_t i = 0; i < n; ++i)
      if (node_of[i] >= 0) gs[static_cast<std::size_t>(node_of[i])] += g[i], hs[static_cast<std::size_t>(node_of[i])] += h[i];
    for (int id : frontier) tree.nodes[static_cast<std::size_t>(id)].value = leaf_value(gs[static_cast<std::size_t>(id)], hs[static_cast<std::size_t>(id)]);
    if (depth == hp.max_depth) break;

    struct Best {
      double gain = 0;
      int feature = -1;
      double threshold = 0;
    };
    std::vector<Best> best(nn);
    std::vector<double> gl(nn), hl(nn), last(nn);
    std::vector<std::size_t> distinct_left(nn), distinct_total(nn);
    for (std::size_t f = 0; f < nf; ++f) {
      // Distinct values per node for this feature.
      std::fill(distinct_total.begin(), distinct_total.end(), 0);
      std::fill(last.begin(), last.end(), std::numeric_limits<double>::quiet_NaN());
      for (auto i : order[f]) {
        if (node_of[i] < 0) continue;
        const auto nd = static_cast<std::size_t>(node_of[i]);
        if (!(x[i][f] == last[nd])) ++distinct_total[nd], last[nd] = x[i][f];
      }
      std::fill(gl.begin(), gl.end(), 0);
      std::fill(hl.begin(), hl.end(), 0);
      std::fill(distinct_left.begin(), distinct_left.end(), 0);
      std::fill(last.begin(), last.end(), std::numeric_limits<double>::quiet_NaN());
      for (auto i : order[f]) {
        if (node_of[i] < 0) continue;
        const auto nd = static_cast<std::size_t>(node_of[i]);
        const double v = x[i][f];
        if (!(v == last[nd])) {
          // Candidate boundary between the previous value and v.
          if (distinct_left[nd] >= hp.min_child && distinct_total[nd] - distinct_left[nd] >= hp.min_child) {
            const double gr = gs[nd] - gl[nd], hr = hs[nd] - hl[nd];
            const double gain = 0.5 * (score(gl[nd], hl[nd]) + score(gr, hr) - score(gs[nd], hs[nd]));
            if (gain > best[nd].gain * (1 + kMinRelGain) && gain > kMinRelGain * std::abs(score(gs[nd], hs[nd]))) best[nd] = {gain, static_cast<int>(f), 0.5 * (last[nd] + v)};
          }
          ++distinct_left[nd];
          last[nd] = v;
        }
        gl[nd] += g[i];
        hl[nd] += h[i];
      }
    }

    std::vector<int> next;
    for (int id : frontier) {
      const auto& b = best[static_cast<std::size_t>(id)];
      if (b.feature < 0 || !(b.gain > 0.0)) continue;
      auto& node = tree.nodes[static_cast<std::size_t>(id)];
      node.feature = b.feature;
      node.threshold = b.threshold;
      node.left = static_cast<int>(tree.nodes.size());
      node.right = node.left + 1;
      next.push_back(node.left);
      next.push_back(node.right);
      tree.nodes.push_back({});
      tree.nodes.push_back({});
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (node_of[i] < 0) continue;
      const auto& node = tree.nodes[static_cast<std::size_t>(node_of[i])];
      if (node.feature < 0) {
        node_of[i] = -1;  // settled in a leaf
      } else {
        node_of[i] = x[i][static_cast<std::size_t>(node.feature)] < node.threshold ? node.left : node.right;
      }
    }
    frontier = std::move(next);
  }
  return tree;
}

}  // namespace detail

/// Multiclass softmax boosting: one Newton regression tree per class per
/// round. A round's step is halved until the training log-loss does not
/// increase (dropped entirely if it never stops increasing).
inline GbtModel fit_gbt(const Matrix& x, const std::vector<int>& labels, const GbtHyper& hp = {}) {
  if (x.empty() || x.size() != labels.size()) throw ShapeError("fit_gbt: features and labels differ in length");
  const std::size_t n = x.size(), nf = x[0].size();
  if (nf == 0) throw ShapeError("fit_gbt: no features");
  for (const auto& row : x) {
    if (row.size() != nf) throw ShapeError("fit_gbt: ragged feature matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw ValueError("fit_gbt: non-finite feature value");
  }
  GbtModel model;
  model.n_features = nf;
  std::set<int> u(labels.begin(), labels.end());
  model.classes.assign(u.begin(), u.end());
  if (model.classes.size() < 2) throw ValueError("fit_gbt: need at least 2 classes, got " + std::to_string(model.classes.size()));
  const std::size_t k = model.classes.size();
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i)
    y[i] = static_cast<std::size_t>(std::lower_bound(model.classes.begin(), model.classes.end(), labels[i]) - model.classes.begin());

  std::vector<std::vector<std::size_t>> order(nf, std::vector<std::size_t>(n));
  for (std::size_t f = 0; f < nf; ++f) {
    std::iota(order[f].begin(), order[f].end(), std::size_t{0});
    std::stable_sort(order[f].begin(), order[f].end(), [&](std::size_t a, std::size_t b) { return x[a][f] < x[b][f]; });
  }

  std::vector<std::vector<double>> f(n, std::vector<double>(k, 0.0));
  double loss = detail::mean_logloss(f, y);
  model.train_logloss.push_back(loss);
  std::vector<double> g(n), h(n);
  for (std::size_t r = 0; r < hp.rounds; ++r) {
    std::vector<std::vector<double>> p = f;
    for (auto& row : p) detail::softmax_inplace(row);
    std::vector<Tree> trees;
    std::vector<std::vector<double>> delta(n, std::vector<double>(k));
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        g[i] = p[i][c] - (y[i] == c ? 1.0 : 0.0);
        h[i] = std::max(p[i][c] * (1.0 - p[i][c]), hp.min_hessian);
      }
      trees.push_back(detail::grow_tree(x, order, g, h, hp));
      for (std::size_t i = 0; i < n; ++i) delta[i][c] = trees.back().predict(x[i]);
    }
    double eta = hp.shrinkage;
    double new_loss = loss;
    auto trial = f;
    for (int attempt = 0; attempt < 30; ++attempt) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) trial[i][c] = f[i][c] + eta * delta[i][c];
      new_loss = detail::mean_logloss(trial, y);
      if (new_loss <= loss) break;
      eta *= 0.5;
    }
    if (!(new_loss <= loss)) {
      eta = 0.0;
      new_loss = loss;
      trial = f;
    }
    f = std::move(trial);
    loss = new_loss;
    model.rounds.push_back(std::move(trees));
    model.round_scale.push_back(eta);
    model.train_logloss.push_back(loss);
  }
  return model;
}

struct Prediction {
  std::vector<int> labels;
  std::vector<std::vector<double>> probabilities;  // columns follow model.classes
};

/// Argmax of the softmax; ties go to the smaller class index.
inline Prediction predict(const GbtModel& m, const Matrix& x) {
  Prediction out;
  for (const auto& row : x) {
    if (row.size() != m.n_features)
      throw ShapeError("predict: expected " + std::to_string(m.n_features) + " features, got " + std::to_string(row.size()));
    auto p = m.scores(row);
    detail::softmax_inplace(p);
    const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    out.labels.push_back(m.classes[best]);
    out.probabilities.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latent evaluation

enum class LatentRole { S, T };

struct Latents {
  Matrix s, t;  // posterior means per epoch
};

/// Encodes every epoch with z = mu, in chunks, without tracing.
inline Latents encode_latents(const Model& model, const Dataset& ds, const Tensor& adj, std::size_t chunk = 64) {
  NoGradGuard guard;
  Latents out;
  const std::size_t c = model.config().latent_dim;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
    const std::size_t per = ds.channels * ds.samples;
    std::vector<double> v(idx.size() * per);
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy(ds.epochs[idx[r]].data.begin(), ds.epochs[idx[r]].data.end(), v.begin() + static_cast<std::ptrdiff_t>(r * per));
    const auto lat = model.encode(Tensor({idx.size(), ds.channels, ds.samples}, std::move(v)), adj).latent;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out.s.emplace_back(lat.mu_s.data().begin() + static_cast<std::ptrdiff_t>(r * c), lat.mu_s.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
      out.t.emplace_back(lat.mu_t.data().begin() + static_cast<std::ptrdiff_t>(r * c), lat.mu_t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
    }
  }
  if (model.config().no_split) {
    // One latent of size 2C serves both roles.
    for (std::size_t i = 0; i < out.s.size(); ++i) {
      auto joined = out.s[i];
      joined.insert(joined.end(), out.t[i].begin(), out.t[i].end());
      out.s[i] = joined;
      out.t[i] = std::move(joined);
    }
  }
  return out;
}

inline Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(m.at(i));
  return out;
}

inline std::vector<int> select_labels(const Dataset& ds, const std::vector<std::size_t>& idx, LabelAxis axis) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(label_of(ds.epochs.at(i), axis));
  return out;
}

/// Fits the probe on `train` rows and scores `test` rows. Test epochs whose
/// class never appears in training are dropped with a warning.
inline Metrics evaluate_features(const Matrix& feats, const Dataset& ds, const std::vector<std::size_t>& train, std::vector<std::size_t> test,
                                 LabelAxis target, const GbtHyper& hp = {}) {
  if (train.empty() || test.empty()) throw ValueError("evaluate: empty train or test split");
  const auto ytr = select_labels(ds, train, target);
  const std::set<int> known(ytr.begin(), ytr.end());
  std::vector<std::size_t> kept;
  std::set<int> dropped;
  for (auto i : test) {
    const int y = label_of(ds.epochs[i], target);
    if (known.count(y)) kept.push_back(i);
    else dropped.insert(y);
  }
  for (int c : dropped) diag::warn("evaluate: test class " + std::to_string(c) + " is absent from training; excluded");
  if (kept.empty()) throw ValueError("evaluate: no test epoch has a class seen in training");
  const auto model = fit_gbt(select_rows(feats, train), ytr, hp);
  const auto pred = predict(model, select_rows(feats, kept));
  return compute_metrics(select_labels(ds, kept, target), pred.labels);
}

inline Metrics evaluate_latents(const Latents& lat, const Dataset& ds, const SplitPlan& plan, LatentRole role, LabelAxis target,
                                const GbtHyper& hp = {}) {
  return evaluate_features(role == LatentRole::S ? lat.s : lat.t, ds, plan.train, plan.test, target, hp);
}

inline Metrics evaluate_latents(const Model& model, const Tensor& adj, const Dataset& ds, const SplitPlan& plan, LatentRole role,
                                LabelAxis target, const GbtHyper& hp = {}) {
  return evaluate_latents(encode_latents(model, ds, adj), ds, plan, role, target, hp);
}

struct ParadigmRow {
  std::string paradigm;  // index, or "average"
  double balanced = 0, closed_set = 0;
};

/// Subject identification from z_S, fitted once on the train split and scored
/// on each paradigm's test epochs; the last row is the unweighted average.
inline std::vector<ParadigmRow> paradigm_breakdown(const Latents& lat, const Dataset& ds, const SplitPlan& plan, const GbtHyper& hp = {}) {
  const auto ytr = select_labels(ds, plan.train, LabelAxis::Subject);
  const auto model = fit_gbt(select_rows(lat.s, plan.train), ytr, hp);
  std::vector<ParadigmRow> rows;
  double sb = 0, sc = 0;
  for (std::size_t p = 0; p < ds.n_paradigms; ++p) {
    std::vector<std::size_t> idx;
    for (auto i : plan.test)
      if (ds.epochs[i].paradigm == p) idx.push_back(i);
    if (idx.empty()) {
      diag::warn("paradigm_breakdown: paradigm " + std::to_string(p) + " has no test epochs; omitted");
      continue;
    }
    const auto pred = predict(model, select_rows(lat.s, idx));
    const auto truth = select_labels(ds, idx, LabelAxis::Subject);
    ParadigmRow r{std::to_string(p), balanced_accuracy(truth, pred.labels), accuracy(truth, pred.labels)};
    sb += r.balanced;
    sc += r.closed_set;
    rows.push_back(r);
  }
  if (rows.empty()) throw ValueError("paradigm_breakdown: no paradigm has test epochs");
  const auto n = static_cast<double>(rows.size());
  rows.push_back({"average", sb / n, sc / n});
  return rows;
}

/// epoch_index, subject, task, paradigm, z_S_*, z_T_*.
inline void write_latents_csv(const std::string& path, const Latents& lat, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.precision(17);
  out << "epoch_index,subject,task,paradigm";
  for (std::size_t j = 0; j < lat.s.at(0).size(); ++j) out << ",z_S_" << j;
  for (std::size_t j = 0; j < lat.t.at(0).size(); ++j) out << ",z_T_" << j;
  out << "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& e = ds.epochs[i];
    out << i << "," << e.subject << "," << e.task << "," << e.paradigm;
    for (double v : lat.s[i]) out << "," << v;
    for (double v : lat.t[i]) out << "," << v;
    out << "\n";
  }
}

}  // namespace gcv
