// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "gcv/dataset.hpp"
#include "gcv/rng.hpp"

namespace gcv {

struct SplitPlan {
  std::vector<std::size_t> train, dev, test;
  std::uint64_t seed = 0;
  int fold = -1;  // -1 for a holdout plan
};

namespace detail {

// Epoch indices grouped by (subject, task), in ascending key order.
inline std::map<std::pair<int, int>, std::vector<std::size_t>> strata(const Dataset& ds) {
  std::map<std::pair<int, int>, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < ds.size(); ++i) out[{ds.epochs[i].subject, ds.epochs[i].task}].push_back(i);
  return out;
}

// Largest-remainder apportionment of n items; ties go to the earlier part.
template <std::size_t P>
std::array<std::size_t, P> apportion(std::size_t n, const std::array<double, P>& ratios) {
  const double total = std::accumulate(ratios.begin(), ratios.end(), 0.0);
  std::array<std::size_t, P> counts{};
  std::array<double, P> frac{};
  std::size_t used = 0;
  for (std::size_t p = 0; p < P; ++p) {
    const double exact = static_cast<double>(n) * ratios[p] / total;
    counts[p] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[p] = exact - static_cast<double>(counts[p]);
    used += counts[p];
  }
  std::array<std::size_t, P> order{};
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b] + 1e-12; });
  for (std::size_t r = 0; used < n; ++r, ++used) ++counts[order[r % P]];
  return counts;
}

}  // namespace detail

/// Stratified by (subject, task); each stratum is shuffled with its own
/// stream and cut by largest-remainder rounding of the ratios.
inline SplitPlan holdout_split(const Dataset& ds, std::array<double, 3> ratios = {70, 10, 20}, std::uint64_t seed = 0) {
  for (double r : ratios)
    if (!(r >= 0.0)) throw ValueError("holdout_split: ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 100.0) > 1e-9) throw ValueError("holdout_split: ratios must sum to 100");
  SplitPlan plan;
  plan.seed = seed;
  const Rng root = Rng(seed).split("holdout");
  for (auto& [key, idx] : detail::strata(ds)) {
    if (idx.size() < 3) {
      diag::warn("holdout_split: stratum (subject " + std::to_string(key.first) + ", task " + std::to_string(key.second) + ") has " +
                 std::to_string(idx.size()) + " epochs; all assigned to train");
      plan.train.insert(plan.train.end(), idx.begin(), idx.end());
      continue;
    }
    Rng rng = root.split(static_cast<std::uint64_t>(key.first)).split(static_cast<std::uint64_t>(key.second));
    rng.shuffle(idx);
    const auto c = detail::apportion<3>(idx.size(), ratios);
    auto it = idx.begin();
    plan.train.insert(plan.train.end(), it, it + static_cast<std::ptrdiff_t>(c[0]));
    it += static_cast<std::ptrdiff_t>(c[0]);
    plan.dev.insert(plan.dev.end(), it, it + static_cast<std::ptrdiff_t>(c[1]));
    it += static_cast<std::ptrdiff_t>(c[1]);
    plan.test.insert(plan.test.end(), it, idx.end());
  }
  for (auto* v : {&plan.train, &plan.dev, &plan.test}) std::sort(v->begin(), v->end());
  return plan;
}

/// Stratified k-fold. Fold i tests on its own slice and trains on the rest.
/// Slots rotate from one stratum to the next so small strata do not all land
/// in the first folds.
inline std::vector<SplitPlan> kfold_split(const Dataset& ds, std::size_t k = 5, std::uint64_t seed = 0) {
  if (k < 2) throw ValueError("kfold_split: k must be at least 2");
  std::vector<std::size_t> fold_of(ds.size(), 0);
  const Rng root = Rng(seed).split("kfold");
  std::size_t offset = 0;
  bool warned = false;
  for (auto& [key, idx] : detail::strata(ds)) {
    if (idx.size() < k && !warned) {
      diag::warn("kfold_split: k = " + std::to_string(k) + " exceeds the size of stratum (subject " + std::to_string(key.first) +
                 ", task " + std::to_string(key.second) + "); strata rotate across folds");
      warned = true;
    }
    Rng rng = root.split(static_cast<std::uint64_t>(key.first)).split(static_cast<std::uint64_t>(key.second));
    rng.shuffle(idx);
    for (std::size_t p = 0; p < idx.size(); ++p) fold_of[idx[p]] = (offset + p) % k;
    offset = (offset + idx.size()) % k;
  }
  std::vector<SplitPlan> plans(k);
  for (std::size_t f = 0; f < k; ++f) {
    plans[f].seed = seed;
    plans[f].fold = static_cast<int>(f);
  }
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t f = 0; f < k; ++f) (fold_of[i] == f ? plans[f].test : plans[f].train).push_back(i);
  return plans;
}

/// One line per epoch: index and split name (or fold number for k-fold).
inline void write_split_csv(const std::string& path, const std::vector<SplitPlan>& plans, std::size_t n_epochs) {
  std::vector<std::string> tag(n_epochs, "unassigned");
  for (const auto& p : plans) {
    if (p.fold >= 0) {
      for (auto i : p.test) tag.at(i) = std::to_string(p.fold);
    } else {
      for (auto i : p.train) tag.at(i) = "train";
      for (auto i : p.dev) tag.at(i) = "dev";
      for (auto i : p.test) tag.at(i) = "test";
    }
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "epoch_index," << (plans.size() == 1 && plans[0].fold < 0 ? "split" : "fold") << "\n";
  for (std::size_t i = 0; i < n_epochs; ++i) out << i << "," << tag[i] << "\n";
}

struct KPairBatch {
  std::vector<std::size_t> a, b;  // epoch indices, a[k] pairs with b[k]
  LabelAxis class_axis = LabelAxis::Subject;
  std::vector<int> labels;  // shared class of each pair
  std::size_t k() const { return a.size(); }
};

/// Groups training indices by class once and draws K-pair batches from them.
class PairSampler {
 public:
  PairSampler(const std::vector<std::size_t>& indices, const std::vector<int>& labels, LabelAxis axis) : axis_(axis) {
    std::map<int, std::vector<std::size_t>> groups;
    for (auto i : indices) groups[labels.at(i)].push_back(i);
    for (auto& [c, members] : groups)
      if (members.size() >= 2) {
        classes_.push_back(c);
        members_.push_back(std::move(members));
      }
    if (classes_.empty()) throw ValueError("build_kpair_batch: no class has at least 2 epochs");
  }

  /// K classes uniformly with replacement; two distinct epochs per class.
  KPairBatch sample(std::size_t k, Rng& rng) const {
    if (k < 2) throw ValueError("build_kpair_batch: K must be at least 2");
    KPairBatch batch;
    batch.class_axis = axis_;
    for (std::size_t p = 0; p < k; ++p) {
      const auto c = static_cast<std::size_t>(rng.below(classes_.size()));
      const auto& m = members_[c];
      const auto i = static_cast<std::size_t>(rng.below(m.size()));
      auto j = static_cast<std::size_t>(rng.below(m.size() - 1));
      if (j >= i) ++j;
      batch.a.push_back(m[i]);
      batch.b.push_back(m[j]);
      batch.labels.push_back(classes_[c]);
    }
    return batch;
  }

  std::size_t n_classes() const { return classes_.size(); }

 private:
  LabelAxis axis_;
  std::vector<int> classes_;
  std::vector<std::vector<std::size_t>> members_;
};

inline KPairBatch build_kpair_batch(const std::vector<std::size_t>& indices, const std::vector<int>& labels, LabelAxis axis, std::size_t k,
                                    Rng& rng) {
  return PairSampler(indices, labels, axis).sample(k, rng);
}

/// Axis schedule: even steps pair by subject, odd steps by task.
inline LabelAxis axis_for_step(std::size_t step) { return step % 2 == 0 ? LabelAxis::Subject : LabelAxis::Task; }

}  // namespace gcv
