// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gcv/ops.hpp"

namespace gcv {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t n_checked = 0;
};

/// Compares the reverse-mode gradient of a scalar function of several leaf
/// tensors with central differences. Each leaf is perturbed in place and
/// restored. The error of a component is
/// |analytic - numeric| / max(1, |analytic|).
inline GradcheckReport gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double eps) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw ValueError("gradcheck: eps must lie in (0, 1e-3], got " + std::to_string(eps));
  for (auto& t : leaves) {
    if (!t.is_leaf()) throw StateError("gradcheck: inputs must be leaf tensors");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tensor y = f();
    if (y.size() != 1) throw ShapeError("gradcheck: function must return a scalar, got " + to_string(y.shape()));
    if (y.is_leaf()) {
      // Constant function: analytic gradient is zero everywhere.
    } else {
      backprop(y);
    }
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& t : leaves) {
    const auto g = t.grad_data();
    analytic.emplace_back(t.size(), 0.0);
    if (!g.empty()) std::copy(g.begin(), g.end(), analytic.back().begin());
  }

  GradcheckReport rep;
  NoGradGuard no_grad;
  auto eval = [&](std::size_t ti, std::size_t i, double delta) {
    Tensor y;
    try {
      y = f();
    } catch (const NumericError& e) {
      throw NumericError("gradcheck: non-finite evaluation at tensor " + std::to_string(ti) + " component " +
                         std::to_string(i) + " (offset " + std::to_string(delta) + "): " + e.what());
    }
    const double v = y.item();
    if (!std::isfinite(v))
      throw NumericError("gradcheck: non-finite evaluation at tensor " + std::to_string(ti) + " component " +
                         std::to_string(i));
    return v;
  };
  for (std::size_t ti = 0; ti < leaves.size(); ++ti) {
    auto d = leaves[ti].data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double orig = d[i];
      d[i] = orig + eps;
      const double fp = eval(ti, i, eps);
      d[i] = orig - eps;
      const double fm = eval(ti, i, -eps);
      d[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[ti][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_tensor = ti;
        rep.worst_index = i;
      }
      ++rep.n_checked;
    }
  }
  return rep;
}

/// Single-input convenience form.
inline double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.detach();
  return gradcheck([&] { return f(leaf); }, {leaf}, eps).max_rel_error;
}

}  // namespace gcv
