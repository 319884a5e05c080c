// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gcv/batch.hpp"
#include "gcv/model.hpp"

namespace gcv {

enum class Denominator { IncludePositive, LiteralEq1 };

struct LossConfig {
  double tau_init = 14.29;
  double tau_min = 1.0;
  double tau_max = 100.0;
  bool divide_by_tau = false;  // logits = sim / tau instead of tau * sim
  Denominator denominator = Denominator::IncludePositive;
  double beta = 1e-3;
  double lambda_s = 1.0;
  double lambda_t = 1.0;
  double w_rec = 1.0;
  bool no_contrastive = false;

  void validate() const {
    for (double w : {beta, lambda_s, lambda_t, w_rec})
      if (!(w >= 0.0)) throw ConfigError("loss: weights must be non-negative");
    if (!(tau_min > 0.0 && tau_min <= tau_max)) throw ConfigError("loss: need 0 < tau_min <= tau_max");
    if (!(tau_init >= tau_min && tau_init <= tau_max)) throw ConfigError("loss: tau_init outside [tau_min, tau_max]");
  }
};

struct LossBreakdown {
  Tensor total_tensor;  // differentiable
  double total = 0, reconstruction = 0, kl_s = 0, kl_t = 0, clip_subject = 0, clip_task = 0;
};

inline constexpr double kNormFloor = 1e-12;

/// Rows scaled to unit length; rows shorter than the floor are divided by it.
inline Tensor normalize_rows(const Tensor& z) {
  const auto sq = sum(square(z), z.rank() - 1, true);
  return div(z, sqrt(clamp_min(sq, kNormFloor * kNormFloor)));
}

/// Pairwise cosine similarity of the rows of a [K, C] and b [K', C].
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("cosine_matrix: expected [K, C] inputs, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  return matmul(normalize_rows(a), transpose(normalize_rows(b)));
}

inline double similarity(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size() || u.empty()) throw ShapeError("similarity: vectors must have equal nonzero length");
  const auto n = u.size();
  return cosine_matrix(Tensor({1, n}, u), Tensor({1, n}, v)).item();
}

/// Logit scale applied to similarities.
inline Tensor logit_scale(const Tensor& tau, const LossConfig& cfg) {
  return cfg.divide_by_tau ? div(Tensor::scalar(1.0), tau) : tau;
}

/// Per-anchor NT-Xent over a [K, K] logit matrix whose diagonal holds the
/// positives. Returns [K].
inline Tensor nt_xent_rows(const Tensor& logits, Denominator den) {
  const std::size_t k = logits.dim(0);
  if (logits.rank() != 2 || logits.dim(1) != k) throw ShapeError("nt_xent: expected a square logit matrix, got " + to_string(logits.shape()));
  if (k < 1) throw ValueError("nt_xent: empty batch");
  const auto eye = Tensor::eye(k);
  const auto pos = sum(mul(logits, eye), 1);
  if (den == Denominator::IncludePositive) return sub(logsumexp(logits, 1), pos);
  if (k < 2) throw ValueError("nt_xent: K = 1 leaves an empty denominator when the positive is excluded");
  auto mask = Tensor::zeros({k, k});
  for (std::size_t i = 0; i < k; ++i) mask.data()[i * k + i] = -1e30;
  return sub(logsumexp(add(logits, mask), 1), pos);
}

/// Loss for anchor k (0-based) of Z' against Z'' (rows are samples).
inline Tensor nt_xent(const Tensor& z1, const Tensor& z2, std::size_t k, const Tensor& tau, const LossConfig& cfg) {
  if (z1.shape() != z2.shape()) throw ShapeError("nt_xent: shape mismatch " + to_string(z1.shape()) + " vs " + to_string(z2.shape()));
  if (z1.dim(0) < 2) throw ValueError("nt_xent: K must be at least 2");
  if (k >= z1.dim(0)) throw ValueError("nt_xent: anchor index out of range");
  const auto logits = mul(logit_scale(tau, cfg), cosine_matrix(z1, z2));
  return slice(nt_xent_rows(logits, cfg.denominator), 0, k, 1);
}

/// Symmetric contrastive loss: mean over anchors of both directions.
inline Tensor clip_loss(const Tensor& za, const Tensor& zb, const Tensor& tau, const LossConfig& cfg) {
  if (za.shape() != zb.shape()) throw ShapeError("clip_loss: shape mismatch " + to_string(za.shape()) + " vs " + to_string(zb.shape()));
  if (za.rank() != 2 || za.dim(0) < 2) throw ValueError("clip_loss: need at least 2 pairs");
  const auto s = logit_scale(tau, cfg);
  const auto ab = mean_all(nt_xent_rows(mul(s, cosine_matrix(za, zb)), cfg.denominator));
  const auto ba = mean_all(nt_xent_rows(mul(s, cosine_matrix(zb, za)), cfg.denominator));
  return add(ab, ba);
}

/// -0.5 * sum_j (1 + logvar - mu^2 - exp(logvar)), summed over the last axis
/// and averaged over any leading (batch) axes.
inline Tensor kl_divergence(const Tensor& mu, const Tensor& logvar) {
  if (mu.shape() != logvar.shape()) throw ShapeError("kl_divergence: shape mismatch");
  const auto inner = sub(sub(add_scalar(logvar, 1.0), square(mu)), exp(logvar));
  const auto per_row = scale(sum(inner, mu.rank() - 1), -0.5);
  return mean_all(per_row);
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return mean_all(square(sub(a, b)));
}

/// Latents of both halves of a K-pair batch.
struct PairLatents {
  Tensor zs_a, zt_a, zs_b, zt_b;  // [K, C]
};

/// Decodes each half with the paired axis' latent taken from the partner and
/// scores MSE against the true inputs, averaged over both directions.
inline Tensor latent_permutation_loss(const Model& model, const Tensor& adj, const Tensor& x_a, const Tensor& x_b, const PairLatents& z,
                                      LabelAxis axis, const std::vector<int>& labels_a = {}, const std::vector<int>& labels_b = {}) {
  if (labels_a != labels_b) throw ValueError("latent_permutation_loss: pair labels differ inside the batch");
  const std::size_t k = x_a.dim(0);
  Tensor zs, zt;  // rows 0..K-1 reconstruct A, rows K..2K-1 reconstruct B
  if (model.config().no_split) {
    zs = concat({z.zs_a, z.zs_b}, 0);
    zt = concat({z.zt_a, z.zt_b}, 0);
  } else if (axis == LabelAxis::Subject) {
    zs = concat({z.zs_b, z.zs_a}, 0);
    zt = concat({z.zt_a, z.zt_b}, 0);
  } else {
    zs = concat({z.zs_a, z.zs_b}, 0);
    zt = concat({z.zt_b, z.zt_a}, 0);
  }
  const auto xhat = model.decode(zs, zt, adj);
  const auto ra = mse(slice(xhat, 0, 0, k), x_a);
  const auto rb = mse(slice(xhat, 0, k, k), x_b);
  return scale(add(ra, rb), 0.5);
}

/// Stacks epochs into a [B, N, L] tensor.
inline Tensor epochs_tensor(const Dataset& ds, const std::vector<std::size_t>& idx) {
  const std::size_t per = ds.channels * ds.samples;
  std::vector<double> v(idx.size() * per);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& e = ds.epochs.at(idx[r]).data;
    std::copy(e.begin(), e.end(), v.begin() + static_cast<std::ptrdiff_t>(r * per));
  }
  return Tensor({idx.size(), ds.channels, ds.samples}, std::move(v));
}

namespace detail {

inline double checked(const char* name, const Tensor& t) {
  const double v = t.item();
  if (!std::isfinite(v)) throw NumericError(std::string("loss component '") + name + "' is not finite");
  return v;
}

}  // namespace detail

/// Full objective on one K-pair batch. `rng` supplies the reparameterization
/// noise.
inline LossBreakdown total_objective(const Model& model, const Tensor& adj, const Tensor& x_a, const Tensor& x_b, LabelAxis axis,
                                     const LossConfig& cfg, Rng& rng) {
  const auto& mc = model.config();
  const std::size_t k = x_a.dim(0);
  if (x_b.shape() != x_a.shape()) throw ShapeError("total_objective: halves differ in shape");
  auto enc = model.encode(concat({x_a, x_b}, 0), adj).latent;
  sample_latent(enc, rng, mc.ae_mode);
  PairLatents z{slice(enc.z_s, 0, 0, k), slice(enc.z_t, 0, 0, k), slice(enc.z_s, 0, k, k), slice(enc.z_t, 0, k, k)};

  LossBreakdown out;
  const auto rec = latent_permutation_loss(model, adj, x_a, x_b, z, axis);
  const auto kl_s = kl_divergence(enc.mu_s, enc.logvar_s);
  const auto kl_t = kl_divergence(enc.mu_t, enc.logvar_t);
  const double beta = mc.ae_mode ? 0.0 : cfg.beta;
  auto total = add(scale(rec, cfg.w_rec), scale(add(kl_s, kl_t), beta));
  out.reconstruction = detail::checked("reconstruction", rec);
  out.kl_s = detail::checked("kl_S", kl_s);
  out.kl_t = detail::checked("kl_T", kl_t);

  const double lambda = axis == LabelAxis::Subject ? cfg.lambda_s : cfg.lambda_t;
  if (!cfg.no_contrastive && lambda > 0.0) {
    const auto& tau = model.params()["tau"];
    Tensor za, zb;
    if (mc.no_split) {
      za = concat({z.zs_a, z.zt_a}, 1);
      zb = concat({z.zs_b, z.zt_b}, 1);
    } else if (axis == LabelAxis::Subject) {
      za = z.zs_a;
      zb = z.zs_b;
    } else {
      za = z.zt_a;
      zb = z.zt_b;
    }
    const auto c = clip_loss(za, zb, tau, cfg);
    (axis == LabelAxis::Subject ? out.clip_subject : out.clip_task) = detail::checked(axis == LabelAxis::Subject ? "clip_S" : "clip_T", c);
    total = add(total, scale(c, lambda));
  }
  out.total = detail::checked("total", total);
  out.total_tensor = total;
  return out;
}

inline LossBreakdown total_objective(const Model& model, const Tensor& adj, const Dataset& ds, const KPairBatch& batch,
                                     const LossConfig& cfg, Rng& rng) {
  return total_objective(model, adj, epochs_tensor(ds, batch.a), epochs_tensor(ds, batch.b), batch.class_axis, cfg, rng);
}

}  // namespace gcv
