// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gcv/tensor.hpp"

namespace gcv::graph {

using Coord = std::array<double, 3>;

struct Electrode {
  std::string_view label;
  double polar_deg;    // angle from the vertex (Cz)
  double azimuth_deg;  // from the right ear (+x) toward the nasion (+y)
};

// 30-channel 10-20/10-10 subset (ERP-style cap), idealized spherical
// positions. Cz sits at the vertex; the equator passes through Fpz, T7, Oz, T8.
inline constexpr std::array<Electrode, 30> kMontage30{{
    {"FP1", 90.0, 108.0},  {"F3", 60.0, 130.0},   {"F7", 90.0, 144.0},   {"FC3", 52.0, 152.0},
    {"C3", 45.0, 180.0},   {"C5", 67.5, 180.0},   {"P3", 60.0, -130.0},  {"P7", 90.0, -144.0},
    {"P9", 112.5, -144.0}, {"PO7", 101.0, -126.0}, {"PO3", 76.0, -112.0}, {"O1", 90.0, -108.0},
    {"Oz", 90.0, -90.0},   {"Pz", 45.0, -90.0},   {"CPz", 22.5, -90.0},  {"FP2", 90.0, 72.0},
    {"Fz", 45.0, 90.0},    {"F4", 60.0, 50.0},    {"F8", 90.0, 36.0},    {"FC4", 52.0, 28.0},
    {"FCz", 22.5, 90.0},   {"Cz", 0.0, 0.0},      {"C4", 45.0, 0.0},     {"C6", 67.5, 0.0},
    {"P4", 60.0, -50.0},   {"P8", 90.0, -36.0},   {"P10", 112.5, -36.0}, {"PO8", 101.0, -54.0},
    {"PO4", 76.0, -68.0},  {"O2", 90.0, -72.0},
}};

inline Coord spherical(double polar_deg, double azimuth_deg) {
  const double t = polar_deg * std::numbers::pi / 180.0;
  const double p = azimuth_deg * std::numbers::pi / 180.0;
  return {std::sin(t) * std::cos(p), std::sin(t) * std::sin(p), std::cos(t)};
}

/// Unit-sphere electrode positions. 30 channels use the static cap table;
/// other counts use a Fibonacci spiral over the upper head starting at the
/// vertex.
inline std::vector<Coord> build_montage(std::size_t n_channels) {
  if (n_channels < 1 || n_channels > 64)
    throw ValueError("build_montage: unsupported channel count " + std::to_string(n_channels) + " (expected 1..64)");
  std::vector<Coord> coords;
  coords.reserve(n_channels);
  if (n_channels == 30) {
    for (const auto& e : kMontage30) coords.push_back(spherical(e.polar_deg, e.azimuth_deg));
    return coords;
  }
  constexpr double z_min = -0.35;  // a little below the ears
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n_channels; ++i) {
    const double z = n_channels == 1 ? 1.0 : 1.0 - (1.0 - z_min) * static_cast<double>(i) / static_cast<double>(n_channels - 1);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    coords.push_back({r * std::cos(phi), r * std::sin(phi), z});
  }
  return coords;
}

/// Gaussian-kernel adjacency: A_ij = exp(-d^2 / (2 sigma^2)) when that exceeds
/// `threshold` and i != j, else 0.
inline Tensor build_adjacency(const std::vector<Coord>& coords, double sigma, double threshold) {
  if (!(sigma > 0.0)) throw ValueError("build_adjacency: sigma must be positive");
  if (!(threshold >= 0.0 && threshold < 1.0)) throw ValueError("build_adjacency: threshold must lie in [0, 1)");
  const std::size_t n = coords.size();
  if (n == 0) throw ValueError("build_adjacency: no nodes");
  auto a = Tensor::zeros({n, n});
  auto d = a.data();
  std::size_t connected = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) d2 += (coords[i][c] - coords[j][c]) * (coords[i][c] - coords[j][c]);
      const double w = std::exp(-d2 / (2.0 * sigma * sigma));
      if (w > threshold) {
        d[i * n + j] = w;
        any = true;
      }
    }
    connected += any ? 1 : 0;
  }
  if (threshold > 0.0 && connected < 2)
    diag::warn("build_adjacency: threshold " + std::to_string(threshold) + " leaves " + std::to_string(connected) +
               " connected nodes; isolated nodes keep only their self-loop");
  return a;
}

/// D^{-1/2} (A + I) D^{-1/2}, D the degree matrix of A + I.
inline Tensor normalize_adjacency(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeError("normalize_adjacency: expected a square matrix, got " + to_string(a.shape()));
  const std::size_t n = a.dim(0);
  const auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (ad[i * n + i] != 0.0) throw ValueError("normalize_adjacency: nonzero diagonal at node " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      if (ad[i * n + j] < 0.0) throw ValueError("normalize_adjacency: negative weight at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      if (ad[i * n + j] != ad[j * n + i])
        throw ValueError("normalize_adjacency: asymmetric input at (" + std::to_string(i) + "," + std::to_string(j) + ")");
    }
  }
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 1.0;
    for (std::size_t j = 0; j < n; ++j) deg += ad[i * n + j];
    inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  auto out = Tensor::zeros({n, n});
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      od[i * n + j] = ((i == j ? 1.0 : 0.0) + ad[i * n + j]) * (inv_sqrt_deg[i] * inv_sqrt_deg[j]);
  return out;
}

/// Whitespace-separated n x n matrix, validated for symmetry.
inline Tensor read_adjacency(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_adjacency: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (!ls.eof()) throw IoError("read_adjacency: non-numeric token in " + path + " line " + std::to_string(rows.size() + 1));
    if (!row.empty()) rows.push_back(std::move(row));
  }
  const std::size_t n = rows.size();
  if (n == 0) throw IoError("read_adjacency: empty file " + path);
  std::vector<double> flat;
  for (const auto& r : rows) {
    if (r.size() != n) throw IoError("read_adjacency: expected " + std::to_string(n) + " columns, found " + std::to_string(r.size()));
    flat.insert(flat.end(), r.begin(), r.end());
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (std::abs(flat[i * n + j] - flat[j * n + i]) > 1e-12)
        throw ValueError("read_adjacency: matrix in " + path + " is not symmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
  // Symmetrize exactly so normalize_adjacency sees A == A^T bit for bit.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) flat[j * n + i] = flat[i * n + j];
  return Tensor({n, n}, std::move(flat));
}

struct ElectrodeGraph {
  std::size_t n_nodes = 0;
  std::vector<Coord> coords;
  Tensor adjacency;
  Tensor normalized;
};

struct GraphConfig {
  double sigma = 0.5;
  double threshold = 0.3;
  std::string adjacency_file;  // optional override
};

inline ElectrodeGraph build_graph(std::size_t n_channels, const GraphConfig& cfg = {}) {
  ElectrodeGraph g;
  g.n_nodes = n_channels;
  g.coords = build_montage(n_channels);
  if (!cfg.adjacency_file.empty()) {
    g.adjacency = read_adjacency(cfg.adjacency_file);
    if (g.adjacency.dim(0) != n_channels)
      throw ValueError("adjacency override has " + std::to_string(g.adjacency.dim(0)) + " nodes, expected " + std::to_string(n_channels));
  } else {
    g.adjacency = build_adjacency(g.coords, cfg.sigma, cfg.threshold);
  }
  g.normalized = normalize_adjacency(g.adjacency);
  return g;
}

}  // namespace gcv::graph
