// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "gcv/gradcheck.hpp"
#include "gcv/graph.hpp"
#include "gcv/model.hpp"

using namespace gcv;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_channels = 30;
  c.n_samples = 64;
  c.segment_size = 8;
  c.d_model = 16;
  c.latent_dim = 6;
  c.n_gcn_layers = 2;
  c.n_transformer_layers = 1;
  c.n_heads = 4;
  c.adapter_heads = 4;
  return c;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.n_channels = 2;
  c.n_samples = 8;
  c.segment_size = 4;
  c.d_model = 8;
  c.latent_dim = 4;
  c.n_gcn_layers = 1;
  c.n_transformer_layers = 1;
  c.n_heads = 2;
  c.adapter_heads = 2;
  return c;
}

Tensor random_input(const ModelConfig& c, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({b, c.n_channels, c.n_samples}, rng);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Model, ZeroInputGivesFiniteLatents) {
  const auto cfg = small_config();
  Model m(cfg, 1);
  auto adj = graph::build_graph(30).normalized;
  auto out = m.encode(Tensor::zeros({30, 64}), adj);
  for (const auto* t : {&out.latent.mu_s, &out.latent.logvar_s, &out.latent.mu_t, &out.latent.logvar_t}) {
    EXPECT_EQ(t->shape(), (Shape{1, 6}));
    for (double v : t->data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Model, RejectsBadShapesAndConfigs) {
  Model m(small_config(), 1);
  auto adj = graph::build_graph(30).normalized;
  EXPECT_THROW(m.encode(Tensor::zeros({29, 64}), adj), ShapeError);
  EXPECT_THROW(m.encode(Tensor::zeros({30, 64}), Tensor::eye(3)), ShapeError);
  EXPECT_THROW(m.decode(Tensor::zeros({1, 5}), Tensor::zeros({1, 6}), adj), ShapeError);
  auto bad = small_config();
  bad.segment_size = 7;
  EXPECT_THROW(Model(bad, 0), ConfigError);
  bad = small_config();
  bad.n_heads = 3;
  EXPECT_THROW(Model(bad, 0), ConfigError);
}

TEST(Model, BatchRowsAreIndependent) {
  Model m(small_config(), 2);
  auto adj = graph::build_graph(30).normalized;
  auto x = random_input(small_config(), 3, 5);
  auto all = m.encode(x, adj).latent.mu_s;
  auto one = m.encode(slice(x, 0, 1, 1), adj).latent.mu_s;
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(all[6 + j], one[j], 1e-12);
}

TEST(Model, TokenPermutationInvarianceWithoutPositions) {
  auto cfg = small_config();
  Model m(cfg, 3);
  for (auto name : {"enc.pos"}) std::fill(m.params().at(name).data().begin(), m.params().at(name).data().end(), 0.0);
  auto adj = graph::build_graph(30).normalized;
  auto x = random_input(cfg, 1, 6);
  // Reverse the segment order in time; each segment keeps its samples.
  auto y = Tensor::zeros(x.shape());
  const std::size_t t = cfg.n_tokens(), p = cfg.segment_size;
  for (std::size_t c = 0; c < 30; ++c)
    for (std::size_t k = 0; k < t; ++k)
      for (std::size_t i = 0; i < p; ++i) y.data()[c * 64 + (t - 1 - k) * p + i] = x[c * 64 + k * p + i];
  EXPECT_LT(max_abs_diff(m.encode(x, adj).latent.mu_s, m.encode(y, adj).latent.mu_s), 1e-12);
}

TEST(Model, NoGcnnPathDiffers) {
  auto cfg = small_config();
  auto flat = cfg;
  flat.no_gcnn = true;
  Model a(cfg, 4), b(flat, 4);
  auto adj = graph::build_graph(30).normalized;
  auto x = random_input(cfg, 1, 7);
  EXPECT_GT(max_abs_diff(a.encode(x, adj).latent.mu_s, b.encode(x, adj).latent.mu_s), 1e-6);
  // With the identity graph the two paths coincide.
  EXPECT_LT(max_abs_diff(a.encode(x, Tensor::eye(30)).latent.mu_s, b.encode(x, adj).latent.mu_s), 1e-12);
}

TEST(Model, AeModeHasZeroLogvarAndExactMeans) {
  auto cfg = small_config();
  cfg.ae_mode = true;
  Model m(cfg, 5);
  auto out = m.encode(random_input(cfg, 2, 8), graph::build_graph(30).normalized);
  for (double v : out.latent.logvar_s.data()) EXPECT_EQ(v, 0.0);
  Rng rng(1);
  sample_latent(out.latent, rng, true);
  EXPECT_EQ(out.latent.z_s.values(), out.latent.mu_s.values());
}

TEST(Model, DecodeShapeAndDeterminism) {
  Model m(small_config(), 6);
  auto adj = graph::build_graph(30).normalized;
  Rng rng(2);
  auto zs = Tensor::randn({3, 6}, rng), zt = Tensor::randn({3, 6}, rng);
  auto a = m.decode(zs, zt, adj), b = m.decode(zs, zt, adj);
  EXPECT_EQ(a.shape(), (Shape{3, 30, 64}));
  EXPECT_EQ(a.values(), b.values());
}

TEST(Model, DecodeGradcheckOnToyConfig) {
  const auto cfg = toy_config();
  Model m(cfg, 7);
  auto adj = graph::normalize_adjacency(Tensor({2, 2}, {0, 0.5, 0.5, 0}));
  Rng rng(3);
  auto zs = Tensor::randn({1, 4}, rng).set_requires_grad(true);
  auto zt = Tensor::randn({1, 4}, rng);
  auto rep = gradcheck([&] { return sum_all(square(m.decode(zs, zt, adj))); }, {zs}, 1e-6);
  EXPECT_LE(rep.max_rel_error, 1e-4);
}

TEST(Reparameterize, Examples) {
  auto mu = Tensor::vector({0.5, -1.0});
  EXPECT_EQ(reparameterize(mu, Tensor::zeros({2}), Tensor::zeros({2})).values(), mu.values());
  auto z = reparameterize(mu, Tensor::zeros({2}), Tensor::vector({1.0, 0.0}));
  EXPECT_EQ(z[0], 1.5);
  EXPECT_EQ(z[1], -1.0);
  EXPECT_EQ(reparameterize(mu, Tensor::vector({3, 3}), Tensor::vector({1, 1}), true).values(), mu.values());
  EXPECT_THROW(reparameterize(mu, Tensor::zeros({3}), Tensor::zeros({2})), ShapeError);
}

TEST(Reparameterize, MonteCarloMoments) {
  const std::size_t n = 100000;
  Rng rng(9);
  auto z = reparameterize(Tensor::full({n}, 1.0), Tensor::full({n}, std::log(4.0)), Tensor::randn({n}, rng));
  double mean = 0, var = 0;
  for (double v : z.data()) mean += v;
  mean /= n;
  for (double v : z.data()) var += (v - mean) * (v - mean);
  var /= n - 1;
  EXPECT_NEAR(mean, 1.0, 0.02);
  EXPECT_NEAR(var, 4.0, 0.1);
}

TEST(Adapter, IdentityAtAttachAndParameterCount) {
  auto cfg = small_config();
  Model m(cfg, 8);
  auto adj = graph::build_graph(30).normalized;
  auto x = random_input(cfg, 2, 10);
  const auto before = m.encode(x, adj).latent;
  const std::size_t n0 = m.params().n_scalars();
  m.attach_adapter();
  const auto after = m.encode(x, adj).latent;
  EXPECT_LT(max_abs_diff(before.mu_s, after.mu_s), 1e-12);
  EXPECT_LT(max_abs_diff(before.logvar_t, after.logvar_t), 1e-12);
  const std::size_t d = cfg.d_model;
  EXPECT_EQ(m.params().n_scalars() - n0, 2 * (4 * d * d + 4 * d) + 2 * (2 * d));
  EXPECT_THROW(m.attach_adapter(), StateError);
}

TEST(Adapter, FreezeMaskPartitionsParameters) {
  Model m(small_config(), 9);
  EXPECT_THROW(m.freeze_backbone(), StateError);
  m.attach_adapter();
  const auto& mask = m.freeze_backbone();
  ASSERT_EQ(mask.size(), m.params().size());
  std::size_t trainable = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto& [name, t] = m.params().entries()[i];
    EXPECT_EQ(mask[i], name.rfind("adapter.", 0) == 0) << name;
    EXPECT_EQ(t.requires_grad(), mask[i]);
    trainable += mask[i];
  }
  EXPECT_EQ(trainable, 2u * (2 + 8));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model m(small_config(), 11);
  m.params().at("tau").data()[0] = 17.125;
  m.attach_adapter();
  m.params().at("adapter.1.attn.o.w").data()[3] = 1.0 / 3.0;
  const auto buf = encode_checkpoint(m);
  const auto back = decode_checkpoint(buf);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.seed(), 11u);
  EXPECT_TRUE(back.has_adapter());
  EXPECT_EQ(encode_checkpoint(back), buf);
  for (std::size_t i = 0; i < m.params().size(); ++i)
    EXPECT_EQ(back.params().entries()[i].second.values(), m.params().entries()[i].second.values());
  EXPECT_THROW(decode_checkpoint(buf.substr(0, buf.size() - 3)), IoError);
  EXPECT_THROW(decode_checkpoint("NOPE" + buf.substr(4)), IoError);
}
