// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gcv/dataset.hpp"
#include "gcv/ops.hpp"
#include "gcv/rng.hpp"

namespace gcv {

struct ModelConfig {
  std::size_t n_channels = 30;
  std::size_t n_samples = 256;
  std::size_t segment_size = 4;
  std::size_t d_model = 64;
  std::size_t latent_dim = 64;  // per split
  std::size_t n_gcn_layers = 4;
  std::size_t n_transformer_layers = 4;
  std::size_t n_heads = 8;
  std::size_t adapter_heads = 8;
  bool no_gcnn = false;
  bool no_split = false;
  bool ae_mode = false;

  std::size_t n_tokens() const { return n_samples / segment_size; }

  void validate() const {
    if (n_channels == 0 || n_samples == 0 || segment_size == 0 || d_model == 0 || n_heads == 0 || adapter_heads == 0)
      throw ConfigError("model: sizes must be positive");
    if (n_samples % segment_size != 0)
      throw ConfigError("model: n_samples " + std::to_string(n_samples) + " is not divisible by segment_size " + std::to_string(segment_size));
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (d_model % adapter_heads != 0) throw ConfigError("model: d_model must be divisible by adapter_heads");
    if (latent_dim < 1) throw ConfigError("model: latent_dim must be at least 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Named tensors in insertion order.
class Parameters {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw StateError("parameter '" + name + "' already exists");
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor& at(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const Parameters&>(*this).at(name));
  }
  const Tensor& operator[](const std::string& name) const { return at(name); }

  auto& entries() { return entries_; }
  const auto& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t n_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  /// Deep copy with fresh leaves.
  Parameters clone() const {
    Parameters p;
    for (const auto& [n, t] : entries_) p.add(n, t.detach());
    return p;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct SplitLatent {
  Tensor mu_s, logvar_s, mu_t, logvar_t;  // [B, C] each
  Tensor z_s, z_t;                        // filled by sample_latent
};

struct EncodeOutput {
  SplitLatent latent;
  Tensor tokens;  // [B, T, d] before token pooling
};

namespace nn {

inline Tensor xavier(std::size_t fan_in, std::size_t fan_out, Shape shape, Rng& rng, double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-a, a);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

inline void add_linear(Parameters& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
  p.add(name + ".w", xavier(in, out, {in, out}, rng, gain));
  p.add(name + ".b", Tensor::zeros({out}));
}

inline void add_norm(Parameters& p, const std::string& name, std::size_t d) {
  p.add(name + ".g", Tensor::ones({d}));
  p.add(name + ".b", Tensor::zeros({d}));
}

inline Tensor norm(const Parameters& p, const std::string& name, const Tensor& x) {
  return layer_norm(x, p[name + ".g"], p[name + ".b"]);
}

inline Tensor lin(const Parameters& p, const std::string& name, const Tensor& x) { return linear(x, p[name + ".w"], p[name + ".b"]); }

inline void add_attention(Parameters& p, const std::string& name, std::size_t d, Rng& rng, bool zero_out = false) {
  for (const char* proj : {"q", "k", "v"}) add_linear(p, name + "." + proj, d, d, rng);
  if (zero_out) {
    p.add(name + ".o.w", Tensor::zeros({d, d}));
    p.add(name + ".o.b", Tensor::zeros({d}));
  } else {
    add_linear(p, name + ".o", d, d, rng);
  }
}

/// Multi-head self-attention over x: [B, T, d].
inline Tensor attention(const Parameters& p, const std::string& name, const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
  auto split_heads = [&](const Tensor& y) { return permute(reshape(y, {b, t, heads, dh}), {0, 2, 1, 3}); };
  const auto q = split_heads(lin(p, name + ".q", x));
  const auto k = split_heads(lin(p, name + ".k", x));
  const auto v = split_heads(lin(p, name + ".v", x));
  const auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  const auto ctx = matmul(softmax(scores, 3), v);  // [B, H, T, dh]
  return lin(p, name + ".o", reshape(permute(ctx, {0, 2, 1, 3}), {b, t, d}));
}

inline void add_transformer_block(Parameters& p, const std::string& name, std::size_t d, Rng& rng) {
  add_norm(p, name + ".ln1", d);
  add_attention(p, name + ".attn", d, rng);
  add_norm(p, name + ".ln2", d);
  add_linear(p, name + ".ff1", d, 4 * d, rng);
  add_linear(p, name + ".ff2", 4 * d, d, rng);
}

inline Tensor transformer_block(const Parameters& p, const std::string& name, const Tensor& x, std::size_t heads) {
  auto h = add(x, attention(p, name + ".attn", norm(p, name + ".ln1", x), heads));
  return add(h, lin(p, name + ".ff2", gelu(lin(p, name + ".ff1", norm(p, name + ".ln2", h)))));
}

}  // namespace nn

/// Adam moments aligned with Parameters::entries(); empty before the first
/// update.
struct OptimizerState {
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m, v;
};

// Std of the initial positional embeddings.
inline constexpr double kPosInit = 1.0;

class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    Rng root(seed);
    Rng rng = root.split("init");
    const std::size_t n = cfg_.n_channels, ps = cfg_.segment_size, d = cfg_.d_model, t = cfg_.n_tokens(), c = cfg_.latent_dim;

    // Encoder.
    params_.add("enc.seg.w", nn::xavier(ps, d, {n, ps, d}, rng));
    params_.add("enc.seg.b", Tensor::zeros({n, 1, d}));
    for (std::size_t l = 0; l < cfg_.n_gcn_layers; ++l)
      params_.add("enc.gcn." + std::to_string(l) + ".w", nn::xavier(d, d, {d, d}, rng));
    params_.add("enc.pos", Tensor::randn({t, d}, rng, kPosInit));
    for (std::size_t l = 0; l < cfg_.n_transformer_layers; ++l) nn::add_transformer_block(params_, "enc.tf." + std::to_string(l), d, rng);
    nn::add_norm(params_, "enc.ln_out", d);
    nn::add_linear(params_, "head.mu_s", d, c, rng);
    nn::add_linear(params_, "head.logvar_s", d, c, rng, 0.1);
    nn::add_linear(params_, "head.mu_t", d, c, rng);
    nn::add_linear(params_, "head.logvar_t", d, c, rng, 0.1);

    // Decoder.
    nn::add_linear(params_, "dec.in", 2 * c, t * d, rng);
    params_.add("dec.pos", Tensor::randn({t, d}, rng, kPosInit));
    for (std::size_t l = 0; l < cfg_.n_transformer_layers; ++l) nn::add_transformer_block(params_, "dec.tf." + std::to_string(l), d, rng);
    nn::add_norm(params_, "dec.ln_out", d);
    params_.add("dec.node", Tensor::randn({n, 1, d}, rng, 0.02));
    for (std::size_t l = 0; l < cfg_.n_gcn_layers; ++l)
      params_.add("dec.gcn." + std::to_string(l) + ".w", nn::xavier(d, d, {d, d}, rng));
    nn::add_linear(params_, "dec.out", d, ps, rng);

    // Logit scale for the contrastive terms.
    params_.add("tau", Tensor::scalar(14.29));
  }

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  Parameters& params() { return params_; }
  const Parameters& params() const { return params_; }
  bool has_adapter() const { return params_.contains("adapter.0.attn.q.w"); }

  /// Trainable flag per parameter, aligned with params().entries().
  const std::vector<bool>& trainable() const {
    if (trainable_.size() != params_.size()) trainable_.assign(params_.size(), true);
    return trainable_;
  }

  /// Two residual pre-norm self-attention blocks between the encoder
  /// transformer and token pooling, output projections zero-initialized.
  void attach_adapter() {
    if (has_adapter()) throw StateError("attach_adapter: adapter already attached");
    Rng rng = Rng(seed_).split("adapter");
    for (int i = 0; i < 2; ++i) {
      const std::string name = "adapter." + std::to_string(i);
      nn::add_norm(params_, name + ".ln", cfg_.d_model);
      nn::add_attention(params_, name + ".attn", cfg_.d_model, rng, /*zero_out=*/true);
    }
    trainable_.assign(params_.size(), true);
    optimizer_ = {};
  }

  /// Marks everything except adapter tensors as frozen.
  const std::vector<bool>& freeze_backbone() {
    if (!has_adapter()) throw StateError("freeze_backbone: no adapter attached");
    trainable_.assign(params_.size(), false);
    auto& e = params_.entries();
    for (std::size_t i = 0; i < e.size(); ++i) {
      trainable_[i] = e[i].first.rfind("adapter.", 0) == 0;
      e[i].second.set_requires_grad(trainable_[i]);
    }
    return trainable_;
  }

  void unfreeze_all() {
    trainable_.assign(params_.size(), true);
    for (auto& [_, t] : params_.entries()) t.set_requires_grad(true);
  }

  double tau() const { return params_["tau"].item(); }

  OptimizerState& optimizer() { return optimizer_; }
  const OptimizerState& optimizer() const { return optimizer_; }

  /// x: [B, N, L] (or [N, L] for a single epoch); adj: normalized [N, N].
  EncodeOutput encode(const Tensor& x_in, const Tensor& adj) const {
    const auto x = as_batch(x_in);
    const std::size_t b = x.dim(0), n = cfg_.n_channels, t = cfg_.n_tokens(), ps = cfg_.segment_size, d = cfg_.d_model;
    check_adj(adj);
    // [B, N, T, P] -> [N, B*T, P], then a per-channel linear map to d_model.
    auto seg = reshape(permute(reshape(x, {b, n, t, ps}), {1, 0, 2, 3}), {n, b * t, ps});
    auto h = add(matmul(seg, params_["enc.seg.w"]), params_["enc.seg.b"]);
    h = gcn_stack(h, adj, "enc.gcn.");
    auto tokens = reshape(mean(h, 0), {b, t, d});
    tokens = add(tokens, params_["enc.pos"]);
    for (std::size_t l = 0; l < cfg_.n_transformer_layers; ++l)
      tokens = nn::transformer_block(params_, "enc.tf." + std::to_string(l), tokens, cfg_.n_heads);
    if (has_adapter())
      for (int i = 0; i < 2; ++i) {
        const std::string name = "adapter." + std::to_string(i);
        tokens = add(tokens, nn::attention(params_, name + ".attn", nn::norm(params_, name + ".ln", tokens), cfg_.adapter_heads));
      }
    const auto pooled = nn::norm(params_, "enc.ln_out", mean(tokens, 1));  // [B, d]
    EncodeOutput out;
    auto& z = out.latent;
    z.mu_s = nn::lin(params_, "head.mu_s", pooled);
    z.mu_t = nn::lin(params_, "head.mu_t", pooled);
    if (cfg_.ae_mode) {
      z.logvar_s = Tensor::zeros(z.mu_s.shape());
      z.logvar_t = Tensor::zeros(z.mu_t.shape());
    } else {
      z.logvar_s = nn::lin(params_, "head.logvar_s", pooled);
      z.logvar_t = nn::lin(params_, "head.logvar_t", pooled);
    }
    out.tokens = tokens;
    return out;
  }

  /// z_s, z_t: [B, C]. Returns [B, N, L].
  Tensor decode(const Tensor& z_s, const Tensor& z_t, const Tensor& adj) const {
    const std::size_t c = cfg_.latent_dim;
    if (z_s.rank() != 2 || z_t.rank() != 2 || z_s.dim(1) != c || z_t.dim(1) != c || z_s.dim(0) != z_t.dim(0))
      throw ShapeError("decode: expected latents [B, " + std::to_string(c) + "], got " + to_string(z_s.shape()) + " and " + to_string(z_t.shape()));
    check_adj(adj);
    const std::size_t b = z_s.dim(0), n = cfg_.n_channels, t = cfg_.n_tokens(), ps = cfg_.segment_size, d = cfg_.d_model;
    auto tokens = reshape(nn::lin(params_, "dec.in", concat({z_s, z_t}, 1)), {b, t, d});
    tokens = add(tokens, params_["dec.pos"]);
    for (std::size_t l = 0; l < cfg_.n_transformer_layers; ++l)
      tokens = nn::transformer_block(params_, "dec.tf." + std::to_string(l), tokens, cfg_.n_heads);
    tokens = nn::norm(params_, "dec.ln_out", tokens);
    // Unpool: broadcast tokens to every node and add a learned node embedding.
    auto h = add(reshape(tokens, {1, b * t, d}), params_["dec.node"]);  // [N, B*T, d]
    h = gcn_stack(h, adj, "dec.gcn.");
    auto seg = nn::lin(params_, "dec.out", h);  // [N, B*T, P]
    return reshape(permute(reshape(seg, {n, b, t, ps}), {1, 0, 2, 3}), {b, n, cfg_.n_samples});
  }

 private:
  Tensor as_batch(const Tensor& x) const {
    const std::size_t n = cfg_.n_channels, l = cfg_.n_samples;
    if (x.rank() == 2 && x.dim(0) == n && x.dim(1) == l) return reshape(x, {1, n, l});
    if (x.rank() == 3 && x.dim(1) == n && x.dim(2) == l) return x;
    throw ShapeError("encode: expected input [B, " + std::to_string(n) + ", " + std::to_string(l) + "], got " + to_string(x.shape()));
  }

  void check_adj(const Tensor& adj) const {
    if (cfg_.no_gcnn) return;
    if (adj.rank() != 2 || adj.dim(0) != cfg_.n_channels || adj.dim(1) != cfg_.n_channels)
      throw ShapeError("graph: expected adjacency [" + std::to_string(cfg_.n_channels) + ", " + std::to_string(cfg_.n_channels) +
                       "], got " + to_string(adj.shape()));
  }

  // H <- ReLU(A H W) on [N, M, d]; A is the identity under no_gcnn.
  Tensor gcn_stack(Tensor h, const Tensor& adj, const std::string& prefix) const {
    const std::size_t n = h.dim(0), m = h.dim(1), d = h.dim(2);
    for (std::size_t l = 0; l < cfg_.n_gcn_layers; ++l) {
      if (!cfg_.no_gcnn) h = reshape(matmul(adj, reshape(h, {n, m * d})), {n, m, d});
      h = relu(matmul(h, params_[prefix + std::to_string(l) + ".w"]));
    }
    return h;
  }

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  Parameters params_;
  mutable std::vector<bool> trainable_;
  OptimizerState optimizer_;
};

/// z = mu + exp(logvar / 2) * eps; z = mu under ae_mode.
inline Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps, bool ae_mode = false) {
  if (mu.shape() != logvar.shape() || mu.shape() != eps.shape())
    throw ShapeError("reparameterize: shapes " + to_string(mu.shape()) + ", " + to_string(logvar.shape()) + ", " + to_string(eps.shape()));
  if (ae_mode) return mu;
  return add(mu, mul(exp(scale(logvar, 0.5)), eps));
}

/// Fills z_s, z_t by drawing standard-normal noise from `rng`.
inline void sample_latent(SplitLatent& z, Rng& rng, bool ae_mode) {
  z.z_s = reparameterize(z.mu_s, z.logvar_s, Tensor::randn(z.mu_s.shape(), rng), ae_mode);
  z.z_t = reparameterize(z.mu_t, z.logvar_t, Tensor::randn(z.mu_t.shape(), rng), ae_mode);
}

/// Posterior means, the deterministic embedding used for evaluation.
inline void use_means(SplitLatent& z) {
  z.z_s = z.mu_s;
  z.z_t = z.mu_t;
}

// ---------------------------------------------------------------------------
// Checkpoint: "GCVK", u16 version, config, seed, then named f64 tensors.
// Little-endian; doubles are stored by bit pattern so reload is exact.

inline constexpr std::array<char, 4> kCheckpointMagic{'G', 'C', 'V', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Model& m) {
  using detail::put_le;
  std::string buf(kCheckpointMagic.data(), 4);
  put_le<std::uint16_t>(buf, kCheckpointVersion);
  const auto& c = m.config();
  for (std::size_t v : {c.n_channels, c.n_samples, c.segment_size, c.d_model, c.latent_dim, c.n_gcn_layers, c.n_transformer_layers,
                        c.n_heads, c.adapter_heads})
    put_le<std::uint64_t>(buf, v);
  buf.push_back(static_cast<char>((c.no_gcnn ? 1 : 0) | (c.no_split ? 2 : 0) | (c.ae_mode ? 4 : 0)));
  put_le<std::uint64_t>(buf, m.seed());
  const auto& e = m.params().entries();
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(e.size()));
  for (const auto& [name, t] : e) {
    put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put_le<std::uint64_t>(buf, d);
    for (double v : t.data()) put_le(buf, std::bit_cast<std::uint64_t>(v));
  }
  // Optimizer block: step count, then both moment vectors per tensor (or none).
  const auto& opt = m.optimizer();
  put_le<std::uint64_t>(buf, opt.t);
  put_le<std::uint8_t>(buf, opt.m.empty() ? 0 : 1);
  if (!opt.m.empty()) {
    if (opt.m.size() != e.size() || opt.v.size() != e.size()) throw StateError("checkpoint: optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < e.size(); ++i)
      for (const auto* mom : {&opt.m[i], &opt.v[i]}) {
        if (mom->size() != e[i].second.size()) throw StateError("checkpoint: optimizer moment size mismatch for '" + e[i].first + "'");
        for (double v : *mom) put_le(buf, std::bit_cast<std::uint64_t>(v));
      }
  }
  return buf;
}

inline Model decode_checkpoint(const std::string& buf) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > buf.size())
      throw IoError("checkpoint: truncated, expected at least " + std::to_string(pos + n) + " bytes, got " + std::to_string(buf.size()));
  };
  auto get = [&]<typename T>(T) {
    need(sizeof(T));
    const T v = detail::get_le<T>(buf.data() + pos);
    pos += sizeof(T);
    return v;
  };
  need(6);
  if (std::memcmp(buf.data(), kCheckpointMagic.data(), 4) != 0) throw IoError("checkpoint: bad magic, not a GCVK file");
  pos = 4;
  const auto version = get(std::uint16_t{});
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  ModelConfig c;
  for (std::size_t* f : {&c.n_channels, &c.n_samples, &c.segment_size, &c.d_model, &c.latent_dim, &c.n_gcn_layers,
                         &c.n_transformer_layers, &c.n_heads, &c.adapter_heads})
    *f = static_cast<std::size_t>(get(std::uint64_t{}));
  const auto flags = get(std::uint8_t{});
  c.no_gcnn = flags & 1;
  c.no_split = flags & 2;
  c.ae_mode = flags & 4;
  const auto seed = get(std::uint64_t{});
  const auto count = get(std::uint32_t{});

  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> data;
  };
  std::vector<Entry> entries;
  bool adapter = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto len = get(std::uint16_t{});
    need(len);
    e.name = buf.substr(pos, len);
    pos += len;
    const auto rank = get(std::uint8_t{});
    for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<std::size_t>(get(std::uint64_t{})));
    const std::size_t n = numel(e.shape);
    need(8 * n);
    e.data.resize(n);
    for (auto& v : e.data) v = std::bit_cast<double>(get(std::uint64_t{}));
    adapter = adapter || e.name.rfind("adapter.", 0) == 0;
    entries.push_back(std::move(e));
  }
  OptimizerState opt;
  opt.t = get(std::uint64_t{});
  if (get(std::uint8_t{}) != 0) {
    for (const auto& e : entries)
      for (auto* mom : {&opt.m, &opt.v}) {
        need(8 * e.data.size());
        auto& dst = mom->emplace_back(e.data.size());
        for (auto& v : dst) v = std::bit_cast<double>(get(std::uint64_t{}));
      }
  }
  if (pos != buf.size()) throw IoError("checkpoint: " + std::to_string(buf.size() - pos) + " trailing bytes");

  Model m(c, seed);
  if (adapter) m.attach_adapter();
  if (entries.size() != m.params().size())
    throw IoError("checkpoint: holds " + std::to_string(entries.size()) + " tensors, model expects " + std::to_string(m.params().size()));
  for (auto& e : entries) {
    if (!m.params().contains(e.name)) throw IoError("checkpoint: unexpected tensor '" + e.name + "'");
    auto& t = m.params().at(e.name);
    if (t.shape() != e.shape) throw IoError("checkpoint: tensor '" + e.name + "' has shape " + to_string(e.shape) + ", expected " + to_string(t.shape()));
    std::copy(e.data.begin(), e.data.end(), t.data().begin());
  }
  // Moments were stored in file order; the model's entry order is canonical.
  if (!opt.m.empty()) {
    const auto& me = m.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name != me[i].first) throw IoError("checkpoint: tensor order differs from the model; optimizer state unusable");
  }
  m.optimizer() = std::move(opt);
  return m;
}

inline void save_checkpoint(const std::string& path, const Model& m) {
  const auto buf = encode_checkpoint(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline Model load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace gcv
