// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gcv/graph.hpp"
#include "gcv/synth.hpp"
#include "gcv/train.hpp"

namespace gcv {

/// Everything one CLI run needs. Serialized as `key = value` lines under
/// [model] [loss] [train] [data] [graph].
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  synth::SynthSpec data;
  graph::GraphConfig graph;
  std::string dataset = "data/synth.gcvz";
  std::string out_dir = "runs/default";
  std::string manifest;                       // CSV manifest for `preprocess`
  std::array<double, 3> split_ratios{70, 10, 20};
  std::uint64_t split_seed = 0;

  void validate() const {
    model.validate();
    loss.validate();
    train.validate();
    data.validate();
    if (!(graph.sigma > 0.0)) throw ConfigError("graph: sigma must be positive");
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');)
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

struct Field {
  std::string section, key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

inline Field size_field(const char* sec, const char* key, std::size_t& f) {
  return {sec, key, [&f] { return std::to_string(f); }, [&f, key](const std::string& v) { f = parse_number<std::size_t>(key, v); }};
}
inline Field u64_field(const char* sec, const char* key, std::uint64_t& f) {
  return {sec, key, [&f] { return std::to_string(f); }, [&f, key](const std::string& v) { f = parse_number<std::uint64_t>(key, v); }};
}
inline Field double_field(const char* sec, const char* key, double& f) {
  return {sec, key, [&f] { return fmt_double(f); }, [&f, key](const std::string& v) { f = parse_number<double>(key, v); }};
}
inline Field bool_field(const char* sec, const char* key, bool& f) {
  return {sec, key, [&f] { return std::string(f ? "true" : "false"); }, [&f, key](const std::string& v) { f = parse_bool(key, v); }};
}
inline Field string_field(const char* sec, const char* key, std::string& f) {
  return {sec, key, [&f] { return f; }, [&f](const std::string& v) { f = v; }};
}

inline std::vector<Field> fields(RunConfig& c) {
  auto& m = c.model;
  auto& l = c.loss;
  auto& t = c.train;
  auto& d = c.data;
  auto& g = c.graph;
  std::vector<Field> f{
      size_field("model", "n_channels", m.n_channels),
      size_field("model", "n_samples", m.n_samples),
      size_field("model", "segment_size", m.segment_size),
      size_field("model", "d_model", m.d_model),
      size_field("model", "latent_dim", m.latent_dim),
      size_field("model", "n_gcn_layers", m.n_gcn_layers),
      size_field("model", "n_transformer_layers", m.n_transformer_layers),
      size_field("model", "n_heads", m.n_heads),
      size_field("model", "adapter_heads", m.adapter_heads),
      bool_field("model", "no_gcnn", m.no_gcnn),
      bool_field("model", "no_split", m.no_split),
      bool_field("model", "ae_mode", m.ae_mode),

      double_field("loss", "tau_init", l.tau_init),
      double_field("loss", "tau_min", l.tau_min),
      double_field("loss", "tau_max", l.tau_max),
      bool_field("loss", "divide_by_tau", l.divide_by_tau),
      {"loss", "denominator",
       [&l] { return std::string(l.denominator == Denominator::IncludePositive ? "include_positive" : "literal_eq1"); },
       [&l](const std::string& v) {
         if (v == "include_positive") l.denominator = Denominator::IncludePositive;
         else if (v == "literal_eq1") l.denominator = Denominator::LiteralEq1;
         else throw ConfigError("config: 'denominator' expects include_positive or literal_eq1, got '" + v + "'");
       }},
      double_field("loss", "beta", l.beta),
      double_field("loss", "lambda_s", l.lambda_s),
      double_field("loss", "lambda_t", l.lambda_t),
      double_field("loss", "w_rec", l.w_rec),
      bool_field("loss", "no_contrastive", l.no_contrastive),

      double_field("train", "learning_rate", t.learning_rate),
      size_field("train", "epochs", t.epochs),
      size_field("train", "batch_size", t.batch_size),
      double_field("train", "beta1", t.beta1),
      double_field("train", "beta2", t.beta2),
      double_field("train", "adam_eps", t.adam_eps),
      {"train", "seeds",
       [&t] {
         std::string s;
         for (std::size_t i = 0; i < t.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(t.seeds[i]);
         return s;
       },
       [&t](const std::string& v) {
         t.seeds.clear();
         for (const auto& item : split_list(v)) t.seeds.push_back(parse_number<std::uint64_t>("seeds", item));
         if (t.seeds.empty()) throw ConfigError("config: 'seeds' needs at least one value");
       }},
      size_field("train", "steps_per_epoch", t.steps_per_epoch),
      size_field("train", "dev_eval_every", t.dev_eval_every),
      size_field("train", "finetune_epochs", t.finetune_epochs),
      double_field("train", "finetune_fraction", t.finetune_fraction),
      double_field("train", "finetune_lr", t.finetune_lr),
      size_field("train", "probe_rounds", t.probe.rounds),
      size_field("train", "probe_max_depth", t.probe.max_depth),
      double_field("train", "probe_shrinkage", t.probe.shrinkage),
      size_field("train", "probe_min_child", t.probe.min_child),
      double_field("train", "probe_lambda", t.probe.lambda),
      {"train", "split_ratios",
       [&c] { return fmt_double(c.split_ratios[0]) + "," + fmt_double(c.split_ratios[1]) + "," + fmt_double(c.split_ratios[2]); },
       [&c](const std::string& v) {
         const auto items = split_list(v);
         if (items.size() != 3) throw ConfigError("config: 'split_ratios' expects three comma-separated values");
         for (std::size_t i = 0; i < 3; ++i) c.split_ratios[i] = parse_number<double>("split_ratios", items[i]);
       }},
      u64_field("train", "split_seed", c.split_seed),

      string_field("data", "dataset", c.dataset),
      string_field("data", "out_dir", c.out_dir),
      string_field("data", "manifest", c.manifest),
      size_field("data", "n_subjects", d.n_subjects),
      size_field("data", "n_tasks", d.n_tasks),
      size_field("data", "epochs_per_cell", d.epochs_per_cell),
      double_field("data", "snr", d.snr),
      u64_field("data", "seed", d.seed),
      double_field("data", "sample_rate", d.sample_rate),
      size_field("data", "n_channels", d.n_channels),
      {"data", "task_snr_scale",
       [&d] {
         std::string s;
         for (std::size_t i = 0; i < d.task_snr_scale.size(); ++i) s += (i ? "," : "") + fmt_double(d.task_snr_scale[i]);
         return s;
       },
       [&d](const std::string& v) {
         d.task_snr_scale.clear();
         for (const auto& item : split_list(v)) d.task_snr_scale.push_back(parse_number<double>("task_snr_scale", item));
       }},
      size_field("data", "threads", d.threads),

      double_field("graph", "sigma", g.sigma),
      double_field("graph", "threshold", g.threshold),
      string_field("graph", "adjacency_file", g.adjacency_file),
  };
  return f;
}

}  // namespace config_detail

/// Sets `section.key` to `value`; unknown keys are errors.
inline void set_config_value(RunConfig& c, const std::string& section, const std::string& key, const std::string& value) {
  for (auto& f : config_detail::fields(c))
    if (f.section == section && f.key == key) {
      f.set(value);
      return;
    }
  throw ConfigError("config: unknown key '" + key + "' in section [" + section + "]");
}

/// Applies an override of the form `section.key=value`.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("config: override '" + assignment + "' is not of the form section.key=value");
  set_config_value(c, config_detail::trim(assignment.substr(0, dot)), config_detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
                   config_detail::trim(assignment.substr(eq + 1)));
}

/// Parses config text on top of `base`. `#` starts a comment line.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string section;
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const auto line = config_detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: " + where + "malformed section header '" + line + "'");
      section = config_detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "loss" && section != "train" && section != "data" && section != "graph")
        throw ConfigError("config: " + where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: " + where + "expected key = value, got '" + line + "'");
    if (section.empty()) throw ConfigError("config: " + where + "key outside any section");
    try {
      set_config_value(base, section, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config: ") + where + (e.what() + std::string_view("config: ").size()));
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Fully resolved config; parse_config(format_config(c)) reproduces c.
inline std::string format_config(const RunConfig& c) {
  auto copy = c;
  std::string out, section;
  for (const auto& f : config_detail::fields(copy)) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

inline void write_config(const std::string& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << format_config(c);
}

}  // namespace gcv
