// Copyright 2026 The gcv Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "gcv/config.hpp"
#include "gcv/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace gcv;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string dataset, out_dir;
  bool verbose = false;

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path.empty()) c = load_config(config_path);
    if (!dataset.empty()) c.dataset = dataset;
    if (!out_dir.empty()) c.out_dir = out_dir;
    for (const auto& o : overrides) apply_override(c, o);
    c.validate();
    return c;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "key = value config file");
  app->add_option("--set", c.overrides, "override, e.g. --set model.d_model=32 (repeatable)");
  app->add_option("-d,--dataset", c.dataset, "dataset file (GCVZ)");
  app->add_option("-o,--out", c.out_dir, "output directory");
  app->add_flag("-v,--verbose", c.verbose, "progress messages on stderr");
}

fs::path prepare_out(const RunConfig& c) {
  fs::path dir(c.out_dir);
  fs::create_directories(dir);
  write_config((dir / "resolved.cfg").string(), c);
  return dir;
}

// Present while a command is writing; removed once every output is complete.
class IncompleteMarker {
 public:
  explicit IncompleteMarker(const fs::path& dir) : path_(dir / "INCOMPLETE") { std::ofstream(path_) << "outputs in this directory are partial\n"; }
  void done() { fs::remove(path_); }

 private:
  fs::path path_;
};

Tensor adjacency_for(const RunConfig& c, std::size_t channels) { return graph::build_graph(channels, c.graph).normalized; }

Dataset load_dataset(const RunConfig& c) {
  auto ds = read_dataset(c.dataset);
  if (ds.channels != c.model.n_channels || ds.samples != c.model.n_samples)
    throw ShapeError("dataset " + c.dataset + " holds " + std::to_string(ds.channels) + "x" + std::to_string(ds.samples) + " epochs, model expects " +
                     std::to_string(c.model.n_channels) + "x" + std::to_string(c.model.n_samples));
  return ds;
}

std::vector<SplitPlan> make_plans(const Dataset& ds, const RunConfig& c, std::size_t folds) {
  if (folds > 0) return kfold_split(ds, folds, c.split_seed);
  return {holdout_split(ds, c.split_ratios, c.split_seed)};
}

const char* role_name(LatentRole r) { return r == LatentRole::S ? "z_S" : "z_T"; }
const char* axis_name(LabelAxis a) { return a == LabelAxis::Subject ? "subject" : a == LabelAxis::Task ? "task" : "paradigm"; }

using MetricMap = std::map<std::string, double>;

MetricMap four_blocks(const Latents& lat, const Dataset& ds, const SplitPlan& plan, const GbtHyper& hp, std::ostream* text) {
  MetricMap out;
  for (auto role : {LatentRole::S, LatentRole::T})
    for (auto target : {LabelAxis::Subject, LabelAxis::Task}) {
      const auto m = evaluate_latents(lat, ds, plan, role, target, hp);
      const std::string key = std::string(role_name(role)) + "_" + axis_name(target);
      out[key + "_balanced_accuracy"] = m.balanced_accuracy;
      out[key + "_closed_set_accuracy"] = m.closed_set_accuracy;
      out[key + "_macro_f1"] = m.macro_f1;
      if (text) {
        *text << "[" << role_name(role) << " -> " << axis_name(target) << "]\n"
              << std::setprecision(6) << "balanced_accuracy = " << m.balanced_accuracy << "\nclosed_set_accuracy = " << m.closed_set_accuracy
              << "\nmacro_f1 = " << m.macro_f1 << "\nclasses = " << m.classes.size() << "\n\n";
      }
    }
  return out;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << s;
}

struct RunOutcome {
  MetricMap metrics;
  TrainResult result;
};

RunOutcome train_and_evaluate(const Dataset& ds, const SplitPlan& plan, const Tensor& adj, const RunConfig& c, std::uint64_t seed) {
  auto res = train(ds, plan, adj, c.train, c.model, c.loss, seed);
  if (res.history.aborted) throw NumericError("training diverged (3 consecutive non-finite steps) for seed " + std::to_string(seed));
  const auto lat = encode_latents(res.best_model, ds, adj);
  auto metrics = four_blocks(lat, ds, plan, c.train.probe, nullptr);
  return {std::move(metrics), std::move(res)};
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& co) {
  auto c = co.resolve();
  const auto res = synth::generate(c.data);
  fs::path p(c.dataset);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_dataset(c.dataset, res.dataset);
  write_config(c.dataset + ".cfg", c);
  std::cout << "wrote " << res.dataset.size() << " epochs (" << res.dataset.n_subjects << " subjects x " << res.dataset.n_tasks << " tasks) to "
            << c.dataset << "\n";
  return 0;
}

int cmd_preprocess(const Common& co, bool no_standardize) {
  auto c = co.resolve();
  if (c.manifest.empty()) throw ConfigError("preprocess: set data.manifest to a CSV manifest");
  const auto ds = ingest_csv(c.manifest, c.model.n_channels, c.model.n_samples, !no_standardize);
  fs::path p(c.dataset);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_dataset(c.dataset, ds);
  write_config(c.dataset + ".cfg", c);
  std::cout << "wrote " << ds.size() << " epochs to " << c.dataset << "\n";
  return 0;
}

int cmd_train(const Common& co, std::size_t folds) {
  auto c = co.resolve();
  const auto ds = load_dataset(c);
  const auto adj = adjacency_for(c, ds.channels);
  const auto dir = prepare_out(c);
  IncompleteMarker marker(dir);
  const auto plans = make_plans(ds, c, folds);
  write_split_csv((dir / "split.csv").string(), plans, ds.size());

  std::vector<std::uint64_t> runs;  // fold * 2^32 + seed, unpacked below
  for (std::size_t f = 0; f < plans.size(); ++f)
    for (auto s : c.train.seeds) runs.push_back((static_cast<std::uint64_t>(f) << 32) | s);
  const auto report = run_seeds(runs, [&](std::uint64_t key) {
    const auto fold = static_cast<std::size_t>(key >> 32);
    const auto seed = key & 0xffffffffu;
    const fs::path sub = dir / (plans.size() > 1 ? "fold" + std::to_string(fold) + "_seed" + std::to_string(seed) : "seed" + std::to_string(seed));
    fs::create_directories(sub);
    auto res = train(ds, plans[fold], adj, c.train, c.model, c.loss, seed);
    write_history_csv((sub / "history.csv").string(), res.history);
    save_checkpoint((sub / "final.gcvk").string(), res.final_model);
    save_checkpoint((sub / "best.gcvk").string(), res.best_model);
    if (res.history.aborted) throw NumericError("training diverged (3 consecutive non-finite steps)");
    std::ostringstream text;
    const auto metrics = four_blocks(encode_latents(res.best_model, ds, adj), ds, plans[fold], c.train.probe, &text);
    write_text(sub / "metrics.txt", text.str());
    std::cout << sub.filename().string() << ": z_S subject BA " << metrics.at("z_S_subject_balanced_accuracy") << ", z_T task BA "
              << metrics.at("z_T_task_balanced_accuracy") << " (" << std::fixed << std::setprecision(0) << res.history.wall_seconds << " s)\n"
              << std::defaultfloat << std::setprecision(6);
    return metrics;
  });
  write_text(dir / "metrics.csv", format_report(report));
  std::cout << format_report(report);
  if (!report.complete) throw NumericError("one or more runs failed; metrics.csv is marked INCOMPLETE");
  marker.done();
  return 0;
}

int cmd_finetune(const Common& co, const std::string& ckpt) {
  auto c = co.resolve();
  const auto ds = load_dataset(c);
  const auto adj = adjacency_for(c, ds.channels);
  const auto base = load_checkpoint(ckpt);
  const auto dir = prepare_out(c);
  IncompleteMarker marker(dir);
  const auto plan = holdout_split(ds, c.split_ratios, c.split_seed);
  const auto ft = finetune_adapter(base, ds, plan.test, adj, c.train, c.loss, base.seed());
  save_checkpoint((dir / "finetuned.gcvk").string(), ft.model);
  write_history_csv((dir / "finetune_history.csv").string(), ft.history);

  const auto before = encode_latents(base, ds, adj), after = encode_latents(ft.model, ds, adj);
  std::ostringstream text;
  text << std::setprecision(6) << "adapt_epochs = " << ft.adapt.size() << "\nheld_out_epochs = " << ft.held_out.size() << "\n";
  for (auto role : {LatentRole::S, LatentRole::T}) {
    const auto& b = role == LatentRole::S ? before.s : before.t;
    const auto& a = role == LatentRole::S ? after.s : after.t;
    const auto m0 = evaluate_features(b, ds, ft.adapt, ft.held_out, LabelAxis::Subject, c.train.probe);
    const auto m1 = evaluate_features(a, ds, ft.adapt, ft.held_out, LabelAxis::Subject, c.train.probe);
    text << "[" << role_name(role) << " -> subject, held-out " << std::lround(100 * (1 - c.train.finetune_fraction)) << "%]\n"
         << "probe_refit_balanced_accuracy = " << m0.balanced_accuracy << "\nfinetuned_balanced_accuracy = " << m1.balanced_accuracy
         << "\nfinetuned_closed_set_accuracy = " << m1.closed_set_accuracy << "\nfinetuned_macro_f1 = " << m1.macro_f1 << "\n\n";
  }
  text << "[finetune loss per epoch]\n";
  for (std::size_t e = 0; e < ft.epoch_loss.size(); ++e) text << "epoch_" << e + 1 << " = " << ft.epoch_loss[e] << "\n";
  write_text(dir / "finetune_metrics.txt", text.str());
  std::cout << text.str();
  marker.done();
  return 0;
}

int cmd_eval(const Common& co, const std::string& ckpt) {
  auto c = co.resolve();
  const auto ds = load_dataset(c);
  const auto adj = adjacency_for(c, ds.channels);
  const auto model = load_checkpoint(ckpt);
  const auto dir = prepare_out(c);
  const auto plan = holdout_split(ds, c.split_ratios, c.split_seed);
  const auto lat = encode_latents(model, ds, adj);
  std::ostringstream text;
  four_blocks(lat, ds, plan, c.train.probe, &text);
  text << "[paradigm breakdown: z_S -> subject]\nparadigm,balanced_accuracy,closed_set_accuracy\n";
  for (const auto& r : paradigm_breakdown(lat, ds, plan, c.train.probe)) text << r.paradigm << "," << r.balanced << "," << r.closed_set << "\n";
  write_text(dir / "eval.txt", text.str());
  std::cout << text.str();
  return 0;
}

int cmd_ablate(const Common& co) {
  auto c = co.resolve();
  const auto ds = load_dataset(c);
  const auto adj = adjacency_for(c, ds.channels);
  const auto dir = prepare_out(c);
  IncompleteMarker marker(dir);
  const auto plan = holdout_split(ds, c.split_ratios, c.split_seed);

  struct Variant {
    std::string name;
    std::function<void(RunConfig&)> apply;
  };
  const std::vector<Variant> variants{
      {"full", [](RunConfig&) {}},
      {"-gcnn", [](RunConfig& r) { r.model.no_gcnn = true; }},
      {"-contrastive", [](RunConfig& r) { r.loss.no_contrastive = true; }},
      {"-split", [](RunConfig& r) { r.model.no_split = true; }},
      {"ae-mode", [](RunConfig& r) { r.model.ae_mode = true; }},
  };
  const std::vector<std::string> keys{"z_S_subject_balanced_accuracy", "z_T_task_balanced_accuracy", "z_T_subject_balanced_accuracy"};
  std::vector<SeedReport> reports;
  for (const auto& v : variants) {
    auto rc = c;
    v.apply(rc);
    reports.push_back(run_seeds(c.train.seeds, [&](std::uint64_t seed) {
      auto out = train_and_evaluate(ds, plan, adj, rc, seed);
      std::cout << v.name << " seed " << seed << ": z_S subject BA " << out.metrics.at(keys[0]) << "\n";
      return out.metrics;
    }));
  }
  auto mean_of = [](const SeedReport& r, const std::string& k) {
    for (const auto& m : r.metrics)
      if (m.name == k) return m;
    return MetricSummary{k, std::nan(""), std::nan(""), 0, {}};
  };
  std::ostringstream t;
  t << std::setprecision(6) << "variant";
  for (const auto& k : keys) t << "," << k << "_mean," << k << "_stddev," << k << "_delta";
  t << ",n_seeds,complete\n";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    t << variants[i].name;
    for (const auto& k : keys) {
      const auto m = mean_of(reports[i], k);
      const auto full = mean_of(reports[0], k);
      t << "," << m.mean << ",";
      if (m.n > 1) t << m.stddev;
      else t << "n/a";
      t << "," << 100 * (m.mean - full.mean);
    }
    t << "," << mean_of(reports[i], keys[0]).n << "," << (reports[i].complete ? "yes" : "INCOMPLETE") << "\n";
  }
  write_text(dir / "ablation.csv", t.str());
  std::cout << t.str();
  for (const auto& r : reports)
    if (!r.complete) throw NumericError("ablation has failed runs; ablation.csv is marked INCOMPLETE");
  marker.done();
  return 0;
}

int cmd_export(const Common& co, const std::string& ckpt, const std::string& path) {
  auto c = co.resolve();
  const auto ds = load_dataset(c);
  const auto model = load_checkpoint(ckpt);
  const auto out = path.empty() ? (fs::path(c.out_dir) / "latents.csv").string() : path;
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  write_latents_csv(out, encode_latents(model, ds, adjacency_for(c, ds.channels)), ds);
  std::cout << "wrote latents for " << ds.size() << " epochs to " << out << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  ModelConfig mc;
  mc.n_channels = 4;
  mc.n_samples = 16;
  mc.segment_size = 4;
  mc.d_model = 8;
  mc.latent_dim = 4;
  mc.n_gcn_layers = 1;
  mc.n_transformer_layers = 1;
  mc.n_heads = 2;
  mc.adapter_heads = 2;
  Model m(mc, seed);
  const auto adj = graph::build_graph(4, {0.5, 0.0, ""}).normalized;
  Rng rng = Rng(seed).split("gradcheck");
  const auto xa = Tensor::randn({3, 4, 16}, rng), xb = Tensor::randn({3, 4, 16}, rng);
  std::vector<Tensor> leaves;
  for (auto& [_, t] : m.params().entries()) leaves.push_back(t);
  double worst = 0;
  for (auto axis : {LabelAxis::Subject, LabelAxis::Task}) {
    const auto rep = gradcheck(
        [&] {
          Rng r = Rng(seed).split("noise");
          return total_objective(m, adj, xa, xb, axis, LossConfig{}, r).total_tensor;
        },
        leaves, 1e-6);
    std::cout << axis_name(axis) << "-paired objective: max relative error " << rep.max_rel_error << " over " << rep.n_checked
              << " components (worst: " << m.params().entries()[rep.worst_tensor].first << "[" << rep.worst_index << "])\n";
    worst = std::max(worst, rep.max_rel_error);
  }
  const bool pass = worst <= 1e-4;
  std::cout << "max_relative_error = " << worst << "\n" << (pass ? "PASS" : "FAIL") << "\n";
  return pass ? 0 : 8;
}

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
    else if (ch == '"') ch = '\'';
  return s;
}

int exit_code_for(const std::string& code) {
  if (code == "config") return 3;
  if (code == "io") return 4;
  if (code == "shape" || code == "value") return 5;
  if (code == "numeric") return 6;
  if (code == "state") return 7;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gcv: split-latent graph-convolutional VAE for EEG"};
  app.require_subcommand(1);
  Common co;
  std::size_t folds = 0;
  std::string ckpt, latents_out;
  bool no_standardize = false;
  std::uint64_t gc_seed = 0;

  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
  auto* pre = app.add_subcommand("preprocess", "ingest a CSV manifest into a dataset file");
  auto* tr = app.add_subcommand("train", "train over the seed list and report probe metrics");
  auto* ft = app.add_subcommand("finetune", "adapter fine-tuning on test subjects");
  auto* ev = app.add_subcommand("eval", "probe metrics for a checkpoint");
  auto* ab = app.add_subcommand("ablate", "full model and four ablations over the seed list");
  auto* ex = app.add_subcommand("export-latents", "write per-epoch latent means to CSV");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full objective on a toy model");
  for (auto* s : {synth, pre, tr, ft, ev, ab, ex}) add_common(s, co);
  pre->add_flag("--no-standardize", no_standardize, "keep raw amplitudes");
  tr->add_option("--folds", folds, "stratified k-fold instead of the holdout split (0 = holdout)");
  for (auto* s : {ft, ev, ex}) s->add_option("-k,--checkpoint", ckpt, "checkpoint file (GCVK)")->required();
  ex->add_option("--csv", latents_out, "output CSV (default <out>/latents.csv)");
  gc->add_option("--seed", gc_seed, "parameter and input seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error code=usage message=\"" << one_line(e.what()) << "\"\n";
    return 2;
  }
  diag::set_info(co.verbose);
  try {
    if (synth->parsed()) return cmd_synth(co);
    if (pre->parsed()) return cmd_preprocess(co, no_standardize);
    if (tr->parsed()) return cmd_train(co, folds);
    if (ft->parsed()) return cmd_finetune(co, ckpt);
    if (ev->parsed()) return cmd_eval(co, ckpt);
    if (ab->parsed()) return cmd_ablate(co);
    if (ex->parsed()) return cmd_export(co, ckpt, latents_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
  } catch (const Error& e) {
    std::cerr << "error code=" << e.code() << " message=\"" << one_line(e.what()) << "\"\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error code=internal message=\"" << one_line(e.what()) << "\"\n";
    return 1;
  }
  return 0;
}
