// grasp: phantom synthesis, anatomy pretraining, training, inference, evaluation and reports.

#include "grasp/errors.hpp"
#include "grasp/trainer.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace grasp;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out_dir;
  std::optional<bool> deterministic;
  std::string log_level = "info";
};

ExperimentConfig resolve(const Globals& g, const std::vector<std::string>& extras) {
  std::vector<std::string> overrides;
  for (const auto& e : extras) {
    if (e.rfind("--", 0) != 0 || e.find('=') == std::string::npos || e.find('.') > e.find('='))
      throw ConfigError("unrecognised argument '" + e + "' (overrides look like --section.key=value)");
    overrides.push_back(e.substr(2));
  }
  if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
  if (g.deterministic) overrides.push_back(std::string("deterministic=") + (*g.deterministic ? "true" : "false"));
  return load_config(g.config, overrides);
}

fs::path out_or(const Globals& g, const fs::path& fallback) { return g.out_dir ? *g.out_dir : fallback; }

std::vector<Sample> split_samples(const Dataset& d, const std::string& split) {
  if (split == "val") return d.val;
  if (split == "train") return d.train;
  if (split == "all") {
    auto all = d.train;
    all.insert(all.end(), d.val.begin(), d.val.end());
    return all;
  }
  throw ConfigError("split must be train, val or all");
}

void print_summary(const std::vector<MetricsRecord>& records) {
  const auto s = summarize(records);
  std::printf("cases %zu\n", s.count);
  for (std::size_t m = 0; m < kMetricNames.size(); ++m)
    std::printf("%-7s %.4f +- %.4f\n", kMetricNames[m].c_str(), s.mean[m], s.stddev[m]);
}

std::vector<ConfigRuns> discover_runs(const fs::path& root) {
  std::vector<ConfigRuns> out;
  if (!fs::is_directory(root)) throw DependencyError("no runs directory " + root.string());
  std::vector<fs::path> configs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) configs.push_back(e.path());
  std::sort(configs.begin(), configs.end());
  for (const auto& c : configs) {
    ConfigRuns cr{c.filename().string(), {}};
    for (const auto& e : fs::directory_iterator(c))
      if (fs::exists(e.path() / "metrics.csv")) cr.run_dirs.push_back(e.path());
    std::sort(cr.run_dirs.begin(), cr.run_dirs.end());
    if (!cr.run_dirs.empty()) out.push_back(std::move(cr));
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Anatomy-guided PET/CT lesion segmentation on synthetic phantoms"};
  app.require_subcommand(1);
  app.allow_extras();
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "JSON configuration file (defaults apply when omitted)");
  app.add_option("--seed", g.seed, "Experiment seed");
  app.add_option("--out-dir", g.out_dir, "Output directory");
  app.add_flag("--deterministic,!--no-deterministic", g.deterministic, "Deterministic compute (default on)");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off");

  std::string data_dir, checkpoint, predictions, split = "val", strategies, runs_root;
  std::vector<std::string> run_specs;

  auto* synth = app.add_subcommand("synth", "Generate the phantom dataset");
  auto* pretrain = app.add_subcommand("pretrain-anatomy", "Train and freeze the CT-only organ network");
  pretrain->add_option("--data", data_dir, "Dataset directory (default data.dataset_dir)");
  auto* train_cmd = app.add_subcommand("train", "Train one strategy for one seed");
  train_cmd->add_option("--data", data_dir, "Dataset directory");
  auto* infer_cmd = app.add_subcommand("infer", "Predict lesion masks with a trained checkpoint");
  infer_cmd->add_option("--checkpoint", checkpoint, "Pathology checkpoint")->required();
  infer_cmd->add_option("--data", data_dir, "Dataset directory");
  infer_cmd->add_option("--split", split, "train, val or all");
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions or a checkpoint against ground truth");
  eval_cmd->add_option("--data", data_dir, "Dataset directory");
  eval_cmd->add_option("--split", split, "train, val or all");
  auto* eval_src = eval_cmd->add_option_group("source");
  eval_src->add_option("--checkpoint", checkpoint, "Pathology checkpoint");
  eval_src->add_option("--predictions", predictions, "Directory of <id>.glab masks");
  eval_src->require_option(1);
  auto* report_cmd = app.add_subcommand("report", "Rank configurations and plot their training curves");
  auto* report_src = report_cmd->add_option_group("source");
  report_src->add_option("--run", run_specs, "name=dir[,dir...] (repeatable)");
  report_src->add_option("--runs-root", runs_root, "Directory holding <configuration>/<run> subdirectories");
  report_src->require_option(1);
  auto* compare_cmd = app.add_subcommand("compare", "Train, evaluate and rank several strategies");
  compare_cmd->add_option("--strategies", strategies, "Comma-separated strategy names")
      ->default_val("baseline_2c,ana_in_3c,grasp_mirror,grasp_mixture,grasp_fusion_only");
  auto* show = app.add_subcommand("show-config", "Print the effective configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  std::vector<std::string> extras = app.remaining();
  for (auto* sub : app.get_subcommands()) {
    const auto more = sub->remaining();
    extras.insert(extras.end(), more.begin(), more.end());
  }
  const ExperimentConfig cfg = resolve(g, extras);
  const fs::path data = data_dir.empty() ? cfg.data.dataset_dir : fs::path(data_dir);

  if (*show) {
    std::cout << to_json(cfg).dump(2) << '\n';
  } else if (*synth) {
    const auto m = generate_dataset(cfg.phantom, cfg.data.n_train, cfg.data.n_val, out_or(g, cfg.data.dataset_dir));
    std::printf("%zu cases, digest %s\n", m.records.size(), m.digest.c_str());
  } else if (*pretrain) {
    ExperimentConfig c = cfg;
    c.train.pseudo_label_source = PseudoLabelSource::ground_truth_organs;
    const fs::path out = out_or(g, "anatomy");
    pretrain_anatomy(c, load_dataset(c, data), out);
    std::printf("%s\n", (out / anatomy_checkpoint_name(c.anatomy.variant)).string().c_str());
  } else if (*train_cmd) {
    const fs::path out = out_or(g, fs::path("runs") / to_string(cfg.train.strategy) / ("seed" + std::to_string(cfg.seed)));
    const auto art = train(cfg, load_dataset(cfg, data), cfg.seed, out);
    print_summary(art.metrics);
  } else if (*infer_cmd) {
    const auto samples = split_samples(load_dataset(cfg, data), split);
    const auto preds = infer(load_checkpoint(checkpoint), samples);
    const fs::path out = out_or(g, "predictions");
    fs::create_directories(out);
    for (std::size_t i = 0; i < samples.size(); ++i) save_labels(preds[i], out / (samples[i].id + ".glab"));
    std::printf("%zu masks written to %s\n", preds.size(), out.string().c_str());
  } else if (*eval_cmd) {
    const auto samples = split_samples(load_dataset(cfg, data), split);
    std::vector<std::string> ids;
    std::vector<LabelVolume> preds;
    if (!checkpoint.empty()) preds = infer(load_checkpoint(checkpoint), samples);
    for (const auto& s : samples) {
      ids.push_back(s.id);
      if (checkpoint.empty()) {
        const fs::path p = fs::path(predictions) / (s.id + ".glab");
        if (!fs::exists(p)) throw DependencyError("missing prediction " + p.string());
        preds.push_back(load_labels(p));
      }
    }
    const auto records = evaluate(ids, preds, samples);
    const fs::path out = out_or(g, ".");
    fs::create_directories(out);
    write_metrics_csv(records, out / "metrics.csv");
    print_summary(records);
  } else if (*report_cmd) {
    std::vector<ConfigRuns> configs;
    if (!runs_root.empty()) configs = discover_runs(runs_root);
    for (const auto& spec : run_specs) {
      const auto eq = spec.find('=');
      if (eq == std::string::npos) throw ConfigError("--run expects name=dir[,dir...]");
      ConfigRuns cr{spec.substr(0, eq), {}};
      std::stringstream ss(spec.substr(eq + 1));
      std::string dir;
      while (std::getline(ss, dir, ',')) cr.run_dirs.emplace_back(dir);
      configs.push_back(std::move(cr));
    }
    const fs::path out = out_or(g, "report");
    report(configs, out);
    std::ifstream table(out / "table.txt");
    std::cout << table.rdbuf();
  } else if (*compare_cmd) {
    std::vector<Strategy> list;
    std::stringstream ss(strategies);
    std::string name;
    while (std::getline(ss, name, ',')) list.push_back(parse_strategy(name));
    const fs::path out = out_or(g, "bench");
    compare(cfg, list, out);
    std::ifstream table(out / "report" / "table.txt");
    std::cout << table.rdbuf();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    spdlog::error("configuration error: {}", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    spdlog::error("divergence at epoch {}: {}", e.epoch(), e.what());
    return 3;
  } catch (const DependencyError& e) {
    spdlog::error("missing dependency: {}", e.what());
    return 4;
  } catch (const InputError& e) {
    spdlog::error("input error: {}", e.what());
    return 4;
  } catch (const FormatError& e) {
    spdlog::error("input error: {}", e.what());
    return 4;
  } catch (const IncompatibilityError& e) {
    spdlog::error("input error: {}", e.what());
    return 4;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
