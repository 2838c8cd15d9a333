#include "grasp/trainer.hpp"

#include "grasp/errors.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace grasp {

namespace {

namespace fs = std::filesystem;

const std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                          "#9467bd", "#8c564b", "#e377c2", "#17becf"};

struct Series {
  std::string label;
  std::vector<double> y;  // indexed by epoch
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

void write_line_plot(const std::vector<Series>& series, const std::string& title, const std::string& y_label,
                     int marker_epoch, const fs::path& path) {
  constexpr double W = 720, H = 420, left = 70, right = 190, top = 40, bottom = 50;
  double lo = INFINITY, hi = -INFINITY;
  std::size_t n = 0;
  for (const auto& s : series)
    for (double v : s.y)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v), n = std::max(n, s.y.size());
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  const double pw = W - left - right, ph = H - top - bottom;
  const auto px = [&](double e) { return left + (n > 1 ? e / static_cast<double>(n - 1) : 0.5) * pw; };
  const auto py = [&](double v) { return top + (hi - v) / (hi - lo) * ph; };

  std::ofstream out(path);
  if (!out) throw WriteError("cannot write " + path.string());
  out << fmt::format(R"svg(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">)svg", W, H)
      << '\n';
  out << fmt::format(R"svg(<rect width="{}" height="{}" fill="white"/>)svg", W, H) << '\n';
  out << fmt::format(R"svg(<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>)svg", left + pw / 2, svg_escape(title))
      << '\n';
  out << fmt::format(R"svg(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>)svg", left, top, pw, ph) << '\n';
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    out << fmt::format(R"svg(<line x1="{}" y1="{:.2f}" x2="{}" y2="{:.2f}" stroke="#ddd"/>)svg", left, py(v), left + pw, py(v)) << '\n';
    out << fmt::format(R"svg(<text x="{}" y="{:.2f}" text-anchor="end">{:.4g}</text>)svg", left - 6, py(v) + 4, v) << '\n';
  }
  if (n > 0)
    for (std::size_t t = 0; t <= 5; ++t) {
      const double e = std::round(static_cast<double>(n - 1) * static_cast<double>(t) / 5.0);
      out << fmt::format(R"svg(<text x="{:.2f}" y="{}" text-anchor="middle">{}</text>)svg", px(e), top + ph + 18, e) << '\n';
    }
  out << fmt::format(R"svg(<text x="{}" y="{}" text-anchor="middle">epoch</text>)svg", left + pw / 2, H - 10) << '\n';
  out << fmt::format(R"svg(<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">{}</text>)svg", top + ph / 2,
                     svg_escape(y_label))
      << '\n';
  if (marker_epoch > 0 && static_cast<std::size_t>(marker_epoch) < n)
    out << fmt::format(R"svg(<line x1="{0:.2f}" y1="{1}" x2="{0:.2f}" y2="{2}" stroke="#888" stroke-dasharray="4 3"/>)svg",
                       px(marker_epoch), top, top + ph)
        << '\n';
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % kPalette.size()];
    std::string pts;
    for (std::size_t e = 0; e < s.y.size(); ++e)
      if (std::isfinite(s.y[e])) pts += fmt::format("{:.2f},{:.2f} ", px(static_cast<double>(e)), py(s.y[e]));
    out << fmt::format(R"svg(<polyline fill="none" stroke="{}" stroke-width="1.8" points="{}"/>)svg", color, pts) << '\n';
    const double ly = top + 14 + 18 * static_cast<double>(k);
    out << fmt::format(R"svg(<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{3}" stroke-width="3"/>)svg", W - right + 12, ly,
                       W - right + 34, color)
        << '\n';
    out << fmt::format(R"svg(<text x="{}" y="{}">{}</text>)svg", W - right + 40, ly + 4, svg_escape(s.label)) << '\n';
  }
  out << "</svg>\n";
}

// Mean over runs of one per-epoch quantity; runs may differ in length.
std::vector<double> mean_curve(const std::vector<std::vector<EpochLog>>& runs,
                               const std::function<double(const EpochLog&)>& get) {
  std::size_t n = 0;
  for (const auto& r : runs) n = std::max(n, r.size());
  std::vector<double> out(n, NAN);
  for (std::size_t e = 0; e < n; ++e) {
    double sum = 0.0;
    int count = 0;
    for (const auto& r : runs)
      if (e < r.size()) {
        const double v = get(r[e]);
        if (std::isfinite(v)) sum += v, ++count;
      }
    if (count) out[e] = sum / count;
  }
  return out;
}

void write_table(const RankTable& ranks, const std::vector<MetricSummary>& summaries, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw WriteError("cannot write " + path.string());
  std::size_t width = 13;
  for (const auto& n : ranks.configurations) width = std::max(width, n.size());
  out << fmt::format("{:<{}} | {:>13} | {:>13} | {:>13} | {:>13} | {:>4}\n", "Configuration", width, "DSC (%)", "CC-DSC (%)",
                     "FPV (mL)", "FNV (mL)", "Rank");
  out << std::string(width + 4 * 16 + 8, '-') << '\n';
  for (std::size_t i = 0; i < ranks.configurations.size(); ++i) {
    const auto& m = summaries[i];
    out << fmt::format("{:<{}} | {:>5.1f} ± {:>5.1f} | {:>5.1f} ± {:>5.1f} | {:>5.2f} ± {:>5.2f} | {:>5.2f} ± {:>5.2f} | {:>4}\n",
                       ranks.configurations[i], width, 100 * m.mean[0], 100 * m.stddev[0], 100 * m.mean[1],
                       100 * m.stddev[1], m.mean[2], m.stddev[2], m.mean[3], m.stddev[3], ranks.final_rank[i]);
  }
}

std::set<std::string> id_set(const std::vector<MetricsRecord>& records) {
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.patient_id);
  return ids;
}

}  // namespace

std::vector<EpochLog> read_epochs_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  const auto header = split_csv(line);
  const auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError(path.string() + ": no column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_epoch = column("epoch"), c_lr = column("lr"), c_loss = column("loss"),
                    c_active = column("fusion_active"), c_identity = column("fusion_identity"),
                    c_grad = column("fusion_grad_max"), c_seconds = column("seconds");
  std::vector<std::size_t> c_sim;
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i].rfind("similarity_", 0) == 0) c_sim.push_back(i);

  std::vector<EpochLog> logs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw FormatError(path.string() + ": ragged row");
    try {
      EpochLog e;
      e.epoch = std::stoi(cells[c_epoch]);
      e.lr = std::stod(cells[c_lr]);
      e.loss = std::stod(cells[c_loss]);
      e.fusion_active = cells[c_active] == "1";
      for (std::size_t c : c_sim) e.similarity.push_back(std::stod(cells[c]));
      e.fusion_identity = cells[c_identity] == "1";
      e.fusion_grad_max = std::stod(cells[c_grad]);
      e.seconds = std::stod(cells[c_seconds]);
      logs.push_back(std::move(e));
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ": bad number in row '" + line + "'");
    }
  }
  return logs;
}

ReportSummary report(const std::vector<ConfigRuns>& configs, const fs::path& out_dir) {
  if (configs.size() < 2) throw InputError("report needs at least two configurations");
  fs::create_directories(out_dir);

  ReportSummary summary;
  std::vector<ConfigMeans> table;
  std::vector<std::vector<std::vector<EpochLog>>> curves;
  std::optional<std::set<std::string>> reference_ids;
  int marker = -1;
  for (const auto& c : configs) {
    if (c.run_dirs.empty()) throw InputError("configuration " + c.name + " has no runs");
    std::vector<MetricsRecord> pooled;
    std::vector<std::vector<EpochLog>> runs;
    for (const auto& dir : c.run_dirs) {
      auto records = read_metrics_csv(dir / "metrics.csv");
      const auto ids = id_set(records);
      if (!reference_ids) reference_ids = ids;
      else if (ids != *reference_ids)
        throw InputError("run " + dir.string() + " was evaluated on a different validation set");
      pooled.insert(pooled.end(), records.begin(), records.end());
      runs.push_back(read_epochs_csv(dir / "epochs.csv"));
      if (marker < 0)
        for (const auto& e : runs.back())
          if (e.fusion_active) {
            marker = e.epoch;
            break;
          }
    }
    const auto s = summarize(pooled);
    ConfigMeans cm{c.name, {}};
    for (std::size_t m = 0; m < kMetricNames.size(); ++m) cm.means[kMetricNames[m]] = s.mean[m];
    table.push_back(std::move(cm));
    summary.per_config.push_back(s);
    curves.push_back(std::move(runs));
  }

  summary.ranks = rank_configurations(table);
  write_rank_csv(summary.ranks, out_dir / "rank.csv");
  write_table(summary.ranks, summary.per_config, out_dir / "table.txt");

  std::vector<Series> loss;
  for (std::size_t i = 0; i < configs.size(); ++i)
    loss.push_back({configs[i].name, mean_curve(curves[i], [](const EpochLog& e) { return e.loss; })});
  write_line_plot(loss, "Training loss", "mean loss over seeds", marker, out_dir / "loss.svg");

  std::size_t levels = 0;
  for (const auto& runs : curves)
    for (const auto& r : runs)
      if (!r.empty()) levels = std::max(levels, r.front().similarity.size());
  for (std::size_t l = 0; l < levels; ++l) {
    std::vector<Series> sim;
    for (std::size_t i = 0; i < configs.size(); ++i) {
      bool has = false;
      for (const auto& r : curves[i]) has = has || (!r.empty() && r.front().similarity.size() > l);
      if (!has) continue;
      sim.push_back({configs[i].name, mean_curve(curves[i], [l](const EpochLog& e) {
                       return l < e.similarity.size() ? e.similarity[l] : NAN;
                     })});
    }
    write_line_plot(sim, fmt::format("Feature similarity, fused level {} (0 = deepest)", l), "cosine similarity", marker,
                    out_dir / fmt::format("similarity_level{}.svg", l));
  }
  spdlog::info("report written to {}", out_dir.string());
  return summary;
}

ReportSummary compare(const ExperimentConfig& base, const std::vector<Strategy>& strategies, const fs::path& out_dir) {
  base.validate();
  if (strategies.size() < 2) throw InputError("compare needs at least two strategies");
  const fs::path data_dir = out_dir / "data";
  if (!fs::exists(data_dir / "manifest.tsv")) {
    spdlog::info("generating phantom dataset in {}", data_dir.string());
    generate_dataset(base.phantom, base.data.n_train, base.data.n_val, data_dir);
  }

  std::set<BackboneVariant> anatomy_needed;
  for (Strategy s : strategies) {
    ExperimentConfig cfg = base;
    cfg.train.strategy = s;
    if (const auto v = required_anatomy(cfg)) anatomy_needed.insert(*v);
  }
  const fs::path anatomy_dir = out_dir / "anatomy";
  for (BackboneVariant v : anatomy_needed) {
    if (fs::exists(anatomy_dir / anatomy_checkpoint_name(v))) continue;
    ExperimentConfig cfg = base;
    cfg.anatomy.variant = v;
    cfg.train.pseudo_label_source = PseudoLabelSource::ground_truth_organs;
    pretrain_anatomy(cfg, load_dataset(cfg, data_dir), anatomy_dir);
  }

  const Dataset data = load_dataset(base, data_dir);
  std::vector<ConfigRuns> runs;
  for (Strategy s : strategies) {
    ExperimentConfig cfg = base;
    cfg.train.strategy = s;
    if (const auto v = required_anatomy(cfg)) cfg.train.anatomy_checkpoint = anatomy_dir / anatomy_checkpoint_name(*v);
    ConfigRuns cr{to_string(s), {}};
    for (std::uint64_t seed : cfg.train.seeds) {
      const fs::path dir = out_dir / "runs" / to_string(s) / ("seed" + std::to_string(seed));
      if (!fs::exists(dir / "run.json")) train(cfg, data, seed, dir);
      cr.run_dirs.push_back(dir);
    }
    runs.push_back(std::move(cr));
  }
  return report(runs, out_dir / "report");
}

}  // namespace grasp
