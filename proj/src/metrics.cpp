#include "grasp/metrics.hpp"

#include "grasp/errors.hpp"
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace grasp {

namespace {

void require_same_extent(const LabelVolume& a, const LabelVolume& b, const char* op) {
  if (a.extent() != b.extent()) throw ShapeError(std::string(op) + ": prediction and ground truth differ in shape");
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

Components connected_components(const LabelVolume& mask, Connectivity conn) {
  const auto [h, w, d] = mask.extent();
  Components out;
  out.extent = mask.extent();
  out.ids.assign(static_cast<std::size_t>(mask.voxels()), 0);

  std::vector<std::array<Index, 3>> offsets;
  for (Index a = -1; a <= 1; ++a)
    for (Index b = -1; b <= 1; ++b)
      for (Index c = -1; c <= 1; ++c) {
        const Index manhattan = std::abs(a) + std::abs(b) + std::abs(c);
        if (manhattan == 0 || (conn == Connectivity::six && manhattan > 1)) continue;
        offsets.push_back({a, b, c});
      }

  std::vector<Index> queue;
  const auto& lab = mask.labels();
  for (Index start = 0; start < mask.voxels(); ++start) {
    if (lab[static_cast<std::size_t>(start)] == 0 || out.ids[static_cast<std::size_t>(start)] != 0) continue;
    const auto id = static_cast<std::int32_t>(out.sizes.size() + 1);
    Index size = 0;
    queue.assign(1, start);
    out.ids[static_cast<std::size_t>(start)] = id;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const Index v = queue[q];
      ++size;
      const Index i = v / (w * d), j = (v / d) % w, k = v % d;
      for (const auto& o : offsets) {
        const Index ni = i + o[0], nj = j + o[1], nk = k + o[2];
        if (ni < 0 || ni >= h || nj < 0 || nj >= w || nk < 0 || nk >= d) continue;
        const Index n = (ni * w + nj) * d + nk;
        if (lab[static_cast<std::size_t>(n)] == 0 || out.ids[static_cast<std::size_t>(n)] != 0) continue;
        out.ids[static_cast<std::size_t>(n)] = id;
        queue.push_back(n);
      }
    }
    out.sizes.push_back(size);
  }
  return out;
}

double dsc(const LabelVolume& pred, const LabelVolume& gt) {
  require_same_extent(pred, gt, "dsc");
  Index inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.labels().size(); ++i) {
    const bool a = pred.labels()[i] != 0, b = gt.labels()[i] != 0;
    p += a;
    g += b;
    inter += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

double cc_dsc(const LabelVolume& pred, const LabelVolume& gt, Connectivity conn) {
  require_same_extent(pred, gt, "cc_dsc");
  const auto pc = connected_components(pred, conn), gc = connected_components(gt, conn);
  if (pc.count() == 0 && gc.count() == 0) return 1.0;

  std::vector<std::set<std::int32_t>> touching(static_cast<std::size_t>(gc.count()));
  std::vector<Index> overlap(static_cast<std::size_t>(gc.count()), 0);
  std::vector<bool> pred_hits(static_cast<std::size_t>(pc.count()), false);
  for (std::size_t v = 0; v < gc.ids.size(); ++v) {
    const auto g = gc.ids[v], p = pc.ids[v];
    if (g == 0 || p == 0) continue;
    touching[static_cast<std::size_t>(g - 1)].insert(p);
    ++overlap[static_cast<std::size_t>(g - 1)];
    pred_hits[static_cast<std::size_t>(p - 1)] = true;
  }

  double total = 0.0;
  std::size_t terms = 0;
  for (int g = 0; g < gc.count(); ++g, ++terms) {
    Index union_size = 0;
    for (auto p : touching[static_cast<std::size_t>(g)]) union_size += pc.sizes[static_cast<std::size_t>(p - 1)];
    total += 2.0 * static_cast<double>(overlap[static_cast<std::size_t>(g)]) /
             static_cast<double>(gc.sizes[static_cast<std::size_t>(g)] + union_size);
  }
  for (bool hit : pred_hits)
    if (!hit) ++terms;
  return total / static_cast<double>(terms);
}

double voxel_volume_ml(const Spacing& s) { return s[0] * s[1] * s[2] / 1000.0; }

namespace {

// Voxel count of components in `of` that share no voxel with `other`.
Index unmatched_voxels(const LabelVolume& of, const LabelVolume& other, Connectivity conn) {
  const auto comps = connected_components(of, conn);
  std::vector<bool> hit(static_cast<std::size_t>(comps.count()), false);
  for (std::size_t v = 0; v < comps.ids.size(); ++v)
    if (comps.ids[v] != 0 && other.labels()[v] != 0) hit[static_cast<std::size_t>(comps.ids[v] - 1)] = true;
  Index n = 0;
  for (int c = 0; c < comps.count(); ++c)
    if (!hit[static_cast<std::size_t>(c)]) n += comps.sizes[static_cast<std::size_t>(c)];
  return n;
}

}  // namespace

double fpv(const LabelVolume& pred, const LabelVolume& gt, const Spacing& spacing, Connectivity conn) {
  require_same_extent(pred, gt, "fpv");
  return static_cast<double>(unmatched_voxels(pred, gt, conn)) * voxel_volume_ml(spacing);
}

double fnv(const LabelVolume& pred, const LabelVolume& gt, const Spacing& spacing, Connectivity conn) {
  require_same_extent(pred, gt, "fnv");
  return static_cast<double>(unmatched_voxels(gt, pred, conn)) * voxel_volume_ml(spacing);
}

MetricsRecord evaluate_case(const std::string& id, const LabelVolume& pred, const LabelVolume& gt,
                            const Spacing& spacing) {
  return {id, dsc(pred, gt), cc_dsc(pred, gt), fpv(pred, gt, spacing), fnv(pred, gt, spacing)};
}

MetricSummary summarize(const std::vector<MetricsRecord>& records) {
  MetricSummary s;
  s.count = records.size();
  if (records.empty()) return s;
  auto field = [](const MetricsRecord& r, int m) {
    switch (m) {
      case 0: return r.dsc;
      case 1: return r.cc_dsc;
      case 2: return r.fpv;
      default: return r.fnv;
    }
  };
  for (int m = 0; m < 4; ++m) {
    double sum = 0.0;
    for (const auto& r : records) sum += field(r, m);
    const double mean = sum / static_cast<double>(records.size());
    double ss = 0.0;
    for (const auto& r : records) ss += (field(r, m) - mean) * (field(r, m) - mean);
    s.mean[static_cast<std::size_t>(m)] = mean;
    s.stddev[static_cast<std::size_t>(m)] = records.size() > 1 ? std::sqrt(ss / static_cast<double>(records.size() - 1)) : 0.0;
  }
  return s;
}

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw WriteError("cannot write " + path.string());
  out << "patient_id,dsc,cc_dsc,fpv_ml,fnv_ml\n";
  for (const auto& r : records)
    out << r.patient_id << ',' << fmt(r.dsc) << ',' << fmt(r.cc_dsc) << ',' << fmt(r.fpv) << ',' << fmt(r.fnv) << '\n';
  if (!out) throw WriteError("failed writing " + path.string());
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "patient_id,dsc,cc_dsc,fpv_ml,fnv_ml")
    throw FormatError("unexpected metrics header in " + path.string());
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw FormatError("malformed metrics row: " + line);
    MetricsRecord r;
    r.patient_id = cells[0];
    double* fields[] = {&r.dsc, &r.cc_dsc, &r.fpv, &r.fnv};
    for (int i = 0; i < 4; ++i) {
      const auto& c = cells[static_cast<std::size_t>(i + 1)];
      auto res = std::from_chars(c.data(), c.data() + c.size(), *fields[i]);
      if (res.ec != std::errc() || res.ptr != c.data() + c.size()) throw FormatError("bad number '" + c + "'");
    }
    out.push_back(r);
  }
  return out;
}

std::vector<int> competition_ranks(const std::vector<double>& values, bool higher_is_better) {
  std::vector<int> ranks(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    int better = 0;
    for (std::size_t j = 0; j < values.size(); ++j)
      better += higher_is_better ? values[j] > values[i] : values[j] < values[i];
    ranks[i] = better + 1;
  }
  return ranks;
}

RankTable rank_configurations(const std::vector<ConfigMeans>& table) {
  if (table.size() < 2) throw InputError("ranking needs at least two configurations");
  RankTable t;
  for (const auto& c : table) {
    std::array<double, 4> m{};
    for (std::size_t k = 0; k < 4; ++k) {
      auto it = c.means.find(kMetricNames[k]);
      if (it == c.means.end()) throw InputError("configuration '" + c.name + "' lacks metric " + kMetricNames[k]);
      m[k] = it->second;
    }
    t.configurations.push_back(c.name);
    t.means.push_back(m);
  }
  const std::size_t n = table.size();
  t.ranks.assign(n, {});
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = t.means[i][k];
    const auto r = competition_ranks(col, k < 2);
    for (std::size_t i = 0; i < n; ++i) t.ranks[i][k] = r[i];
  }
  for (const auto& r : t.ranks) t.avg_rank.push_back((r[0] + r[1] + r[2] + r[3]) / 4.0);
  t.final_rank = competition_ranks(t.avg_rank, false);
  return t;
}

void write_rank_csv(const RankTable& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw WriteError("cannot write " + path.string());
  out << "configuration,dsc,cc_dsc,fpv_ml,fnv_ml,rank_dsc,rank_cc_dsc,rank_fpv,rank_fnv,avg_rank,final_rank\n";
  for (std::size_t i = 0; i < t.configurations.size(); ++i) {
    out << t.configurations[i];
    for (double m : t.means[i]) out << ',' << fmt(m);
    for (int r : t.ranks[i]) out << ',' << r;
    out << ',' << fmt(t.avg_rank[i]) << ',' << t.final_rank[i] << '\n';
  }
  if (!out) throw WriteError("failed writing " + path.string());
}

template <typename Scalar>
double cosine_similarity(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("cosine_similarity: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.size() == 0) throw ShapeError("cosine_similarity: empty input");
  const Index batch = a.rank() > 1 ? a.dim(0) : 1, per = a.size() / batch;
  double total = 0.0;
  for (Index s = 0; s < batch; ++s) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (Index i = s * per; i < (s + 1) * per; ++i) {
      const double x = a[i], y = b[i];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) {
      spdlog::warn("cosine_similarity: zero vector in batch element {}", s);
      continue;
    }
    total += std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  }
  return total / static_cast<double>(batch);
}

template double cosine_similarity(const Tensor<float>&, const Tensor<float>&);
template double cosine_similarity(const Tensor<double>&, const Tensor<double>&);

}  // namespace grasp
