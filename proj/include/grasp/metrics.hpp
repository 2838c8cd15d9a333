#pragma once

#include "grasp/tensor.hpp"
#include "grasp/volume.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace grasp {

enum class Connectivity { six = 6, twenty_six = 26 };

/// Component id per voxel (0 = background, ids 1..count in scan order of first voxel).
struct Components {
  Extent extent{0, 0, 0};
  std::vector<std::int32_t> ids;
  std::vector<Index> sizes;  // sizes[id - 1]

  int count() const { return static_cast<int>(sizes.size()); }
};

/// Labels the nonzero voxels of a mask.
Components connected_components(const LabelVolume& mask, Connectivity conn = Connectivity::twenty_six);

/// 2|P and G| / (|P| + |G|); 1 when both are empty.
double dsc(const LabelVolume& pred, const LabelVolume& gt);

/// Mean over per-lesion terms: each ground-truth component scores the Dice against the
/// union of predicted components touching it, each predicted component touching no
/// lesion scores 0. Both empty gives 1.
double cc_dsc(const LabelVolume& pred, const LabelVolume& gt, Connectivity conn = Connectivity::twenty_six);

/// Millilitres of predicted components with no ground-truth overlap.
double fpv(const LabelVolume& pred, const LabelVolume& gt, const Spacing& spacing,
           Connectivity conn = Connectivity::twenty_six);

/// Millilitres of ground-truth components with no predicted overlap.
double fnv(const LabelVolume& pred, const LabelVolume& gt, const Spacing& spacing,
           Connectivity conn = Connectivity::twenty_six);

double voxel_volume_ml(const Spacing& spacing);

struct MetricsRecord {
  std::string patient_id;
  double dsc = 0.0;
  double cc_dsc = 0.0;
  double fpv = 0.0;  // mL
  double fnv = 0.0;  // mL
};

MetricsRecord evaluate_case(const std::string& id, const LabelVolume& pred, const LabelVolume& gt,
                            const Spacing& spacing);

struct MetricSummary {
  std::array<double, 4> mean{};  // dsc, cc_dsc, fpv, fnv
  std::array<double, 4> stddev{};
  std::size_t count = 0;
};

inline const std::array<std::string, 4> kMetricNames{"dsc", "cc_dsc", "fpv", "fnv"};

/// Means and sample standard deviations over records.
MetricSummary summarize(const std::vector<MetricsRecord>& records);

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

/// Competition ranks (ties share the minimum rank of their group).
std::vector<int> competition_ranks(const std::vector<double>& values, bool higher_is_better);

struct ConfigMeans {
  std::string name;
  std::map<std::string, double> means;  // keys from kMetricNames
};

struct RankTable {
  std::vector<std::string> configurations;
  std::vector<std::array<double, 4>> means;
  std::vector<std::array<int, 4>> ranks;
  std::vector<double> avg_rank;
  std::vector<int> final_rank;
};

/// Per-metric competition ranks (DSC and CC-DSC higher is better, FPV and FNV lower),
/// averaged, then competition-ranked ascending. Throws InputError on fewer than two
/// configurations or a missing metric.
RankTable rank_configurations(const std::vector<ConfigMeans>& table);

void write_rank_csv(const RankTable& t, const std::filesystem::path& path);

/// Cosine of the flattened per-sample vectors, averaged over the batch. A zero operand
/// contributes 0 and logs a warning.
template <typename Scalar>
double cosine_similarity(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

}  // namespace grasp
