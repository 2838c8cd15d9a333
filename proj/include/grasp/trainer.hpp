#pragma once

#include "grasp/backbone.hpp"
#include "grasp/checkpoint.hpp"
#include "grasp/config.hpp"
#include "grasp/fusion.hpp"
#include "grasp/metrics.hpp"
#include "grasp/phantom.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace grasp {

/// Intensity-normalised cases held in memory.
struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  int num_organs = 0;
  std::string digest;
};

/// Loads a generated dataset, normalises CT and PET, and replaces the pseudo-labels
/// according to the configured source.
Dataset load_dataset(const ExperimentConfig& cfg, const std::filesystem::path& dir);

/// Network stack for one strategy: the pathology network, and for fusion strategies the
/// frozen anatomy network and the fusion module.
struct Model {
  Strategy strategy = Strategy::baseline_2c;
  Backbone<float> path;
  std::optional<Backbone<float>> anatomy;
  std::optional<Fusion<float>> fusion;

  /// Training forward: fused deepest levels when fusion is active. Returns primary logits.
  Var<float> forward(const Var<float>& x) const;
  /// Primary and auxiliary logits of the dual-decoder network.
  std::pair<Var<float>, Var<float>> forward_dual(const Var<float>& x) const;

  /// Per fused level (deepest first): the encoder map and its fused replacement.
  std::vector<std::pair<Var<float>, Var<float>>> fusion_pairs(const Var<float>& x) const;
};

/// Builds the model for `cfg.train.strategy`. Fusion strategies and finetune load the
/// anatomy checkpoint (DependencyError if missing).
Model build_model(const ExperimentConfig& cfg, int num_organs, std::uint64_t seed);

/// Pathology network configuration implied by the strategy.
BackboneConfig pathology_backbone(const ExperimentConfig& cfg, int num_organs);

/// Fusion setup implied by the strategy; grasp_fusion_only follows `fusion.setup`.
FusionSetup fusion_setup(const ExperimentConfig& cfg);

/// Anatomy network variant the strategy loads, or nullopt when it needs none.
std::optional<BackboneVariant> required_anatomy(const ExperimentConfig& cfg);

/// Network input for a full sample: CT, PET and (3-channel strategies) the encoded labels.
Volume sample_inputs(const Sample& s, int channels);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  bool fusion_active = false;
  std::vector<double> similarity;   // per fused level
  bool fusion_identity = false;     // fused map bit-identical to the encoder map on the probe
  double fusion_grad_max = 0.0;     // largest |gradient| seen on a fusion parameter
  double seconds = 0.0;
};

struct RunArtifact {
  std::filesystem::path dir;
  std::filesystem::path checkpoint;
  std::vector<EpochLog> epochs;
  std::vector<MetricsRecord> metrics;
  std::uint64_t seed = 0;
  std::string anatomy_digest_before;
  std::string anatomy_digest_after;
};

/// Trains the configured strategy for one seed and writes the run directory:
/// checkpoint.gckpt, epochs.csv, metrics.csv, config.json and run.json.
RunArtifact train(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed,
                  const std::filesystem::path& out_dir);

/// Trains a CT-only organ segmenter, checks the validation organ Dice gate, freezes it and
/// writes `anatomy_<variant>.gckpt` under `out_dir`. Throws UndertrainedAnatomyError below the gate.
Backbone<float> pretrain_anatomy(const ExperimentConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir);

std::filesystem::path anatomy_checkpoint_name(BackboneVariant v);

/// Mean Dice over organ classes, per case, averaged over cases.
double mean_organ_dice(const Backbone<float>& anatomy, const std::vector<Sample>& samples, const Extent& window);

/// Logits for a (1, C, H, W, D) input from windows of `window` voxels at half-window stride,
/// averaged where windows overlap. Axes shorter than the window are taken whole; a zero
/// window evaluates the full volume in one pass.
Tensor<float> window_logits(const Backbone<float>& net, const Tensor<float>& input, const Extent& window);

/// Binary lesion masks from the pathology network alone.
LabelVolume predict(const Backbone<float>& net, Strategy strategy, const Volume& inputs, const Extent& window);

/// Loads the pathology branch of a checkpoint; anatomy and fusion entries are ignored.
std::vector<LabelVolume> infer(const Checkpoint& ckpt, const std::vector<Sample>& samples);

std::vector<MetricsRecord> evaluate(const std::vector<std::string>& ids, const std::vector<LabelVolume>& predictions,
                                    const std::vector<Sample>& ground_truth);

/// Parses a run's epochs.csv back into epoch logs.
std::vector<EpochLog> read_epochs_csv(const std::filesystem::path& path);

/// Per-configuration runs loaded back from disk.
struct ConfigRuns {
  std::string name;
  std::vector<std::filesystem::path> run_dirs;
};

struct ReportSummary {
  RankTable ranks;
  std::vector<MetricSummary> per_config;
};

/// Rank CSV, text table, similarity and loss-curve plots under `out_dir`.
ReportSummary report(const std::vector<ConfigRuns>& configs, const std::filesystem::path& out_dir);

/// Synthesises data if needed, pretrains anatomy models if needed, trains every
/// strategy for every seed (reusing finished runs) and writes the report.
ReportSummary compare(const ExperimentConfig& cfg, const std::vector<Strategy>& strategies,
                      const std::filesystem::path& out_dir);

}  // namespace grasp
