#pragma once

#include "grasp/backbone.hpp"
#include "grasp/fusion.hpp"
#include "grasp/losses.hpp"
#include "grasp/phantom.hpp"
#include "grasp/volume.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace grasp {

using Json = nlohmann::json;

enum class Strategy {
  baseline_2c,
  ana_in_3c,
  grasp_mirror,
  grasp_mixture,
  grasp_fusion_only,
  finetune,
  multiclass,
  multitask
};

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

/// Input channels fed to the pathology network (2 or 3).
int input_channels(Strategy s);
bool uses_fusion(Strategy s);
bool uses_label_channel(Strategy s);
bool needs_anatomy(Strategy s);

enum class PseudoLabelSource { ground_truth_organs, degraded };

struct TrainConfig {
  Strategy strategy = Strategy::baseline_2c;
  int epochs = 60;
  double lr = 1e-4;
  int batch_size = 4;
  double weight_decay = 1e-2;
  /// Negative: epochs / 6.
  int fusion_activation_epoch = -1;
  Extent patch_size{32, 32, 32};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  LossConfig loss;
  PseudoLabelSource pseudo_label_source = PseudoLabelSource::ground_truth_organs;
  double degrade_rate = 0.0;
  int patches_per_case = 3;
  /// Cases drawn per epoch; 0 uses every training case.
  int cases_per_epoch = 0;
  /// Patches in the fixed similarity-probe batch.
  int probe_patches = 2;
  std::filesystem::path anatomy_checkpoint;

  int activation_epoch() const { return fusion_activation_epoch >= 0 ? fusion_activation_epoch : epochs / 6; }
  void validate() const;
};

struct AnatomyConfig {
  int epochs = 20;
  double lr = 1e-3;
  int batch_size = 4;
  Extent patch_size{32, 32, 32};
  int patches_per_case = 2;
  int cases_per_epoch = 0;
  double min_organ_dice = 0.85;
  BackboneVariant variant = BackboneVariant::plain;

  void validate() const;
};

struct DataConfig {
  int n_train = 60;
  int n_val = 20;
  std::filesystem::path dataset_dir = "data";
};

struct ExperimentConfig {
  PhantomConfig phantom;
  DataConfig data;
  NormalizationConfig normalization;
  BackboneConfig backbone;
  FusionConfig fusion;
  TrainConfig train;
  AnatomyConfig anatomy;
  std::uint64_t seed = 0;
  bool deterministic = true;

  void validate() const;
};

Json to_json(const ExperimentConfig& c);
/// Unknown keys or wrongly typed values raise ConfigError.
ExperimentConfig from_json(const Json& j);

Json to_json(const BackboneConfig& c);
BackboneConfig backbone_from_json(const Json& j);
Json to_json(const FusionConfig& c);
FusionConfig fusion_from_json(const Json& j);

/// Applies "section.key=value" overrides (value parsed as JSON when possible, else as a string).
void apply_override(Json& tree, const std::string& assignment);

/// Reads a JSON config file; a missing path yields the defaults.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace grasp
