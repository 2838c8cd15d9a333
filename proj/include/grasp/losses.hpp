#pragma once

#include "grasp/autograd.hpp"
#include "grasp/volume.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace grasp {

enum class LossKind { standard_dicece, tumor_focused, patch_aware, multitask };

std::string to_string(LossKind k);
LossKind parse_loss_kind(const std::string& s);

struct PatchAwareWeights {
  double absent = 0.0;
  double anatomy_present = 1.0;
  double tumor = 5.0;
};

struct LossConfig {
  LossKind kind = LossKind::standard_dicece;
  double tumor_weight = 10.0;
  PatchAwareWeights patch_aware_weights;
  double alpha = 0.8;
  double ema_decay = 0.99;

  void validate() const;
};

/// Running loss means for the normalised multitask objective.
struct LossState {
  double mu_path = 0.0;
  double mu_ana = 0.0;
  bool initialized = false;
};

/// Dense integer targets shaped (B, H, W, D).
struct LabelBatch {
  Index batch = 0;
  Extent extent{0, 0, 0};
  int num_classes = 0;
  std::vector<std::uint16_t> labels;

  Index voxels() const { return extent[0] * extent[1] * extent[2]; }
  static LabelBatch stack(const std::vector<const LabelVolume*>& items);
  LabelVolume item(Index b) const;
};

inline constexpr double kDiceSmooth = 1e-5;

/// Weighted soft Dice over the whole batch per class plus weighted cross-entropy, both
/// on softmax probabilities of `logits` (B, C, H, W, D).
/// Dice term: sum_c w_c (1 - D_c) / sum_c w_c. CE term: sum_i w_{y_i} (-log p_{y_i}) / sum_i w_{y_i}.
template <typename Scalar>
Var<Scalar> dice_ce(const Var<Scalar>& logits, const LabelBatch& target, const std::vector<double>& class_weights);

/// Uniform weights of length `num_classes`.
std::vector<double> uniform_weights(int num_classes);

/// Uniform weights with the last (tumour) class raised to `tumor_weight`.
std::vector<double> tumor_focused_weights(int num_classes, double tumor_weight);

/// Background 1, organs present in the patch `anatomy_present`, absent organs `absent`,
/// tumour class (last) `tumor` whether present or not.
std::vector<double> patch_aware_weights(const LabelVolume& target_patch, const LossConfig& cfg);

/// Class weights for a binary pathology head or a multiclass head under `cfg.kind`.
/// Patch-aware weights need per-patch targets and are handled by `weighted_loss`.
std::vector<double> class_weights_for(const LossConfig& cfg, int num_classes);

/// dice_ce with weights chosen by `cfg.kind`; the patch-aware kind evaluates each batch
/// element with its own weights and averages.
template <typename Scalar>
Var<Scalar> weighted_loss(const Var<Scalar>& logits, const LabelBatch& target, const LossConfig& cfg);

/// alpha * L_path / mu_path + (1 - alpha) * L_ana / mu_ana. The first call sets the means
/// to the observed values; afterwards they track an exponential moving average, updated
/// after the combined value is formed. Throws DivergenceError on non-finite input.
template <typename Scalar>
Var<Scalar> multitask_loss(const Var<Scalar>& path_loss, const Var<Scalar>& ana_loss, LossState& state, double alpha,
                           double ema_decay = 0.99);

}  // namespace grasp
