#pragma once

#include "grasp/errors.hpp"
#include "grasp/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace grasp {

using Extent = std::array<Index, 3>;
using Spacing = std::array<double, 3>;

/// Channel-major scalar field (C, H, W, D) with millimetre voxel spacing.
class Volume {
 public:
  Volume() = default;
  Volume(Tensor<float> data, Spacing spacing);
  Volume(Index channels, Extent extent, Spacing spacing, float fill = 0.0f);

  const Tensor<float>& data() const { return data_; }
  Tensor<float>& data() { return data_; }
  const Spacing& spacing() const { return spacing_; }
  Index channels() const { return data_.dim(0); }
  Extent extent() const { return {data_.dim(1), data_.dim(2), data_.dim(3)}; }
  Index voxels() const { return data_.dim(1) * data_.dim(2) * data_.dim(3); }

  float& at(Index c, Index i, Index j, Index k) { return data_[((c * data_.dim(1) + i) * data_.dim(2) + j) * data_.dim(3) + k]; }
  float at(Index c, Index i, Index j, Index k) const {
    return data_[((c * data_.dim(1) + i) * data_.dim(2) + j) * data_.dim(3) + k];
  }

 private:
  Tensor<float> data_;
  Spacing spacing_{1.0, 1.0, 1.0};
};

/// Integer label map (H, W, D); every label < num_classes.
class LabelVolume {
 public:
  LabelVolume() = default;
  LabelVolume(Extent extent, int num_classes);
  LabelVolume(Extent extent, int num_classes, std::vector<std::uint16_t> labels);

  const Extent& extent() const { return extent_; }
  int num_classes() const { return num_classes_; }
  Index voxels() const { return extent_[0] * extent_[1] * extent_[2]; }
  const std::vector<std::uint16_t>& labels() const { return labels_; }
  std::vector<std::uint16_t>& labels() { return labels_; }

  Index index(Index i, Index j, Index k) const { return (i * extent_[1] + j) * extent_[2] + k; }
  std::uint16_t at(Index i, Index j, Index k) const { return labels_[static_cast<std::size_t>(index(i, j, k))]; }
  std::uint16_t& at(Index i, Index j, Index k) { return labels_[static_cast<std::size_t>(index(i, j, k))]; }

  /// Throws FormatError if any label >= num_classes.
  void validate() const;
  Index count_nonzero() const;

 private:
  Extent extent_{0, 0, 0};
  int num_classes_ = 1;
  std::vector<std::uint16_t> labels_;
};

/// One patient: aligned CT, PET, optional organ pseudo-labels and binary lesion mask.
struct Sample {
  std::string id;
  Volume ct;
  Volume pet;
  std::optional<LabelVolume> ana;
  LabelVolume path;
  Spacing spacing{1.0, 1.0, 1.0};

  /// Checks shared shape/spacing and binary lesion labels.
  void validate() const;
};

struct Patch {
  Volume inputs;  // CT, PET and optionally the scaled pseudo-label channel
  LabelVolume target_path;
  std::optional<LabelVolume> target_ana;
  Extent origin{0, 0, 0};
  bool positive = false;
};

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path);
void save_labels(const LabelVolume& v, const std::filesystem::path& path);

/// Single channel with label / max(num_classes - 1, 1).
Volume encode_label_channel(const LabelVolume& ana, const Spacing& spacing = {1.0, 1.0, 1.0});

struct PosNegRatio {
  int positive = 2;
  int negative = 1;
};

/// Deterministic patch draw. With lesions present, round(n * pos / (pos + neg)) patches are
/// centred on a random lesion voxel (jittered by up to a quarter patch, clamped); the
/// rest are uniform. Healthy samples yield only uniform patches. When
/// `with_label_channel` is set the encoded pseudo-labels become a third input channel.
std::vector<Patch> sample_patches(const Sample& s, const Extent& patch_size, int n, PosNegRatio ratio,
                                  std::uint64_t rng_seed, bool with_label_channel = false);

/// Crops every channel of a Sample at `origin` into a Patch.
Patch extract_patch(const Sample& s, const Extent& origin, const Extent& size, bool with_label_channel);

enum class Modality { ct, pet };

struct NormalizationConfig {
  float ct_window_low = -200.0f;
  float ct_window_high = 400.0f;
  double pet_percentile = 99.5;
  float pet_clip = 1.5f;
};

/// CT: clip to window, then min-max to [0, 1]. PET: divide by the per-volume percentile
/// and clip to [0, pet_clip]. Constant volumes map to all zeros.
Volume normalize_intensities(const Volume& v, Modality kind, const NormalizationConfig& cfg = {});

/// Linear-interpolated percentile (q in [0, 100]) of all voxels.
double percentile(const Volume& v, double q);

}  // namespace grasp
