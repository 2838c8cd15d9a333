#pragma once

#include "grasp/volume.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace grasp {

struct IntRange {
  int lo = 0;
  int hi = 0;
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Synthetic PET/CT phantom parameters. Hot organs carry high physiological uptake
/// (plus focal hot spots) but never tumors; tumors only grow inside host organs.
struct PhantomConfig {
  Extent grid{64, 64, 64};
  Spacing spacing{2.0, 2.0, 2.0};
  int num_organs = 5;
  std::vector<int> hot_organ_ids{1, 2};
  std::vector<int> tumor_host_ids{3, 4, 5};
  IntRange tumors_per_case{0, 4};
  IntRange tumor_radius_voxels{2, 4};
  double healthy_fraction = 0.2;
  double noise_sigma = 0.5;  // additive PET noise, uptake units
  std::uint64_t seed = 0;

  RealRange organ_radius_voxels{6.0, 10.0};
  IntRange hot_spots_per_organ{1, 2};
  double ct_noise_sigma = 15.0;  // HU
  double body_uptake = 1.0;
  double host_uptake = 1.5;
  double hot_uptake = 3.5;
  RealRange hot_spot_uptake{4.2, 4.7};
  RealRange tumor_uptake{5.0, 6.0};
  int max_retries = 500;

  /// Throws ConfigError on overlapping hot/host sets, out-of-range ids or bad ranges.
  void validate() const;
  bool is_hot(int organ) const;
  bool is_host(int organ) const;
};

struct Ellipsoid {
  std::array<double, 3> centre{};
  std::array<double, 3> radii{};
  int label = 0;
  double ct_mean = 0.0;
};

struct Sphere {
  std::array<Index, 3> centre{};
  int radius = 0;
  int host = 0;
  double uptake = 0.0;
};

struct PhantomProvenance {
  int case_index = 0;
  bool healthy = false;
  std::vector<Ellipsoid> organs;
  std::vector<Sphere> tumors;
  std::vector<Sphere> hot_spots;
  Volume uptake;  // noise-free PET
};

struct PhantomCase {
  Sample sample;
  PhantomProvenance provenance;
};

/// CT organ band centre (HU) for organ id. Hot and host organs interleave so that the
/// tumour-permitting organs are not a threshold on CT intensity.
double organ_ct_mean(int organ);

/// Deterministic in (cfg.seed, case_index).
PhantomCase generate_case(const PhantomConfig& cfg, int case_index);

struct ManifestRecord {
  std::string id;
  std::string split;  // "train" or "val"
  int n_tumors = 0;
  std::filesystem::path ct, pet, ana, path;
};

struct Manifest {
  std::vector<ManifestRecord> records;
  std::filesystem::path root;
  std::string digest;  // FNV-1a over manifest text and every referenced file

  std::vector<const ManifestRecord*> split(const std::string& name) const;
};

/// Writes cases/ and manifest.tsv under `out_dir`. Training cases take indices
/// [0, n_train), validation cases [n_train, n_train + n_val).
Manifest generate_dataset(const PhantomConfig& cfg, int n_train, int n_val, const std::filesystem::path& out_dir);

/// Reads manifest.tsv (paths relative to its directory).
Manifest read_manifest(const std::filesystem::path& manifest_path);

Sample load_sample(const ManifestRecord& r, const std::filesystem::path& root);

/// Reassigns 6-neighbourhood boundary voxels to a differing neighbour label with
/// probability `error_rate`; decisions are taken on the input map.
LabelVolume degrade_pseudolabels(const LabelVolume& ana, double error_rate, std::uint64_t rng_seed);

/// Voxels with at least one 6-neighbour carrying a different label.
std::vector<Index> boundary_voxels(const LabelVolume& ana);

}  // namespace grasp
