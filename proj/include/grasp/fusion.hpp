#pragma once

#include "grasp/ops.hpp"
#include "grasp/parameters.hpp"

#include <string>
#include <vector>

namespace grasp {

enum class FusionSetup { mirror, mixture };

std::string to_string(FusionSetup s);
FusionSetup parse_setup(const std::string& s);

struct FusionConfig {
  int heads = 8;
  int sa_kernel = 3;
  int se_reduction = 4;
  double gate_init = 0.0;
  int fusion_depth = 2;
  FusionSetup setup = FusionSetup::mirror;

  void validate() const;
};

/// Pointwise projection (1x1x1 convolution).
template <typename Scalar>
struct Projection {
  Var<Scalar> weight;  // (Cout, Cin, 1, 1, 1)
  Var<Scalar> bias;    // (Cout)
};

template <typename Scalar>
struct SpatialAttentionParams {
  Var<Scalar> weight;  // (1, 2, k, k, k)
  Var<Scalar> bias;    // (1)
};

template <typename Scalar>
struct SqueezeExcitationParams {
  Var<Scalar> reduce_weight, reduce_bias;  // (C/r, C), (C/r)
  Var<Scalar> expand_weight, expand_bias;  // (C, C/r), (C)
};

/// One attention stage: projections, output projection and the post-residual norm.
template <typename Scalar>
struct AttentionStageParams {
  Projection<Scalar> query, key, value, output;
  Var<Scalar> norm_gamma, norm_beta;
};

template <typename Scalar>
struct AttendParams {
  AttentionStageParams<Scalar> self_stage;
  AttentionStageParams<Scalar> cross_stage;
  int heads = 8;
};

/// 1x1x1 projection of z_ana to `target`'s channel count, then adaptive average pooling
/// to its spatial extents. `target` is (C, H, W, D) or (B, C, H, W, D).
template <typename Scalar>
Var<Scalar> align(const Var<Scalar>& z_ana, const Shape& target, const Projection<Scalar>& proj);

template <typename Scalar>
Var<Scalar> spatial_attention(const Var<Scalar>& z, const SpatialAttentionParams<Scalar>& p);

/// Channel gate s in (0, 1)^C from the squeezed input.
template <typename Scalar>
Var<Scalar> channel_gate(const Var<Scalar>& z, const SqueezeExcitationParams<Scalar>& p);

template <typename Scalar>
Var<Scalar> squeeze_excitation(const Var<Scalar>& z, const SqueezeExcitationParams<Scalar>& p);

/// Self-attention over the query tokens, then cross-attention against the anatomy
/// tokens, each followed by a residual connection and channel layer norm.
template <typename Scalar>
Var<Scalar> attend(const Var<Scalar>& z_path_hat, const Var<Scalar>& z_ana_hat, const AttendParams<Scalar>& p);

/// Fusion stack for the deepest encoder levels. Level 0 is the deepest.
template <typename Scalar>
class Fusion {
 public:
  Fusion() = default;
  /// `path_channels` / `ana_channels`: widths of the fused levels, deepest first.
  static Fusion create(const FusionConfig& cfg, const std::vector<int>& path_channels,
                       const std::vector<int>& ana_channels, std::uint64_t seed);

  const FusionConfig& config() const { return cfg_; }
  int levels() const { return static_cast<int>(path_channels_.size()); }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

  bool active() const { return active_; }
  void set_active(bool on) { active_ = on; }

  /// sigmoid(w) of a level.
  double gate(int level) const;

  /// Fused map for one level; the input Var itself when inactive.
  Var<Scalar> fuse(int level, const Var<Scalar>& z_path, const Var<Scalar>& z_ana) const;

  /// Parameter bundles of a level, for direct use of the component ops.
  Projection<Scalar> align_params(int level) const;
  SpatialAttentionParams<Scalar> sa_params(int level, bool anatomy) const;
  SqueezeExcitationParams<Scalar> se_params(int level, bool anatomy) const;
  AttendParams<Scalar> attend_params(int level) const;

  template <typename Other>
  Fusion<Other> cast() const {
    Fusion<Other> out;
    out.cfg_ = cfg_;
    out.path_channels_ = path_channels_;
    out.ana_channels_ = ana_channels_;
    out.params_ = params_.template cast<Other>();
    out.active_ = active_;
    return out;
  }

 private:
  template <typename>
  friend class Fusion;

  std::string key(int level, const std::string& name) const;
  Projection<Scalar> projection(const std::string& prefix) const;

  FusionConfig cfg_;
  std::vector<int> path_channels_;
  std::vector<int> ana_channels_;
  ParameterSet<Scalar> params_;
  bool active_ = false;
};

extern template class Fusion<float>;
extern template class Fusion<double>;

}  // namespace grasp
