#pragma once

#include "grasp/ops.hpp"
#include "grasp/parameters.hpp"

#include <string>
#include <utility>
#include <vector>

namespace grasp {

enum class BackboneVariant { plain, residual };

/// Encoder-decoder layout. Widths double per level starting at `base_width`.
/// `aux_out_classes > 0` adds a second decoder sharing the encoder.
struct BackboneConfig {
  int in_channels = 2;
  int out_classes = 2;
  int depth = 4;
  int base_width = 16;
  BackboneVariant variant = BackboneVariant::plain;
  int aux_out_classes = 0;

  void validate() const;
  int width(int level) const { return base_width << level; }
  int divisor() const { return 1 << (depth - 1); }
  bool dual() const { return aux_out_classes > 0; }
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

std::string to_string(BackboneVariant v);
BackboneVariant parse_variant(const std::string& s);

/// 3D U-Net style segmentation network: per level two 3x3x3 convolutions with instance
/// normalisation and leaky ReLU (identity/projection skip inside the block for the
/// residual variant), 2x max-pool downsampling, and decoders that project channels with
/// a 1x1x1 convolution, upsample trilinearly and merge the skip by concatenation.
template <typename Scalar>
class Backbone {
 public:
  enum class Head { primary, aux };

  Backbone() = default;
  static Backbone create(const BackboneConfig& cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

  /// Throws ShapeError naming the axis that is not divisible by 2^(depth-1), or on a
  /// channel-count mismatch.
  void check_input(const Shape& shape) const;

  /// Encoder features for every level, shallowest first.
  std::vector<Var<Scalar>> encode_all(const Var<Scalar>& x) const;
  /// The two deepest encoder features, deepest first.
  std::vector<Var<Scalar>> encode(const Var<Scalar>& x) const;
  /// Decoder from a full shallow-first feature list.
  Var<Scalar> decode(const std::vector<Var<Scalar>>& features, Head head = Head::primary) const;

  Var<Scalar> forward(const Var<Scalar>& x) const;
  /// (pathology logits, anatomy logits) from the shared encoder.
  std::pair<Var<Scalar>, Var<Scalar>> forward_dual(const Var<Scalar>& x) const;

  template <typename Other>
  Backbone<Other> cast() const {
    Backbone<Other> out;
    out.cfg_ = cfg_;
    out.params_ = params_.template cast<Other>();
    return out;
  }

 private:
  template <typename>
  friend class Backbone;

  Var<Scalar> conv(const std::string& prefix, const Var<Scalar>& x) const;
  Var<Scalar> norm_act(const std::string& prefix, const Var<Scalar>& x) const;
  Var<Scalar> block(const std::string& prefix, const Var<Scalar>& x) const;

  BackboneConfig cfg_;
  ParameterSet<Scalar> params_;
};

/// Marks every parameter frozen (no gradient, never updated).
template <typename Scalar>
Backbone<Scalar>& freeze(Backbone<Scalar>& net) {
  net.params().set_frozen(true);
  return net;
}

template <typename Scalar>
Backbone<Scalar>& unfreeze(Backbone<Scalar>& net) {
  net.params().set_frozen(false);
  return net;
}

/// Builds a two-channel (CT, PET) pathology network from a CT-only anatomy network:
/// CT-channel first-layer kernels and every deeper layer are copied, PET-channel kernels
/// and the output head are freshly initialised.
Backbone<float> init_finetune(const Backbone<float>& anatomy, const BackboneConfig& target, std::uint64_t seed);

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace grasp
