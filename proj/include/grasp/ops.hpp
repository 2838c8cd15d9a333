#pragma once

// Differentiable tensor operations. Feature maps are (B, C, spatial...) with any number
// of spatial axes flattened where the op does not care about geometry; the volumetric
// ops (conv3d, pooling, upsampling) require exactly (B, C, H, W, D).

#include "grasp/autograd.hpp"

#include <array>

namespace grasp {

template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);
template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& a);

template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar slope = Scalar(0.01));
template <typename Scalar> Var<Scalar> sigmoid(const Var<Scalar>& x);

/// Same-padded stride-1 3D convolution. weight: (Cout, Cin, k, k, k), k odd; bias: (Cout) or undefined.
template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

/// 2x2x2 max pooling with stride 2; extents must be even.
template <typename Scalar> Var<Scalar> max_pool2(const Var<Scalar>& x);

/// Trilinear x2 upsampling, half-pixel centers with edge clamping.
template <typename Scalar> Var<Scalar> upsample2(const Var<Scalar>& x);

/// Per-sample, per-channel normalization over space with affine (C) gamma/beta.
template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                          Scalar eps = Scalar(1e-5));

/// Per-sample, per-position normalization across channels with affine (C) gamma/beta.
template <typename Scalar>
Var<Scalar> layer_norm_channels(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                                Scalar eps = Scalar(1e-5));

template <typename Scalar> Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b);

/// Channel `c` of x as a (B, 1, spatial...) map.
template <typename Scalar> Var<Scalar> select_channel(const Var<Scalar>& x, Index c);

/// Sample `b` of x as a (1, ...) tensor.
template <typename Scalar> Var<Scalar> select_batch(const Var<Scalar>& x, Index b);

/// Adaptive average pooling of a (B, C, H, W, D) map to the given extents. Window for
/// output index i spans [floor(i*in/out), ceil((i+1)*in/out)).
template <typename Scalar>
Var<Scalar> adaptive_avg_pool(const Var<Scalar>& x, const std::array<Index, 3>& out_extent);

/// Stacks the channel-wise mean and max: (B, C, ...) -> (B, 2, ...).
template <typename Scalar> Var<Scalar> channel_mean_max(const Var<Scalar>& x);

/// Mean over space: (B, C, ...) -> (B, C).
template <typename Scalar> Var<Scalar> global_avg_pool(const Var<Scalar>& x);

/// z (B, C, ...) times a per-position map m (B, 1, ...).
template <typename Scalar> Var<Scalar> mul_spatial(const Var<Scalar>& z, const Var<Scalar>& m);

/// z (B, C, ...) times a per-channel scale s (B, C).
template <typename Scalar> Var<Scalar> mul_channel(const Var<Scalar>& z, const Var<Scalar>& s);

/// x (B, Cin) -> x W^T + b, W: (Cout, Cin), b: (Cout).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

/// Multi-head scaled dot-product attention on channel-major token blocks.
/// q: (B, C, Nq...), k and v: (B, C, Nk...). Output has the shape of q. Scale 1/sqrt(C/heads).
template <typename Scalar>
Var<Scalar> multi_head_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads);

/// Attention probabilities for inspection: (B, heads, Nq, Nk) with rows summing to one.
template <typename Scalar>
Tensor<Scalar> attention_weights(const Tensor<Scalar>& q, const Tensor<Scalar>& k, int heads);

/// delta * o + (1 - delta) * z with delta = sigmoid(w), w a one-element tensor.
template <typename Scalar>
Var<Scalar> gated_sum(const Var<Scalar>& o, const Var<Scalar>& z, const Var<Scalar>& w);

}  // namespace grasp
