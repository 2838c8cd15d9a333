#include "grasp/fusion.hpp"

#include "grasp/errors.hpp"

#include <cmath>

namespace grasp {

std::string to_string(FusionSetup s) { return s == FusionSetup::mirror ? "mirror" : "mixture"; }

FusionSetup parse_setup(const std::string& s) {
  if (s == "mirror") return FusionSetup::mirror;
  if (s == "mixture") return FusionSetup::mixture;
  throw ConfigError("unknown fusion setup '" + s + "'");
}

void FusionConfig::validate() const {
  if (heads < 1) throw ConfigError("fusion heads must be >= 1");
  if (sa_kernel < 1 || sa_kernel % 2 == 0) throw ConfigError("fusion sa_kernel must be a positive odd number");
  if (se_reduction < 1) throw ConfigError("fusion se_reduction must be >= 1");
  if (fusion_depth != 1 && fusion_depth != 2) throw ConfigError("fusion_depth must be 1 or 2");
  if (!std::isfinite(gate_init)) throw ConfigError("fusion gate_init must be finite");
}

namespace {

template <typename Scalar>
Var<Scalar> project(const Var<Scalar>& x, const Projection<Scalar>& p) {
  return conv3d(x, p.weight, p.bias);
}

}  // namespace

template <typename Scalar>
Var<Scalar> align(const Var<Scalar>& z_ana, const Shape& target, const Projection<Scalar>& proj) {
  if (target.size() != 4 && target.size() != 5) throw ShapeError("align: target must be (C, H, W, D) or (B, C, H, W, D)");
  const std::size_t o = target.size() - 4;
  for (std::size_t a = o + 1; a < target.size(); ++a)
    if (target[a] < 1) throw ShapeError("align: target extent must be >= 1, got " + shape_str(target));
  if (proj.weight.dim(0) != target[o])
    throw ShapeError("align: projection yields " + std::to_string(proj.weight.dim(0)) + " channels, target wants " +
                     std::to_string(target[o]));
  return adaptive_avg_pool(project(z_ana, proj), {target[o + 1], target[o + 2], target[o + 3]});
}

template <typename Scalar>
Var<Scalar> spatial_attention(const Var<Scalar>& z, const SpatialAttentionParams<Scalar>& p) {
  const auto m = sigmoid(conv3d(channel_mean_max(z), p.weight, p.bias));
  return mul_spatial(z, m);
}

template <typename Scalar>
Var<Scalar> channel_gate(const Var<Scalar>& z, const SqueezeExcitationParams<Scalar>& p) {
  const auto squeezed = global_avg_pool(z);
  return sigmoid(linear(relu(linear(squeezed, p.reduce_weight, p.reduce_bias)), p.expand_weight, p.expand_bias));
}

template <typename Scalar>
Var<Scalar> squeeze_excitation(const Var<Scalar>& z, const SqueezeExcitationParams<Scalar>& p) {
  return mul_channel(z, channel_gate(z, p));
}

template <typename Scalar>
Var<Scalar> attend(const Var<Scalar>& z_path_hat, const Var<Scalar>& z_ana_hat, const AttendParams<Scalar>& p) {
  if (z_path_hat.shape() != z_ana_hat.shape())
    throw ShapeError("attend: shape mismatch " + shape_str(z_path_hat.shape()) + " vs " + shape_str(z_ana_hat.shape()));
  if (z_path_hat.dim(1) % p.heads != 0)
    throw ShapeError("attend: " + std::to_string(z_path_hat.dim(1)) + " channels not divisible by " +
                     std::to_string(p.heads) + " heads");
  const auto& s = p.self_stage;
  auto a = multi_head_attention(project(z_path_hat, s.query), project(z_path_hat, s.key), project(z_path_hat, s.value),
                                p.heads);
  const auto x = layer_norm_channels(add(z_path_hat, project(a, s.output)), s.norm_gamma, s.norm_beta);

  const auto& c = p.cross_stage;
  a = multi_head_attention(project(x, c.query), project(z_ana_hat, c.key), project(z_ana_hat, c.value), p.heads);
  return layer_norm_channels(add(x, project(a, c.output)), c.norm_gamma, c.norm_beta);
}

template <typename Scalar>
std::string Fusion<Scalar>::key(int level, const std::string& name) const {
  return "level" + std::to_string(level) + "." + name;
}

template <typename Scalar>
Fusion<Scalar> Fusion<Scalar>::create(const FusionConfig& cfg, const std::vector<int>& path_channels,
                                      const std::vector<int>& ana_channels, std::uint64_t seed) {
  cfg.validate();
  if (static_cast<int>(path_channels.size()) != cfg.fusion_depth || ana_channels.size() != path_channels.size())
    throw ConfigError("fusion expects " + std::to_string(cfg.fusion_depth) + " levels from each encoder");
  Fusion f;
  f.cfg_ = cfg;
  f.path_channels_ = path_channels;
  f.ana_channels_ = ana_channels;
  Rng rng(mix_seed(seed, 0xf5));
  auto& ps = f.params_;
  const std::string g = "fusion";
  auto conv = [&](const std::string& name, int cout, int cin, int k, double gain) {
    ps.add(name + ".weight", g, he_normal<Scalar>(Shape{cout, cin, k, k, k}, rng, gain));
    ps.add(name + ".bias", g, Tensor<Scalar>(Shape{cout}));
  };
  auto dense = [&](const std::string& name, int cout, int cin) {
    ps.add(name + ".weight", g, he_normal<Scalar>(Shape{cout, cin}, rng));
    ps.add(name + ".bias", g, Tensor<Scalar>(Shape{cout}));
  };
  for (int l = 0; l < cfg.fusion_depth; ++l) {
    const int c = path_channels[static_cast<std::size_t>(l)];
    if (c % cfg.heads != 0)
      throw ConfigError("fused width " + std::to_string(c) + " is not divisible by " + std::to_string(cfg.heads) + " heads");
    if (c % cfg.se_reduction != 0)
      throw ConfigError("fused width " + std::to_string(c) + " is not divisible by se_reduction " +
                        std::to_string(cfg.se_reduction));
    const int hidden = c / cfg.se_reduction;
    conv(f.key(l, "align"), c, ana_channels[static_cast<std::size_t>(l)], 1, 1.0);
    for (const char* stream : {"path", "ana"}) {
      conv(f.key(l, std::string("sa_") + stream), 1, 2, cfg.sa_kernel, 1.0);
      dense(f.key(l, std::string("se_") + stream + ".reduce"), hidden, c);
      dense(f.key(l, std::string("se_") + stream + ".expand"), c, hidden);
    }
    for (const char* stage : {"self", "cross"}) {
      for (const char* proj : {"query", "key", "value", "output"})
        conv(f.key(l, std::string(stage) + "." + proj), c, c, 1, 1.0);
      ps.add(f.key(l, std::string(stage) + ".norm.gamma"), g, Tensor<Scalar>(Shape{c}, Scalar(1)));
      ps.add(f.key(l, std::string(stage) + ".norm.beta"), g, Tensor<Scalar>(Shape{c}));
    }
    ps.add(f.key(l, "gate"), g, Tensor<Scalar>(Shape{1}, static_cast<Scalar>(cfg.gate_init)));
  }
  return f;
}

template <typename Scalar>
double Fusion<Scalar>::gate(int level) const {
  return 1.0 / (1.0 + std::exp(-static_cast<double>(params_[key(level, "gate")].value()[0])));
}

template <typename Scalar>
Projection<Scalar> Fusion<Scalar>::projection(const std::string& prefix) const {
  return {params_[prefix + ".weight"], params_[prefix + ".bias"]};
}

template <typename Scalar>
Projection<Scalar> Fusion<Scalar>::align_params(int level) const {
  return projection(key(level, "align"));
}

template <typename Scalar>
SpatialAttentionParams<Scalar> Fusion<Scalar>::sa_params(int level, bool anatomy) const {
  const auto p = projection(key(level, anatomy ? "sa_ana" : "sa_path"));
  return {p.weight, p.bias};
}

template <typename Scalar>
SqueezeExcitationParams<Scalar> Fusion<Scalar>::se_params(int level, bool anatomy) const {
  const std::string base = key(level, anatomy ? "se_ana" : "se_path");
  const auto r = projection(base + ".reduce"), e = projection(base + ".expand");
  return {r.weight, r.bias, e.weight, e.bias};
}

template <typename Scalar>
AttendParams<Scalar> Fusion<Scalar>::attend_params(int level) const {
  auto stage = [&](const std::string& s) {
    return AttentionStageParams<Scalar>{projection(key(level, s + ".query")), projection(key(level, s + ".key")),
                                        projection(key(level, s + ".value")), projection(key(level, s + ".output")),
                                        params_[key(level, s + ".norm.gamma")], params_[key(level, s + ".norm.beta")]};
  };
  return {stage("self"), stage("cross"), cfg_.heads};
}

template <typename Scalar>
Var<Scalar> Fusion<Scalar>::fuse(int level, const Var<Scalar>& z_path, const Var<Scalar>& z_ana) const {
  if (level < 0 || level >= levels()) throw ShapeError("fuse: no fusion level " + std::to_string(level));
  if (!active_) return z_path;
  const auto za = align(z_ana, z_path.shape(), align_params(level));
  const auto path_hat = squeeze_excitation(spatial_attention(z_path, sa_params(level, false)), se_params(level, false));
  const auto ana_hat = squeeze_excitation(spatial_attention(za, sa_params(level, true)), se_params(level, true));
  const auto o = attend(path_hat, ana_hat, attend_params(level));
  return gated_sum(o, z_path, params_[key(level, "gate")]);
}

#define GRASP_INSTANTIATE_FUSION(S)                                                                  \
  template Var<S> align(const Var<S>&, const Shape&, const Projection<S>&);                          \
  template Var<S> spatial_attention(const Var<S>&, const SpatialAttentionParams<S>&);                \
  template Var<S> channel_gate(const Var<S>&, const SqueezeExcitationParams<S>&);                    \
  template Var<S> squeeze_excitation(const Var<S>&, const SqueezeExcitationParams<S>&);              \
  template Var<S> attend(const Var<S>&, const Var<S>&, const AttendParams<S>&);                      \
  template class Fusion<S>;

GRASP_INSTANTIATE_FUSION(float)
GRASP_INSTANTIATE_FUSION(double)

}  // namespace grasp
