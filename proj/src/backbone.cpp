#include "grasp/backbone.hpp"

#include "grasp/errors.hpp"

namespace grasp {

namespace {

std::string decoder_name(bool aux) { return aux ? "decoder_aux" : "decoder"; }

template <typename Scalar>
void add_conv(ParameterSet<Scalar>& ps, const std::string& prefix, const std::string& group, int cin, int cout, int k,
              bool bias, Rng& rng) {
  ps.add(prefix + ".weight", group, he_normal<Scalar>(Shape{cout, cin, k, k, k}, rng));
  if (bias) ps.add(prefix + ".bias", group, Tensor<Scalar>(Shape{cout}));
}

template <typename Scalar>
void add_norm(ParameterSet<Scalar>& ps, const std::string& prefix, const std::string& group, int ch) {
  ps.add(prefix + ".gamma", group, Tensor<Scalar>(Shape{ch}, Scalar(1)));
  ps.add(prefix + ".beta", group, Tensor<Scalar>(Shape{ch}));
}

template <typename Scalar>
void add_block(ParameterSet<Scalar>& ps, const std::string& prefix, const std::string& group, int cin, int cout,
               BackboneVariant variant, Rng& rng) {
  add_conv(ps, prefix + ".conv1", group, cin, cout, 3, false, rng);
  add_norm(ps, prefix + ".norm1", group, cout);
  add_conv(ps, prefix + ".conv2", group, cout, cout, 3, false, rng);
  add_norm(ps, prefix + ".norm2", group, cout);
  if (variant == BackboneVariant::residual && cin != cout) add_conv(ps, prefix + ".proj", group, cin, cout, 1, false, rng);
}

template <typename Scalar>
void add_decoder(ParameterSet<Scalar>& ps, const BackboneConfig& cfg, bool aux, Rng& rng) {
  const std::string dec = decoder_name(aux);
  for (int l = cfg.depth - 2; l >= 0; --l) {
    const std::string p = dec + "." + std::to_string(l);
    add_conv(ps, p + ".reduce", dec, cfg.width(l + 1), cfg.width(l), 1, true, rng);
    add_block(ps, p, dec, 2 * cfg.width(l), cfg.width(l), cfg.variant, rng);
  }
  add_conv(ps, dec + ".out", dec, cfg.width(0), aux ? cfg.aux_out_classes : cfg.out_classes, 1, true, rng);
}

}  // namespace

void BackboneConfig::validate() const {
  if (in_channels < 1) throw ConfigError("backbone in_channels must be >= 1");
  if (out_classes < 2) throw ConfigError("backbone out_classes must be >= 2");
  if (depth < 2) throw ConfigError("backbone depth must be >= 2");
  if (base_width < 4) throw ConfigError("backbone base_width must be >= 4");
  if (aux_out_classes == 1 || aux_out_classes < 0) throw ConfigError("aux_out_classes must be 0 or >= 2");
}

std::string to_string(BackboneVariant v) { return v == BackboneVariant::plain ? "plain" : "residual"; }

BackboneVariant parse_variant(const std::string& s) {
  if (s == "plain") return BackboneVariant::plain;
  if (s == "residual") return BackboneVariant::residual;
  throw ConfigError("unknown backbone variant '" + s + "'");
}

template <typename Scalar>
Backbone<Scalar> Backbone<Scalar>::create(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Backbone net;
  net.cfg_ = cfg;
  Rng rng(mix_seed(seed, 0xbb));
  for (int l = 0; l < cfg.depth; ++l) {
    const int cin = l == 0 ? cfg.in_channels : cfg.width(l - 1);
    add_block(net.params_, "encoder." + std::to_string(l), "encoder", cin, cfg.width(l), cfg.variant, rng);
  }
  add_decoder(net.params_, cfg, false, rng);
  if (cfg.dual()) add_decoder(net.params_, cfg, true, rng);
  return net;
}

template <typename Scalar>
void Backbone<Scalar>::check_input(const Shape& shape) const {
  if (shape.size() != 5) throw ShapeError("backbone input must be (B, C, H, W, D), got " + shape_str(shape));
  if (shape[1] != cfg_.in_channels)
    throw ShapeError("backbone expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                     std::to_string(shape[1]));
  static constexpr const char* kAxis[] = {"H", "W", "D"};
  for (int a = 0; a < 3; ++a)
    if (shape[static_cast<std::size_t>(a + 2)] % cfg_.divisor() != 0)
      throw ShapeError(std::string("spatial axis ") + kAxis[a] + " (extent " +
                       std::to_string(shape[static_cast<std::size_t>(a + 2)]) + ") is not divisible by " +
                       std::to_string(cfg_.divisor()));
}

template <typename Scalar>
Var<Scalar> Backbone<Scalar>::conv(const std::string& prefix, const Var<Scalar>& x) const {
  const std::string bias = prefix + ".bias";
  return conv3d(x, params_[prefix + ".weight"], params_.contains(bias) ? params_[bias] : Var<Scalar>());
}

template <typename Scalar>
Var<Scalar> Backbone<Scalar>::norm_act(const std::string& prefix, const Var<Scalar>& x) const {
  return leaky_relu(instance_norm(x, params_[prefix + ".gamma"], params_[prefix + ".beta"]));
}

template <typename Scalar>
Var<Scalar> Backbone<Scalar>::block(const std::string& prefix, const Var<Scalar>& x) const {
  Var<Scalar> h = norm_act(prefix + ".norm1", conv(prefix + ".conv1", x));
  h = conv(prefix + ".conv2", h);
  h = instance_norm(h, params_[prefix + ".norm2.gamma"], params_[prefix + ".norm2.beta"]);
  if (cfg_.variant == BackboneVariant::residual)
    h = add(h, params_.contains(prefix + ".proj.weight") ? conv(prefix + ".proj", x) : x);
  return leaky_relu(h);
}

template <typename Scalar>
std::vector<Var<Scalar>> Backbone<Scalar>::encode_all(const Var<Scalar>& x) const {
  check_input(x.shape());
  std::vector<Var<Scalar>> feats;
  Var<Scalar> h = x;
  for (int l = 0; l < cfg_.depth; ++l) {
    if (l > 0) h = max_pool2(h);
    h = block("encoder." + std::to_string(l), h);
    feats.push_back(h);
  }
  return feats;
}

template <typename Scalar>
std::vector<Var<Scalar>> Backbone<Scalar>::encode(const Var<Scalar>& x) const {
  auto all = encode_all(x);
  return {all[all.size() - 1], all[all.size() - 2]};
}

template <typename Scalar>
Var<Scalar> Backbone<Scalar>::decode(const std::vector<Var<Scalar>>& features, Head head) const {
  if (static_cast<int>(features.size()) != cfg_.depth)
    throw ShapeError("decode expects " + std::to_string(cfg_.depth) + " feature levels");
  if (head == Head::aux && !cfg_.dual()) throw ConfigError("network has no auxiliary decoder");
  const std::string dec = decoder_name(head == Head::aux);
  Var<Scalar> h = features.back();
  for (int l = cfg_.depth - 2; l >= 0; --l) {
    const std::string p = dec + "." + std::to_string(l);
    h = upsample2(conv(p + ".reduce", h));
    h = block(p, concat_channels(features[static_cast<std::size_t>(l)], h));
  }
  return conv(dec + ".out", h);
}

template <typename Scalar>
Var<Scalar> Backbone<Scalar>::forward(const Var<Scalar>& x) const {
  return decode(encode_all(x), Head::primary);
}

template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> Backbone<Scalar>::forward_dual(const Var<Scalar>& x) const {
  if (!cfg_.dual()) throw ConfigError("forward_dual needs a dual-decoder network");
  auto feats = encode_all(x);
  return {decode(feats, Head::primary), decode(feats, Head::aux)};
}

Backbone<float> init_finetune(const Backbone<float>& anatomy, const BackboneConfig& target, std::uint64_t seed) {
  const auto& src_cfg = anatomy.config();
  if (src_cfg.in_channels != 1) throw IncompatibilityError("fine-tuning source must take a single CT channel");
  if (target.in_channels != 2) throw IncompatibilityError("fine-tuning target must take CT and PET channels");
  if (src_cfg.depth != target.depth || src_cfg.base_width != target.base_width || src_cfg.variant != target.variant)
    throw IncompatibilityError("fine-tuning source and target differ beyond input and output layers");

  Backbone<float> net = Backbone<float>::create(target, seed);
  for (auto& p : net.params().items()) {
    if (p.name.rfind("decoder.out.", 0) == 0 || p.name.rfind("decoder_aux.", 0) == 0) continue;  // fresh head
    if (!anatomy.params().contains(p.name)) throw IncompatibilityError("source lacks parameter " + p.name);
    const Tensor<float>& src = anatomy.params()[p.name].value();
    Tensor<float>& dst = p.var.mutable_value();
    if (p.name == "encoder.0.conv1.weight") {
      // (Cout, 1, k,k,k) -> channel 0 of (Cout, 2, k,k,k); channel 1 keeps its fresh init.
      const Index cout = dst.dim(0), kk = dst.stride(1);
      for (Index o = 0; o < cout; ++o)
        dst.array().segment(o * 2 * kk, kk) = src.array().segment(o * kk, kk);
      continue;
    }
    if (src.shape() != dst.shape())
      throw IncompatibilityError("shape mismatch for " + p.name + ": " + shape_str(src.shape()) + " vs " +
                                 shape_str(dst.shape()));
    dst = src;
  }
  return net;
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace grasp
