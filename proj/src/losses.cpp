#include "grasp/losses.hpp"

#include "grasp/errors.hpp"
#include "grasp/ops.hpp"

#include <cmath>
#include <set>

namespace grasp {

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::standard_dicece: return "standard_dicece";
    case LossKind::tumor_focused: return "tumor_focused";
    case LossKind::patch_aware: return "patch_aware";
    case LossKind::multitask: return "multitask";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& s) {
  for (auto k : {LossKind::standard_dicece, LossKind::tumor_focused, LossKind::patch_aware, LossKind::multitask})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown loss kind '" + s + "'");
}

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("loss alpha must lie in [0, 1]");
  if (!(tumor_weight > 0.0)) throw ConfigError("tumor_weight must be positive");
  const auto& w = patch_aware_weights;
  if (!(w.absent >= 0.0 && w.anatomy_present >= 0.0)) throw ConfigError("patch-aware weights must be non-negative");
  if (!(w.tumor > 0.0)) throw ConfigError("patch-aware tumor weight must be positive");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
}

LabelBatch LabelBatch::stack(const std::vector<const LabelVolume*>& items) {
  if (items.empty()) throw ShapeError("LabelBatch::stack: no items");
  LabelBatch out;
  out.batch = static_cast<Index>(items.size());
  out.extent = items[0]->extent();
  out.num_classes = items[0]->num_classes();
  out.labels.reserve(static_cast<std::size_t>(out.batch * out.voxels()));
  for (const auto* it : items) {
    if (it->extent() != out.extent || it->num_classes() != out.num_classes)
      throw ShapeError("LabelBatch::stack: inconsistent label volumes");
    out.labels.insert(out.labels.end(), it->labels().begin(), it->labels().end());
  }
  return out;
}

LabelVolume LabelBatch::item(Index b) const {
  const auto n = static_cast<std::ptrdiff_t>(voxels());
  std::vector<std::uint16_t> v(labels.begin() + b * n, labels.begin() + (b + 1) * n);
  return LabelVolume(extent, num_classes, std::move(v));
}

template <typename Scalar>
Var<Scalar> dice_ce(const Var<Scalar>& logits, const LabelBatch& target, const std::vector<double>& class_weights) {
  const Shape& s = logits.shape();
  if (s.size() != 5) throw ShapeError("dice_ce: logits must be (B, C, H, W, D), got " + shape_str(s));
  const Index batch = s[0], classes = s[1], n = s[2] * s[3] * s[4];
  if (static_cast<Index>(class_weights.size()) != classes)
    throw ConfigError("dice_ce: " + std::to_string(class_weights.size()) + " class weights for " +
                      std::to_string(classes) + " classes");
  if (target.batch != batch || target.extent != Extent{s[2], s[3], s[4]})
    throw ShapeError("dice_ce: target shape does not match logits " + shape_str(s));
  for (auto y : target.labels)
    if (y >= classes) throw InputError("dice_ce: label " + std::to_string(y) + " out of range");

  // Softmax over channels.
  Tensor<Scalar> prob(s);
  const Scalar* z = logits.value().data();
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < n; ++i) {
      const Index base = b * classes * n + i;
      Scalar mx = z[base];
      for (Index c = 1; c < classes; ++c) mx = std::max(mx, z[base + c * n]);
      Scalar tot = 0;
      for (Index c = 0; c < classes; ++c) tot += prob[base + c * n] = std::exp(z[base + c * n] - mx);
      for (Index c = 0; c < classes; ++c) prob[base + c * n] /= tot;
    }

  std::vector<double> inter(static_cast<std::size_t>(classes), 0.0), psum(inter), gsum(inter);
  double ce_num = 0.0, ce_den = 0.0;
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < n; ++i) {
      const auto y = target.labels[static_cast<std::size_t>(b * n + i)];
      const Index base = b * classes * n + i;
      for (Index c = 0; c < classes; ++c) psum[static_cast<std::size_t>(c)] += prob[base + c * n];
      inter[y] += prob[base + y * n];
      gsum[y] += 1.0;
      const double w = class_weights[y];
      ce_num += w * -std::log(std::max<double>(prob[base + y * n], 1e-30));
      ce_den += w;
    }

  double wsum = 0.0, dice_term = 0.0;
  std::vector<double> denom(inter.size());
  for (Index c = 0; c < classes; ++c) {
    const auto k = static_cast<std::size_t>(c);
    denom[k] = psum[k] + gsum[k] + kDiceSmooth;
    wsum += class_weights[k];
    dice_term += class_weights[k] * (1.0 - (2.0 * inter[k] + kDiceSmooth) / denom[k]);
  }
  if (!(wsum > 0.0)) throw ConfigError("dice_ce: class weights sum to zero");
  dice_term /= wsum;
  const double ce = ce_den > 0.0 ? ce_num / ce_den : 0.0;

  Tensor<Scalar> out(Shape{1}, static_cast<Scalar>(dice_term + ce));
  return make_result<Scalar>(
      std::move(out), {logits},
      [prob = std::move(prob), labels = target.labels, class_weights, inter = std::move(inter), denom = std::move(denom),
       wsum, ce_den, batch, classes, n](Node<Scalar>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const double up = self.grad[0];
        std::vector<double> gp(static_cast<std::size_t>(classes));
        for (Index b = 0; b < batch; ++b)
          for (Index i = 0; i < n; ++i) {
            const auto y = labels[static_cast<std::size_t>(b * n + i)];
            const Index base = b * classes * n + i;
            // d(dice term)/dp_c
            double dot = 0.0;
            for (Index c = 0; c < classes; ++c) {
              const auto k = static_cast<std::size_t>(c);
              const double num = 2.0 * inter[k] + kDiceSmooth;
              const double dd = ((c == y ? 2.0 : 0.0) * denom[k] - num) / (denom[k] * denom[k]);
              gp[k] = -class_weights[k] / wsum * dd;
              dot += gp[k] * prob[base + c * n];
            }
            const double wce = ce_den > 0.0 ? class_weights[y] / ce_den : 0.0;
            for (Index c = 0; c < classes; ++c) {
              const double p = prob[base + c * n];
              const double dice_grad = p * (gp[static_cast<std::size_t>(c)] - dot);
              const double ce_grad = wce * (p - (c == y ? 1.0 : 0.0));
              (*g)[base + c * n] += static_cast<Scalar>(up * (dice_grad + ce_grad));
            }
          }
      });
}

std::vector<double> uniform_weights(int num_classes) { return std::vector<double>(static_cast<std::size_t>(num_classes), 1.0); }

std::vector<double> tumor_focused_weights(int num_classes, double tumor_weight) {
  auto w = uniform_weights(num_classes);
  w.back() = tumor_weight;
  return w;
}

std::vector<double> patch_aware_weights(const LabelVolume& target_patch, const LossConfig& cfg) {
  const int classes = target_patch.num_classes();
  if (classes < 2) throw ConfigError("patch_aware_weights: need background and tumour classes");
  std::vector<bool> present(static_cast<std::size_t>(classes), false);
  for (auto y : target_patch.labels()) present[y] = true;
  std::vector<double> w(static_cast<std::size_t>(classes));
  w[0] = 1.0;
  for (int c = 1; c < classes - 1; ++c)
    w[static_cast<std::size_t>(c)] =
        present[static_cast<std::size_t>(c)] ? cfg.patch_aware_weights.anatomy_present : cfg.patch_aware_weights.absent;
  w.back() = cfg.patch_aware_weights.tumor;
  return w;
}

std::vector<double> class_weights_for(const LossConfig& cfg, int num_classes) {
  return cfg.kind == LossKind::tumor_focused ? tumor_focused_weights(num_classes, cfg.tumor_weight)
                                             : uniform_weights(num_classes);
}

template <typename Scalar>
Var<Scalar> weighted_loss(const Var<Scalar>& logits, const LabelBatch& target, const LossConfig& cfg) {
  if (cfg.kind != LossKind::patch_aware)
    return dice_ce(logits, target, class_weights_for(cfg, static_cast<int>(logits.dim(1))));
  Var<Scalar> total;
  for (Index b = 0; b < target.batch; ++b) {
    LabelVolume item = target.item(b);
    const auto w = patch_aware_weights(item, cfg);
    LabelBatch one{1, target.extent, target.num_classes, std::move(item.labels())};
    auto term = dice_ce(select_batch(logits, b), one, w);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, Scalar(1) / static_cast<Scalar>(target.batch));
}

template <typename Scalar>
Var<Scalar> multitask_loss(const Var<Scalar>& path_loss, const Var<Scalar>& ana_loss, LossState& state, double alpha,
                           double ema_decay) {
  const double lp = path_loss.value()[0], la = ana_loss.value()[0];
  if (!std::isfinite(lp) || !std::isfinite(la)) throw DivergenceError("multitask_loss: non-finite loss term", -1);
  if (lp < 0.0 || la < 0.0) throw InputError("multitask_loss: negative loss term");
  if (!state.initialized) {
    state.mu_path = std::max(lp, 1e-12);
    state.mu_ana = std::max(la, 1e-12);
    state.initialized = true;
  }
  auto out = add(scale(path_loss, static_cast<Scalar>(alpha / state.mu_path)),
                 scale(ana_loss, static_cast<Scalar>((1.0 - alpha) / state.mu_ana)));
  state.mu_path = std::max(ema_decay * state.mu_path + (1.0 - ema_decay) * lp, 1e-12);
  state.mu_ana = std::max(ema_decay * state.mu_ana + (1.0 - ema_decay) * la, 1e-12);
  return out;
}

#define GRASP_INSTANTIATE_LOSSES(S)                                                                      \
  template Var<S> dice_ce(const Var<S>&, const LabelBatch&, const std::vector<double>&);                 \
  template Var<S> weighted_loss(const Var<S>&, const LabelBatch&, const LossConfig&);                     \
  template Var<S> multitask_loss(const Var<S>&, const Var<S>&, LossState&, double, double);

GRASP_INSTANTIATE_LOSSES(float)
GRASP_INSTANTIATE_LOSSES(double)

}  // namespace grasp
