#pragma once

#include "grasp/parameters.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace grasp {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Adam with decoupled weight decay. Parameters are tracked by handle; frozen entries and
/// entries without a gradient are skipped, so their values stay bit-identical.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Adds every parameter of `set`; moment estimates start at zero.
  void add(ParameterSet<Scalar>& set) {
    for (auto& p : set.items()) slots_.push_back({&p, Tensor<Scalar>(p.var.shape()), Tensor<Scalar>(p.var.shape()), 0});
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::size_t size() const { return slots_.size(); }

  void step() {
    for (auto& s : slots_) {
      if (s.param->frozen || !s.param->var.requires_grad()) continue;
      const auto& g = s.param->var.grad();
      if (g.size() == 0) continue;
      ++s.steps;
      auto& w = s.param->var.mutable_value();
      const double c1 = 1.0 - std::pow(cfg_.beta1, s.steps), c2 = 1.0 - std::pow(cfg_.beta2, s.steps);
      const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
      s.m.array() = b1 * s.m.array() + (Scalar(1) - b1) * g.array();
      s.v.array() = b2 * s.v.array() + (Scalar(1) - b2) * g.array().square();
      w.array() *= static_cast<Scalar>(1.0 - cfg_.lr * cfg_.weight_decay);
      w.array() -= static_cast<Scalar>(cfg_.lr / c1) * s.m.array() /
                   ((s.v.array() / static_cast<Scalar>(c2)).sqrt() + static_cast<Scalar>(cfg_.eps));
    }
  }

 private:
  struct Slot {
    Parameter<Scalar>* param;
    Tensor<Scalar> m, v;
    int steps;
  };

  AdamWConfig cfg_;
  std::vector<Slot> slots_;
};

/// Cosine annealing from `base_lr` at epoch 0 down to 0 at the last epoch (`epochs - 1`).
inline double cosine_lr(double base_lr, int epoch, int epochs) {
  if (epochs <= 1) return base_lr;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace grasp
