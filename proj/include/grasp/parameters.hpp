#pragma once

#include "grasp/autograd.hpp"
#include "grasp/digest.hpp"
#include "grasp/random.hpp"

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

namespace grasp {

template <typename Scalar>
struct Parameter {
  std::string name;
  std::string group;
  Var<Scalar> var;
  bool frozen = false;
};

/// Ordered, named collection of trainable leaves. Frozen parameters do not record
/// gradients, so nothing downstream can move them.
template <typename Scalar>
class ParameterSet {
 public:
  Var<Scalar>& add(const std::string& name, const std::string& group, Tensor<Scalar> init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.push_back({name, group, Var<Scalar>(std::move(init), true), false});
    return items_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Var<Scalar>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return items_[it->second].var;
  }
  Var<Scalar>& operator[](const std::string& name) {
    return const_cast<Var<Scalar>&>(static_cast<const ParameterSet&>(*this)[name]);
  }
  Parameter<Scalar>& entry(const std::string& name) { return items_.at(index_.at(name)); }

  std::vector<Parameter<Scalar>>& items() { return items_; }
  const std::vector<Parameter<Scalar>>& items() const { return items_; }

  void set_frozen(bool frozen) {
    for (auto& p : items_) {
      p.frozen = frozen;
      p.var.set_requires_grad(!frozen);
      if (frozen) p.var.zero_grad();
    }
  }
  bool all_frozen() const {
    for (const auto& p : items_)
      if (!p.frozen) return false;
    return true;
  }

  void zero_grad() {
    for (auto& p : items_) p.var.zero_grad();
  }

  Index count() const {
    Index n = 0;
    for (const auto& p : items_) n += p.var.value().size();
    return n;
  }

  /// FNV-1a over names, shapes and raw values.
  std::uint64_t digest() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& p : items_) {
      h = fnv1a(p.name, h);
      for (Index e : p.var.shape()) h = fnv1a(&e, sizeof e, h);
      h = fnv1a(p.var.value().data(), static_cast<std::size_t>(p.var.value().size()) * sizeof(Scalar), h);
    }
    return h;
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& p : items_) {
      auto& v = out.add(p.name, p.group, p.var.value().template cast<Other>());
      v.set_requires_grad(!p.frozen);
      out.entry(p.name).frozen = p.frozen;
    }
    return out;
  }

 private:
  std::vector<Parameter<Scalar>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// He-normal initialisation for a weight whose fan-in is the product of all but the first extent.
template <typename Scalar>
Tensor<Scalar> he_normal(const Shape& shape, Rng& rng, double gain = 2.0) {
  Tensor<Scalar> t(shape);
  const double fan_in = static_cast<double>(shape_size(shape) / shape[0]);
  const double sd = std::sqrt(gain / fan_in);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(sd * normal(rng));
  return t;
}

}  // namespace grasp
