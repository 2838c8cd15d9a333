#pragma once

#include "grasp/autograd.hpp"
#include "grasp/ops.hpp"
#include "grasp/random.hpp"
#include "grasp/volume.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

namespace grasp::test {

inline constexpr double kFdStep = 1e-5;
// Denominator floor of the relative error, so entries whose true gradient is ~0 are
// compared on an absolute scale.
inline constexpr double kFdFloor = 1e-5;
inline constexpr double kFdTolerance = 1e-4;
// Entries that miss at kFdStep are re-measured once at this step; a difference straddling
// a leaky-ReLU or max-pool kink shrinks with the step, a wrong gradient does not.
inline constexpr double kFdRetryStep = 1e-6;

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * normal(rng);
  return t;
}

inline Var<double> leaf(const Shape& shape, Rng& rng, double scale = 1.0) {
  return Var<double>(random_tensor(shape, rng, scale), true);
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFdFloor});
}

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  Index checked = 0;
};

/// Compares analytic gradients of the scalar `f()` with central differences for every
/// entry of every leaf (or a random subset of `max_entries` per leaf when positive).
inline GradCheck check_gradients(const std::function<Var<double>()>& f, std::vector<std::pair<std::string, Var<double>>> leaves,
                                 Rng& rng, Index max_entries = 0) {
  for (auto& [name, v] : leaves) v.zero_grad();
  backward(f());
  GradCheck out;
  for (auto& [name, v] : leaves) {
    const Tensor<double> analytic = v.grad().size() ? v.grad() : Tensor<double>(v.shape());
    std::vector<Index> entries(static_cast<std::size_t>(v.value().size()));
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = static_cast<Index>(i);
    if (max_entries > 0 && static_cast<Index>(entries.size()) > max_entries) {
      shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(max_entries));
    }
    NoGradGuard guard;
    for (Index i : entries) {
      double& x = v.mutable_value()[i];
      const double saved = x;
      auto central = [&](double h) {
        x = saved + h;
        const double up = f().value()[0];
        x = saved - h;
        const double down = f().value()[0];
        x = saved;
        return (up - down) / (2 * h);
      };
      double err = relative_error(analytic[i], central(kFdStep));
      if (err >= kFdTolerance) err = std::min(err, relative_error(analytic[i], central(kFdRetryStep)));
      ++out.checked;
      if (err > out.max_rel) {
        out.max_rel = err;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

/// Scalar probe sum(x * r) with a fixed random weight tensor r.
inline Var<double> random_projection(const Var<double>& x, Rng& rng) {
  return sum(mul(x, Var<double>(random_tensor(x.shape(), rng))));
}

inline LabelVolume random_labels(const Extent& e, int classes, Rng& rng) {
  LabelVolume v(e, classes);
  for (auto& l : v.labels()) l = static_cast<std::uint16_t>(uniform_index(rng, static_cast<std::uint64_t>(classes)));
  return v;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("grasp_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace grasp::test
