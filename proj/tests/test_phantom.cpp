#include "grasp/metrics.hpp"
#include "grasp/phantom.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cstring>
#include <set>

using namespace grasp;

namespace {

PhantomConfig small_config() {
  PhantomConfig cfg;
  cfg.grid = {40, 40, 40};
  cfg.organ_radius_voxels = {4.0, 6.0};
  cfg.tumor_radius_voxels = {1, 2};
  return cfg;
}

// Smallest k with P(X <= k) >= q for X ~ Binomial(n, p).
int binomial_quantile(int n, double p, double q) {
  double cdf = 0.0;
  for (int k = 0; k <= n; ++k) {
    double log_pmf = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
                     (n - k) * std::log1p(-p);
    cdf += std::exp(log_pmf);
    if (cdf >= q) return k;
  }
  return n;
}

// Voxels with a 6-neighbour of a different label (out-of-volume neighbours ignored).
std::vector<bool> boundary_mask(const LabelVolume& l) {
  const Extent e = l.extent();
  std::vector<bool> mask(l.labels().size(), false);
  for (Index i = 0; i < e[0]; ++i)
    for (Index j = 0; j < e[1]; ++j)
      for (Index k = 0; k < e[2]; ++k) {
        const auto here = l.at(i, j, k);
        const Index nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k}, {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
        for (const auto& n : nb) {
          if (n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= e[0] || n[1] >= e[1] || n[2] >= e[2]) continue;
          if (l.at(n[0], n[1], n[2]) != here) mask[static_cast<std::size_t>(l.index(i, j, k))] = true;
        }
      }
  return mask;
}

}  // namespace

TEST_CASE("config validation rejects overlapping hot and host organs") {
  PhantomConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.tumor_host_ids = {2, 3};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = PhantomConfig{};
  cfg.hot_organ_ids = {6};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("healthy_fraction 1 gives empty lesion masks") {
  PhantomConfig cfg = small_config();
  cfg.healthy_fraction = 1.0;
  for (int i = 0; i < 5; ++i) {
    const auto c = generate_case(cfg, i);
    CHECK(c.sample.path.count_nonzero() == 0);
    CHECK(c.provenance.healthy);
  }
}

TEST_CASE("tumour uptake exceeds every healthy voxel's uptake") {
  const PhantomConfig cfg = small_config();
  int with_tumours = 0;
  for (int i = 0; i < 10; ++i) {
    const auto c = generate_case(cfg, i);
    if (c.sample.path.count_nonzero() == 0) continue;
    ++with_tumours;
    float tumour_min = INFINITY, healthy_max = -INFINITY;
    for (Index v = 0; v < c.sample.path.voxels(); ++v) {
      const float u = c.provenance.uptake.data()[v];
      if (c.sample.path.labels()[static_cast<std::size_t>(v)]) tumour_min = std::min(tumour_min, u);
      else healthy_max = std::max(healthy_max, u);
    }
    CHECK(tumour_min > healthy_max);
  }
  CHECK(with_tumours > 0);
}

TEST_CASE("generate_case is deterministic") {
  const PhantomConfig cfg = small_config();
  const auto a = generate_case(cfg, 3), b = generate_case(cfg, 3);
  CHECK(a.sample.ct.data() == b.sample.ct.data());
  CHECK(a.sample.pet.data() == b.sample.pet.data());
  CHECK(a.sample.ana->labels() == b.sample.ana->labels());
  CHECK(a.sample.path.labels() == b.sample.path.labels());
  const auto c = generate_case(cfg, 4);
  CHECK_FALSE(a.sample.pet.data() == c.sample.pet.data());
}

TEST_CASE("tumours sit inside host organs and never in hot organs") {
  const PhantomConfig cfg = small_config();
  for (int i = 0; i < 20; ++i) {
    const auto c = generate_case(cfg, i);
    const auto& s = c.sample;
    CHECK_NOTHROW(s.validate());
    CHECK(s.ana->num_classes() == cfg.num_organs + 1);
    for (std::size_t v = 0; v < s.path.labels().size(); ++v) {
      if (!s.path.labels()[v]) continue;
      const int organ = s.ana->labels()[v];
      CHECK(cfg.is_host(organ));
      CHECK_FALSE(cfg.is_hot(organ));
    }
  }
}

TEST_CASE("a PET threshold detector has false-positive volume on hot organs") {
  const PhantomConfig cfg = small_config();
  for (int i = 0; i < 10; ++i) {
    const auto c = generate_case(cfg, i);
    LabelVolume pred(c.sample.path.extent(), 2);
    for (Index v = 0; v < pred.voxels(); ++v)
      pred.labels()[static_cast<std::size_t>(v)] = c.sample.pet.data()[v] > 0.5 * (cfg.host_uptake + cfg.hot_uptake);
    CHECK(fpv(pred, c.sample.path, c.sample.spacing) > 0.0);
  }
}

TEST_CASE("healthy case count lies in the binomial 99% interval") {
  const int lo = binomial_quantile(100, 0.2, 0.005), hi = binomial_quantile(100, 0.2, 0.995);
  CHECK(lo == 10);
  CHECK(hi == 31);
  const PhantomConfig cfg = small_config();
  int healthy = 0;
  for (int i = 0; i < 100; ++i) healthy += generate_case(cfg, i).provenance.healthy;
  CHECK(healthy >= lo);
  CHECK(healthy <= hi);
}

TEST_CASE("generate_dataset writes the manifest and is reproducible") {
  test::TempDir a("ds"), b("ds");
  const PhantomConfig cfg = small_config();
  const auto m = generate_dataset(cfg, 60, 20, a.path());
  REQUIRE(m.records.size() == 80);
  std::set<std::string> ids;
  int train = 0;
  for (const auto& r : m.records) {
    ids.insert(r.id);
    train += r.split == "train";
  }
  CHECK(ids.size() == 80);
  CHECK(train == 60);
  CHECK(m.split("val").size() == 20);

  const auto again = generate_dataset(cfg, 60, 20, b.path());
  CHECK(again.digest == m.digest);
  const auto read = read_manifest(a.path() / "manifest.tsv");
  CHECK(read.digest == m.digest);
  CHECK(read.records.size() == 80);
  const Sample s = load_sample(read.records[5], a.path());
  CHECK((s.path.count_nonzero() > 0) == (read.records[5].n_tumors > 0));
  CHECK(s.id == read.records[5].id);
}

TEST_CASE("missing manifest is a dependency error") {
  test::TempDir dir("ds");
  CHECK_THROWS_AS(read_manifest(dir.path() / "manifest.tsv"), DependencyError);
}

TEST_CASE("degrading at rate 0 is the identity") {
  const auto c = generate_case(small_config(), 1);
  const auto d = degrade_pseudolabels(*c.sample.ana, 0.0, 9);
  CHECK(d.labels() == c.sample.ana->labels());
}

TEST_CASE("degrading at rate 1 flips every boundary voxel of a two-label volume") {
  LabelVolume l({10, 10, 10}, 2);
  for (Index i = 3; i < 7; ++i)
    for (Index j = 2; j < 8; ++j)
      for (Index k = 4; k < 9; ++k) l.at(i, j, k) = 1;
  const auto boundary = boundary_mask(l);
  const auto d = degrade_pseudolabels(l, 1.0, 5);
  for (std::size_t v = 0; v < boundary.size(); ++v) {
    if (boundary[v]) CHECK(d.labels()[v] != l.labels()[v]);
    else CHECK(d.labels()[v] == l.labels()[v]);
  }
}

TEST_CASE("degradation only touches boundary voxels") {
  const PhantomConfig cfg = small_config();
  for (int i = 0; i < 5; ++i) {
    const auto c = generate_case(cfg, i);
    const auto boundary = boundary_mask(*c.sample.ana);
    const auto d = degrade_pseudolabels(*c.sample.ana, 0.3, static_cast<std::uint64_t>(i));
    int changed = 0;
    for (std::size_t v = 0; v < boundary.size(); ++v)
      if (d.labels()[v] != c.sample.ana->labels()[v]) {
        CHECK(boundary[v]);
        ++changed;
      }
    CHECK(changed > 0);
    CHECK(degrade_pseudolabels(*c.sample.ana, 0.3, static_cast<std::uint64_t>(i)).labels() == d.labels());
  }
}

TEST_CASE("boundary_voxels agrees with a 6-neighbour scan") {
  const auto c = generate_case(small_config(), 2);
  const auto mask = boundary_mask(*c.sample.ana);
  const auto listed = boundary_voxels(*c.sample.ana);
  std::vector<bool> from_list(mask.size(), false);
  for (Index v : listed) from_list[static_cast<std::size_t>(v)] = true;
  CHECK(from_list == mask);
}
