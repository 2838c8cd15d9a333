#include "grasp/errors.hpp"
#include "grasp/metrics.hpp"

#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <map>

using namespace grasp;
using test::blob_mask;
using test::oracle_components;
using test::oracle_metrics;

namespace {

LabelVolume permute_axes(const LabelVolume& m, const std::array<int, 3>& order) {
  const Extent e = m.extent();
  LabelVolume out({e[static_cast<std::size_t>(order[0])], e[static_cast<std::size_t>(order[1])],
                   e[static_cast<std::size_t>(order[2])]},
                  m.num_classes());
  for (Index i = 0; i < e[0]; ++i)
    for (Index j = 0; j < e[1]; ++j)
      for (Index k = 0; k < e[2]; ++k) {
        const Index src[3] = {i, j, k};
        out.at(src[order[0]], src[order[1]], src[order[2]]) = m.at(i, j, k);
      }
  return out;
}

std::vector<ConfigMeans> table(const std::vector<std::array<double, 4>>& rows) {
  std::vector<ConfigMeans> out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    ConfigMeans c{"config" + std::to_string(r), {}};
    for (std::size_t m = 0; m < 4; ++m) c.means[kMetricNames[m]] = rows[r][m];
    out.push_back(c);
  }
  return out;
}

}  // namespace

TEST_CASE("connected components under both connectivities") {
  LabelVolume m({4, 4, 4}, 2);
  m.at(0, 0, 0) = 1;
  m.at(3, 3, 3) = 1;
  CHECK(connected_components(m).count() == 2);

  LabelVolume diag({3, 3, 3}, 2);
  diag.at(0, 0, 0) = 1;
  diag.at(1, 1, 1) = 1;
  CHECK(connected_components(diag).count() == 1);
  CHECK(connected_components(diag, Connectivity::six).count() == 2);
  CHECK(connected_components(LabelVolume({2, 2, 2}, 2)).count() == 0);
}

TEST_CASE("component labelling matches a union-find oracle") {
  Rng rng(1);
  for (int seed = 0; seed < 50; ++seed) {
    LabelVolume m({16, 16, 16}, 2);
    for (auto& v : m.labels()) v = uniform01(rng) < 0.08;
    for (bool full : {true, false}) {
      const auto got = connected_components(m, full ? Connectivity::twenty_six : Connectivity::six);
      const auto roots = oracle_components(m, full);
      std::map<long, int> root_to_id;
      int next = 0;
      for (std::size_t v = 0; v < roots.size(); ++v) {
        if (roots[v] < 0) {
          CHECK(got.ids[v] == 0);
          continue;
        }
        auto [it, fresh] = root_to_id.emplace(roots[v], next + 1);
        if (fresh) ++next;
        CHECK(got.ids[v] == it->second);
      }
      CHECK(got.count() == next);
    }
  }
}

TEST_CASE("dice examples") {
  LabelVolume p({1, 1, 8}, 2), g({1, 1, 8}, 2);
  CHECK(dsc(p, g) == 1.0);
  g.labels() = {1, 1, 1, 1, 0, 0, 0, 0};
  CHECK(dsc(p, g) == 0.0);
  CHECK(dsc(g, g) == 1.0);
  p.labels() = {0, 0, 1, 1, 1, 1, 0, 0};
  CHECK(dsc(p, g) == 0.5);
  CHECK_THROWS(dsc(p, LabelVolume({1, 2, 4}, 2)));
}

TEST_CASE("cc-dice examples") {
  LabelVolume g({1, 1, 10}, 2), p({1, 1, 10}, 2);
  g.labels() = {1, 1, 0, 0, 0, 0, 0, 1, 1, 1};
  p.labels() = {1, 1, 0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(cc_dsc(p, g) == 0.5);
  LabelVolume single({1, 1, 10}, 2), guess({1, 1, 10}, 2);
  single.labels() = {0, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  guess.labels() = {0, 0, 1, 1, 1, 0, 0, 0, 0, 0};
  CHECK(cc_dsc(guess, single) == dsc(guess, single));
  guess.labels()[8] = 1;
  CHECK(cc_dsc(guess, single) == doctest::Approx(dsc(LabelVolume({1, 1, 10}, 2, {0, 0, 1, 1, 1, 0, 0, 0, 0, 0}), single) / 2));
  CHECK(cc_dsc(LabelVolume({2, 2, 2}, 2), LabelVolume({2, 2, 2}, 2)) == 1.0);
}

TEST_CASE("false-positive and false-negative volume examples") {
  LabelVolume p({6, 6, 6}, 2), g({6, 6, 6}, 2);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j)
      for (Index k = 0; k < 2; ++k) p.at(i, j, k) = 1;
  CHECK(fpv(p, g, {2, 2, 2}) == doctest::Approx(0.064).epsilon(1e-12));
  CHECK(fpv(LabelVolume({6, 6, 6}, 2), g, {2, 2, 2}) == 0.0);
  CHECK(fnv(p, g, {1, 1, 1}) == 0.0);

  LabelVolume lesion({6, 6, 6}, 2);
  for (Index i = 3; i < 6; ++i)
    for (Index j = 3; j < 6; ++j)
      for (Index k = 3; k < 6; ++k) lesion.at(i, j, k) = 1;
  CHECK(fnv(LabelVolume({6, 6, 6}, 2), lesion, {1, 1, 1}) == doctest::Approx(0.027).epsilon(1e-12));
  CHECK(fnv(lesion, lesion, {1, 1, 1}) == 0.0);
  CHECK(fpv(lesion, lesion, {1, 1, 1}) == 0.0);
}

TEST_CASE("metrics match brute-force enumeration on random mask pairs") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Extent e{4 + static_cast<Index>(uniform_index(rng, 13)), 4 + static_cast<Index>(uniform_index(rng, 13)),
                   4 + static_cast<Index>(uniform_index(rng, 13))};
    const Spacing sp{uniform(rng, 0.5, 3.0), uniform(rng, 0.5, 3.0), uniform(rng, 0.5, 3.0)};
    const auto p = blob_mask(e, static_cast<int>(uniform_index(rng, 8)), rng);
    const auto g = blob_mask(e, static_cast<int>(uniform_index(rng, 8)), rng);
    const auto o = oracle_metrics(p, g, sp);
    CHECK(dsc(p, g) == o.dsc);
    CHECK(cc_dsc(p, g) == doctest::Approx(o.cc_dsc).epsilon(1e-15));
    CHECK(std::abs(fpv(p, g, sp) - o.fpv) < 1e-9);
    CHECK(std::abs(fnv(p, g, sp) - o.fnv) < 1e-9);
  }
}

TEST_CASE("metrics are invariant under joint axis permutation") {
  Rng rng(3);
  const Spacing iso{1.5, 1.5, 1.5};
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = blob_mask({9, 11, 13}, 6, rng), g = blob_mask({9, 11, 13}, 6, rng);
    const auto a = evaluate_case("x", p, g, iso);
    for (const auto& order : {std::array<int, 3>{1, 0, 2}, std::array<int, 3>{2, 1, 0}, std::array<int, 3>{1, 2, 0}}) {
      const auto b = evaluate_case("x", permute_axes(p, order), permute_axes(g, order), iso);
      CHECK(b.dsc == a.dsc);
      CHECK(b.cc_dsc == doctest::Approx(a.cc_dsc).epsilon(1e-15));
      CHECK(b.fpv == doctest::Approx(a.fpv).epsilon(1e-12));
      CHECK(b.fnv == doctest::Approx(a.fnv).epsilon(1e-12));
    }
  }
}

TEST_CASE("false-positive volume complements the overlapping predicted volume") {
  Rng rng(4);
  const Spacing sp{2, 2, 2};
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = blob_mask({12, 12, 12}, 8, rng), g = blob_mask({12, 12, 12}, 8, rng);
    const auto comps = connected_components(p);
    std::vector<bool> touches(static_cast<std::size_t>(comps.count()), false);
    for (std::size_t v = 0; v < g.labels().size(); ++v)
      if (g.labels()[v] && comps.ids[v]) touches[static_cast<std::size_t>(comps.ids[v] - 1)] = true;
    Index overlapping = 0;
    for (int c = 0; c < comps.count(); ++c)
      if (touches[static_cast<std::size_t>(c)]) overlapping += comps.sizes[static_cast<std::size_t>(c)];
    const double total = static_cast<double>(p.count_nonzero()) * voxel_volume_ml(sp);
    CHECK(fpv(p, g, sp) + static_cast<double>(overlapping) * voxel_volume_ml(sp) == doctest::Approx(total).epsilon(1e-12));
  }
}

TEST_CASE("cc-dice equals dice for one lesion and no extra components") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    LabelVolume g({10, 10, 10}, 2), p({10, 10, 10}, 2);
    const Index c = 3 + static_cast<Index>(uniform_index(rng, 4));
    for (Index i = c - 2; i <= c + 2; ++i)
      for (Index j = c - 2; j <= c + 2; ++j)
        for (Index k = c - 1; k <= c + 1; ++k) g.at(i, j, k) = 1;
    const Index s = static_cast<Index>(uniform_index(rng, 3));
    for (Index i = c - 1 + s; i <= c + 1 + s; ++i)
      for (Index j = c - 2; j <= c + 1; ++j)
        for (Index k = c - 1; k <= c; ++k) p.at(i, j, k) = 1;
    CHECK(cc_dsc(p, g) == dsc(p, g));
  }
}

TEST_CASE("rank reproduction on two reference tables") {
  const auto unet = rank_configurations(table({{49.3, 31.4, 2.49, 29.96},
                                               {52.6, 32.6, 3.16, 23.77},
                                               {53.6, 33.3, 2.80, 22.73},
                                               {54.5, 34.7, 2.77, 19.75}}));
  CHECK(unet.final_rank == std::vector<int>{3, 3, 2, 1});
  const auto mednext = rank_configurations(table({{50.3, 32.1, 3.95, 36.37},
                                                  {53.6, 34.6, 3.51, 27.99},
                                                  {53.8, 34.1, 2.91, 28.54},
                                                  {53.6, 33.7, 3.43, 27.58}}));
  CHECK(mednext.final_rank == std::vector<int>{4, 2, 1, 2});
  CHECK(mednext.ranks[1][0] == 2);
  CHECK(mednext.ranks[3][0] == 2);

  const auto tie = rank_configurations(table({{1, 2, 3, 4}, {1, 2, 3, 4}, {1, 2, 3, 4}}));
  CHECK(tie.final_rank == std::vector<int>{1, 1, 1});
}

TEST_CASE("ranking depends only on the per-metric order") {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::array<double, 4>> rows(5), moved(5);
    for (auto& r : rows)
      for (auto& v : r) v = std::round(uniform(rng, 0.0, 6.0));
    for (std::size_t i = 0; i < rows.size(); ++i)
      moved[i] = {std::exp(rows[i][0]), 3.0 * rows[i][1] - 7.0, std::cbrt(rows[i][2]) + 1.0, rows[i][3] * rows[i][3] * rows[i][3]};
    const auto a = rank_configurations(table(rows)), b = rank_configurations(table(moved));
    CHECK(a.final_rank == b.final_rank);
    CHECK(a.avg_rank == b.avg_rank);
  }
}

TEST_CASE("ranking preconditions") {
  CHECK_THROWS_AS(rank_configurations(table({{1, 2, 3, 4}})), InputError);
  auto t = table({{1, 2, 3, 4}, {2, 3, 4, 5}});
  t[1].means.erase("fnv");
  CHECK_THROWS_AS(rank_configurations(t), InputError);
  CHECK(competition_ranks({3.0, 1.0, 3.0, 2.0}, true) == std::vector<int>{1, 4, 1, 3});
  CHECK(competition_ranks({3.0, 1.0, 3.0, 2.0}, false) == std::vector<int>{3, 1, 3, 2});
}

TEST_CASE("cosine similarity examples") {
  Tensor<double> a(Shape{2, 3}), b(Shape{2, 3});
  a.array() << 1, 2, 3, 0, 1, 0;
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
  b.array() = -a.array();
  CHECK(cosine_similarity(a, b) == doctest::Approx(-1.0));
  b.array() << 3, 0, -1, 1, 0, 0;
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.0));
  Tensor<double> z(Shape{2, 3});
  CHECK(cosine_similarity(a, z) == 0.0);
  CHECK_THROWS(cosine_similarity(a, Tensor<double>(Shape{3, 2})));
}

TEST_CASE("metrics CSV round trip and summary") {
  test::TempDir dir("metrics");
  std::vector<MetricsRecord> records{{"case_a", 0.75, 0.5, 0.128, 1.0 / 3.0}, {"case_b", 1.0, 1.0, 0.0, 0.0}};
  write_metrics_csv(records, dir.path() / "m.csv");
  std::ifstream in(dir.path() / "m.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "patient_id,dsc,cc_dsc,fpv_ml,fnv_ml");
  const auto back = read_metrics_csv(dir.path() / "m.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].patient_id == "case_a");
  CHECK(back[0].fnv == 1.0 / 3.0);
  CHECK(back[1].dsc == 1.0);
  const auto s = summarize(back);
  CHECK(s.mean[0] == doctest::Approx(0.875));
  CHECK(s.stddev[0] == doctest::Approx(std::sqrt(2 * 0.125 * 0.125)));
}
