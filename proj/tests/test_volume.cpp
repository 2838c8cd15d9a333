#include "grasp/volume.hpp"

#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <cstring>
#include <set>

using namespace grasp;
using grasp::test::TempDir;

namespace {

void write_raw_gvol(const std::filesystem::path& p, const std::string& header, std::size_t floats) {
  std::ofstream out(p, std::ios::binary);
  out << header;
  std::vector<float> payload(floats);
  for (std::size_t i = 0; i < floats; ++i) payload[i] = static_cast<float>(i) * 0.5f;
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(floats * sizeof(float)));
}

Sample lesion_sample(Extent e, bool with_lesion) {
  Sample s;
  s.id = "case";
  s.spacing = {2.0, 2.0, 2.0};
  s.ct = Volume(1, e, s.spacing, 0.25f);
  s.pet = Volume(1, e, s.spacing, 0.5f);
  s.ana = LabelVolume(e, 3);
  s.path = LabelVolume(e, 2);
  if (with_lesion)
    for (Index i = 10; i < 13; ++i)
      for (Index j = 4; j < 6; ++j) s.path.at(i, j, 7) = 1, s.ana->at(i, j, 7) = 2;
  return s;
}

}  // namespace

TEST_CASE("gvol header declares shape and spacing") {
  TempDir dir("vol");
  const auto p = dir.path() / "a.gvol";
  write_raw_gvol(p, "GVOL1 1 8 8 8 2 2 2\n", 512);
  const Volume v = load_volume(p);
  CHECK(v.channels() == 1);
  CHECK(v.extent() == Extent{8, 8, 8});
  CHECK(v.spacing() == Spacing{2.0, 2.0, 2.0});
  CHECK(v.data()[511] == doctest::Approx(255.5));
}

TEST_CASE("gvol with a short payload is a truncation error") {
  TempDir dir("vol");
  const auto p = dir.path() / "short.gvol";
  write_raw_gvol(p, "GVOL1 1 8 8 8 2 2 2\n", 511);
  CHECK_THROWS_AS(load_volume(p), TruncationError);
}

TEST_CASE("gvol malformed header is a format error") {
  TempDir dir("vol");
  const auto p = dir.path() / "bad.gvol";
  write_raw_gvol(p, "GVOL2 1 8 8 8 2 2 2\n", 512);
  CHECK_THROWS_AS(load_volume(p), FormatError);
  write_raw_gvol(p, "GVOL1 1 8 8 2 2 2\n", 512);
  CHECK_THROWS_AS(load_volume(p), FormatError);
}

TEST_CASE("volume round trip is bit exact and keeps spacing") {
  TempDir dir("vol");
  Rng rng(7);
  Volume v(2, {4, 4, 4}, {1.5, 1.5, 3.0});
  for (Index i = 0; i < v.data().size(); ++i) v.data()[i] = static_cast<float>(normal(rng) * 1e3);
  v.data()[5] = -0.0f;
  v.data()[6] = 1e-42f;  // subnormal
  save_volume(v, dir.path() / "r.gvol");
  const Volume back = load_volume(dir.path() / "r.gvol");
  CHECK(back.spacing() == Spacing{1.5, 1.5, 3.0});
  REQUIRE(back.data().size() == v.data().size());
  CHECK(std::memcmp(back.data().data(), v.data().data(), sizeof(float) * 128) == 0);
}

TEST_CASE("saving into a missing directory is a write error") {
  TempDir dir("vol");
  Volume v(1, {2, 2, 2}, {1, 1, 1});
  CHECK_THROWS_AS(save_volume(v, dir.path() / "nope" / "deeper" / "x.gvol"), WriteError);
  CHECK_THROWS_AS(save_labels(LabelVolume({2, 2, 2}, 2), dir.path() / "nope" / "x.glab"), WriteError);
}

TEST_CASE("label round trip") {
  TempDir dir("vol");
  Rng rng(3);
  const auto labels = test::random_labels({3, 5, 7}, 6, rng);
  save_labels(labels, dir.path() / "l.glab");
  const auto back = load_labels(dir.path() / "l.glab");
  CHECK(back.extent() == labels.extent());
  CHECK(back.num_classes() == 6);
  CHECK(back.labels() == labels.labels());
}

TEST_CASE("volume invariants are enforced") {
  CHECK_THROWS_AS(Volume(1, {2, 2, 2}, {0.0, 1.0, 1.0}), ShapeError);
  CHECK_THROWS_AS(Volume(1, {2, 2, 2}, {1.0, NAN, 1.0}), ShapeError);
  CHECK_THROWS_AS(Volume(1, {0, 2, 2}, {1.0, 1.0, 1.0}), ShapeError);
  LabelVolume l({2, 2, 2}, 2);
  l.labels()[3] = 2;
  CHECK_THROWS_AS(l.validate(), FormatError);
}

TEST_CASE("sample validation rejects mismatched volumes") {
  Sample s = lesion_sample({16, 16, 16}, true);
  CHECK_NOTHROW(s.validate());
  s.path.labels()[0] = 2;
  CHECK_THROWS_AS(s.validate(), InputError);
  s = lesion_sample({16, 16, 16}, true);
  s.pet = Volume(1, {16, 16, 8}, s.spacing);
  CHECK_THROWS_AS(s.validate(), InputError);
}

TEST_CASE("encode_label_channel scales labels to [0, 1]") {
  LabelVolume l({1, 1, 6}, 6);
  for (int i = 0; i < 6; ++i) l.labels()[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(i);
  const Volume v = encode_label_channel(l);
  CHECK(v.channels() == 1);
  CHECK(v.data()[0] == 0.0f);
  CHECK(v.data()[5] == 1.0f);
  for (int i = 1; i < 6; ++i) CHECK(v.data()[i] > v.data()[i - 1]);

  const Volume flat = encode_label_channel(LabelVolume({2, 2, 2}, 1));
  CHECK((flat.data().array() == 0.0f).all());
}

TEST_CASE("encode_label_channel is monotone and bounded on random maps") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int classes = 2 + static_cast<int>(uniform_index(rng, 8));
    const auto l = test::random_labels({4, 5, 6}, classes, rng);
    const Volume v = encode_label_channel(l);
    for (std::size_t i = 0; i < l.labels().size(); ++i)
      for (std::size_t j = 0; j < l.labels().size(); j += 7) {
        if (l.labels()[i] < l.labels()[j]) CHECK(v.data()[static_cast<Index>(i)] < v.data()[static_cast<Index>(j)]);
      }
    CHECK(v.data().array().minCoeff() >= 0.0f);
    CHECK(v.data().array().maxCoeff() <= 1.0f);
  }
}

TEST_CASE("sample_patches realises the 2:1 positive ratio") {
  const Sample s = lesion_sample({32, 32, 32}, true);
  const auto patches = sample_patches(s, {16, 16, 16}, 6, PosNegRatio{2, 1}, 42);
  REQUIRE(patches.size() == 6);
  int positives = 0;
  for (const auto& p : patches) {
    positives += p.positive;
    if (p.positive) CHECK(p.target_path.count_nonzero() > 0);
    CHECK(p.inputs.extent() == Extent{16, 16, 16});
    CHECK(p.target_path.extent() == Extent{16, 16, 16});
  }
  CHECK(positives == 4);
}

TEST_CASE("healthy samples yield only negative patches") {
  const Sample s = lesion_sample({32, 32, 32}, false);
  const auto patches = sample_patches(s, {16, 16, 16}, 6, PosNegRatio{2, 1}, 42);
  REQUIRE(patches.size() == 6);
  for (const auto& p : patches) CHECK_FALSE(p.positive);
}

TEST_CASE("sample_patches is deterministic per seed and stays inside the volume") {
  const Sample s = lesion_sample({32, 24, 40}, true);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = sample_patches(s, {16, 8, 16}, 9, PosNegRatio{2, 1}, seed, true);
    const auto b = sample_patches(s, {16, 8, 16}, 9, PosNegRatio{2, 1}, seed, true);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].origin == b[i].origin);
      const Extent size{16, 8, 16};
      for (int ax = 0; ax < 3; ++ax) {
        CHECK(a[i].origin[static_cast<std::size_t>(ax)] >= 0);
        CHECK(a[i].origin[static_cast<std::size_t>(ax)] + size[static_cast<std::size_t>(ax)] <=
              s.ct.extent()[static_cast<std::size_t>(ax)]);
      }
      REQUIRE(a[i].inputs.channels() == 3);
      const auto third = a[i].inputs.data().array().segment(2 * 16 * 8 * 16, 16 * 8 * 16);
      CHECK(third.minCoeff() >= 0.0f);
      CHECK(third.maxCoeff() <= 1.0f);
    }
  }
}

TEST_CASE("patch larger than the volume is a configuration error") {
  const Sample s = lesion_sample({16, 16, 16}, true);
  CHECK_THROWS_AS(sample_patches(s, {32, 16, 16}, 3, PosNegRatio{2, 1}, 0), ConfigError);
}

TEST_CASE("CT normalisation at the window floor is all zeros") {
  Volume ct(1, {4, 4, 4}, {1, 1, 1}, -200.0f);
  const Volume n = normalize_intensities(ct, Modality::ct);
  CHECK((n.data().array() == 0.0f).all());
}

TEST_CASE("PET normalisation is clipped to 1.5") {
  Rng rng(5);
  Volume pet(1, {8, 8, 8}, {1, 1, 1});
  for (Index i = 0; i < pet.data().size(); ++i) pet.data()[i] = static_cast<float>(uniform(rng, 0.0, 10.0));
  pet.data()[17] = 500.0f;
  const Volume n = normalize_intensities(pet, Modality::pet);
  CHECK(n.data().array().maxCoeff() <= 1.5f);
  CHECK(n.data().array().minCoeff() >= 0.0f);
  const Volume flat = normalize_intensities(Volume(1, {4, 4, 4}, {1, 1, 1}, 3.0f), Modality::pet);
  CHECK((flat.data().array() == 0.0f).all());
}

TEST_CASE("CT normalisation is idempotent on random volumes") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    Volume ct(1, {6, 7, 8}, {1, 1, 1});
    for (Index i = 0; i < ct.data().size(); ++i) ct.data()[i] = static_cast<float>(uniform(rng, -1000.0, 1500.0));
    const Volume once = normalize_intensities(ct, Modality::ct);
    const Volume twice = normalize_intensities(once, Modality::ct);
    CHECK((once.data().array() - twice.data().array()).abs().maxCoeff() == 0.0f);
  }
}

TEST_CASE("percentile interpolates linearly") {
  Volume v(1, {1, 1, 5}, {1, 1, 1});
  for (int i = 0; i < 5; ++i) v.data()[i] = static_cast<float>(4 - i);
  CHECK(percentile(v, 0.0) == doctest::Approx(0.0));
  CHECK(percentile(v, 50.0) == doctest::Approx(2.0));
  CHECK(percentile(v, 100.0) == doctest::Approx(4.0));
  CHECK(percentile(v, 12.5) == doctest::Approx(0.5));
}
