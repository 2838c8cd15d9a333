#include "grasp/phantom.hpp"

#include "grasp/digest.hpp"
#include "grasp/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

namespace grasp {

namespace {

constexpr double kAirHu = -1000.0;
constexpr double kBodyHu = -80.0;
constexpr double kBoneHu = 700.0;
constexpr double kTumorCtOffset = 8.0;

struct Grid {
  Extent e;
  Index idx(Index i, Index j, Index k) const { return (i * e[1] + j) * e[2] + k; }
  bool inside(Index i, Index j, Index k) const { return i >= 0 && j >= 0 && k >= 0 && i < e[0] && j < e[1] && k < e[2]; }
};

bool in_ellipsoid(const std::array<double, 3>& c, const std::array<double, 3>& r, Index i, Index j, Index k) {
  const double a = (static_cast<double>(i) - c[0]) / r[0];
  const double b = (static_cast<double>(j) - c[1]) / r[1];
  const double d = (static_cast<double>(k) - c[2]) / r[2];
  return a * a + b * b + d * d <= 1.0;
}

template <typename Fn>
void for_sphere(const std::array<Index, 3>& c, int r, Fn&& fn) {
  for (Index di = -r; di <= r; ++di)
    for (Index dj = -r; dj <= r; ++dj)
      for (Index dk = -r; dk <= r; ++dk)
        if (di * di + dj * dj + dk * dk <= static_cast<Index>(r) * r) fn(c[0] + di, c[1] + dj, c[2] + dk);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("phantom config: " + what);
}

// Places a sphere fully inside voxels labelled `host`, keeping a 2-voxel gap to `taken`.
// Feasible centres are enumerated, so failure means no placement exists.
std::optional<Sphere> place_sphere(Rng& rng, const Grid& g, const std::vector<std::uint16_t>& organs,
                                   const std::vector<Index>& host_voxels, int host, int radius,
                                   std::vector<std::uint8_t>& taken) {
  std::vector<std::array<Index, 3>> feasible;
  for (Index idx : host_voxels) {
    const std::array<Index, 3> c{idx / (g.e[1] * g.e[2]), (idx / g.e[2]) % g.e[1], idx % g.e[2]};
    bool ok = true;
    for_sphere(c, radius, [&](Index i, Index j, Index k) {
      ok = ok && g.inside(i, j, k) && organs[static_cast<std::size_t>(g.idx(i, j, k))] == host;
    });
    if (!ok) continue;
    for_sphere(c, radius + 2, [&](Index i, Index j, Index k) {
      ok = ok && (!g.inside(i, j, k) || !taken[static_cast<std::size_t>(g.idx(i, j, k))]);
    });
    if (ok) feasible.push_back(c);
  }
  if (feasible.empty()) return std::nullopt;
  const auto c = feasible[uniform_index(rng, feasible.size())];
  for_sphere(c, radius, [&](Index i, Index j, Index k) { taken[static_cast<std::size_t>(g.idx(i, j, k))] = 1; });
  return Sphere{c, radius, host, 0.0};
}

}  // namespace

void PhantomConfig::validate() const {
  for (Index e : grid) require(e >= 8, "grid extents must be >= 8");
  for (double s : spacing) require(s > 0.0 && std::isfinite(s), "spacing must be positive");
  require(num_organs >= 1 && num_organs < 65535, "num_organs out of range");
  for (int id : hot_organ_ids) require(id >= 1 && id <= num_organs, "hot organ id out of range");
  for (int id : tumor_host_ids) require(id >= 1 && id <= num_organs, "tumor host id out of range");
  for (int id : hot_organ_ids)
    require(std::find(tumor_host_ids.begin(), tumor_host_ids.end(), id) == tumor_host_ids.end(),
            "hot_organ_ids and tumor_host_ids must be disjoint");
  require(tumors_per_case.lo >= 0 && tumors_per_case.hi >= tumors_per_case.lo, "tumors_per_case range");
  require(tumor_radius_voxels.lo >= 1 && tumor_radius_voxels.hi >= tumor_radius_voxels.lo, "tumor_radius_voxels range");
  require(hot_spots_per_organ.lo >= 0 && hot_spots_per_organ.hi >= hot_spots_per_organ.lo, "hot_spots_per_organ range");
  require(organ_radius_voxels.lo > 1.0 && organ_radius_voxels.hi >= organ_radius_voxels.lo, "organ_radius_voxels range");
  require(healthy_fraction >= 0.0 && healthy_fraction <= 1.0, "healthy_fraction must lie in [0, 1]");
  require(noise_sigma >= 0.0 && ct_noise_sigma >= 0.0, "noise scales must be >= 0");
  require(tumor_uptake.lo > hot_spot_uptake.hi && tumor_uptake.lo > hot_uptake,
          "tumour uptake must exceed every healthy uptake");
  require(tumor_uptake.hi >= tumor_uptake.lo && hot_spot_uptake.hi >= hot_spot_uptake.lo, "uptake ranges");
  require(max_retries >= 1, "max_retries must be >= 1");
  require(tumors_per_case.hi == 0 || !tumor_host_ids.empty(), "tumours requested but no host organs");
}

bool PhantomConfig::is_hot(int organ) const {
  return std::find(hot_organ_ids.begin(), hot_organ_ids.end(), organ) != hot_organ_ids.end();
}

bool PhantomConfig::is_host(int organ) const {
  return std::find(tumor_host_ids.begin(), tumor_host_ids.end(), organ) != tumor_host_ids.end();
}

double organ_ct_mean(int organ) {
  static constexpr int kBand[] = {0, 2, 1, 3, 4};
  const int slot = organ >= 1 && organ <= 5 ? kBand[organ - 1] : organ - 1;
  return 40.0 + 70.0 * slot;
}

PhantomCase generate_case(const PhantomConfig& cfg, int case_index) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(case_index), 0x9a7));
  const Grid g{cfg.grid};
  const Index nvox = g.e[0] * g.e[1] * g.e[2];

  PhantomCase out;
  auto& prov = out.provenance;
  prov.case_index = case_index;

  std::array<double, 3> body_c{}, body_r{};
  for (int a = 0; a < 3; ++a) {
    body_c[a] = (static_cast<double>(g.e[a]) - 1.0) / 2.0;
    body_r[a] = static_cast<double>(g.e[a]) * uniform(rng, 0.42, 0.47);
  }
  // Spine-like bone rod along the first axis, behind the organs.
  const double bone_j = body_c[1] + 0.62 * body_r[1];
  const double bone_r = std::max(1.5, 0.05 * static_cast<double>(g.e[1]));

  std::vector<std::uint8_t> body(static_cast<std::size_t>(nvox)), bone(static_cast<std::size_t>(nvox));
  for (Index i = 0; i < g.e[0]; ++i)
    for (Index j = 0; j < g.e[1]; ++j)
      for (Index k = 0; k < g.e[2]; ++k) {
        const auto id = static_cast<std::size_t>(g.idx(i, j, k));
        body[id] = in_ellipsoid(body_c, body_r, i, j, k);
        const double dj = static_cast<double>(j) - bone_j, dk = static_cast<double>(k) - body_c[2];
        bone[id] = body[id] && dj * dj + dk * dk <= bone_r * bone_r;
      }

  // Organs: non-overlapping axis-aligned ellipsoids inside the body.
  std::vector<std::uint16_t> organs(static_cast<std::size_t>(nvox), 0);
  for (int label = 1; label <= cfg.num_organs; ++label) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      Ellipsoid el;
      el.label = label;
      for (int a = 0; a < 3; ++a) {
        el.radii[a] = uniform(rng, cfg.organ_radius_voxels.lo, cfg.organ_radius_voxels.hi);
        el.centre[a] = uniform(rng, el.radii[a] + 1.0, static_cast<double>(g.e[a]) - el.radii[a] - 2.0);
      }
      std::array<double, 3> margin = el.radii;
      for (double& r : margin) r += 1.5;
      bool ok = true;
      std::vector<Index> voxels;
      const auto lo = [&](int a) { return std::max<Index>(0, static_cast<Index>(std::floor(el.centre[a] - margin[a]))); };
      const auto hi = [&](int a) {
        return std::min<Index>(g.e[a] - 1, static_cast<Index>(std::ceil(el.centre[a] + margin[a])));
      };
      for (Index i = lo(0); ok && i <= hi(0); ++i)
        for (Index j = lo(1); ok && j <= hi(1); ++j)
          for (Index k = lo(2); ok && k <= hi(2); ++k) {
            const auto id = static_cast<std::size_t>(g.idx(i, j, k));
            if (in_ellipsoid(el.centre, margin, i, j, k) && (organs[id] != 0 || bone[id])) ok = false;
            if (in_ellipsoid(el.centre, el.radii, i, j, k)) {
              if (!body[id]) ok = false;
              voxels.push_back(g.idx(i, j, k));
            }
          }
      if (!ok || voxels.size() < 27) continue;
      for (Index v : voxels) organs[static_cast<std::size_t>(v)] = static_cast<std::uint16_t>(label);
      el.ct_mean = organ_ct_mean(label) + uniform(rng, -10.0, 10.0);
      prov.organs.push_back(el);
      placed = true;
    }
    if (!placed)
      throw GenerationError("case " + std::to_string(case_index) + ": could not place organ " + std::to_string(label) +
                            " after " + std::to_string(cfg.max_retries) + " attempts (grid too small for organ radii?)");
  }

  std::vector<std::vector<Index>> organ_voxels(static_cast<std::size_t>(cfg.num_organs + 1));
  for (Index v = 0; v < nvox; ++v) organ_voxels[organs[static_cast<std::size_t>(v)]].push_back(v);

  std::vector<std::uint8_t> taken(static_cast<std::size_t>(nvox), 0);
  std::vector<std::uint16_t> lesion(static_cast<std::size_t>(nvox), 0);

  prov.healthy = uniform01(rng) < cfg.healthy_fraction;
  if (!prov.healthy && cfg.tumors_per_case.hi > 0) {
    const int n_tumors = static_cast<int>(uniform_int(rng, std::max(1, cfg.tumors_per_case.lo), cfg.tumors_per_case.hi));
    for (int t = 0; t < n_tumors; ++t) {
      const int radius = static_cast<int>(uniform_int(rng, cfg.tumor_radius_voxels.lo, cfg.tumor_radius_voxels.hi));
      // Preferred host first, then the others in a seeded order.
      std::vector<int> hosts = cfg.tumor_host_ids;
      shuffle(hosts.begin(), hosts.end(), rng);
      // Shrink toward the minimum radius before giving up.
      std::optional<Sphere> placed;
      for (int r = radius; r >= cfg.tumor_radius_voxels.lo && !placed; --r)
        for (int host : hosts) {
          placed = place_sphere(rng, g, organs, organ_voxels[static_cast<std::size_t>(host)], host, r, taken);
          if (placed) break;
        }
      if (!placed)
        throw GenerationError("case " + std::to_string(case_index) + ": no host organ can hold tumour " +
                              std::to_string(t) + " of radius " + std::to_string(radius));
      Sphere s = *placed;
      s.uptake = uniform(rng, cfg.tumor_uptake.lo, cfg.tumor_uptake.hi);
      for_sphere(s.centre, s.radius, [&](Index i, Index j, Index k) { lesion[static_cast<std::size_t>(g.idx(i, j, k))] = 1; });
      prov.tumors.push_back(s);
    }
  }
  prov.healthy = prov.tumors.empty();

  for (int hot : cfg.hot_organ_ids) {
    const int n_spots = static_cast<int>(uniform_int(rng, cfg.hot_spots_per_organ.lo, cfg.hot_spots_per_organ.hi));
    for (int t = 0; t < n_spots; ++t) {
      const int radius = static_cast<int>(uniform_int(rng, cfg.tumor_radius_voxels.lo, cfg.tumor_radius_voxels.hi));
      auto placed = place_sphere(rng, g, organs, organ_voxels[static_cast<std::size_t>(hot)], hot, radius, taken);
      if (!placed) continue;  // small organ already crowded
      Sphere s = *placed;
      s.uptake = uniform(rng, cfg.hot_spot_uptake.lo, cfg.hot_spot_uptake.hi);
      prov.hot_spots.push_back(s);
    }
  }

  // Intensities.
  Volume ct(1, g.e, cfg.spacing), uptake(1, g.e, cfg.spacing);
  std::vector<double> organ_ct(static_cast<std::size_t>(cfg.num_organs + 1), kBodyHu);
  for (const auto& el : prov.organs) organ_ct[static_cast<std::size_t>(el.label)] = el.ct_mean;
  for (Index v = 0; v < nvox; ++v) {
    const auto id = static_cast<std::size_t>(v);
    const int organ = organs[id];
    double hu = kAirHu, suv = 0.0;
    if (body[id]) {
      hu = bone[id] ? kBoneHu : organ_ct[static_cast<std::size_t>(organ)];
      suv = cfg.body_uptake;
      if (organ != 0) suv = cfg.is_hot(organ) ? cfg.hot_uptake : cfg.host_uptake;
    }
    ct.data()[v] = static_cast<float>(hu);
    uptake.data()[v] = static_cast<float>(suv);
  }
  for (const auto& s : prov.hot_spots)
    for_sphere(s.centre, s.radius, [&](Index i, Index j, Index k) { uptake.data()[g.idx(i, j, k)] = static_cast<float>(s.uptake); });
  for (const auto& s : prov.tumors)
    for_sphere(s.centre, s.radius, [&](Index i, Index j, Index k) {
      uptake.data()[g.idx(i, j, k)] = static_cast<float>(s.uptake);
      ct.data()[g.idx(i, j, k)] = static_cast<float>(organ_ct[static_cast<std::size_t>(s.host)] + kTumorCtOffset);
    });

  Volume pet = uptake;
  for (Index v = 0; v < nvox; ++v) {
    ct.data()[v] += static_cast<float>(cfg.ct_noise_sigma * normal(rng));
    pet.data()[v] = std::max(0.0f, pet.data()[v] + static_cast<float>(cfg.noise_sigma * normal(rng)));
  }

  char id[32];
  std::snprintf(id, sizeof id, "case_%04d", case_index);
  auto& s = out.sample;
  s.id = id;
  s.spacing = cfg.spacing;
  s.ct = std::move(ct);
  s.pet = std::move(pet);
  s.ana = LabelVolume(g.e, cfg.num_organs + 1, std::move(organs));
  s.path = LabelVolume(g.e, 2, std::move(lesion));
  prov.uptake = std::move(uptake);
  s.validate();
  return out;
}

std::vector<const ManifestRecord*> Manifest::split(const std::string& name) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.split == name) out.push_back(&r);
  return out;
}

namespace {

std::uint64_t digest_file(const std::filesystem::path& p, std::uint64_t h) {
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes, h);
}

std::string dataset_digest(const std::string& manifest_text, const Manifest& m) {
  std::uint64_t h = fnv1a(manifest_text);
  for (const auto& r : m.records)
    for (const auto* p : {&r.ct, &r.pet, &r.ana, &r.path}) h = digest_file(m.root / *p, h);
  return hex64(h);
}

}  // namespace

Manifest generate_dataset(const PhantomConfig& cfg, int n_train, int n_val, const std::filesystem::path& out_dir) {
  if (n_train < 1 || n_val < 1) throw ConfigError("n_train and n_val must be >= 1");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "cases", ec);
  if (ec) throw WriteError("cannot create " + (out_dir / "cases").string() + ": " + ec.message());

  Manifest m;
  m.root = out_dir;
  for (int i = 0; i < n_train + n_val; ++i) {
    const PhantomCase c = generate_case(cfg, i);
    ManifestRecord r;
    r.id = c.sample.id;
    r.split = i < n_train ? "train" : "val";
    r.n_tumors = static_cast<int>(c.provenance.tumors.size());
    r.ct = std::filesystem::path("cases") / (r.id + "_ct.gvol");
    r.pet = std::filesystem::path("cases") / (r.id + "_pet.gvol");
    r.ana = std::filesystem::path("cases") / (r.id + "_ana.glab");
    r.path = std::filesystem::path("cases") / (r.id + "_path.glab");
    save_volume(c.sample.ct, out_dir / r.ct);
    save_volume(c.sample.pet, out_dir / r.pet);
    save_labels(*c.sample.ana, out_dir / r.ana);
    save_labels(c.sample.path, out_dir / r.path);
    m.records.push_back(std::move(r));
  }

  std::ostringstream text;
  text << "id\tsplit\tn_tumors\tct\tpet\tana\tpath\n";
  for (const auto& r : m.records)
    text << r.id << '\t' << r.split << '\t' << r.n_tumors << '\t' << r.ct.generic_string() << '\t' << r.pet.generic_string()
         << '\t' << r.ana.generic_string() << '\t' << r.path.generic_string() << '\n';
  {
    std::ofstream out(out_dir / "manifest.tsv", std::ios::trunc);
    if (!out) throw WriteError("cannot write manifest in " + out_dir.string());
    out << text.str();
  }
  m.digest = dataset_digest(text.str(), m);
  return m;
}

Manifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DependencyError("manifest not found: " + manifest_path.string());
  Manifest m;
  m.root = manifest_path.parent_path();
  std::string line, text;
  std::getline(in, line);
  text = line + '\n';
  if (line != "id\tsplit\tn_tumors\tct\tpet\tana\tpath") throw FormatError(manifest_path.string() + ": unexpected header");
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    text += line + '\n';
    std::istringstream row(line);
    ManifestRecord r;
    std::string n, ct, pet, ana, path;
    if (!std::getline(row, r.id, '\t') || !std::getline(row, r.split, '\t') || !std::getline(row, n, '\t') ||
        !std::getline(row, ct, '\t') || !std::getline(row, pet, '\t') || !std::getline(row, ana, '\t') ||
        !std::getline(row, path))
      throw FormatError(manifest_path.string() + ": malformed row '" + line + "'");
    r.n_tumors = std::stoi(n);
    r.ct = ct;
    r.pet = pet;
    r.ana = ana;
    r.path = path;
    if (!ids.insert(r.id).second) throw FormatError(manifest_path.string() + ": duplicate id " + r.id);
    m.records.push_back(std::move(r));
  }
  m.digest = dataset_digest(text, m);
  return m;
}

Sample load_sample(const ManifestRecord& r, const std::filesystem::path& root) {
  Sample s;
  s.id = r.id;
  s.ct = load_volume(root / r.ct);
  s.pet = load_volume(root / r.pet);
  s.ana = load_labels(root / r.ana);
  s.path = load_labels(root / r.path);
  s.spacing = s.ct.spacing();
  s.validate();
  return s;
}

std::vector<Index> boundary_voxels(const LabelVolume& ana) {
  const Extent e = ana.extent();
  std::vector<Index> out;
  static constexpr int kOff[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (Index i = 0; i < e[0]; ++i)
    for (Index j = 0; j < e[1]; ++j)
      for (Index k = 0; k < e[2]; ++k) {
        const auto l = ana.at(i, j, k);
        for (const auto& o : kOff) {
          const Index a = i + o[0], b = j + o[1], c = k + o[2];
          if (a < 0 || b < 0 || c < 0 || a >= e[0] || b >= e[1] || c >= e[2]) continue;
          if (ana.at(a, b, c) != l) {
            out.push_back(ana.index(i, j, k));
            break;
          }
        }
      }
  return out;
}

LabelVolume degrade_pseudolabels(const LabelVolume& ana, double error_rate, std::uint64_t rng_seed) {
  if (!(error_rate >= 0.0 && error_rate <= 1.0)) throw ConfigError("error_rate must lie in [0, 1]");
  LabelVolume out = ana;
  if (error_rate == 0.0) return out;
  const Extent e = ana.extent();
  Rng rng(rng_seed);
  static constexpr int kOff[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (Index v : boundary_voxels(ana)) {
    if (uniform01(rng) >= error_rate) continue;
    const Index i = v / (e[1] * e[2]), j = (v / e[2]) % e[1], k = v % e[2];
    const auto own = ana.at(i, j, k);
    std::vector<std::uint16_t> candidates;
    for (const auto& o : kOff) {
      const Index a = i + o[0], b = j + o[1], c = k + o[2];
      if (a < 0 || b < 0 || c < 0 || a >= e[0] || b >= e[1] || c >= e[2]) continue;
      const auto l = ana.at(a, b, c);
      if (l != own && std::find(candidates.begin(), candidates.end(), l) == candidates.end()) candidates.push_back(l);
    }
    out.at(i, j, k) = candidates[uniform_index(rng, candidates.size())];
  }
  return out;
}

}  // namespace grasp
