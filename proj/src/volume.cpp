#include "grasp/volume.hpp"

#include "grasp/random.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace grasp {

namespace {

static_assert(std::endian::native == std::endian::little, "volume IO assumes a little-endian host");

void check_spacing(const Spacing& s) {
  for (double v : s)
    if (!(v > 0.0) || !std::isfinite(v)) throw ShapeError("spacing components must be positive and finite");
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string read_header(std::ifstream& in, const std::filesystem::path& path) {
  std::string line;
  char c;
  while (in.get(c)) {
    if (c == '\n') return line;
    if (line.size() > 256) break;
    line.push_back(c);
  }
  throw FormatError("missing or overlong header in " + path.string());
}

template <typename T>
void read_payload(std::ifstream& in, T* dst, std::size_t count, const std::filesystem::path& path) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * sizeof(T)));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != count * sizeof(T))
    throw TruncationError(path.string() + ": payload has " + std::to_string(got / sizeof(T)) + " elements, header declares " +
                          std::to_string(count));
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after payload");
}

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WriteError("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

Volume::Volume(Tensor<float> data, Spacing spacing) : data_(std::move(data)), spacing_(spacing) {
  if (data_.rank() != 4) throw ShapeError("volume data must be (C, H, W, D), got " + shape_str(data_.shape()));
  for (Index e : data_.shape())
    if (e < 1) throw ShapeError("volume extents must be >= 1");
  check_spacing(spacing_);
}

Volume::Volume(Index channels, Extent extent, Spacing spacing, float fill)
    : Volume(Tensor<float>(Shape{channels, extent[0], extent[1], extent[2]}, fill), spacing) {}

LabelVolume::LabelVolume(Extent extent, int num_classes)
    : LabelVolume(extent, num_classes, std::vector<std::uint16_t>(static_cast<std::size_t>(extent[0] * extent[1] * extent[2]))) {}

LabelVolume::LabelVolume(Extent extent, int num_classes, std::vector<std::uint16_t> labels)
    : extent_(extent), num_classes_(num_classes), labels_(std::move(labels)) {
  for (Index e : extent_)
    if (e < 1) throw ShapeError("label extents must be >= 1");
  if (num_classes_ < 1 || num_classes_ > 65536) throw ShapeError("num_classes out of range");
  if (static_cast<Index>(labels_.size()) != voxels()) throw ShapeError("label count does not match extent");
}

void LabelVolume::validate() const {
  for (auto l : labels_)
    if (l >= num_classes_) throw FormatError("label " + std::to_string(l) + " >= num_classes " + std::to_string(num_classes_));
}

Index LabelVolume::count_nonzero() const {
  return static_cast<Index>(std::count_if(labels_.begin(), labels_.end(), [](auto l) { return l != 0; }));
}

void Sample::validate() const {
  const Extent e = ct.extent();
  auto same = [&](const Spacing& s) {
    for (int i = 0; i < 3; ++i)
      if (s[i] != spacing[static_cast<std::size_t>(i)]) return false;
    return true;
  };
  if (ct.channels() != 1 || pet.channels() != 1) throw InputError(id + ": CT and PET must be single-channel");
  if (pet.extent() != e || path.extent() != e || (ana && ana->extent() != e)) throw InputError(id + ": extent mismatch");
  if (!same(ct.spacing()) || !same(pet.spacing())) throw InputError(id + ": spacing mismatch");
  for (auto l : path.labels())
    if (l > 1) throw InputError(id + ": pathology labels must be binary");
}

Volume load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::istringstream header(read_header(in, path));
  std::string magic;
  Index c = 0, h = 0, w = 0, d = 0;
  Spacing sp{};
  header >> magic >> c >> h >> w >> d >> sp[0] >> sp[1] >> sp[2];
  std::string rest;
  if (!header || magic != "GVOL1" || (header >> rest) || c < 1 || h < 1 || w < 1 || d < 1)
    throw FormatError(path.string() + ": malformed GVOL1 header");
  try {
    check_spacing(sp);
  } catch (const ShapeError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  Tensor<float> data(Shape{c, h, w, d});
  read_payload(in, data.data(), static_cast<std::size_t>(data.size()), path);
  return Volume(std::move(data), sp);
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  const auto e = v.extent();
  const auto& sp = v.spacing();
  out << "GVOL1 " << v.channels() << ' ' << e[0] << ' ' << e[1] << ' ' << e[2] << ' ' << format_double(sp[0]) << ' '
      << format_double(sp[1]) << ' ' << format_double(sp[2]) << '\n';
  out.write(reinterpret_cast<const char*>(v.data().data()), static_cast<std::streamsize>(v.data().size() * sizeof(float)));
  if (!out) throw WriteError("failed writing " + path.string());
}

LabelVolume load_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::istringstream header(read_header(in, path));
  std::string magic, rest;
  Index h = 0, w = 0, d = 0;
  int classes = 0;
  header >> magic >> h >> w >> d >> classes;
  if (!header || magic != "GLAB1" || (header >> rest) || h < 1 || w < 1 || d < 1 || classes < 1 || classes > 65536)
    throw FormatError(path.string() + ": malformed GLAB1 header");
  std::vector<std::uint16_t> labels(static_cast<std::size_t>(h * w * d));
  read_payload(in, labels.data(), labels.size(), path);
  LabelVolume out({h, w, d}, classes, std::move(labels));
  out.validate();
  return out;
}

void save_labels(const LabelVolume& v, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  const auto& e = v.extent();
  out << "GLAB1 " << e[0] << ' ' << e[1] << ' ' << e[2] << ' ' << v.num_classes() << '\n';
  out.write(reinterpret_cast<const char*>(v.labels().data()),
            static_cast<std::streamsize>(v.labels().size() * sizeof(std::uint16_t)));
  if (!out) throw WriteError("failed writing " + path.string());
}

Volume encode_label_channel(const LabelVolume& ana, const Spacing& spacing) {
  Volume out(1, ana.extent(), spacing);
  const float denom = static_cast<float>(std::max(ana.num_classes() - 1, 1));
  auto& dst = out.data();
  for (std::size_t i = 0; i < ana.labels().size(); ++i) dst[static_cast<Index>(i)] = static_cast<float>(ana.labels()[i]) / denom;
  return out;
}

Patch extract_patch(const Sample& s, const Extent& origin, const Extent& size, bool with_label_channel) {
  const Extent ext = s.ct.extent();
  for (int a = 0; a < 3; ++a)
    if (origin[a] < 0 || origin[a] + size[a] > ext[a]) throw ShapeError("patch does not fit inside the volume");
  if (with_label_channel && !s.ana) throw InputError(s.id + ": label channel requested but sample has no pseudo-labels");

  const Index channels = with_label_channel ? 3 : 2;
  Patch p;
  p.origin = origin;
  p.inputs = Volume(channels, size, s.spacing);
  p.target_path = LabelVolume(size, 2);
  if (s.ana) p.target_ana = LabelVolume(size, s.ana->num_classes());
  const float denom = s.ana ? static_cast<float>(std::max(s.ana->num_classes() - 1, 1)) : 1.0f;

  for (Index i = 0; i < size[0]; ++i)
    for (Index j = 0; j < size[1]; ++j)
      for (Index k = 0; k < size[2]; ++k) {
        const Index si = origin[0] + i, sj = origin[1] + j, sk = origin[2] + k;
        p.inputs.at(0, i, j, k) = s.ct.at(0, si, sj, sk);
        p.inputs.at(1, i, j, k) = s.pet.at(0, si, sj, sk);
        const auto lesion = s.path.at(si, sj, sk);
        p.target_path.at(i, j, k) = lesion;
        p.positive = p.positive || lesion != 0;
        if (s.ana) {
          const auto organ = s.ana->at(si, sj, sk);
          p.target_ana->at(i, j, k) = organ;
          if (with_label_channel) p.inputs.at(2, i, j, k) = static_cast<float>(organ) / denom;
        }
      }
  return p;
}

std::vector<Patch> sample_patches(const Sample& s, const Extent& patch_size, int n, PosNegRatio ratio,
                                  std::uint64_t rng_seed, bool with_label_channel) {
  const Extent ext = s.ct.extent();
  for (int a = 0; a < 3; ++a)
    if (patch_size[a] < 1 || patch_size[a] > ext[a])
      throw ConfigError("patch size " + std::to_string(patch_size[a]) + " exceeds volume extent " + std::to_string(ext[a]) +
                        " on axis " + std::to_string(a));
  if (n < 0 || ratio.positive < 0 || ratio.negative < 0 || ratio.positive + ratio.negative == 0)
    throw ConfigError("invalid patch count or sampling ratio");

  std::vector<Index> lesion;
  for (Index idx = 0; idx < static_cast<Index>(s.path.labels().size()); ++idx)
    if (s.path.labels()[static_cast<std::size_t>(idx)]) lesion.push_back(idx);

  const int n_pos = lesion.empty() ? 0
                                   : static_cast<int>(std::lround(static_cast<double>(n) * ratio.positive /
                                                                  (ratio.positive + ratio.negative)));
  Rng rng(rng_seed);
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int p = 0; p < n; ++p) {
    Extent origin{};
    if (p < n_pos) {
      const Index idx = lesion[uniform_index(rng, lesion.size())];
      const Extent centre{idx / (ext[1] * ext[2]), (idx / ext[2]) % ext[1], idx % ext[2]};
      for (int a = 0; a < 3; ++a) {
        const Index jitter = patch_size[a] / 4;
        const Index c = centre[a] + uniform_int(rng, -jitter, jitter);
        origin[a] = std::clamp<Index>(c - patch_size[a] / 2, 0, ext[a] - patch_size[a]);
      }
    } else {
      for (int a = 0; a < 3; ++a) origin[a] = uniform_int(rng, 0, ext[a] - patch_size[a]);
    }
    out.push_back(extract_patch(s, origin, patch_size, with_label_channel));
  }
  return out;
}

double percentile(const Volume& v, double q) {
  std::vector<float> values(v.data().data(), v.data().data() + v.data().size());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double a = values[lo];
  const double b = hi == lo ? a : *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

Volume normalize_intensities(const Volume& v, Modality kind, const NormalizationConfig& cfg) {
  Volume out = v;
  auto& a = out.data().array();
  if (!a.isFinite().all()) throw InputError("normalize_intensities: non-finite voxels");
  if (a.minCoeff() == a.maxCoeff()) {
    a.setZero();
    return out;
  }
  if (kind == Modality::ct) {
    a = a.max(cfg.ct_window_low).min(cfg.ct_window_high);
    const float lo = a.minCoeff(), hi = a.maxCoeff();
    if (hi == lo) {
      a.setZero();
    } else {
      a = (a - lo) / (hi - lo);
    }
  } else {
    const auto ref = static_cast<float>(percentile(v, cfg.pet_percentile));
    if (!(ref > 0.0f)) {
      a.setZero();
    } else {
      a = (a / ref).max(0.0f).min(cfg.pet_clip);
    }
  }
  return out;
}

}  // namespace grasp
