#include "grasp/checkpoint.hpp"

#include "grasp/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace grasp {

namespace {

constexpr const char* kMagic = "GCKPT1";

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in native little-endian order");

}  // namespace

const ParameterSet<float>& Checkpoint::at(const std::string& ns) const {
  auto it = sets.find(ns);
  if (it == sets.end()) throw InputError("checkpoint has no '" + ns + "' parameters");
  return it->second;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["params"] = nlohmann::json::array();
  std::uint64_t h = kFnvOffset;
  for (const auto& [ns, set] : ckpt.sets)
    for (const auto& p : set.items()) {
      header["params"].push_back(
          {{"ns", ns}, {"name", p.name}, {"group", p.group}, {"shape", p.var.shape()}, {"frozen", p.frozen}});
      h = fnv1a(p.var.value().data(), static_cast<std::size_t>(p.var.value().size()) * sizeof(float), h);
    }
  header["digest"] = hex64(h);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WriteError("cannot write checkpoint " + path.string());
  out << kMagic << '\n' << header.dump() << '\n';
  for (const auto& [ns, set] : ckpt.sets)
    for (const auto& p : set.items())
      out.write(reinterpret_cast<const char*>(p.var.value().data()),
                static_cast<std::streamsize>(p.var.value().size() * static_cast<Index>(sizeof(float))));
  if (!out) throw WriteError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("checkpoint not found: " + path.string());
  std::string magic, line;
  if (!std::getline(in, magic) || magic != kMagic) throw FormatError(path.string() + ": not a checkpoint");
  if (!std::getline(in, line)) throw TruncationError(path.string() + ": missing header");
  auto header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.contains("params") || !header.contains("digest"))
    throw FormatError(path.string() + ": malformed checkpoint header");

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  std::uint64_t h = kFnvOffset;
  try {
    for (const auto& e : header.at("params")) {
      const Shape shape = e.at("shape").get<Shape>();
      Tensor<float> t(shape);
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * static_cast<Index>(sizeof(float))));
      if (in.gcount() != static_cast<std::streamsize>(t.size() * static_cast<Index>(sizeof(float))))
        throw TruncationError(path.string() + ": payload ends early");
      h = fnv1a(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float), h);
      auto& set = ckpt.sets[e.at("ns").get<std::string>()];
      const auto name = e.at("name").get<std::string>();
      set.add(name, e.at("group").get<std::string>(), std::move(t));
      if (e.at("frozen").get<bool>()) {
        set.entry(name).frozen = true;
        set.entry(name).var.set_requires_grad(false);
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": bad parameter entry: " + ex.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after payload");
  if (hex64(h) != header.at("digest").get<std::string>()) throw FormatError(path.string() + ": payload digest mismatch");
  return ckpt;
}

void copy_values(const ParameterSet<float>& src, ParameterSet<float>& dst) {
  for (auto& p : dst.items()) {
    if (!src.contains(p.name)) throw IncompatibilityError("checkpoint lacks parameter " + p.name);
    const auto& v = src[p.name].value();
    if (v.shape() != p.var.shape())
      throw IncompatibilityError("shape mismatch for " + p.name + ": " + shape_str(v.shape()) + " vs " +
                                 shape_str(p.var.shape()));
    p.var.mutable_value() = v;
  }
  if (src.items().size() != dst.items().size()) throw IncompatibilityError("checkpoint parameter count differs");
}

}  // namespace grasp
