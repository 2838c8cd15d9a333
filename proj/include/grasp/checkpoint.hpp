#pragma once

#include "grasp/parameters.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace grasp {

/// Named parameter sets stored under namespaces ("path", "ana", "fusion") plus free-form
/// metadata. On disk: a magic line, one JSON header line, then little-endian float32
/// values in header order. The header records an FNV-1a digest of the payload.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, ParameterSet<float>> sets;

  bool has(const std::string& ns) const { return sets.count(ns) != 0; }
  const ParameterSet<float>& at(const std::string& ns) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws DependencyError if the file is missing, FormatError on a bad header or digest
/// mismatch, TruncationError on a short payload.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies values from `src` into same-named, same-shaped entries of `dst`.
void copy_values(const ParameterSet<float>& src, ParameterSet<float>& dst);

}  // namespace grasp
