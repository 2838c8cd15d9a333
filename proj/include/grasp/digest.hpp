#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace grasp {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

/// 64-bit FNV-1a, chainable through `h`.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) { return fnv1a(s.data(), s.size(), h); }

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace grasp
