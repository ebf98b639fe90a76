#pragma once

#include <cstdint>
#include <string>

namespace morphtrack {

inline constexpr const char* kVersion = "0.1.0";

/// FNV-1a content hash of the version tag; recorded in run manifests so
/// outputs can be traced to the code that produced them.
inline std::string code_hash() {
  const std::string tag = std::string("morphtrack-") + kVersion;
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace morphtrack
