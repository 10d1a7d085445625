#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace facet {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy. The CLI maps these onto exit codes: config/schema/parse -> 2,
// missing upstream artifact -> 3, numerical failure -> 4.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct schema_error : error {
  using error::error;
};
struct parse_error : error {
  using error::error;
};
struct domain_error : error {
  using error::error;
};
struct config_error : error {
  using error::error;
};
struct dependency_error : error {
  using error::error;
};
struct numerical_error : error {
  using error::error;
};

// FNV-1a, used for config/artifact fingerprints in run manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

}  // namespace facet
