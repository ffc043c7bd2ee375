#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace unirag {

// 64-bit FNV-1a. Stable across platforms; used for cache fingerprints and
// for deriving per-token seeds.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= static_cast<std::uint64_t>(p[i]);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// Finalizer from splitmix64; good avalanche for combining seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t seed_mix(std::uint64_t seed, std::string_view tag) {
  return mix64(seed ^ fnv1a64(tag));
}

inline std::uint64_t seed_mix(std::uint64_t seed, std::string_view tag,
                              std::uint64_t extra) {
  return mix64(mix64(seed ^ fnv1a64(tag)) ^ extra);
}

// CRC-32 (IEEE, reflected 0xEDB88320), streaming.
class Crc32 {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint32_t c = state_;
    for (std::size_t i = 0; i < len; ++i) {
      c = table()[(c ^ p[i]) & 0xffu] ^ (c >> 8);
    }
    state_ = c;
  }

  void update(std::string_view s) { update(s.data(), s.size()); }

  std::uint32_t value() const { return state_ ^ 0xffffffffu; }

  static std::uint32_t of(const void* data, std::size_t len) {
    Crc32 c;
    c.update(data, len);
    return c.value();
  }

 private:
  static const std::array<std::uint32_t, 256>& table() {
    static const std::array<std::uint32_t, 256> t = [] {
      std::array<std::uint32_t, 256> out{};
      for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int bit = 0; bit < 8; ++bit) {
          c = (c & 1u) ? (0xedb88320u ^ (c >> 1)) : (c >> 1);
        }
        out[i] = c;
      }
      return out;
    }();
    return t;
  }

  std::uint32_t state_ = 0xffffffffu;
};

inline std::string to_hex(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(8, '0');
  for (int i = 7; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xfu];
    v >>= 4;
  }
  return out;
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xfull];
    v >>= 4;
  }
  return out;
}

}  // namespace unirag
