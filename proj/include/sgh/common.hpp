#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

namespace sgh {

static_assert(std::endian::native == std::endian::little,
              "binary file formats assume a little-endian host");

/// Raised when user-supplied configuration or arguments are invalid.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed files, I/O failures and numerical breakdowns.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SplitMix64 finalizer; used to derive independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, Rest... rest) {
  std::uint64_t h = mix_seed(seed);
  ((h = mix_seed(h ^ static_cast<std::uint64_t>(rest))), ...);
  return h;
}

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) with a fixed bit recipe (independent of the
/// standard library's distribution implementation).
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Integer uniform in [lo, hi] inclusive.
inline int uniform_int(Rng& rng, int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(rng() % span);
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

// ---------------------------------------------------------------------------
// Little-endian binary I/O with a running CRC-32.

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& os) : os_(os) {}

  void bytes(const void* data, std::size_t n) {
    os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    crc_ = crc32(crc_, static_cast<const Bytef*>(data), static_cast<uInt>(n));
  }
  template <typename T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    bytes(&v, sizeof(T));
  }
  template <typename T>
  void array(const std::vector<T>& v) {
    if (!v.empty()) bytes(v.data(), v.size() * sizeof(T));
  }
  void string(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  /// Appends the CRC of everything written so far (not itself covered).
  void finish() {
    const auto c = static_cast<std::uint32_t>(crc_);
    os_.write(reinterpret_cast<const char*>(&c), sizeof(c));
    if (!os_) throw RuntimeError("write failed");
  }

 private:
  std::ostream& os_;
  uLong crc_ = crc32(0L, Z_NULL, 0);
};

class BinaryReader {
 public:
  BinaryReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  void bytes(void* data, std::size_t n) {
    is_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw RuntimeError(what_ + ": truncated file");
    }
    crc_ = crc32(crc_, static_cast<const Bytef*>(data), static_cast<uInt>(n));
  }
  template <typename T>
  T pod() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }
  template <typename T>
  void array(std::vector<T>& v, std::size_t count) {
    v.resize(count);
    if (count) bytes(v.data(), count * sizeof(T));
  }
  std::string string(std::uint32_t max_len = 1u << 20) {
    const auto n = pod<std::uint32_t>();
    if (n > max_len) throw RuntimeError(what_ + ": corrupt string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  /// Reads the trailing CRC and checks it against the bytes consumed.
  void finish() {
    std::uint32_t stored = 0;
    is_.read(reinterpret_cast<char*>(&stored), sizeof(stored));
    if (is_.gcount() != sizeof(stored)) throw RuntimeError(what_ + ": truncated file");
    if (stored != static_cast<std::uint32_t>(crc_)) {
      throw RuntimeError(what_ + ": checksum mismatch");
    }
    if (is_.peek() != std::char_traits<char>::eof()) {
      throw RuntimeError(what_ + ": trailing bytes after checksum");
    }
  }

 private:
  std::istream& is_;
  std::string what_;
  uLong crc_ = crc32(0L, Z_NULL, 0);
};

}  // namespace sgh
