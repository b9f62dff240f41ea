#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "sgh/common.hpp"

namespace sgh {

inline constexpr std::size_t words_for_bits(int bits) { return (static_cast<std::size_t>(bits) + 63) / 64; }

/// K signs packed into 64-bit words: bit j of the code lives in word j/64 at
/// bit position j%64; +1 is a set bit, -1 a clear bit. Pad bits are zero.
struct BinaryCode {
  int bits = 0;
  std::vector<std::uint64_t> words;

  BinaryCode() = default;
  explicit BinaryCode(int k) : bits(k), words(words_for_bits(k), 0) {}

  int sign(int j) const { return (words[j / 64] >> (j % 64)) & 1U ? +1 : -1; }
  void set(int j, bool positive) {
    const auto mask = std::uint64_t{1} << (j % 64);
    if (positive) {
      words[j / 64] |= mask;
    } else {
      words[j / 64] &= ~mask;
    }
  }

  bool operator==(const BinaryCode&) const = default;
};

/// sign(h) with sign(0) = +1.
inline BinaryCode binarize(std::span<const double> h) {
  BinaryCode code(static_cast<int>(h.size()));
  for (std::size_t j = 0; j < h.size(); ++j) {
    if (!std::isfinite(h[j])) throw RuntimeError("binarize: non-finite code value at position " + std::to_string(j));
    code.set(static_cast<int>(j), h[j] >= 0.0);
  }
  return code;
}

inline int hamming_words(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  int d = 0;
  for (std::size_t w = 0; w < a.size(); ++w) d += std::popcount(a[w] ^ b[w]);
  return d;
}

inline int hamming_distance(const BinaryCode& a, const BinaryCode& b) {
  if (a.bits != b.bits) {
    throw ValidationError("hamming_distance: code lengths differ (" + std::to_string(a.bits) + " vs " +
                          std::to_string(b.bits) + ")");
  }
  return hamming_words(a.words, b.words);
}

struct Neighbor {
  std::size_t position = 0;
  int distance = 0;
  bool operator==(const Neighbor&) const = default;
};

/// Packed binary codes with identity labels. Codes are stored contiguously,
/// words_per_code() words each.
class RetrievalIndex {
 public:
  static constexpr std::uint32_t kVersion = 1;

  RetrievalIndex() = default;
  RetrievalIndex(int bits, int identity_count) : bits_(bits), identity_count_(identity_count) {
    if (bits < 1) throw ValidationError("index code length must be >= 1");
    if (identity_count < 0) throw ValidationError("identity_count must be >= 0");
  }

  void add(const BinaryCode& code, int label, std::string source = {}) {
    if (code.bits != bits_) {
      throw ValidationError("index holds " + std::to_string(bits_) + "-bit codes, got " +
                            std::to_string(code.bits));
    }
    if (label < 0 || label >= identity_count_) {
      throw ValidationError("label " + std::to_string(label) + " outside [0, " + std::to_string(identity_count_) + ")");
    }
    words_.insert(words_.end(), code.words.begin(), code.words.end());
    labels_.push_back(static_cast<std::uint32_t>(label));
    sources_.push_back(std::move(source));
  }

  int bits() const { return bits_; }
  int identity_count() const { return identity_count_; }
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::size_t words_per_code() const { return words_for_bits(bits_); }

  std::span<const std::uint64_t> code_words(std::size_t i) const {
    return {words_.data() + i * words_per_code(), words_per_code()};
  }
  BinaryCode code(std::size_t i) const {
    BinaryCode c(bits_);
    const auto w = code_words(i);
    std::copy(w.begin(), w.end(), c.words.begin());
    return c;
  }
  int label(std::size_t i) const { return static_cast<int>(labels_[i]); }
  const std::vector<std::uint32_t>& labels() const { return labels_; }
  /// Source identifiers are kept in memory only; they are not persisted.
  const std::string& source(std::size_t i) const { return sources_[i]; }

  /// Distances from the query to every entry, in database order.
  std::vector<int> distances(const BinaryCode& query) const {
    check_query(query);
    std::vector<int> out(size());
    const std::size_t wpc = words_per_code();
    for (std::size_t i = 0; i < size(); ++i) {
      out[i] = hamming_words({words_.data() + i * wpc, wpc}, query.words);
    }
    return out;
  }

  bool operator==(const RetrievalIndex& o) const {
    return bits_ == o.bits_ && identity_count_ == o.identity_count_ && words_ == o.words_ && labels_ == o.labels_;
  }

  // Serialization: "SGHI", u32 version, u32 K, u64 N, u32 c, N*ceil(K/64)
  // u64 code words, N u32 labels, u32 CRC-32 of all preceding bytes. All
  // integers little-endian.
  void save(std::ostream& os) const {
    BinaryWriter w(os);
    w.bytes("SGHI", 4);
    w.pod(kVersion);
    w.pod(static_cast<std::uint32_t>(bits_));
    w.pod(static_cast<std::uint64_t>(size()));
    w.pod(static_cast<std::uint32_t>(identity_count_));
    w.array(words_);
    w.array(labels_);
    w.finish();
  }

  static RetrievalIndex load(std::istream& is) {
    BinaryReader r(is, "index file");
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "SGHI") throw RuntimeError("index file: bad magic");
    const auto version = r.pod<std::uint32_t>();
    if (version != kVersion) throw RuntimeError("index file: unsupported version " + std::to_string(version));
    const auto bits = r.pod<std::uint32_t>();
    const auto n = r.pod<std::uint64_t>();
    const auto c = r.pod<std::uint32_t>();
    if (bits < 1 || bits > (1u << 20) || n > (std::uint64_t{1} << 40)) throw RuntimeError("index file: corrupt header");
    RetrievalIndex idx(static_cast<int>(bits), static_cast<int>(c));
    r.array(idx.words_, static_cast<std::size_t>(n) * idx.words_per_code());
    r.array(idx.labels_, static_cast<std::size_t>(n));
    r.finish();
    for (auto l : idx.labels_) {
      if (l >= c) throw RuntimeError("index file: label out of range");
    }
    const std::uint64_t pad_mask = bits % 64 ? ~((std::uint64_t{1} << (bits % 64)) - 1) : 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (idx.code_words(i).back() & pad_mask) throw RuntimeError("index file: non-zero pad bits");
    }
    idx.sources_.assign(static_cast<std::size_t>(n), std::string{});
    return idx;
  }

 private:
  void check_query(const BinaryCode& query) const {
    if (query.bits != bits_) {
      throw ValidationError("query has " + std::to_string(query.bits) + " bits but the index holds " +
                            std::to_string(bits_) + "-bit codes");
    }
  }

  int bits_ = 0;
  int identity_count_ = 0;
  std::vector<std::uint64_t> words_;
  std::vector<std::uint32_t> labels_;
  std::vector<std::string> sources_;
};

/// Full ranking by (distance, position): bucket the exact integer distances
/// and read buckets out in order, which keeps positions ascending within ties.
inline std::vector<Neighbor> rank_all(const RetrievalIndex& index, const BinaryCode& query) {
  const auto dist = index.distances(query);
  std::vector<std::size_t> bucket_start(static_cast<std::size_t>(index.bits()) + 2, 0);
  for (int d : dist) ++bucket_start[static_cast<std::size_t>(d) + 1];
  for (std::size_t b = 1; b < bucket_start.size(); ++b) bucket_start[b] += bucket_start[b - 1];
  std::vector<Neighbor> out(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) out[bucket_start[dist[i]]++] = {i, dist[i]};
  return out;
}

/// The M nearest entries, ties broken by ascending database position.
inline std::vector<Neighbor> query_topM(const RetrievalIndex& index, const BinaryCode& query, std::size_t m) {
  if (m < 1) throw ValidationError("M must be >= 1");
  if (index.empty()) throw RuntimeError("cannot query an empty index");
  auto ranked = rank_all(index, query);
  if (ranked.size() > m) ranked.resize(m);
  return ranked;
}

/// Positions (ascending) whose distance to the query is at most r.
inline std::vector<std::size_t> query_radius(const RetrievalIndex& index, const BinaryCode& query, int r) {
  if (r < 0 || r > index.bits()) {
    throw ValidationError("radius must lie in [0, " + std::to_string(index.bits()) + "]");
  }
  const auto dist = index.distances(query);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= r) out.push_back(i);
  }
  return out;
}

inline void save_index(const RetrievalIndex& index, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeError("cannot open for writing: " + path.string());
  index.save(os);
}

inline RetrievalIndex load_index(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("index file not found: " + path.string());
  return RetrievalIndex::load(is);
}

}  // namespace sgh
