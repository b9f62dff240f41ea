#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgh/common.hpp"
#include "sgh/datapipe.hpp"
#include "sgh/hashindex.hpp"
#include "sgh/netcore.hpp"

namespace sgh {

struct QuerySet {
  std::vector<BinaryCode> codes;
  std::vector<int> labels;

  std::size_t size() const { return codes.size(); }
  bool empty() const { return codes.empty(); }
};

// ---------------------------------------------------------------------------
// Metrics

/// AP over the first `cutoff` ranks, normalized by min(total_relevant, cutoff).
inline double average_precision(std::span<const int> relevance, std::size_t total_relevant, std::size_t cutoff) {
  if (cutoff < 1) throw ValidationError("AP cutoff must be >= 1");
  if (total_relevant == 0) return 0.0;
  const std::size_t limit = std::min(cutoff, relevance.size());
  double hits = 0.0;
  double sum = 0.0;
  for (std::size_t k = 0; k < limit; ++k) {
    if (relevance[k]) {
      hits += 1.0;
      sum += hits / static_cast<double>(k + 1);
    }
  }
  return sum / static_cast<double>(std::min(total_relevant, cutoff));
}

namespace detail {

inline std::vector<std::size_t> label_histogram(const RetrievalIndex& index) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(index.identity_count()), 0);
  for (auto l : index.labels()) ++counts[l];
  return counts;
}

inline std::size_t relevant_in_db(const std::vector<std::size_t>& hist, int label) {
  return label >= 0 && static_cast<std::size_t>(label) < hist.size() ? hist[label] : 0;
}

inline void check_queries(const RetrievalIndex& index, const QuerySet& queries) {
  if (queries.empty()) throw ValidationError("query set is empty");
  if (queries.codes.size() != queries.labels.size()) throw ValidationError("query codes and labels differ in length");
  if (index.empty()) throw RuntimeError("retrieval index is empty");
}

}  // namespace detail

/// Mean over queries of AP@cutoff on the (distance, position) ranking.
/// Relevance is identity-label equality.
inline double mean_average_precision(const RetrievalIndex& index, const QuerySet& queries, std::size_t cutoff = 50) {
  detail::check_queries(index, queries);
  const auto hist = detail::label_histogram(index);
  double total = 0.0;
  std::vector<int> rel;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto ranked = query_topM(index, queries.codes[qi], cutoff);
    rel.assign(ranked.size(), 0);
    for (std::size_t k = 0; k < ranked.size(); ++k) rel[k] = index.label(ranked[k].position) == queries.labels[qi];
    total += average_precision(rel, detail::relevant_in_db(hist, queries.labels[qi]), cutoff);
  }
  return total / static_cast<double>(queries.size());
}

/// Mean over queries of the same-identity fraction among entries within
/// Hamming radius r. A query with nothing inside the radius scores 0.
inline double precision_at_hamming_radius(const RetrievalIndex& index, const QuerySet& queries, int r = 2) {
  detail::check_queries(index, queries);
  double total = 0.0;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto hits = query_radius(index, queries.codes[qi], r);
    if (hits.empty()) continue;
    std::size_t same = 0;
    for (auto pos : hits) same += index.label(pos) == queries.labels[qi];
    total += static_cast<double>(same) / static_cast<double>(hits.size());
  }
  return total / static_cast<double>(queries.size());
}

struct PrPoint {
  int distance = 0;
  double recall = 0.0;
  double precision = 0.0;
};

/// Micro-averaged precision/recall over all (query, entry) pairs for every
/// threshold d = 0..K. A threshold that returns nothing has precision 0.
inline std::vector<PrPoint> pr_curve(const RetrievalIndex& index, const QuerySet& queries) {
  detail::check_queries(index, queries);
  const int k = index.bits();
  std::vector<double> relevant_at(static_cast<std::size_t>(k) + 1, 0.0);
  std::vector<double> returned_at(static_cast<std::size_t>(k) + 1, 0.0);
  double total_relevant = 0.0;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto dist = index.distances(queries.codes[qi]);
    for (std::size_t i = 0; i < dist.size(); ++i) {
      const bool rel = index.label(i) == queries.labels[qi];
      returned_at[dist[i]] += 1.0;
      relevant_at[dist[i]] += rel ? 1.0 : 0.0;
      total_relevant += rel ? 1.0 : 0.0;
    }
  }
  std::vector<PrPoint> out;
  double cum_rel = 0.0;
  double cum_ret = 0.0;
  for (int d = 0; d <= k; ++d) {
    cum_rel += relevant_at[d];
    cum_ret += returned_at[d];
    out.push_back({d, total_relevant > 0.0 ? cum_rel / total_relevant : 0.0, cum_ret > 0.0 ? cum_rel / cum_ret : 0.0});
  }
  return out;
}

struct TopMPoint {
  std::size_t m = 0;
  double precision = 0.0;
};

/// Mean over queries of the same-identity fraction of the top-M list
/// (top-min(M, N) when M exceeds the database size).
inline std::vector<TopMPoint> precision_at_topM(const RetrievalIndex& index, const QuerySet& queries,
                                                std::span<const std::size_t> m_list) {
  detail::check_queries(index, queries);
  for (auto m : m_list) {
    if (m < 1) throw ValidationError("M values must be >= 1");
  }
  std::vector<double> sums(m_list.size(), 0.0);
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto ranked = rank_all(index, queries.codes[qi]);
    std::vector<std::size_t> prefix(ranked.size() + 1, 0);
    for (std::size_t k = 0; k < ranked.size(); ++k) {
      prefix[k + 1] = prefix[k] + (index.label(ranked[k].position) == queries.labels[qi]);
    }
    for (std::size_t j = 0; j < m_list.size(); ++j) {
      const std::size_t top = std::min(m_list[j], ranked.size());
      sums[j] += static_cast<double>(prefix[top]) / static_cast<double>(top);
    }
  }
  std::vector<TopMPoint> out;
  for (std::size_t j = 0; j < m_list.size(); ++j) out.push_back({m_list[j], sums[j] / static_cast<double>(queries.size())});
  return out;
}

// ---------------------------------------------------------------------------
// Encoding

struct EncodedSet {
  std::vector<BinaryCode> codes;
  std::vector<int> labels;
  std::vector<std::string> sources;
  double mean_quantization_error = 0.0;  // mean |1 - q^2|
};

/// Eval-mode forward in chunks, then sign binarization of h.
inline EncodedSet encode_images(const ModelParams& params, std::span<const ImageTensor> images,
                                std::size_t chunk = 64) {
  EncodedSet out;
  double qerr = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const auto n = std::min(chunk, images.size() - start);
    const auto pass = forward(params, images.subspan(start, n), Mode::kEval);
    for (Eigen::Index i = 0; i < pass.out.h.rows(); ++i) {
      const Eigen::RowVectorXd row = pass.out.h.row(i);
      out.codes.push_back(binarize({row.data(), static_cast<std::size_t>(row.size())}));
    }
    qerr += (1.0 - pass.out.q.array().square()).abs().sum();
    count += static_cast<std::size_t>(pass.out.q.size());
  }
  out.mean_quantization_error = count ? qerr / static_cast<double>(count) : 0.0;
  return out;
}

inline EncodedSet encode_dataset(const ModelParams& params, const Dataset& ds) {
  std::vector<ImageTensor> images;
  images.reserve(ds.size());
  for (const auto& s : ds.samples) images.push_back(s.image);
  auto enc = encode_images(params, images);
  for (const auto& s : ds.samples) {
    enc.labels.push_back(s.label);
    enc.sources.push_back(s.source);
  }
  return enc;
}

inline RetrievalIndex build_index(const EncodedSet& enc, int bits, int identity_count) {
  RetrievalIndex index(bits, identity_count);
  for (std::size_t i = 0; i < enc.codes.size(); ++i) {
    index.add(enc.codes[i], enc.labels[i], i < enc.sources.size() ? enc.sources[i] : std::string{});
  }
  return index;
}

// ---------------------------------------------------------------------------
// Protocols and reports

enum class Protocol { kClosed, kOpen };

inline const char* to_string(Protocol p) { return p == Protocol::kClosed ? "closed" : "open"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "closed") return Protocol::kClosed;
  if (s == "open") return Protocol::kOpen;
  throw ValidationError("mode must be 'closed' or 'open', got '" + s + "'");
}

struct EvalSettings {
  std::size_t map_cutoff = 50;
  int hamming_radius = 2;
  std::vector<std::size_t> top_m{1, 5, 10, 20, 50, 100};
};

struct EvalReport {
  Protocol protocol = Protocol::kClosed;
  int code_bits = 0;
  std::size_t query_count = 0;
  std::size_t db_count = 0;
  std::size_t map_cutoff = 50;
  int hamming_radius = 2;
  double map_at_cutoff = 0.0;
  double precision_at_hamming = 0.0;
  std::vector<PrPoint> pr;
  std::vector<TopMPoint> precision_top_m;
  double mean_quantization_error = 0.0;
};

inline EvalReport evaluate(const RetrievalIndex& index, const QuerySet& queries, const EvalSettings& settings,
                           Protocol protocol = Protocol::kClosed) {
  EvalReport r;
  r.protocol = protocol;
  r.code_bits = index.bits();
  r.query_count = queries.size();
  r.db_count = index.size();
  r.map_cutoff = settings.map_cutoff;
  r.hamming_radius = std::min(settings.hamming_radius, index.bits());
  r.map_at_cutoff = mean_average_precision(index, queries, settings.map_cutoff);
  r.precision_at_hamming = precision_at_hamming_radius(index, queries, r.hamming_radius);
  r.pr = pr_curve(index, queries);
  r.precision_top_m = precision_at_topM(index, queries, settings.top_m);
  return r;
}

/// Encodes database and queries in eval mode, indexes the database and
/// computes the full metric suite. In open mode the caller guarantees that
/// neither split shares identities with the training data.
inline EvalReport run_protocol(const ModelParams& params, const Dataset& db, const Dataset& queries, Protocol mode,
                               const EvalSettings& settings = {}) {
  if (db.empty() || queries.empty()) throw ValidationError("database and query splits must be non-empty");
  const auto db_enc = encode_dataset(params, db);
  const auto q_enc = encode_dataset(params, queries);
  const auto index = build_index(db_enc, params.config.code_bits, db.identity_count);
  auto report = evaluate(index, QuerySet{q_enc.codes, q_enc.labels}, settings, mode);
  report.mean_quantization_error = db_enc.mean_quantization_error;
  return report;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["protocol"] = to_string(r.protocol);
  j["code_bits"] = r.code_bits;
  j["query_count"] = r.query_count;
  j["db_count"] = r.db_count;
  j["map_cutoff"] = r.map_cutoff;
  j["map"] = r.map_at_cutoff;
  j["hamming_radius"] = r.hamming_radius;
  j["precision_at_hamming_radius"] = r.precision_at_hamming;
  j["mean_quantization_error"] = r.mean_quantization_error;
  auto& pr = j["pr_curve"] = nlohmann::ordered_json::array();
  for (const auto& p : r.pr) pr.push_back({{"distance", p.distance}, {"recall", p.recall}, {"precision", p.precision}});
  auto& tm = j["precision_at_top_m"] = nlohmann::ordered_json::array();
  for (const auto& p : r.precision_top_m) tm.push_back({{"m", p.m}, {"precision", p.precision}});
  return j;
}

/// Writes report.json, pr_curve.csv and precision_at_top_m.csv; returns the paths.
inline std::vector<std::filesystem::path> write_report(const EvalReport& r, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto json_path = dir / "report.json";
  const auto pr_path = dir / "pr_curve.csv";
  const auto topm_path = dir / "precision_at_top_m.csv";
  const auto summary_path = dir / "summary.csv";
  {
    std::ofstream os(json_path);
    os << to_json(r).dump(2) << '\n';
  }
  char buf[128];
  {
    std::ofstream os(pr_path);
    os << "distance,recall,precision\n";
    for (const auto& p : r.pr) {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", p.distance, p.recall, p.precision);
      os << buf;
    }
  }
  {
    std::ofstream os(topm_path);
    os << "m,precision\n";
    for (const auto& p : r.precision_top_m) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", p.m, p.precision);
      os << buf;
    }
  }
  {
    std::ofstream os(summary_path);
    os << "metric,value\n";
    std::snprintf(buf, sizeof(buf), "map_at_%zu,%.17g\n", r.map_cutoff, r.map_at_cutoff);
    os << buf;
    std::snprintf(buf, sizeof(buf), "precision_at_hamming_%d,%.17g\n", r.hamming_radius, r.precision_at_hamming);
    os << buf;
    std::snprintf(buf, sizeof(buf), "mean_quantization_error,%.17g\n", r.mean_quantization_error);
    os << buf;
  }
  return {json_path, summary_path, pr_path, topm_path};
}

}  // namespace sgh
