#pragma once

// Reference implementations used to check the library: direct loops with no
// shared code paths (no packing, no bucketing, no prefix sums).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "sgh/hashindex.hpp"

namespace oracle {

using Signs = std::vector<int>;  // entries +1 / -1

inline Signs random_signs(std::mt19937_64& rng, int k) {
  Signs s(static_cast<std::size_t>(k));
  for (auto& v : s) v = (rng() & 1U) ? 1 : -1;
  return s;
}

inline sgh::BinaryCode to_code(const Signs& s) {
  std::vector<double> h(s.begin(), s.end());
  return sgh::binarize(h);
}

inline int hamming(const Signs& a, const Signs& b) {
  int d = 0;
  for (std::size_t j = 0; j < a.size(); ++j) d += a[j] != b[j];
  return d;
}

/// One retrieval problem: database and queries as sign vectors with labels.
struct Instance {
  int bits = 0;
  int identities = 0;
  std::vector<Signs> db, queries;
  std::vector<int> db_labels, query_labels;

  sgh::RetrievalIndex index() const {
    sgh::RetrievalIndex idx(bits, identities);
    for (std::size_t i = 0; i < db.size(); ++i) idx.add(to_code(db[i]), db_labels[i]);
    return idx;
  }
  std::vector<sgh::BinaryCode> query_codes() const {
    std::vector<sgh::BinaryCode> out;
    for (const auto& q : queries) out.push_back(to_code(q));
    return out;
  }
};

/// Random instance with clustered codes so that ties and near hits occur.
inline Instance random_instance(std::mt19937_64& rng, int n_max = 200, int k_max = 16, int c_max = 10) {
  Instance inst;
  inst.bits = std::uniform_int_distribution<int>(2, k_max)(rng);
  inst.identities = std::uniform_int_distribution<int>(1, c_max)(rng);
  const int n = std::uniform_int_distribution<int>(1, n_max)(rng);
  const int nq = std::uniform_int_distribution<int>(1, 30)(rng);
  std::vector<Signs> centers;
  for (int c = 0; c < inst.identities; ++c) centers.push_back(random_signs(rng, inst.bits));
  std::bernoulli_distribution flip(0.2);
  auto draw = [&](int label) {
    Signs s = centers[static_cast<std::size_t>(label)];
    for (auto& v : s) {
      if (flip(rng)) v = -v;
    }
    return s;
  };
  std::uniform_int_distribution<int> pick(0, inst.identities - 1);
  for (int i = 0; i < n; ++i) {
    const int l = pick(rng);
    inst.db.push_back(draw(l));
    inst.db_labels.push_back(l);
  }
  for (int i = 0; i < nq; ++i) {
    const int l = pick(rng);
    inst.queries.push_back(draw(l));
    inst.query_labels.push_back(l);
  }
  return inst;
}

/// Database positions ordered by (distance, position) with a comparison sort.
inline std::vector<std::size_t> ranking(const Instance& inst, std::size_t qi) {
  std::vector<std::size_t> order(inst.db.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const int da = hamming(inst.db[a], inst.queries[qi]);
    const int db = hamming(inst.db[b], inst.queries[qi]);
    return da != db ? da < db : a < b;
  });
  return order;
}

/// AP@cutoff: precision at each relevant rank recounted from scratch,
/// normalized by min(total relevant, cutoff).
inline double average_precision(const std::vector<int>& rel, std::size_t total, std::size_t cutoff) {
  if (total == 0) return 0.0;
  double sum = 0.0;
  const std::size_t limit = std::min(cutoff, rel.size());
  for (std::size_t k = 0; k < limit; ++k) {
    if (!rel[k]) continue;
    std::size_t hits = 0;
    for (std::size_t j = 0; j <= k; ++j) hits += rel[j] != 0;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return sum / static_cast<double>(std::min(total, cutoff));
}

inline double mean_average_precision(const Instance& inst, std::size_t cutoff) {
  double total = 0.0;
  for (std::size_t qi = 0; qi < inst.queries.size(); ++qi) {
    const auto order = ranking(inst, qi);
    std::vector<int> rel;
    for (auto p : order) rel.push_back(inst.db_labels[p] == inst.query_labels[qi]);
    const auto relevant = static_cast<std::size_t>(std::count(inst.db_labels.begin(), inst.db_labels.end(), inst.query_labels[qi]));
    total += average_precision(rel, relevant, cutoff);
  }
  return total / static_cast<double>(inst.queries.size());
}

inline double precision_at_radius(const Instance& inst, int r) {
  double total = 0.0;
  for (std::size_t qi = 0; qi < inst.queries.size(); ++qi) {
    double returned = 0.0, same = 0.0;
    for (std::size_t i = 0; i < inst.db.size(); ++i) {
      if (hamming(inst.db[i], inst.queries[qi]) <= r) {
        returned += 1.0;
        same += inst.db_labels[i] == inst.query_labels[qi] ? 1.0 : 0.0;
      }
    }
    total += returned > 0.0 ? same / returned : 0.0;
  }
  return total / static_cast<double>(inst.queries.size());
}

struct PrPoint {
  double recall, precision;
};

/// Micro-averaged over every (query, entry) pair at each threshold 0..K.
inline std::vector<PrPoint> pr_curve(const Instance& inst) {
  std::vector<PrPoint> out;
  for (int d = 0; d <= inst.bits; ++d) {
    double tp = 0.0, returned = 0.0, relevant = 0.0;
    for (std::size_t qi = 0; qi < inst.queries.size(); ++qi) {
      for (std::size_t i = 0; i < inst.db.size(); ++i) {
        const bool rel = inst.db_labels[i] == inst.query_labels[qi];
        const bool ret = hamming(inst.db[i], inst.queries[qi]) <= d;
        relevant += rel;
        returned += ret;
        tp += rel && ret;
      }
    }
    out.push_back({relevant > 0.0 ? tp / relevant : 0.0, returned > 0.0 ? tp / returned : 0.0});
  }
  return out;
}

inline double precision_at_top(const Instance& inst, std::size_t m) {
  double total = 0.0;
  for (std::size_t qi = 0; qi < inst.queries.size(); ++qi) {
    const auto order = ranking(inst, qi);
    const std::size_t top = std::min(m, order.size());
    double same = 0.0;
    for (std::size_t k = 0; k < top; ++k) same += inst.db_labels[order[k]] == inst.query_labels[qi];
    total += same / static_cast<double>(top);
  }
  return total / static_cast<double>(inst.queries.size());
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences of f at x with the given step, one coordinate at a time.
inline std::vector<double> numeric_gradient(std::vector<double>& x, const std::function<double()>& f, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f();
    x[i] = saved - step;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), or 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

}  // namespace oracle
