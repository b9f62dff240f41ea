#pragma once

// Central-difference check of the full network gradient on a tiny model.
//
// The network is piecewise smooth: ReLU and |1 - q^2| have kinks. A central
// difference whose stencil straddles a kink measures the jump, not the
// derivative, so such coordinates are detected (the kink pattern at x +- h
// differs from the one at x) and left out of the comparison. Callers bound
// how many may be left out.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sgh/trainer.hpp"

namespace gradcheck {

struct Setup {
  sgh::ModelParams params;
  sgh::Tensor4 input;  // 2 N_B images: anchors then their pairs
  std::vector<int> labels;
};

/// Tiny backbone at 8x8 input, K=4, c=2; narrow heads keep the check fast.
inline Setup tiny_setup(std::uint64_t seed, int batch = 4) {
  auto config = sgh::ModelConfig::tiny(8, 4, 2);
  config.latent_dim = 16;
  config.projection_dim = 8;
  Setup s;
  s.params = sgh::init_model(config, seed);
  s.input = sgh::Tensor4(2 * batch, 3, 8, 8);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : s.input.data) v = u(rng);
  for (int i = 0; i < batch; ++i) s.labels.push_back(i % 2);
  return s;
}

struct Objective {
  std::string name;
  sgh::LossWeights weights;
  sgh::LossTerms terms;
};

struct Result {
  std::string name;
  double overall = 0.0;
  std::map<std::string, double> per_group;
};

struct Report {
  std::vector<Result> results;
  std::size_t coordinates = 0;
  std::size_t straddling = 0;  // coordinates left out because the stencil crosses a kink
  double worst() const {
    double w = 0.0;
    for (const auto& r : results) {
      w = std::max(w, r.overall);
      for (const auto& [g, e] : r.per_group) w = std::max(w, e);
    }
    return w;
  }
};

/// Which side of every kink the forward pass sits on.
inline std::vector<bool> kink_pattern(const sgh::ForwardPass& pass) {
  std::vector<bool> out;
  const auto add = [&](const sgh::Tensor4& t) {
    for (double v : t.data) out.push_back(v > 0.0);
  };
  add(pass.stem);
  for (const auto& b : pass.blocks) {
    add(b.mid);
    add(b.output);
  }
  for (Eigen::Index i = 0; i < pass.out.q.size(); ++i) out.push_back(std::abs(pass.out.q.data()[i]) > 1.0);
  return out;
}

inline Report check_many(Setup& s, const std::vector<Objective>& objectives, double step = 1e-5,
                         sgh::Mode mode = sgh::Mode::kTrain) {
  const auto base = sgh::forward(s.params, s.input, mode);
  const auto base_pattern = kink_pattern(base);
  auto tensors = s.params.tensors();

  // Per objective: analytic and numeric values, grouped.
  using Pair = std::pair<std::vector<double>, std::vector<double>>;
  std::vector<std::map<std::string, Pair>> groups(objectives.size());
  std::vector<Pair> all(objectives.size());
  std::vector<sgh::ModelParams> analytic;
  for (const auto& o : objectives) {
    const auto eval = sgh::evaluate_objective(base.out, s.labels, o.weights, o.terms);
    analytic.push_back(sgh::backward(s.params, base, eval.grads));
  }

  Report report;
  std::vector<double> up(objectives.size()), down(objectives.size());
  const auto probe = [&](std::vector<double>& totals) {
    const auto pass = sgh::forward(s.params, s.input, mode);
    for (std::size_t k = 0; k < objectives.size(); ++k) {
      totals[k] = sgh::evaluate_objective(pass.out, s.labels, objectives[k].weights, objectives[k].terms).total;
    }
    return kink_pattern(pass) == base_pattern;
  };
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto& values = *tensors[t].values;
    const auto group = sgh::to_string(tensors[t].group);
    for (std::size_t i = 0; i < values.size(); ++i) {
      ++report.coordinates;
      const double saved = values[i];
      values[i] = saved + step;
      const bool smooth_up = probe(up);
      values[i] = saved - step;
      const bool smooth_down = probe(down);
      values[i] = saved;
      if (!smooth_up || !smooth_down) {
        ++report.straddling;
        continue;
      }
      for (std::size_t k = 0; k < objectives.size(); ++k) {
        const double a = (*analytic[k].tensors()[t].values)[i];
        const double n = (up[k] - down[k]) / (2.0 * step);
        groups[k][group].first.push_back(a);
        groups[k][group].second.push_back(n);
        all[k].first.push_back(a);
        all[k].second.push_back(n);
      }
    }
  }
  for (std::size_t k = 0; k < objectives.size(); ++k) {
    Result r{objectives[k].name, oracle::relative_error(all[k].first, all[k].second), {}};
    for (const auto& [name, ab] : groups[k]) r.per_group[name] = oracle::relative_error(ab.first, ab.second);
    report.results.push_back(std::move(r));
  }
  return report;
}

inline Report check(Setup& s, const sgh::LossWeights& w, const sgh::LossTerms& terms, double step = 1e-5,
                    sgh::Mode mode = sgh::Mode::kTrain) {
  return check_many(s, {{"objective", w, terms}}, step, mode);
}

}  // namespace gradcheck
