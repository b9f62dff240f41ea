#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgh/config.hpp"
#include "sgh/evalkit.hpp"
#include "sgh/hashindex.hpp"
#include "sgh/losses.hpp"
#include "sgh/trainer.hpp"

namespace sgh {

namespace fs = std::filesystem;

/// Files a command produced, in the order they were written.
struct CommandResult {
  std::vector<fs::path> artifacts;
};

inline void print_artifacts(const CommandResult& r, std::ostream& out) {
  for (const auto& p : r.artifacts) out << "artifact: " << p.string() << '\n';
}

/// A dataset given either as an image folder or as a named split of a run config.
struct DatasetSource {
  fs::path folder;
  fs::path config;
  std::string split;
  std::vector<std::string> overrides;
};

namespace detail {

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw RuntimeError(what + " not found: " + p.string());
}

inline Dataset resolve_dataset(const DatasetSource& src, int image_size) {
  const bool by_folder = !src.folder.empty();
  const bool by_config = !src.config.empty();
  if (by_folder == by_config) throw ValidationError("give exactly one of --dataset or --config");
  if (by_folder) {
    if (!src.split.empty()) throw ValidationError("--split only applies together with --config");
    return load_image_folder(src.folder, image_size);
  }
  if (src.split.empty()) throw ValidationError("--config needs --split db|query|open-db|open-query");
  const auto cfg = load_run_config(src.config, src.overrides);
  if (cfg.dataset.image_size != image_size) {
    throw ValidationError("image size mismatch: config uses " + std::to_string(cfg.dataset.image_size) +
                          " but the checkpoint expects " + std::to_string(image_size));
  }
  return select_split(load_splits(cfg), src.split);
}

inline int checked_image_size(const TrainState& state, std::optional<int> requested) {
  const int expected = state.params.config.input_size;
  if (requested && *requested != expected) {
    throw ValidationError("image size mismatch: requested " + std::to_string(*requested) +
                          " but the checkpoint expects " + std::to_string(expected));
  }
  return expected;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw RuntimeError("cannot open for writing: " + p.string());
  os << text;
}

/// Trains one configuration from scratch and evaluates it.
struct TrainedRun {
  FitArtifacts fit;
  EvalReport closed;
  std::optional<EvalReport> open;
  CommandResult result;
};

inline TrainedRun train_and_report(const RunConfig& cfg, const DatasetSplits& splits, const LossTerms& terms,
                                   const fs::path& out_dir, std::ostream& out) {
  RunConfig resolved = cfg;
  resolved.model.identity_count = splits.db.identity_count;
  resolved.dataset.identities = splits.db.identity_count;
  resolved.model.validate();
  TrainConfig tc = cfg.train;
  tc.terms = terms;
  tc.validate();
  cfg.augment.validate();
  if (static_cast<std::size_t>(tc.batch_size) > splits.db.size()) {
    throw ValidationError("train.batch_size " + std::to_string(tc.batch_size) + " exceeds the " +
                          std::to_string(splits.db.size()) + " training samples");
  }

  fs::create_directories(out_dir);
  TrainedRun run;
  const auto cfg_path = out_dir / "resolved_config.ini";
  write_text(cfg_path, to_ini(resolved));
  run.result.artifacts.push_back(cfg_path);

  auto state = TrainState::initial(resolved.model, tc.seed);
  run.fit = fit(state, tc, splits.db, cfg.augment, FitOptions{out_dir, &out});
  for (const auto& p : run.fit.checkpoints) run.result.artifacts.push_back(p);
  run.result.artifacts.push_back(run.fit.final_checkpoint);
  run.result.artifacts.push_back(run.fit.loss_history);

  const auto db_enc = encode_dataset(state.params, splits.db);
  const auto index = build_index(db_enc, resolved.model.code_bits, splits.db.identity_count);
  const auto index_path = out_dir / "db.sghi";
  save_index(index, index_path);
  run.result.artifacts.push_back(index_path);

  run.closed = run_protocol(state.params, splits.db, splits.query, Protocol::kClosed, cfg.eval);
  for (const auto& p : write_report(run.closed, out_dir / "report" / "closed")) run.result.artifacts.push_back(p);
  if (splits.open_db && splits.open_query) {
    run.open = run_protocol(state.params, *splits.open_db, *splits.open_query, Protocol::kOpen, cfg.eval);
    for (const auto& p : write_report(*run.open, out_dir / "report" / "open")) run.result.artifacts.push_back(p);
  }
  return run;
}

}  // namespace detail

/// Trains with the run config, then evaluates closed-set (and open-set when
/// configured). Everything lands under cfg.output_dir.
inline CommandResult cmd_train(const RunConfig& cfg, std::ostream& out = std::cout) {
  const auto splits = load_splits(cfg);
  auto run = detail::train_and_report(cfg, splits, cfg.train.terms, cfg.output_dir, out);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "closed-set mAP@%zu %.6f\n", run.closed.map_cutoff, run.closed.map_at_cutoff);
  out << buf;
  if (run.open) {
    std::snprintf(buf, sizeof(buf), "open-set mAP@%zu %.6f\n", run.open->map_cutoff, run.open->map_at_cutoff);
    out << buf;
  }
  return run.result;
}

/// Encodes every image of a dataset with the checkpoint and writes an index.
inline CommandResult cmd_encode(const fs::path& checkpoint, const DatasetSource& source, const fs::path& out_index,
                                std::optional<int> image_size = std::nullopt, std::ostream& out = std::cout) {
  detail::require_file(checkpoint, "checkpoint");
  const auto state = load_checkpoint(checkpoint);
  const auto ds = detail::resolve_dataset(source, detail::checked_image_size(state, image_size));
  if (ds.empty()) throw ValidationError("dataset is empty");
  const auto enc = encode_dataset(state.params, ds);
  const auto index = build_index(enc, state.params.config.code_bits, ds.identity_count);
  if (out_index.has_parent_path()) fs::create_directories(out_index.parent_path());
  save_index(index, out_index);
  out << "encoded " << index.size() << " images into " << index.bits() << "-bit codes\n";
  return {{out_index}};
}

/// Encodes one image and prints its M nearest index entries.
inline CommandResult cmd_query(const fs::path& index_file, const fs::path& checkpoint, const fs::path& image_path,
                               std::size_t m, std::ostream& out = std::cout) {
  detail::require_file(index_file, "index file");
  detail::require_file(checkpoint, "checkpoint");
  detail::require_file(image_path, "image");
  if (m < 1) throw ValidationError("M must be >= 1");
  const auto index = load_index(index_file);
  const auto state = load_checkpoint(checkpoint);
  if (index.bits() != state.params.config.code_bits) {
    throw ValidationError("index holds " + std::to_string(index.bits()) + "-bit codes but the checkpoint produces " +
                          std::to_string(state.params.config.code_bits));
  }
  const int s = state.params.config.input_size;
  auto img = read_image(image_path);
  if (img.height() != s || img.width() != s) img = resize_bilinear(img, s, s);
  const std::vector<ImageTensor> one{img};
  const auto enc = encode_images(state.params, one);
  out << "rank,position,distance,identity\n";
  const auto hits = query_topM(index, enc.codes.front(), m);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    out << i + 1 << ',' << hits[i].position << ',' << hits[i].distance << ',' << index.label(hits[i].position) << '\n';
  }
  return {};
}

/// Evaluates a query set against an index built by cmd_encode.
inline CommandResult cmd_eval(const fs::path& index_file, const fs::path& checkpoint, const DatasetSource& queries,
                              Protocol mode, const EvalSettings& settings, const fs::path& out_dir,
                              std::optional<int> bits = std::nullopt, std::ostream& out = std::cout) {
  detail::require_file(index_file, "index file");
  detail::require_file(checkpoint, "checkpoint");
  const auto index = load_index(index_file);
  const auto state = load_checkpoint(checkpoint);
  const int k = state.params.config.code_bits;
  if (index.bits() != k) {
    throw ValidationError("--bits mismatch: index holds " + std::to_string(index.bits()) +
                          "-bit codes but the checkpoint produces " + std::to_string(k));
  }
  if (bits && *bits != k) {
    throw ValidationError("--bits " + std::to_string(*bits) + " does not match the " + std::to_string(k) +
                          "-bit index and checkpoint");
  }
  const auto ds = detail::resolve_dataset(queries, state.params.config.input_size);
  if (ds.identity_count > index.identity_count()) {
    throw ValidationError("query set has " + std::to_string(ds.identity_count) + " identities but the index only " +
                          std::to_string(index.identity_count()));
  }
  const auto enc = encode_dataset(state.params, ds);
  auto report = evaluate(index, QuerySet{enc.codes, enc.labels}, settings, mode);
  report.mean_quantization_error = enc.mean_quantization_error;
  CommandResult r{write_report(report, out_dir)};
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s-set mAP@%zu %.6f  P@H<=%d %.6f\n", to_string(mode), report.map_cutoff,
                report.map_at_cutoff, report.hamming_radius, report.precision_at_hamming);
  out << buf;
  return r;
}

/// Parses an ablation target and applies it to a copy of the config.
/// Returns the variant's directory name.
inline std::string apply_drop(const std::string& drop, RunConfig& cfg) {
  if (drop == "sp") {
    cfg.train.terms.sp = false;
  } else if (drop == "reg") {
    cfg.train.terms.reg = false;
  } else if (drop == "sq") {
    cfg.train.terms.sq = false;
  } else if (drop == "cls") {
    throw ValidationError(
        "drop=cls is not allowed: L_cls is the only loss reaching the hashing head H, so H cannot be trained "
        "without it");
  } else if (drop.rfind("aug:", 0) == 0) {
    disable_stage(cfg.augment, drop.substr(4));
  } else {
    throw ValidationError("unknown drop target '" + drop + "' (expected sp, reg, sq or aug:<stage>)");
  }
  std::string name = "without_" + drop;
  for (auto& ch : name) {
    if (ch == ':') ch = '_';
  }
  return name;
}

/// Trains the baseline and the variant with identical seeds and writes a
/// comparison of their closed-set metrics.
inline CommandResult cmd_ablate(const RunConfig& cfg, const std::string& drop, std::ostream& out = std::cout) {
  RunConfig variant = cfg;
  const auto variant_name = apply_drop(drop, variant);
  const auto splits = load_splits(cfg);
  const fs::path root = cfg.output_dir;

  out << "== baseline\n";
  auto base = detail::train_and_report(cfg, splits, cfg.train.terms, root / "baseline", out);
  out << "== " << variant_name << '\n';
  auto var = detail::train_and_report(variant, splits, variant.train.terms, root / variant_name, out);

  CommandResult r;
  r.artifacts = base.result.artifacts;
  r.artifacts.insert(r.artifacts.end(), var.result.artifacts.begin(), var.result.artifacts.end());

  struct Row {
    std::string name;
    double a, b;
  };
  std::vector<Row> rows{
      {"map_at_" + std::to_string(base.closed.map_cutoff), base.closed.map_at_cutoff, var.closed.map_at_cutoff},
      {"precision_at_hamming_" + std::to_string(base.closed.hamming_radius), base.closed.precision_at_hamming,
       var.closed.precision_at_hamming},
      {"mean_quantization_error", base.closed.mean_quantization_error, var.closed.mean_quantization_error},
  };
  const auto csv_path = root / "ablation.csv";
  const auto json_path = root / "ablation.json";
  {
    std::ofstream os(csv_path);
    os << "metric,baseline," << variant_name << '\n';
    char buf[160];
    for (const auto& row : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g\n", row.name.c_str(), row.a, row.b);
      os << buf;
    }
  }
  {
    nlohmann::ordered_json j;
    j["drop"] = drop;
    j["baseline"] = to_json(base.closed);
    j[variant_name] = to_json(var.closed);
    std::ofstream(json_path) << j.dump(2) << '\n';
  }
  r.artifacts.push_back(csv_path);
  r.artifacts.push_back(json_path);

  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-28s %12s %12s\n", "metric", "baseline", variant_name.c_str());
  out << buf;
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%-28s %12.6f %12.6f\n", row.name.c_str(), row.a, row.b);
    out << buf;
  }
  return r;
}

/// The three quantization penalties on q in [-2, 2], step 0.01.
inline CommandResult cmd_lossplot(const fs::path& out_csv, std::ostream& out = std::cout) {
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  std::ofstream os(out_csv, std::ios::trunc);
  if (!os) throw RuntimeError("cannot open for writing: " + out_csv.string());
  os << "q,combined,double_squared,double_absolute\n";
  char buf[160];
  for (int i = -200; i <= 200; ++i) {
    const double q = i / 100.0;
    std::snprintf(buf, sizeof(buf), "%.2f,%.17g,%.17g,%.17g\n", q,
                  quantization_penalty(q, QuantizationKind::kSquaredAbsolute),
                  quantization_penalty(q, QuantizationKind::kDoubleSquared),
                  quantization_penalty(q, QuantizationKind::kDoubleAbsolute));
    os << buf;
  }
  os.close();
  out << "wrote 401 rows\n";
  return {{out_csv}};
}

}  // namespace sgh
