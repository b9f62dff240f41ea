#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "sgh/augment.hpp"
#include "sgh/common.hpp"
#include "sgh/datapipe.hpp"
#include "sgh/evalkit.hpp"
#include "sgh/netcore.hpp"
#include "sgh/trainer.hpp"

namespace sgh {

/// Where the images come from: a folder tree or the synthetic generator.
struct DatasetSpec {
  std::string path;  // empty when synthetic
  std::string open_path;
  bool synthetic = true;
  int identities = 10;
  int images_per_identity = 50;
  std::uint64_t synthetic_seed = 7;
  int open_identities = 0;
  int image_size = 32;
  int queries_per_identity = 5;
  std::uint64_t split_seed = 7;
};

struct RunConfig {
  DatasetSpec dataset;
  ModelConfig model;
  TrainConfig train;
  AugmentationPolicy augment;
  EvalSettings eval;
  std::string output_dir = "runs/default";
};

/// Thrown with every violation found, one per line.
class ConfigError : public ValidationError {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : ValidationError(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "invalid configuration:";
    for (const auto& p : v) s += "\n  - " + p;
    return s;
  }
  std::vector<std::string> problems_;
};

namespace detail {

using boost::property_tree::ptree;

inline const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"dataset",
       {"path", "open_path", "synthetic", "identities", "images_per_identity", "synthetic_seed", "open_identities",
        "image_size", "queries_per_identity", "split_seed"}},
      {"model", {"backbone", "code_bits", "latent_dim", "projection_dim"}},
      {"train",
       {"epochs", "batch_size", "learning_rate", "lr_decay", "lr_decay_every", "lambda1", "lambda2", "seed",
        "adam_beta1", "adam_beta2", "adam_epsilon", "checkpoint_every"}},
      {"augment",
       {"crop_probability", "crop_scale_low", "crop_scale_high", "flip_probability", "jitter_probability",
        "jitter_strength", "grayscale_probability", "blur_probability", "blur_sigma_low", "blur_sigma_high"}},
      {"eval", {"map_cutoff", "hamming_radius", "top_m"}},
      {"output", {"dir"}},
  };
  return keys;
}

/// Reads typed values from the tree, recording parse failures instead of throwing.
class Reader {
 public:
  Reader(const ptree& tree, std::vector<std::string>& problems) : tree_(tree), problems_(problems) {}

  template <typename T>
  void get(const std::string& key, T& out) {
    const auto v = tree_.get_optional<std::string>(ptree::path_type(key, '.'));
    if (!v) return;
    std::istringstream is(*v);
    T parsed{};
    if constexpr (std::is_same_v<T, bool>) {
      std::string s;
      is >> s;
      if (s == "true" || s == "1" || s == "yes") {
        parsed = true;
      } else if (s == "false" || s == "0" || s == "no") {
        parsed = false;
      } else {
        problems_.push_back(key + ": expected a boolean, got '" + *v + "'");
        return;
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      parsed = *v;
    } else {
      is >> parsed;
      if (is.fail() || !(is >> std::ws).eof()) {
        problems_.push_back(key + ": cannot parse '" + *v + "'");
        return;
      }
    }
    out = parsed;
  }

 private:
  const ptree& tree_;
  std::vector<std::string>& problems_;
};

inline std::vector<std::size_t> parse_list(const std::string& s, std::vector<std::string>& problems) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (v < 1) throw std::invalid_argument("non-positive");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      problems.push_back("eval.top_m: bad entry '" + item + "'");
    }
  }
  return out;
}

}  // namespace detail

/// Applies "section.key=value" overrides on top of an INI tree, then parses
/// and validates everything. All problems are reported together.
inline RunConfig parse_run_config(boost::property_tree::ptree tree, const std::vector<std::string>& overrides = {},
                                  bool check_paths = true) {
  using detail::ptree;
  std::vector<std::string> problems;

  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || ov.find('.') > eq) {
      problems.push_back("override '" + ov + "' must look like section.key=value");
      continue;
    }
    tree.put(ptree::path_type(ov.substr(0, eq), '.'), ov.substr(eq + 1));
  }

  for (const auto& [section, body] : tree) {
    const auto it = detail::known_keys().find(section);
    if (it == detail::known_keys().end()) {
      problems.push_back("unknown section [" + section + "]");
      continue;
    }
    if (!body.data().empty() && body.empty()) problems.push_back("'" + section + "' must be a section");
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) problems.push_back("unknown key " + section + "." + key);
    }
  }

  RunConfig c;
  detail::Reader r(tree, problems);
  auto& d = c.dataset;
  r.get("dataset.path", d.path);
  r.get("dataset.open_path", d.open_path);
  d.synthetic = d.path.empty();
  r.get("dataset.synthetic", d.synthetic);
  r.get("dataset.identities", d.identities);
  r.get("dataset.images_per_identity", d.images_per_identity);
  r.get("dataset.synthetic_seed", d.synthetic_seed);
  r.get("dataset.open_identities", d.open_identities);
  r.get("dataset.image_size", d.image_size);
  r.get("dataset.queries_per_identity", d.queries_per_identity);
  r.get("dataset.split_seed", d.split_seed);

  std::string backbone = "tiny";
  r.get("model.backbone", backbone);
  try {
    c.model.backbone = parse_backbone(backbone);
  } catch (const ValidationError& e) {
    problems.emplace_back(e.what());
  }
  c.model.latent_dim = c.model.backbone == BackboneScale::kFull ? 512 : 128;
  r.get("model.code_bits", c.model.code_bits);
  r.get("model.latent_dim", c.model.latent_dim);
  r.get("model.projection_dim", c.model.projection_dim);
  c.model.input_size = d.image_size;
  c.model.identity_count = d.identities;

  auto& t = c.train;
  r.get("train.epochs", t.epochs);
  r.get("train.batch_size", t.batch_size);
  r.get("train.learning_rate", t.learning_rate);
  r.get("train.lr_decay", t.lr_decay);
  r.get("train.lr_decay_every", t.lr_decay_every);
  r.get("train.lambda1", t.weights.lambda1);
  r.get("train.lambda2", t.weights.lambda2);
  r.get("train.seed", t.seed);
  r.get("train.adam_beta1", t.adam_beta1);
  r.get("train.adam_beta2", t.adam_beta2);
  r.get("train.adam_epsilon", t.adam_epsilon);
  r.get("train.checkpoint_every", t.checkpoint_every);

  auto& a = c.augment;
  r.get("augment.crop_probability", a.crop_probability);
  r.get("augment.crop_scale_low", a.crop_scale_range.low);
  r.get("augment.crop_scale_high", a.crop_scale_range.high);
  r.get("augment.flip_probability", a.flip_probability);
  r.get("augment.jitter_probability", a.jitter_probability);
  r.get("augment.jitter_strength", a.jitter_strength);
  r.get("augment.grayscale_probability", a.grayscale_probability);
  r.get("augment.blur_probability", a.blur_probability);
  r.get("augment.blur_sigma_low", a.blur_sigma_range.low);
  r.get("augment.blur_sigma_high", a.blur_sigma_range.high);

  r.get("eval.map_cutoff", c.eval.map_cutoff);
  r.get("eval.hamming_radius", c.eval.hamming_radius);
  if (auto top = tree.get_optional<std::string>("eval.top_m")) c.eval.top_m = detail::parse_list(*top, problems);

  r.get("output.dir", c.output_dir);

  // Semantic checks.
  if (d.synthetic) {
    if (!d.path.empty()) problems.emplace_back("dataset.path and dataset.synthetic=true are mutually exclusive");
    if (d.identities < 2) problems.emplace_back("dataset.identities must be >= 2");
    if (d.images_per_identity < 2) problems.emplace_back("dataset.images_per_identity must be >= 2");
    if (d.open_identities < 0) problems.emplace_back("dataset.open_identities must be >= 0");
    if (d.queries_per_identity >= d.images_per_identity) {
      problems.emplace_back("dataset.queries_per_identity must be smaller than dataset.images_per_identity");
    }
  } else {
    if (d.path.empty()) {
      problems.emplace_back("dataset.path is required when dataset.synthetic=false");
    } else if (check_paths && !std::filesystem::is_directory(d.path)) {
      problems.push_back("dataset.path: directory not found: " + d.path);
    }
    if (!d.open_path.empty() && check_paths && !std::filesystem::is_directory(d.open_path)) {
      problems.push_back("dataset.open_path: directory not found: " + d.open_path);
    }
  }
  if (d.image_size < 1) problems.emplace_back("dataset.image_size must be >= 1");
  if (d.queries_per_identity < 1) problems.emplace_back("dataset.queries_per_identity must be >= 1");
  for (auto& p : c.model.violations()) {
    if (p.rfind("model.identity_count", 0) != 0) problems.push_back(std::move(p));
  }
  for (auto& p : t.violations()) problems.push_back(std::move(p));
  for (auto& p : a.violations()) problems.push_back(std::move(p));
  if (c.eval.map_cutoff < 1) problems.emplace_back("eval.map_cutoff must be >= 1");
  if (c.eval.hamming_radius < 0 || c.eval.hamming_radius > c.model.code_bits) {
    problems.emplace_back("eval.hamming_radius must lie in [0, model.code_bits]");
  }
  if (c.eval.top_m.empty()) problems.emplace_back("eval.top_m must list at least one value");
  if (c.output_dir.empty()) problems.emplace_back("output.dir must not be empty");

  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                                 bool check_paths = true) {
  if (!std::filesystem::is_regular_file(path)) throw ValidationError("config file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ValidationError(std::string("cannot parse config: ") + e.what());
  }
  return parse_run_config(std::move(tree), overrides, check_paths);
}

/// The effective configuration as INI text; parsing it back yields the same RunConfig.
inline std::string to_ini(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& d = c.dataset;
  os << "[dataset]\n";
  if (d.synthetic) {
    os << "synthetic = true\nidentities = " << d.identities << "\nimages_per_identity = " << d.images_per_identity
       << "\nsynthetic_seed = " << d.synthetic_seed << "\nopen_identities = " << d.open_identities << '\n';
  } else {
    os << "synthetic = false\npath = " << d.path << '\n';
    if (!d.open_path.empty()) os << "open_path = " << d.open_path << '\n';
    os << "identities = " << d.identities << '\n';
  }
  os << "image_size = " << d.image_size << "\nqueries_per_identity = " << d.queries_per_identity
     << "\nsplit_seed = " << d.split_seed << "\n\n";
  os << "[model]\nbackbone = " << to_string(c.model.backbone) << "\ncode_bits = " << c.model.code_bits
     << "\nlatent_dim = " << c.model.latent_dim << "\nprojection_dim = " << c.model.projection_dim << "\n\n";
  const auto& t = c.train;
  os << "[train]\nepochs = " << t.epochs << "\nbatch_size = " << t.batch_size << "\nlearning_rate = " << t.learning_rate
     << "\nlr_decay = " << t.lr_decay << "\nlr_decay_every = " << t.lr_decay_every << "\nlambda1 = " << t.weights.lambda1
     << "\nlambda2 = " << t.weights.lambda2 << "\nseed = " << t.seed << "\nadam_beta1 = " << t.adam_beta1
     << "\nadam_beta2 = " << t.adam_beta2 << "\nadam_epsilon = " << t.adam_epsilon
     << "\ncheckpoint_every = " << t.checkpoint_every << "\n\n";
  const auto& a = c.augment;
  os << "[augment]\ncrop_probability = " << a.crop_probability << "\ncrop_scale_low = " << a.crop_scale_range.low
     << "\ncrop_scale_high = " << a.crop_scale_range.high << "\nflip_probability = " << a.flip_probability
     << "\njitter_probability = " << a.jitter_probability << "\njitter_strength = " << a.jitter_strength
     << "\ngrayscale_probability = " << a.grayscale_probability << "\nblur_probability = " << a.blur_probability
     << "\nblur_sigma_low = " << a.blur_sigma_range.low << "\nblur_sigma_high = " << a.blur_sigma_range.high
     << "\n\n";
  os << "[eval]\nmap_cutoff = " << c.eval.map_cutoff << "\nhamming_radius = " << c.eval.hamming_radius << "\ntop_m = ";
  for (std::size_t i = 0; i < c.eval.top_m.size(); ++i) os << (i ? "," : "") << c.eval.top_m[i];
  os << "\n\n[output]\ndir = " << c.output_dir << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

/// The splits every command works from. Closed-set training uses the
/// retrieval database; the open-set splits hold identities never trained on.
struct DatasetSplits {
  Dataset db;
  Dataset query;
  std::optional<Dataset> open_db;
  std::optional<Dataset> open_query;
};

inline DatasetSplits load_splits(const RunConfig& c) {
  const auto& d = c.dataset;
  DatasetSplits out;
  Dataset closed;
  std::optional<Dataset> open;
  if (d.synthetic) {
    const auto all =
        make_synthetic_dataset(d.identities + d.open_identities, d.images_per_identity, d.image_size, d.synthetic_seed);
    closed = select_identities(all, 0, d.identities);
    if (d.open_identities > 0) open = select_identities(all, d.identities, d.open_identities);
  } else {
    closed = load_image_folder(d.path, d.image_size);
    if (!d.open_path.empty()) open = load_image_folder(d.open_path, d.image_size);
  }
  std::tie(out.db, out.query) = split_protocol(closed, d.queries_per_identity, d.split_seed);
  if (open) {
    auto [odb, oq] = split_protocol(*open, d.queries_per_identity, d.split_seed);
    out.open_db = std::move(odb);
    out.open_query = std::move(oq);
  }
  return out;
}

/// Looks up one named split: db, query, open-db or open-query.
inline Dataset select_split(const DatasetSplits& s, const std::string& name) {
  if (name == "db") return s.db;
  if (name == "query") return s.query;
  if (name == "open-db" || name == "open-query") {
    const auto& opt = name == "open-db" ? s.open_db : s.open_query;
    if (!opt) throw ValidationError("split '" + name + "' requested but the config defines no open-set identities");
    return *opt;
  }
  throw ValidationError("unknown split '" + name + "' (expected db, query, open-db or open-query)");
}

}  // namespace sgh
