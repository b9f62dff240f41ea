#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sgh/common.hpp"
#include "sgh/image.hpp"

namespace sgh {

enum class SplitRole { kTrain, kRetrievalDb, kQuery };

inline const char* to_string(SplitRole role) {
  switch (role) {
    case SplitRole::kTrain: return "train";
    case SplitRole::kRetrievalDb: return "retrieval_db";
    case SplitRole::kQuery: return "query";
  }
  return "?";
}

struct Sample {
  ImageTensor image;
  int label = 0;
  std::string source;  // file path or synthetic identifier

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<Sample> samples;
  int identity_count = 0;
  std::vector<std::string> identity_names;
  SplitRole role = SplitRole::kTrain;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  int image_size() const { return samples.empty() ? 0 : samples.front().image.height(); }

  bool operator==(const Dataset&) const = default;
};

/// One-hot view of a label; used where the dense encoding is needed.
inline std::vector<double> one_hot(int label, int identity_count) {
  std::vector<double> y(static_cast<std::size_t>(identity_count), 0.0);
  y.at(static_cast<std::size_t>(label)) = 1.0;
  return y;
}

// ---------------------------------------------------------------------------
// Folder loading: <root>/<identity_name>/<image_file>

inline Dataset load_image_folder(const std::filesystem::path& root, int image_size) {
  namespace fs = std::filesystem;
  if (image_size <= 0) throw ValidationError("image_size must be positive");
  if (!fs::is_directory(root)) throw RuntimeError("dataset not found: " + root.string());

  std::vector<fs::path> identity_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && entry.path().filename().string().front() != '.') {
      identity_dirs.push_back(entry.path());
    }
  }
  std::sort(identity_dirs.begin(), identity_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  if (identity_dirs.empty()) {
    throw ValidationError("dataset has no identity directories: " + root.string());
  }

  Dataset ds;
  ds.identity_count = static_cast<int>(identity_dirs.size());
  for (std::size_t label = 0; label < identity_dirs.size(); ++label) {
    const auto& dir = identity_dirs[label];
    ds.identity_names.push_back(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && is_supported_image(entry.path()) &&
          entry.path().filename().string().front() != '.') {
        files.push_back(entry.path());
      }
    }
    if (files.empty()) {
      throw ValidationError("identity directory has no supported images (png/ppm/pgm/pnm): " +
                         dir.string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      ds.samples.push_back(
          {resize_bilinear(read_image(file), image_size, image_size), static_cast<int>(label),
           file.string()});
    }
  }
  return ds;
}

/// Writes a dataset back out in the folder layout (PNG files).
inline void export_image_folder(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::vector<int> counters(static_cast<std::size_t>(ds.identity_count), 0);
  for (int id = 0; id < ds.identity_count; ++id) fs::create_directories(root / ds.identity_names.at(id));
  for (const auto& s : ds.samples) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05d.png", counters[s.label]++);
    write_png(s.image, root / ds.identity_names.at(s.label) / name);
  }
}

// ---------------------------------------------------------------------------
// Synthetic identities. Identity i owns the hue band [i/n, (i+1)/n); its
// template is a two-colour gradient inside that band plus three fixed
// elliptical blobs. Images are the template under a small shift, a
// brightness offset and Gaussian pixel noise.

struct SyntheticJitter {
  double max_shift = 0.08;        // fraction of the image side
  double max_brightness = 0.08;
  double noise_sigma = 0.04;
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s);
  const double q = v * (1 - s * f);
  const double t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

struct Blob {
  double cx, cy, rx, ry, shade;
};

struct IdentityTemplate {
  double color_a[3];
  double color_b[3];
  double angle;
  Blob blobs[3];
};

inline IdentityTemplate make_template(int identity, int identities, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5eed, identity));
  IdentityTemplate t{};
  const double band = 1.0 / identities;
  const double lo = identity * band;
  for (double* color : {t.color_a, t.color_b}) {
    const double hue = lo + band * uniform(rng, 0.2, 0.8);
    hsv_to_rgb(hue, uniform(rng, 0.55, 0.95), uniform(rng, 0.55, 0.95), color);
  }
  t.angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  for (auto& b : t.blobs) {
    b = {uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), uniform(rng, 0.08, 0.2),
         uniform(rng, 0.08, 0.2), uniform(rng, 0.0, 1.0) < 0.5 ? uniform(rng, 0.0, 0.25)
                                                               : uniform(rng, 0.75, 1.0)};
  }
  return t;
}

inline ImageTensor render(const IdentityTemplate& t, int size, double dx, double dy) {
  ImageTensor img(size, size);
  const double ca = std::cos(t.angle);
  const double sa = std::sin(t.angle);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size - dx;
      const double v = (y + 0.5) / size - dy;
      const double mix = std::clamp(0.5 + (u - 0.5) * ca + (v - 0.5) * sa, 0.0, 1.0);
      double px[3];
      for (int c = 0; c < 3; ++c) px[c] = t.color_a[c] * (1 - mix) + t.color_b[c] * mix;
      for (const auto& b : t.blobs) {
        const double ex = (u - b.cx) / b.rx;
        const double ey = (v - b.cy) / b.ry;
        const double w = std::exp(-2.0 * (ex * ex + ey * ey));
        for (double& p : px) p = p * (1 - w) + b.shade * w;
      }
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(std::clamp(px[c], 0.0, 1.0));
    }
  }
  return img;
}

}  // namespace detail

/// Noise-free template of one synthetic identity.
inline ImageTensor synthetic_template(int identity, int identities, int image_size, std::uint64_t seed) {
  return detail::render(detail::make_template(identity, identities, seed), image_size, 0.0, 0.0);
}

inline Dataset make_synthetic_dataset(int identities, int images_per_identity, int image_size,
                                      std::uint64_t seed, const SyntheticJitter& jitter = {}) {
  if (identities < 2) throw ValidationError("synthetic dataset needs at least 2 identities");
  if (images_per_identity < 2) throw ValidationError("synthetic dataset needs at least 2 images per identity");
  if (image_size <= 0) throw ValidationError("image_size must be positive");

  Dataset ds;
  ds.identity_count = identities;
  for (int id = 0; id < identities; ++id) {
    char name[32];
    std::snprintf(name, sizeof(name), "id%04d", id);
    ds.identity_names.emplace_back(name);
    const auto tmpl = detail::make_template(id, identities, seed);
    for (int k = 0; k < images_per_identity; ++k) {
      Rng rng(derive_seed(seed, 0x1a6e, id, k));
      const double dx = uniform(rng, -jitter.max_shift, jitter.max_shift);
      const double dy = uniform(rng, -jitter.max_shift, jitter.max_shift);
      const double brightness = uniform(rng, -jitter.max_brightness, jitter.max_brightness);
      auto img = detail::render(tmpl, image_size, dx, dy);
      std::normal_distribution<double> noise(0.0, jitter.noise_sigma);
      for (auto& v : img.values()) v = static_cast<float>(v + brightness + noise(rng));
      img.clamp01();
      ds.samples.push_back({std::move(img), id, std::string(name) + "/" + std::to_string(k)});
    }
  }
  return ds;
}

/// Keeps identities [first, first+count) and relabels them from 0.
inline Dataset select_identities(const Dataset& ds, int first, int count) {
  if (first < 0 || count < 1 || first + count > ds.identity_count) {
    throw ValidationError("identity range out of bounds");
  }
  Dataset out;
  out.identity_count = count;
  out.role = ds.role;
  out.identity_names.assign(ds.identity_names.begin() + first, ds.identity_names.begin() + first + count);
  for (const auto& s : ds.samples) {
    if (s.label >= first && s.label < first + count) {
      out.samples.push_back({s.image, s.label - first, s.source});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Moves `queries_per_identity` randomly chosen samples of every identity into
/// the query split; the rest form the retrieval database. Both outputs keep
/// the input's relative sample order.
inline std::pair<Dataset, Dataset> split_protocol(const Dataset& ds, int queries_per_identity,
                                                  std::uint64_t seed) {
  if (queries_per_identity < 1) throw ValidationError("queries_per_identity must be >= 1");
  std::vector<std::vector<std::size_t>> by_identity(static_cast<std::size_t>(ds.identity_count));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    by_identity.at(static_cast<std::size_t>(ds.samples[i].label)).push_back(i);
  }
  std::vector<bool> is_query(ds.samples.size(), false);
  for (int id = 0; id < ds.identity_count; ++id) {
    auto& idx = by_identity[id];
    if (static_cast<int>(idx.size()) <= queries_per_identity) {
      const auto name = id < static_cast<int>(ds.identity_names.size()) ? ds.identity_names[id]
                                                                         : std::to_string(id);
      throw ValidationError("identity '" + name + "' has " + std::to_string(idx.size()) +
                            " samples; needs more than " + std::to_string(queries_per_identity));
    }
    Rng rng(derive_seed(seed, 0x5b11, id));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int k = 0; k < queries_per_identity; ++k) is_query[idx[k]] = true;
  }
  Dataset db;
  Dataset query;
  for (Dataset* d : {&db, &query}) {
    d->identity_count = ds.identity_count;
    d->identity_names = ds.identity_names;
  }
  db.role = SplitRole::kRetrievalDb;
  query.role = SplitRole::kQuery;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    (is_query[i] ? query : db).samples.push_back(ds.samples[i]);
  }
  return {std::move(db), std::move(query)};
}

// ---------------------------------------------------------------------------

struct LabeledBatch {
  std::vector<ImageTensor> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
};

/// Yields the full batches of one epoch in an order fixed by (seed, epoch).
/// The trailing partial batch is dropped.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, int batch_size, std::uint64_t seed, int epoch)
      : ds_(&ds), batch_size_(static_cast<std::size_t>(batch_size)) {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (batch_size_ > ds.size()) {
      throw ValidationError("batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                            std::to_string(ds.size()));
    }
    order_.resize(ds.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0xba7c, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::size_t batch_count() const { return order_.size() / batch_size_; }

  std::vector<std::size_t> indices(std::size_t b) const {
    return {order_.begin() + static_cast<std::ptrdiff_t>(b * batch_size_),
            order_.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size_)};
  }

  LabeledBatch batch(std::size_t b) const {
    LabeledBatch out;
    for (auto i : indices(b)) {
      out.images.push_back(ds_->samples[i].image);
      out.labels.push_back(ds_->samples[i].label);
    }
    return out;
  }

  bool next(LabeledBatch& out) {
    if (cursor_ >= batch_count()) return false;
    out = batch(cursor_++);
    return true;
  }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace sgh
