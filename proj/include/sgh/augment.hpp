#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sgh/common.hpp"
#include "sgh/datapipe.hpp"
#include "sgh/image.hpp"

namespace sgh {

struct Range {
  double low = 0.0;
  double high = 0.0;
  bool operator==(const Range&) const = default;
};

/// Parameters of the five-stage augmentation family. Defaults follow the
/// SimCLR recipe with the colour-jitter strength reduced to 1/5.
struct AugmentationPolicy {
  double crop_probability = 1.0;
  Range crop_scale_range{0.2, 1.0};
  double flip_probability = 0.5;
  double jitter_probability = 0.8;
  double jitter_strength = 0.2;
  double grayscale_probability = 0.2;
  double blur_probability = 0.5;
  Range blur_sigma_range{0.1, 2.0};

  /// A policy whose every instance is the identity transform.
  static AugmentationPolicy none() {
    AugmentationPolicy p;
    p.crop_probability = 0.0;
    p.crop_scale_range = {1.0, 1.0};
    p.flip_probability = p.jitter_probability = p.grayscale_probability = p.blur_probability = 0.0;
    return p;
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    const auto prob = [&](const char* name, double p) {
      if (!(p >= 0.0 && p <= 1.0)) out.push_back(std::string("augment.") + name + " must lie in [0,1]");
    };
    prob("crop_probability", crop_probability);
    prob("flip_probability", flip_probability);
    prob("jitter_probability", jitter_probability);
    prob("grayscale_probability", grayscale_probability);
    prob("blur_probability", blur_probability);
    if (!(crop_scale_range.low > 0.0 && crop_scale_range.low <= crop_scale_range.high &&
          crop_scale_range.high <= 1.0)) {
      out.emplace_back("augment.crop_scale_range must satisfy 0 < low <= high <= 1");
    }
    if (!(jitter_strength > 0.0)) out.emplace_back("augment.jitter_strength must be > 0");
    if (!(blur_sigma_range.low > 0.0 && blur_sigma_range.low <= blur_sigma_range.high)) {
      out.emplace_back("augment.blur_sigma_range must satisfy 0 < low <= high");
    }
    return out;
  }

  void validate() const {
    const auto v = violations();
    if (!v.empty()) throw ValidationError(v.front());
  }

  bool operator==(const AugmentationPolicy&) const = default;
};

enum class JitterOp : std::uint8_t { kBrightness, kContrast, kSaturation, kHue };

/// Realized parameters of one draw from the family. Crop geometry is stored
/// as fractions of the input height/width so an instance applies to any size.
struct TransformInstance {
  bool crop = false;
  double crop_top = 0.0;
  double crop_left = 0.0;
  double crop_height = 1.0;
  double crop_width = 1.0;
  bool flip = false;
  bool jitter = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
  std::array<JitterOp, 4> jitter_order{JitterOp::kBrightness, JitterOp::kContrast,
                                       JitterOp::kSaturation, JitterOp::kHue};
  bool grayscale = false;
  bool blur = false;
  double blur_sigma = 0.0;
  std::uint64_t rng_seed = 0;

  bool is_identity() const {
    const bool full_crop = !crop || (crop_top == 0.0 && crop_left == 0.0 && crop_height == 1.0 &&
                                     crop_width == 1.0);
    return full_crop && !flip && !jitter && !grayscale && !blur;
  }

  bool operator==(const TransformInstance&) const = default;
};

inline TransformInstance sample_transform(const AugmentationPolicy& policy, std::uint64_t seed) {
  Rng rng(seed);
  TransformInstance t;
  t.rng_seed = seed;

  // Every stage draws the same amount of randomness regardless of whether it
  // fires, so toggling one stage never perturbs the others.
  t.crop = bernoulli(rng, policy.crop_probability);
  {
    const double log_lo = std::log(3.0 / 4.0);
    const double log_hi = std::log(4.0 / 3.0);
    bool found = false;
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double area = uniform(rng, policy.crop_scale_range.low, policy.crop_scale_range.high);
      const double ratio = std::exp(uniform(rng, log_lo, log_hi));
      const double w = std::sqrt(area * ratio);
      const double h = std::sqrt(area / ratio);
      const double u_top = uniform01(rng);
      const double u_left = uniform01(rng);
      if (!found && w <= 1.0 && h <= 1.0) {
        t.crop_width = w;
        t.crop_height = h;
        t.crop_top = u_top * (1.0 - h);
        t.crop_left = u_left * (1.0 - w);
        found = true;
      }
    }
    if (!found || !t.crop) {
      t.crop_top = t.crop_left = 0.0;
      t.crop_height = t.crop_width = 1.0;
    }
  }

  t.flip = bernoulli(rng, policy.flip_probability);

  t.jitter = bernoulli(rng, policy.jitter_probability);
  const double s = policy.jitter_strength;
  const auto factor = [&](double amount) {
    return uniform(rng, std::max(0.0, 1.0 - amount), 1.0 + amount);
  };
  const double brightness = factor(0.8 * s);
  const double contrast = factor(0.8 * s);
  const double saturation = factor(0.8 * s);
  const double hue = uniform(rng, -0.2 * s, 0.2 * s);
  std::shuffle(t.jitter_order.begin(), t.jitter_order.end(), rng);
  if (t.jitter) {
    t.brightness = brightness;
    t.contrast = contrast;
    t.saturation = saturation;
    t.hue = hue;
  }

  t.grayscale = bernoulli(rng, policy.grayscale_probability);

  t.blur = bernoulli(rng, policy.blur_probability);
  const double sigma = uniform(rng, policy.blur_sigma_range.low, policy.blur_sigma_range.high);
  if (t.blur) t.blur_sigma = sigma;
  return t;
}

namespace detail {

inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline void adjust_brightness(ImageTensor& img, double f) {
  for (auto& v : img.values()) v = std::clamp(static_cast<float>(v * f), 0.0f, 1.0f);
}

inline void adjust_contrast(ImageTensor& img, double f) {
  double mean = 0.0;
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    mean += luma(img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]);
  }
  mean /= static_cast<double>(img.plane_size());
  for (auto& v : img.values()) v = std::clamp(static_cast<float>(f * v + (1.0 - f) * mean), 0.0f, 1.0f);
}

inline void adjust_saturation(ImageTensor& img, double f) {
  auto r = img.plane(0);
  auto g = img.plane(1);
  auto b = img.plane(2);
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    const double gray = luma(r[i], g[i], b[i]);
    for (auto* p : {&r[i], &g[i], &b[i]}) {
      *p = std::clamp(static_cast<float>(f * *p + (1.0 - f) * gray), 0.0f, 1.0f);
    }
  }
}

inline void adjust_hue(ImageTensor& img, double shift) {
  auto r = img.plane(0);
  auto g = img.plane(1);
  auto b = img.plane(2);
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    const double cr = r[i], cg = g[i], cb = b[i];
    const double mx = std::max({cr, cg, cb});
    const double mn = std::min({cr, cg, cb});
    const double delta = mx - mn;
    double h = 0.0;
    if (delta > 0.0) {
      if (mx == cr) {
        h = std::fmod((cg - cb) / delta, 6.0);
      } else if (mx == cg) {
        h = (cb - cr) / delta + 2.0;
      } else {
        h = (cr - cg) / delta + 4.0;
      }
      h /= 6.0;
    }
    const double sat = mx > 0.0 ? delta / mx : 0.0;
    double rgb[3];
    hsv_to_rgb(h + shift, sat, mx, rgb);
    r[i] = static_cast<float>(std::clamp(rgb[0], 0.0, 1.0));
    g[i] = static_cast<float>(std::clamp(rgb[1], 0.0, 1.0));
    b[i] = static_cast<float>(std::clamp(rgb[2], 0.0, 1.0));
  }
}

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

inline void gaussian_blur(ImageTensor& img, double sigma) {
  const int radius = static_cast<int>(std::ceil(2.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (int k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  const double total = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (auto& w : kernel) w /= total;

  const int h = img.height();
  const int w = img.width();
  std::vector<double> tmp(img.plane_size());
  for (int c = 0; c < ImageTensor::kChannels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * img.at(c, y, reflect_index(x + k, w));
        tmp[static_cast<std::size_t>(y) * w + x] = acc;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          acc += kernel[k + radius] * tmp[static_cast<std::size_t>(reflect_index(y + k, h)) * w + x];
        }
        img.at(c, y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
    }
  }
}

}  // namespace detail

/// Applies crop -> flip -> jitter -> grayscale -> blur. Output has the input's
/// shape; values stay in [0, 1].
inline ImageTensor apply(const TransformInstance& t, const ImageTensor& image) {
  const int h = image.height();
  const int w = image.width();
  ImageTensor out = image;

  const bool full = t.crop_top == 0.0 && t.crop_left == 0.0 && t.crop_height == 1.0 && t.crop_width == 1.0;
  if (t.crop && !full) {
    if (!(t.crop_height * h > 0.0 && t.crop_width * w > 0.0)) {
      throw RuntimeError("degenerate crop rectangle");
    }
    out = resize_region(image, t.crop_top * h, t.crop_left * w, t.crop_height * h, t.crop_width * w, h, w);
  }

  if (t.flip) {
    for (int c = 0; c < ImageTensor::kChannels; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w / 2; ++x) std::swap(out.at(c, y, x), out.at(c, y, w - 1 - x));
      }
    }
  }

  if (t.jitter) {
    for (auto op : t.jitter_order) {
      switch (op) {
        case JitterOp::kBrightness: detail::adjust_brightness(out, t.brightness); break;
        case JitterOp::kContrast: detail::adjust_contrast(out, t.contrast); break;
        case JitterOp::kSaturation: detail::adjust_saturation(out, t.saturation); break;
        case JitterOp::kHue: detail::adjust_hue(out, t.hue); break;
      }
    }
  }

  if (t.grayscale) {
    auto r = out.plane(0);
    auto g = out.plane(1);
    auto b = out.plane(2);
    for (std::size_t i = 0; i < out.plane_size(); ++i) {
      const auto y = std::clamp(static_cast<float>(detail::luma(r[i], g[i], b[i])), 0.0f, 1.0f);
      r[i] = g[i] = b[i] = y;
    }
  }

  if (t.blur) detail::gaussian_blur(out, t.blur_sigma);

  out.clamp01();
  return out;
}

/// Per-sample instance seed inside augment_batch.
inline std::uint64_t sample_seed(std::uint64_t batch_seed, std::size_t index) {
  return derive_seed(batch_seed, 0xa06, index);
}

inline LabeledBatch augment_batch(const AugmentationPolicy& policy, const LabeledBatch& batch,
                                  std::uint64_t seed) {
  LabeledBatch out;
  out.labels = batch.labels;
  out.images.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.images.push_back(apply(sample_transform(policy, sample_seed(seed, i)), batch.images[i]));
  }
  return out;
}

/// Stage names accepted by the ablation tooling.
inline void disable_stage(AugmentationPolicy& policy, const std::string& stage) {
  if (stage == "crop") {
    policy.crop_probability = 0.0;
  } else if (stage == "flip") {
    policy.flip_probability = 0.0;
  } else if (stage == "jitter") {
    policy.jitter_probability = 0.0;
  } else if (stage == "grayscale") {
    policy.grayscale_probability = 0.0;
  } else if (stage == "blur") {
    policy.blur_probability = 0.0;
  } else {
    throw ValidationError("unknown augmentation stage '" + stage +
                          "' (expected crop, flip, jitter, grayscale or blur)");
  }
}

}  // namespace sgh
