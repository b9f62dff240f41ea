#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <png.h>

#include "sgh/common.hpp"

namespace sgh {

/// Three-channel image with values in [0, 1], stored planar (channel-major).
class ImageTensor {
 public:
  static constexpr int kChannels = 3;

  ImageTensor() = default;
  ImageTensor(int height, int width)
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(kChannels) * height * width, 0.0f) {
    if (height <= 0 || width <= 0) throw ValidationError("image dimensions must be positive");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<float> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const float> plane(int c) const {
    return {data_.data() + c * plane_size(), plane_size()};
  }
  std::span<const float> values() const { return data_; }
  std::span<float> values() { return data_; }

  void clamp01() {
    for (auto& v : data_) v = std::clamp(v, 0.0f, 1.0f);
  }

  bool operator==(const ImageTensor&) const = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

/// Bilinear resampling of the window [top, top+crop_h) x [left, left+crop_w)
/// onto an out_h x out_w grid using pixel-centre alignment. A window equal to
/// the output size is copied exactly.
inline ImageTensor resize_region(const ImageTensor& src, double top, double left,
                                 double crop_h, double crop_w, int out_h, int out_w) {
  if (crop_h <= 0.0 || crop_w <= 0.0) throw RuntimeError("degenerate crop rectangle");
  ImageTensor dst(out_h, out_w);
  const double sy = crop_h / out_h;
  const double sx = crop_w / out_w;
  const int h = src.height();
  const int w = src.width();
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp(top + (y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp(left + (x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < ImageTensor::kChannels; ++c) {
        const double top_row = src.at(c, y0, x0) * (1.0 - wx) + src.at(c, y0, x1) * wx;
        const double bottom_row = src.at(c, y1, x0) * (1.0 - wx) + src.at(c, y1, x1) * wx;
        dst.at(c, y, x) = static_cast<float>(top_row * (1.0 - wy) + bottom_row * wy);
      }
    }
  }
  return dst;
}

inline ImageTensor resize_bilinear(const ImageTensor& src, int out_h, int out_w) {
  if (src.height() == out_h && src.width() == out_w) return src;
  return resize_region(src, 0.0, 0.0, src.height(), src.width(), out_h, out_w);
}

// ---------------------------------------------------------------------------
// Decoding. Supported containers: PNG (any bit depth / colour type, via
// libpng) and binary or ASCII Netpbm (P2, P3, P5, P6).

namespace detail {

inline ImageTensor from_interleaved(const std::vector<std::uint8_t>& px, int h, int w, int channels,
                                    double maxval) {
  ImageTensor img(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * w + x) * channels;
      for (int c = 0; c < ImageTensor::kChannels; ++c) {
        const int src_c = channels == 1 ? 0 : c;
        img.at(c, y, x) = static_cast<float>(px[base + src_c] / maxval);
      }
    }
  }
  return img;
}

inline ImageTensor decode_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw RuntimeError("cannot decode image file: " + path.string());
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw RuntimeError("cannot decode image file: " + path.string());
  }
  return from_interleaved(buffer, static_cast<int>(image.height), static_cast<int>(image.width), 3,
                          255.0);
}

inline ImageTensor decode_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  const auto fail = [&] { return RuntimeError("cannot decode image file: " + path.string()); };
  std::string magic;
  in >> magic;
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") throw fail();
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    long v = -1;
    if (!(in >> v)) throw fail();
    return v;
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w <= 0 || h <= 0 || w > 65536 || h > 65536 || maxval <= 0 || maxval > 65535) throw fail();
  const int channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  const std::size_t count = static_cast<std::size_t>(w) * h * channels;
  std::vector<double> values(count);
  if (magic == "P2" || magic == "P3") {
    for (auto& v : values) v = static_cast<double>(next_int());
  } else {
    in.get();  // single whitespace byte after maxval
    const int bytes_per = maxval > 255 ? 2 : 1;
    std::vector<std::uint8_t> raw(count * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw fail();
    for (std::size_t i = 0; i < count; ++i) {
      values[i] = bytes_per == 1 ? raw[i] : (raw[2 * i] << 8 | raw[2 * i + 1]);
    }
  }
  ImageTensor img(static_cast<int>(h), static_cast<int>(w));
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      for (int c = 0; c < ImageTensor::kChannels; ++c) {
        const std::size_t i = (static_cast<std::size_t>(y) * w + x) * channels + (channels == 1 ? 0 : c);
        if (values[i] > maxval) throw fail();
        img.at(c, static_cast<int>(y), static_cast<int>(x)) = static_cast<float>(values[i] / maxval);
      }
    }
  }
  return img;
}

inline std::string lower_extension(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext;
}

}  // namespace detail

inline bool is_supported_image(const std::filesystem::path& p) {
  const auto ext = detail::lower_extension(p);
  return ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

inline ImageTensor read_image(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw RuntimeError("image file not found: " + path.string());
  }
  return detail::lower_extension(path) == ".png" ? detail::decode_png(path)
                                                 : detail::decode_netpbm(path);
}

/// Quantizes to 8 bits; used for exporting datasets and in tests.
inline void write_png(const ImageTensor& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> buffer(img.plane_size() * 3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        buffer[(static_cast<std::size_t>(y) * img.width() + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
      }
    }
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw RuntimeError("cannot write image: " + path.string());
  }
}

inline void write_ppm(const ImageTensor& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        out.put(static_cast<char>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f)));
      }
    }
  }
  if (!out) throw RuntimeError("cannot write image: " + path.string());
}

}  // namespace sgh
