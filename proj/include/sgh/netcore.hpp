#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sgh/common.hpp"
#include "sgh/image.hpp"

namespace sgh {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

// ---------------------------------------------------------------------------
// Configuration

enum class BackboneScale : std::uint8_t { kFull = 0, kTiny = 1 };

inline const char* to_string(BackboneScale s) { return s == BackboneScale::kFull ? "full" : "tiny"; }

inline BackboneScale parse_backbone(const std::string& s) {
  if (s == "full") return BackboneScale::kFull;
  if (s == "tiny") return BackboneScale::kTiny;
  throw ValidationError("model.backbone must be 'full' or 'tiny', got '" + s + "'");
}

struct ModelConfig {
  BackboneScale backbone = BackboneScale::kTiny;
  int input_size = 32;
  int code_bits = 16;
  int identity_count = 10;
  int latent_dim = 128;
  int projection_dim = 128;

  /// ResNet18-style stack: 64/128/256/512 channels, two blocks per layer.
  static ModelConfig full(int input_size, int code_bits, int identity_count) {
    return {BackboneScale::kFull, input_size, code_bits, identity_count, 512, 128};
  }
  /// conv1 + two single-block stages (16 and 32 channels), latent 128.
  static ModelConfig tiny(int input_size, int code_bits, int identity_count) {
    return {BackboneScale::kTiny, input_size, code_bits, identity_count, 128, 128};
  }

  std::vector<int> stage_channels() const {
    return backbone == BackboneScale::kFull ? std::vector<int>{64, 128, 256, 512}
                                             : std::vector<int>{16, 32};
  }
  int blocks_per_stage() const { return backbone == BackboneScale::kFull ? 2 : 1; }
  int downsample_factor() const { return 1 << (static_cast<int>(stage_channels().size()) - 1); }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (code_bits < 4) out.emplace_back("model.code_bits must be >= 4");
    if (identity_count < 1) out.emplace_back("model.identity_count must be >= 1");
    if (latent_dim < 1) out.emplace_back("model.latent_dim must be >= 1");
    if (projection_dim < 1) out.emplace_back("model.projection_dim must be >= 1");
    if (input_size < 1 || input_size % downsample_factor() != 0) {
      out.push_back("model.input_size must be a positive multiple of " +
                    std::to_string(downsample_factor()) + " for the " + to_string(backbone) +
                    " backbone");
    }
    return out;
  }
  void validate() const {
    const auto v = violations();
    if (!v.empty()) throw ValidationError(v.front());
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Dense NCHW activations

struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

  std::size_t image_stride() const { return static_cast<std::size_t>(c) * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  double* image(int i) { return data.data() + i * image_stride(); }
  const double* image(int i) const { return data.data() + i * image_stride(); }
  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

enum class Mode { kTrain, kEval };

enum class ParamGroup : std::uint8_t { kFeature, kProjection, kHashing, kClassifier };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kFeature: return "F";
    case ParamGroup::kProjection: return "G";
    case ParamGroup::kHashing: return "H";
    case ParamGroup::kClassifier: return "cls";
  }
  return "?";
}

template <typename Values>
struct BasicTensorRef {
  std::string name;
  ParamGroup group;
  Values* values;
};
using TensorRef = BasicTensorRef<std::vector<double>>;
using ConstTensorRef = BasicTensorRef<const std::vector<double>>;

// ---------------------------------------------------------------------------
// Layers. Each holds its own parameters; gradients use the same types.

struct Conv2d {
  int in = 0, out = 0, kernel = 3, stride = 1, pad = 1;
  std::vector<double> weight;  // [out][in * kernel * kernel]

  Conv2d() = default;
  Conv2d(int in_, int out_, int kernel_, int stride_)
      : in(in_), out(out_), kernel(kernel_), stride(stride_), pad(kernel_ / 2),
        weight(static_cast<std::size_t>(out_) * in_ * kernel_ * kernel_, 0.0) {}

  int out_size(int s) const { return (s + 2 * pad - kernel) / stride + 1; }
  int patch() const { return in * kernel * kernel; }
};

struct BatchNorm {
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  std::vector<double> gamma, beta;
  std::vector<double> running_mean, running_var;

  BatchNorm() = default;
  explicit BatchNorm(int channels)
      : gamma(channels, 1.0), beta(channels, 0.0), running_mean(channels, 0.0), running_var(channels, 1.0) {}
  int channels() const { return static_cast<int>(gamma.size()); }
};

struct Linear {
  int in = 0, out = 0;
  bool has_bias = true;
  std::vector<double> weight;  // [out][in]
  std::vector<double> bias;

  Linear() = default;
  Linear(int in_, int out_, bool bias_ = true)
      : in(in_), out(out_), has_bias(bias_), weight(static_cast<std::size_t>(in_) * out_, 0.0),
        bias(bias_ ? out_ : 0, 0.0) {}
};

struct BasicBlock {
  Conv2d conv1, conv2;
  BatchNorm bn1, bn2;
  bool projection = false;  // 1x1 strided shortcut when shape changes
  Conv2d shortcut;
  BatchNorm shortcut_bn;
};

// ---------------------------------------------------------------------------

/// All trainable parameters plus batch-norm running statistics.
struct ModelParams {
  ModelConfig config;
  Conv2d conv1;
  BatchNorm bn1;
  std::vector<BasicBlock> blocks;
  Linear fc_latent;
  Linear fc_proj;
  Linear fc_hash;  // no bias: the following batch norm cancels it
  BatchNorm hash_bn;
  Linear fc_cls;

  /// Trainable tensors in a fixed canonical order.
  std::vector<TensorRef> tensors() { return collect_tensors<TensorRef>(*this); }
  std::vector<ConstTensorRef> tensors() const { return collect_tensors<ConstTensorRef>(*this); }

  /// Batch-norm running statistics (not trainable).
  std::vector<TensorRef> buffers() { return collect_buffers<TensorRef>(*this); }
  std::vector<ConstTensorRef> buffers() const { return collect_buffers<ConstTensorRef>(*this); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += t.values->size();
    return n;
  }

  /// Same architecture with every trainable value set to zero.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    for (auto& t : z.tensors()) std::fill(t.values->begin(), t.values->end(), 0.0);
    return z;
  }

  bool operator==(const ModelParams& o) const {
    if (!(config == o.config)) return false;
    const auto same = [](const auto& a, const auto& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name || *a[i].values != *b[i].values) return false;
      }
      return true;
    };
    return same(tensors(), o.tensors()) && same(buffers(), o.buffers());
  }

 private:
  template <typename Ref, typename Self>
  static std::vector<Ref> collect_tensors(Self& self) {
    std::vector<Ref> out;
    const auto F = ParamGroup::kFeature;
    const auto bn = [&](const std::string& name, auto& b, ParamGroup g) {
      out.push_back({name + ".gamma", g, &b.gamma});
      out.push_back({name + ".beta", g, &b.beta});
    };
    out.push_back({"conv1.weight", F, &self.conv1.weight});
    bn("bn1", self.bn1, F);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const auto p = "block" + std::to_string(i);
      out.push_back({p + ".conv1.weight", F, &b.conv1.weight});
      bn(p + ".bn1", b.bn1, F);
      out.push_back({p + ".conv2.weight", F, &b.conv2.weight});
      bn(p + ".bn2", b.bn2, F);
      if (b.projection) {
        out.push_back({p + ".shortcut.weight", F, &b.shortcut.weight});
        bn(p + ".shortcut_bn", b.shortcut_bn, F);
      }
    }
    out.push_back({"fc_latent.weight", F, &self.fc_latent.weight});
    out.push_back({"fc_latent.bias", F, &self.fc_latent.bias});
    out.push_back({"fc_proj.weight", ParamGroup::kProjection, &self.fc_proj.weight});
    out.push_back({"fc_proj.bias", ParamGroup::kProjection, &self.fc_proj.bias});
    out.push_back({"fc_hash.weight", ParamGroup::kHashing, &self.fc_hash.weight});
    bn("hash_bn", self.hash_bn, ParamGroup::kHashing);
    out.push_back({"fc_cls.weight", ParamGroup::kClassifier, &self.fc_cls.weight});
    out.push_back({"fc_cls.bias", ParamGroup::kClassifier, &self.fc_cls.bias});
    return out;
  }

  template <typename Ref, typename Self>
  static std::vector<Ref> collect_buffers(Self& self) {
    std::vector<Ref> out;
    const auto add = [&](const std::string& name, auto& b, ParamGroup g) {
      out.push_back({name + ".running_mean", g, &b.running_mean});
      out.push_back({name + ".running_var", g, &b.running_var});
    };
    add("bn1", self.bn1, ParamGroup::kFeature);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const auto p = "block" + std::to_string(i);
      add(p + ".bn1", b.bn1, ParamGroup::kFeature);
      add(p + ".bn2", b.bn2, ParamGroup::kFeature);
      if (b.projection) add(p + ".shortcut_bn", b.shortcut_bn, ParamGroup::kFeature);
    }
    add("hash_bn", self.hash_bn, ParamGroup::kHashing);
    return out;
  }
};

using ParamGradients = ModelParams;

/// Builds the architecture with zero weights.
inline ModelParams build_architecture(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  const auto channels = config.stage_channels();
  p.conv1 = Conv2d(3, channels.front(), 3, 1);
  p.bn1 = BatchNorm(channels.front());
  int in = channels.front();
  for (std::size_t s = 0; s < channels.size(); ++s) {
    for (int k = 0; k < config.blocks_per_stage(); ++k) {
      const int stride = (s > 0 && k == 0) ? 2 : 1;
      BasicBlock b;
      b.conv1 = Conv2d(in, channels[s], 3, stride);
      b.bn1 = BatchNorm(channels[s]);
      b.conv2 = Conv2d(channels[s], channels[s], 3, 1);
      b.bn2 = BatchNorm(channels[s]);
      b.projection = stride != 1 || in != channels[s];
      if (b.projection) {
        b.shortcut = Conv2d(in, channels[s], 1, stride);
        b.shortcut_bn = BatchNorm(channels[s]);
      }
      p.blocks.push_back(std::move(b));
      in = channels[s];
    }
  }
  p.fc_latent = Linear(in, config.latent_dim);
  p.fc_proj = Linear(config.latent_dim, config.projection_dim);
  p.fc_hash = Linear(config.latent_dim, config.code_bits, false);
  p.hash_bn = BatchNorm(config.code_bits);
  p.fc_cls = Linear(config.code_bits, config.identity_count);
  return p;
}

/// Fan-in scaled normal weights (He gain for layers feeding a ReLU, unit gain
/// otherwise), zero biases, identity batch norms.
inline ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = build_architecture(config);
  Rng rng(derive_seed(seed, 0x1417));
  const auto fill = [&](std::vector<double>& w, int fan_in, double gain) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
    for (auto& v : w) v = dist(rng);
  };
  fill(p.conv1.weight, p.conv1.patch(), 2.0);
  for (auto& b : p.blocks) {
    fill(b.conv1.weight, b.conv1.patch(), 2.0);
    fill(b.conv2.weight, b.conv2.patch(), 2.0);
    if (b.projection) fill(b.shortcut.weight, b.shortcut.patch(), 2.0);
  }
  fill(p.fc_latent.weight, p.fc_latent.in, 1.0);
  fill(p.fc_proj.weight, p.fc_proj.in, 1.0);
  fill(p.fc_hash.weight, p.fc_hash.in, 1.0);
  fill(p.fc_cls.weight, p.fc_cls.in, 1.0);
  return p;
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace detail {

inline void im2col(const double* x, int c, int h, int w, const Conv2d& conv, int ho, int wo, double* cols) {
  const int k = conv.kernel;
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * conv.stride - conv.pad + ky;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * conv.stride - conv.pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im(const double* cols, int c, int h, int w, const Conv2d& conv, int ho, int wo, double* dx) {
  const int k = conv.kernel;
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * conv.stride - conv.pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = dx + (static_cast<std::size_t>(ci) * h + iy) * w;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * conv.stride - conv.pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline Tensor4 conv_forward(const Conv2d& conv, const Tensor4& x) {
  const int ho = conv.out_size(x.h);
  const int wo = conv.out_size(x.w);
  Tensor4 y(x.n, conv.out, ho, wo);
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  std::vector<double> cols(static_cast<std::size_t>(conv.patch()) * hw);
  ConstMatrixMap W(conv.weight.data(), conv.out, conv.patch());
  for (int i = 0; i < x.n; ++i) {
    im2col(x.image(i), x.c, x.h, x.w, conv, ho, wo, cols.data());
    MatrixMap(y.image(i), conv.out, static_cast<Eigen::Index>(hw)).noalias() =
        W * ConstMatrixMap(cols.data(), conv.patch(), static_cast<Eigen::Index>(hw));
  }
  return y;
}

/// Accumulates the weight gradient into dW; returns dx when requested.
inline Tensor4 conv_backward(const Conv2d& conv, const Tensor4& x, const Tensor4& dy,
                             std::vector<double>& dW, bool need_dx) {
  const int ho = dy.h;
  const int wo = dy.w;
  const auto hw = static_cast<Eigen::Index>(dy.plane());
  std::vector<double> cols(static_cast<std::size_t>(conv.patch()) * hw);
  std::vector<double> dcols(need_dx ? cols.size() : 0);
  ConstMatrixMap W(conv.weight.data(), conv.out, conv.patch());
  MatrixMap dWm(dW.data(), conv.out, conv.patch());
  Tensor4 dx;
  if (need_dx) dx = Tensor4(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    im2col(x.image(i), x.c, x.h, x.w, conv, ho, wo, cols.data());
    ConstMatrixMap dyi(dy.image(i), conv.out, hw);
    ConstMatrixMap ci(cols.data(), conv.patch(), hw);
    dWm.noalias() += dyi * ci.transpose();
    if (need_dx) {
      MatrixMap(dcols.data(), conv.patch(), hw).noalias() = W.transpose() * dyi;
      col2im(dcols.data(), x.c, x.h, x.w, conv, ho, wo, dx.image(i));
    }
  }
  return dx;
}

struct BnCache {
  Tensor4 xhat;
  std::vector<double> inv_std;
  std::vector<double> batch_mean, batch_var;  // train mode only
  Mode mode = Mode::kTrain;
};

/// Normalizes per channel over (n, h, w). Train mode uses batch statistics.
inline Tensor4 bn_forward(const BatchNorm& bn, const Tensor4& x, Mode mode, BnCache& cache) {
  const int C = x.c;
  const std::size_t plane = x.plane();
  const double m = static_cast<double>(x.n) * plane;
  cache.mode = mode;
  cache.inv_std.assign(C, 0.0);
  std::vector<double> mean(C, 0.0), var(C, 0.0);
  if (mode == Mode::kTrain) {
    if (x.n * plane < 2) throw RuntimeError("batch norm in train mode needs at least 2 values per channel");
    for (int i = 0; i < x.n; ++i) {
      for (int c = 0; c < C; ++c) {
        const double* p = x.image(i) + c * plane;
        for (std::size_t j = 0; j < plane; ++j) mean[c] += p[j];
      }
    }
    for (auto& v : mean) v /= m;
    for (int i = 0; i < x.n; ++i) {
      for (int c = 0; c < C; ++c) {
        const double* p = x.image(i) + c * plane;
        for (std::size_t j = 0; j < plane; ++j) var[c] += (p[j] - mean[c]) * (p[j] - mean[c]);
      }
    }
    for (auto& v : var) v /= m;
    cache.batch_mean = mean;
    cache.batch_var = var;
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  for (int c = 0; c < C; ++c) cache.inv_std[c] = 1.0 / std::sqrt(var[c] + BatchNorm::kEpsilon);

  cache.xhat = Tensor4(x.n, x.c, x.h, x.w);
  Tensor4 y(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    for (int c = 0; c < C; ++c) {
      const double* p = x.image(i) + c * plane;
      double* xh = cache.xhat.image(i) + c * plane;
      double* out = y.image(i) + c * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        xh[j] = (p[j] - mean[c]) * cache.inv_std[c];
        out[j] = bn.gamma[c] * xh[j] + bn.beta[c];
      }
    }
  }
  return y;
}

inline Tensor4 bn_backward(const BatchNorm& bn, const BnCache& cache, const Tensor4& dy, BatchNorm& grad) {
  const int C = dy.c;
  const std::size_t plane = dy.plane();
  const double m = static_cast<double>(dy.n) * plane;
  std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
  for (int i = 0; i < dy.n; ++i) {
    for (int c = 0; c < C; ++c) {
      const double* g = dy.image(i) + c * plane;
      const double* xh = cache.xhat.image(i) + c * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        sum_dy[c] += g[j];
        sum_dy_xhat[c] += g[j] * xh[j];
      }
    }
  }
  for (int c = 0; c < C; ++c) {
    grad.gamma[c] += sum_dy_xhat[c];
    grad.beta[c] += sum_dy[c];
  }
  Tensor4 dx(dy.n, dy.c, dy.h, dy.w);
  for (int i = 0; i < dy.n; ++i) {
    for (int c = 0; c < C; ++c) {
      const double* g = dy.image(i) + c * plane;
      const double* xh = cache.xhat.image(i) + c * plane;
      double* out = dx.image(i) + c * plane;
      const double scale = bn.gamma[c] * cache.inv_std[c];
      if (cache.mode == Mode::kTrain) {
        for (std::size_t j = 0; j < plane; ++j) {
          out[j] = scale * (g[j] - (sum_dy[c] + xh[j] * sum_dy_xhat[c]) / m);
        }
      } else {
        for (std::size_t j = 0; j < plane; ++j) out[j] = scale * g[j];
      }
    }
  }
  return dx;
}

inline void relu_inplace(Tensor4& x) {
  for (auto& v : x.data) v = v > 0.0 ? v : 0.0;
}

/// Masks dy where the ReLU output was not positive.
inline void relu_backward_inplace(const Tensor4& y, Tensor4& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i) {
    if (!(y.data[i] > 0.0)) dy.data[i] = 0.0;
  }
}

inline Matrix linear_forward(const Linear& fc, const Matrix& x) {
  Matrix y = x * ConstMatrixMap(fc.weight.data(), fc.out, fc.in).transpose();
  if (fc.has_bias) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(fc.bias.data(), fc.out);
  }
  return y;
}

inline Matrix linear_backward(const Linear& fc, const Matrix& x, const Matrix& dy, Linear& grad) {
  MatrixMap(grad.weight.data(), fc.out, fc.in).noalias() += dy.transpose() * x;
  if (fc.has_bias) {
    Eigen::Map<Eigen::RowVectorXd>(grad.bias.data(), fc.out) += dy.colwise().sum();
  }
  return dy * ConstMatrixMap(fc.weight.data(), fc.out, fc.in);
}

inline Tensor4 as_tensor(const Matrix& m) {
  Tensor4 t(static_cast<int>(m.rows()), static_cast<int>(m.cols()), 1, 1);
  MatrixMap(t.data.data(), m.rows(), m.cols()) = m;
  return t;
}

inline Matrix as_matrix(const Tensor4& t) {
  return ConstMatrixMap(t.data.data(), t.n, static_cast<Eigen::Index>(t.image_stride()));
}

inline void add_inplace(Tensor4& a, const Tensor4& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardOutputs {
  Matrix f;       // latent, rows x D_f
  Matrix g;       // projection, rows x D_g
  Matrix q;       // batch-normalized hash pre-activation, rows x K
  Matrix h;       // tanh(q)
  Matrix logits;  // rows x c

  Eigen::Index rows() const { return f.rows(); }
};

struct BlockCache {
  Tensor4 input;
  detail::BnCache bn1, bn2, shortcut_bn;
  Tensor4 mid;  // relu(bn1(conv1(input)))
  Tensor4 output;
};

/// Everything backward() needs, plus the outputs themselves.
struct ForwardPass {
  Mode mode = Mode::kEval;
  ForwardOutputs out;
  Tensor4 input;
  detail::BnCache stem_bn;
  Tensor4 stem;  // relu(bn1(conv1(input)))
  std::vector<BlockCache> blocks;
  Matrix pooled;
  Matrix hash_linear;  // fc_hash(f), before batch norm
  detail::BnCache hash_bn;

  /// (channels, height, width) after conv1 and after each residual layer.
  std::vector<std::array<int, 3>> layer_shapes;
};

struct OutputGradients {
  Matrix g, q, h, logits;  // empty matrices mean zero
};

inline Tensor4 images_to_tensor(std::span<const ImageTensor> images, const ModelConfig& config) {
  if (images.empty()) throw ValidationError("forward needs at least one image");
  const int s = config.input_size;
  Tensor4 x(static_cast<int>(images.size()), 3, s, s);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    if (img.height() != s || img.width() != s) {
      throw ValidationError("input image is " + std::to_string(img.height()) + "x" +
                            std::to_string(img.width()) + " but the model expects " + std::to_string(s) +
                            "x" + std::to_string(s) + " (32 for the small and 96 for the large setting)");
    }
    const auto v = img.values();
    std::copy(v.begin(), v.end(), x.image(static_cast<int>(i)));
  }
  return x;
}

/// Pure forward evaluation. In train mode the batch statistics are recorded
/// in the pass; commit_running_stats() folds them into the parameters.
inline ForwardPass forward(const ModelParams& p, Tensor4 input, Mode mode) {
  using namespace detail;
  ForwardPass fp;
  fp.mode = mode;

  Tensor4 a = conv_forward(p.conv1, input);
  a = bn_forward(p.bn1, a, mode, fp.stem_bn);
  relu_inplace(a);
  fp.layer_shapes.push_back({a.c, a.h, a.w});
  fp.stem = a;

  const int per_layer = p.config.blocks_per_stage();
  for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
    const auto& b = p.blocks[bi];
    BlockCache bc;
    bc.input = std::move(a);
    Tensor4 mid = conv_forward(b.conv1, bc.input);
    mid = bn_forward(b.bn1, mid, mode, bc.bn1);
    relu_inplace(mid);
    Tensor4 y = conv_forward(b.conv2, mid);
    y = bn_forward(b.bn2, y, mode, bc.bn2);
    if (b.projection) {
      Tensor4 sc = conv_forward(b.shortcut, bc.input);
      sc = bn_forward(b.shortcut_bn, sc, mode, bc.shortcut_bn);
      add_inplace(y, sc);
    } else {
      add_inplace(y, bc.input);
    }
    relu_inplace(y);
    bc.mid = std::move(mid);
    bc.output = y;
    a = std::move(y);
    fp.blocks.push_back(std::move(bc));
    if ((bi + 1) % per_layer == 0) fp.layer_shapes.push_back({a.c, a.h, a.w});
  }

  fp.pooled = Matrix(a.n, a.c);
  const double inv_plane = 1.0 / static_cast<double>(a.plane());
  for (int i = 0; i < a.n; ++i) {
    for (int c = 0; c < a.c; ++c) {
      const double* src = a.image(i) + c * a.plane();
      double s = 0.0;
      for (std::size_t j = 0; j < a.plane(); ++j) s += src[j];
      fp.pooled(i, c) = s * inv_plane;
    }
  }

  auto& out = fp.out;
  out.f = linear_forward(p.fc_latent, fp.pooled);
  out.g = linear_forward(p.fc_proj, out.f);
  fp.hash_linear = linear_forward(p.fc_hash, out.f);
  out.q = as_matrix(bn_forward(p.hash_bn, as_tensor(fp.hash_linear), mode, fp.hash_bn));
  out.h = out.q.array().tanh().matrix();
  out.logits = linear_forward(p.fc_cls, out.h);
  fp.input = std::move(input);
  return fp;
}

inline ForwardPass forward(const ModelParams& p, std::span<const ImageTensor> images, Mode mode) {
  return forward(p, images_to_tensor(images, p.config), mode);
}

/// Momentum update of every batch norm's running statistics from a train pass.
inline void commit_running_stats(ModelParams& p, const ForwardPass& fp) {
  if (fp.mode != Mode::kTrain) return;
  const auto update = [](BatchNorm& bn, const detail::BnCache& c, double count) {
    const double unbiased = count > 1 ? count / (count - 1) : 1.0;
    for (int k = 0; k < bn.channels(); ++k) {
      bn.running_mean[k] = (1 - BatchNorm::kMomentum) * bn.running_mean[k] + BatchNorm::kMomentum * c.batch_mean[k];
      bn.running_var[k] =
          (1 - BatchNorm::kMomentum) * bn.running_var[k] + BatchNorm::kMomentum * c.batch_var[k] * unbiased;
    }
  };
  const auto count = [](const detail::BnCache& c) {
    return static_cast<double>(c.xhat.n) * static_cast<double>(c.xhat.plane());
  };
  update(p.bn1, fp.stem_bn, count(fp.stem_bn));
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const auto& c = fp.blocks[i];
    update(b.bn1, c.bn1, count(c.bn1));
    update(b.bn2, c.bn2, count(c.bn2));
    if (b.projection) update(b.shortcut_bn, c.shortcut_bn, count(c.shortcut_bn));
  }
  update(p.hash_bn, fp.hash_bn, count(fp.hash_bn));
}

/// Exact reverse-mode gradients of sum(dL/d output * output) with respect to
/// every trainable tensor. Gradients reach a parameter group only through the
/// outputs that depend on it: G through g, H through q/h/logits, the
/// classifier through logits, F through everything.
inline ParamGradients backward(const ModelParams& p, const ForwardPass& fp, const OutputGradients& dout) {
  using namespace detail;
  const auto rows = fp.out.rows();
  const auto check = [&](const Matrix& m, Eigen::Index cols, const char* name) {
    if (m.size() != 0 && (m.rows() != rows || m.cols() != cols)) {
      throw ValidationError(std::string("output gradient '") + name + "' has shape " +
                            std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                            std::to_string(rows) + "x" + std::to_string(cols));
    }
  };
  check(dout.g, fp.out.g.cols(), "g");
  check(dout.q, fp.out.q.cols(), "q");
  check(dout.h, fp.out.h.cols(), "h");
  check(dout.logits, fp.out.logits.cols(), "logits");

  ParamGradients grad = p.zeros_like();

  // Hashing head and classifier.
  Matrix dh = dout.h.size() ? dout.h : Matrix::Zero(rows, fp.out.h.cols());
  if (dout.logits.size()) dh += linear_backward(p.fc_cls, fp.out.h, dout.logits, grad.fc_cls);
  Matrix dq = (dh.array() * (1.0 - fp.out.h.array().square())).matrix();
  if (dout.q.size()) dq += dout.q;
  const Matrix d_hash_linear = as_matrix(bn_backward(p.hash_bn, fp.hash_bn, as_tensor(dq), grad.hash_bn));
  Matrix df = linear_backward(p.fc_hash, fp.out.f, d_hash_linear, grad.fc_hash);

  // Projection head.
  if (dout.g.size()) df += linear_backward(p.fc_proj, fp.out.f, dout.g, grad.fc_proj);

  // Feature extractor.
  const Matrix dpooled = linear_backward(p.fc_latent, fp.pooled, df, grad.fc_latent);
  const Tensor4& last = fp.blocks.empty() ? fp.stem : fp.blocks.back().output;
  Tensor4 da(last.n, last.c, last.h, last.w);
  const double inv_plane = 1.0 / static_cast<double>(last.plane());
  for (int i = 0; i < last.n; ++i) {
    for (int c = 0; c < last.c; ++c) {
      double* dst = da.image(i) + c * last.plane();
      std::fill(dst, dst + last.plane(), dpooled(i, c) * inv_plane);
    }
  }

  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const auto& b = p.blocks[bi];
    const auto& bc = fp.blocks[bi];
    auto& gb = grad.blocks[bi];
    relu_backward_inplace(bc.output, da);
    Tensor4 dmid = bn_backward(b.bn2, bc.bn2, da, gb.bn2);
    dmid = conv_backward(b.conv2, bc.mid, dmid, gb.conv2.weight, true);
    relu_backward_inplace(bc.mid, dmid);
    dmid = bn_backward(b.bn1, bc.bn1, dmid, gb.bn1);
    Tensor4 dinput = conv_backward(b.conv1, bc.input, dmid, gb.conv1.weight, true);
    if (b.projection) {
      Tensor4 dsc = bn_backward(b.shortcut_bn, bc.shortcut_bn, da, gb.shortcut_bn);
      add_inplace(dinput, conv_backward(b.shortcut, bc.input, dsc, gb.shortcut.weight, true));
    } else {
      add_inplace(dinput, da);
    }
    da = std::move(dinput);
  }

  relu_backward_inplace(fp.stem, da);
  Tensor4 dstem = bn_backward(p.bn1, fp.stem_bn, da, grad.bn1);
  conv_backward(p.conv1, fp.input, dstem, grad.conv1.weight, false);
  return grad;
}

}  // namespace sgh
