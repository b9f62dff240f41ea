#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sgh/augment.hpp"
#include "sgh/common.hpp"
#include "sgh/datapipe.hpp"
#include "sgh/losses.hpp"
#include "sgh/netcore.hpp"

namespace sgh {

/// Which objective terms contribute gradients. All four are always evaluated
/// and recorded.
struct LossTerms {
  bool sp = true;
  bool reg = true;
  bool sq = true;
  bool cls = true;
  bool operator==(const LossTerms&) const = default;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 256;
  double learning_rate = 0.001;
  double lr_decay = 0.9;
  int lr_decay_every = 50;
  LossWeights weights;
  LossTerms terms;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int checkpoint_every = 10;
  std::vector<ParamGroup> frozen;  // groups excluded from optimizer updates

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (epochs < 1) out.emplace_back("train.epochs must be >= 1");
    if (batch_size < 1) out.emplace_back("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) out.emplace_back("train.learning_rate must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) out.emplace_back("train.lr_decay must lie in (0, 1]");
    if (lr_decay_every < 1) out.emplace_back("train.lr_decay_every must be >= 1");
    if (!(weights.lambda1 >= 0.0)) out.emplace_back("train.lambda1 must be >= 0");
    if (!(weights.lambda2 >= 0.0)) out.emplace_back("train.lambda2 must be >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) out.emplace_back("train.adam_beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) out.emplace_back("train.adam_beta2 must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) out.emplace_back("train.adam_epsilon must be > 0");
    if (checkpoint_every < 0) out.emplace_back("train.checkpoint_every must be >= 0");
    return out;
  }
  void validate() const {
    const auto v = violations();
    if (!v.empty()) throw ValidationError(v.front());
  }

  bool is_frozen(ParamGroup g) const { return std::find(frozen.begin(), frozen.end(), g) != frozen.end(); }
};

/// Step size for a 0-based epoch: decays by lr_decay every lr_decay_every epochs.
inline double lr_at(const TrainConfig& config, int epoch) {
  if (epoch < 0) throw ValidationError("epoch must be >= 0");
  return config.learning_rate * std::pow(config.lr_decay, epoch / config.lr_decay_every);
}

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // one per trainable tensor, canonical order

  static AdamState for_params(const ModelParams& p) {
    AdamState s;
    for (const auto& t : p.tensors()) {
      s.m.emplace_back(t.values->size(), 0.0);
      s.v.emplace_back(t.values->size(), 0.0);
    }
    return s;
  }
  bool operator==(const AdamState&) const = default;
};

struct LossRecord {
  std::uint64_t iteration = 0;
  int epoch = 0;
  double lr = 0.0;
  LossComponents losses;
  double total = 0.0;
};

/// Iteration and epoch counters drive every random draw, so no generator
/// state needs to be carried between steps.
struct TrainState {
  ModelParams params;
  AdamState adam;
  int epoch = 0;  // completed epochs
  std::uint64_t iteration = 0;
  std::vector<LossRecord> history;

  static TrainState initial(const ModelConfig& model, std::uint64_t seed) {
    TrainState s;
    s.params = init_model(model, seed);
    s.adam = AdamState::for_params(s.params);
    return s;
  }
};

inline void adam_update(ModelParams& params, const ParamGradients& grads, AdamState& adam, double lr,
                        const TrainConfig& config) {
  ++adam.step;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.step));
  auto ps = params.tensors();
  const auto gs = grads.tensors();
  for (std::size_t t = 0; t < ps.size(); ++t) {
    if (config.is_frozen(ps[t].group)) continue;
    auto& w = *ps[t].values;
    const auto& g = *gs[t].values;
    auto& m = adam.m[t];
    auto& v = adam.v[t];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.adam_epsilon);
    }
  }
}

/// Output gradients and loss values of the four-term objective for one
/// forward pass over the concatenated batch [x, x~].
struct ObjectiveEval {
  LossComponents losses;
  double total = 0.0;
  OutputGradients grads;
};

inline ObjectiveEval evaluate_objective(const ForwardOutputs& out, std::span<const int> labels, const LossWeights& w,
                                        const LossTerms& terms) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  if (out.rows() != 2 * n) throw ValidationError("objective expects 2 * N_B rows");
  std::vector<int> doubled(labels.begin(), labels.end());
  doubled.insert(doubled.end(), labels.begin(), labels.end());

  const auto sp = sp_loss(out.g.topRows(n), out.g.bottomRows(n), labels);
  const auto reg = reg_loss(out.g);
  const auto sq = squared_quantization_loss(out.q);
  const auto cls = classification_loss(out.logits, doubled);

  ObjectiveEval e;
  e.losses = {sp.value, reg.value, sq.value, cls.value};
  const struct {
    const char* name;
    double value;
  } named[] = {{"L_SP", sp.value}, {"L_reg", reg.value}, {"L_sQ", sq.value}, {"L_cls", cls.value}};
  for (const auto& t : named) {
    if (!std::isfinite(t.value)) throw RuntimeError(std::string("non-finite loss term ") + t.name);
  }
  e.total = (terms.sp ? sp.value : 0.0) + (terms.reg ? w.lambda1 * reg.value : 0.0) +
            (terms.sq ? w.lambda2 * sq.value : 0.0) + (terms.cls ? cls.value : 0.0);

  e.grads.g = Matrix::Zero(out.g.rows(), out.g.cols());
  if (terms.sp) {
    e.grads.g.topRows(n) += sp.grad_anchor;
    e.grads.g.bottomRows(n) += sp.grad_augmented;
  }
  if (terms.reg) e.grads.g += w.lambda1 * reg.grad;
  if (terms.sq) e.grads.q = w.lambda2 * sq.grad;
  if (terms.cls) e.grads.logits = cls.grad;
  return e;
}

/// One iteration: augment, concatenate along the batch axis, forward the
/// 2 N_B batch, evaluate the four losses, backpropagate and take one Adam step.
inline LossRecord train_step(TrainState& state, const TrainConfig& config, const LabeledBatch& batch,
                             const AugmentationPolicy& policy) {
  if (batch.size() < 1) throw ValidationError("empty training batch");
  const double lr = lr_at(config, state.epoch);
  const auto augmented = augment_batch(policy, batch, derive_seed(config.seed, 0xa11, state.iteration));

  std::vector<ImageTensor> images = batch.images;
  images.insert(images.end(), augmented.images.begin(), augmented.images.end());
  const auto pass = forward(state.params, images, Mode::kTrain);
  const auto objective = evaluate_objective(pass.out, batch.labels, config.weights, config.terms);
  const auto grads = backward(state.params, pass, objective.grads);
  commit_running_stats(state.params, pass);
  adam_update(state.params, grads, state.adam, lr, config);

  LossRecord rec{state.iteration, state.epoch, lr, objective.losses, objective.total};
  state.history.push_back(rec);
  ++state.iteration;
  return rec;
}

// ---------------------------------------------------------------------------
// Checkpoints: "SGHC", u32 version, model config, counters, every trainable
// tensor with its Adam moments, batch-norm buffers, loss history, CRC-32.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const TrainState& s, std::ostream& os) {
  BinaryWriter w(os);
  w.bytes("SGHC", 4);
  w.pod(kCheckpointVersion);
  const auto& c = s.params.config;
  w.pod(static_cast<std::uint8_t>(c.backbone));
  for (int v : {c.input_size, c.code_bits, c.identity_count, c.latent_dim, c.projection_dim}) {
    w.pod(static_cast<std::int32_t>(v));
  }
  w.pod(static_cast<std::uint32_t>(s.epoch));
  w.pod(s.iteration);
  w.pod(s.adam.step);
  const auto tensors = s.params.tensors();
  w.pod(static_cast<std::uint32_t>(tensors.size()));
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    w.string(tensors[t].name);
    w.pod(static_cast<std::uint64_t>(tensors[t].values->size()));
    w.array(*tensors[t].values);
    w.array(s.adam.m[t]);
    w.array(s.adam.v[t]);
  }
  const auto buffers = s.params.buffers();
  w.pod(static_cast<std::uint32_t>(buffers.size()));
  for (const auto& b : buffers) {
    w.string(b.name);
    w.pod(static_cast<std::uint64_t>(b.values->size()));
    w.array(*b.values);
  }
  w.pod(static_cast<std::uint64_t>(s.history.size()));
  for (const auto& r : s.history) {
    w.pod(r.iteration);
    w.pod(static_cast<std::int32_t>(r.epoch));
    for (double v : {r.lr, r.losses.sp, r.losses.reg, r.losses.sq, r.losses.cls, r.total}) w.pod(v);
  }
  w.finish();
}

inline TrainState load_checkpoint(std::istream& is) {
  BinaryReader r(is, "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "SGHC") throw RuntimeError("checkpoint: bad magic");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) throw RuntimeError("checkpoint: unsupported version " + std::to_string(version));
  ModelConfig c;
  const auto backbone = r.pod<std::uint8_t>();
  if (backbone > 1) throw RuntimeError("checkpoint: corrupt backbone tag");
  c.backbone = static_cast<BackboneScale>(backbone);
  c.input_size = r.pod<std::int32_t>();
  c.code_bits = r.pod<std::int32_t>();
  c.identity_count = r.pod<std::int32_t>();
  c.latent_dim = r.pod<std::int32_t>();
  c.projection_dim = r.pod<std::int32_t>();
  if (!c.violations().empty()) throw RuntimeError("checkpoint: corrupt model configuration");

  TrainState s;
  s.params = build_architecture(c);
  s.adam = AdamState::for_params(s.params);
  s.epoch = static_cast<int>(r.pod<std::uint32_t>());
  s.iteration = r.pod<std::uint64_t>();
  s.adam.step = r.pod<std::uint64_t>();

  auto tensors = s.params.tensors();
  if (r.pod<std::uint32_t>() != tensors.size()) throw RuntimeError("checkpoint: tensor count mismatch");
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto name = r.string();
    const auto size = r.pod<std::uint64_t>();
    if (name != tensors[t].name || size != tensors[t].values->size()) {
      throw RuntimeError("checkpoint: unexpected tensor '" + name + "'");
    }
    r.array(*tensors[t].values, size);
    r.array(s.adam.m[t], size);
    r.array(s.adam.v[t], size);
  }
  auto buffers = s.params.buffers();
  if (r.pod<std::uint32_t>() != buffers.size()) throw RuntimeError("checkpoint: buffer count mismatch");
  for (auto& b : buffers) {
    const auto name = r.string();
    const auto size = r.pod<std::uint64_t>();
    if (name != b.name || size != b.values->size()) throw RuntimeError("checkpoint: unexpected buffer '" + name + "'");
    r.array(*b.values, size);
  }
  const auto count = r.pod<std::uint64_t>();
  if (count > (std::uint64_t{1} << 32)) throw RuntimeError("checkpoint: corrupt history length");
  for (std::uint64_t i = 0; i < count; ++i) {
    LossRecord rec;
    rec.iteration = r.pod<std::uint64_t>();
    rec.epoch = r.pod<std::int32_t>();
    for (double* v : {&rec.lr, &rec.losses.sp, &rec.losses.reg, &rec.losses.sq, &rec.losses.cls, &rec.total}) {
      *v = r.pod<double>();
    }
    s.history.push_back(rec);
  }
  r.finish();
  return s;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling and rename so a failed write never leaves a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot open for writing: " + tmp.string());
    save_checkpoint(s, os);
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("checkpoint not found: " + path.string());
  return load_checkpoint(is);
}

inline void write_loss_history(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("cannot open for writing: " + path.string());
  os << "iteration,epoch,lr,L_SP,L_reg,L_sQ,L_cls,L_T\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%llu,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.iteration), r.epoch, r.lr, r.losses.sp, r.losses.reg,
                  r.losses.sq, r.losses.cls, r.total);
    os << buf;
  }
}

// ---------------------------------------------------------------------------

struct FitOptions {
  std::filesystem::path output_dir;  // empty: no files written
  std::ostream* progress = nullptr;
};

struct FitArtifacts {
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path final_checkpoint;
  std::filesystem::path loss_history;
};

/// Continues training `state` until config.epochs epochs are complete.
inline FitArtifacts fit(TrainState& state, const TrainConfig& config, const Dataset& dataset,
                        const AugmentationPolicy& policy, const FitOptions& options = {}) {
  config.validate();
  policy.validate();
  if (dataset.empty()) throw ValidationError("training dataset is empty");
  if (dataset.identity_count < 2) throw ValidationError("training needs at least 2 identities");
  if (static_cast<std::size_t>(config.batch_size) > dataset.size()) {
    throw ValidationError("train.batch_size " + std::to_string(config.batch_size) + " exceeds the " +
                          std::to_string(dataset.size()) + " training samples");
  }
  if (state.params.config.identity_count != dataset.identity_count) {
    throw ValidationError("model identity_count does not match the dataset");
  }

  FitArtifacts artifacts;
  const bool write = !options.output_dir.empty();
  if (write) {
    std::filesystem::create_directories(options.output_dir / "checkpoints");
    artifacts.loss_history = options.output_dir / "loss_history.csv";
  }

  while (state.epoch < config.epochs) {
    BatchIterator it(dataset, config.batch_size, config.seed, state.epoch);
    LossComponents sum;
    double total = 0.0;
    std::size_t steps = 0;
    LabeledBatch batch;
    while (it.next(batch)) {
      const auto rec = train_step(state, config, batch, policy);
      sum.sp += rec.losses.sp;
      sum.reg += rec.losses.reg;
      sum.sq += rec.losses.sq;
      sum.cls += rec.losses.cls;
      total += rec.total;
      ++steps;
    }
    ++state.epoch;
    if (options.progress && steps) {
      const double n = static_cast<double>(steps);
      char buf[256];
      std::snprintf(buf, sizeof(buf), "epoch %d/%d lr %.6g L_SP %.5f L_reg %.5f L_sQ %.5f L_cls %.5f L_T %.5f\n",
                    state.epoch, config.epochs, lr_at(config, state.epoch - 1), sum.sp / n, sum.reg / n, sum.sq / n,
                    sum.cls / n, total / n);
      *options.progress << buf << std::flush;
    }
    if (write && config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04d.sghc", state.epoch);
      const auto path = options.output_dir / "checkpoints" / name;
      save_checkpoint(state, path);
      artifacts.checkpoints.push_back(path);
    }
  }

  if (write) {
    artifacts.final_checkpoint = options.output_dir / "final.sghc";
    save_checkpoint(state, artifacts.final_checkpoint);
    write_loss_history(state.history, artifacts.loss_history);
  }
  return artifacts;
}

}  // namespace sgh
