#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "sgh/trainer.hpp"

namespace fs = std::filesystem;

namespace {

sgh::LabeledBatch toy_batch(int n = 6, int size = 8) {
  const auto ds = sgh::make_synthetic_dataset(3, n, size, 4);
  sgh::LabeledBatch b;
  for (int i = 0; i < n; ++i) {
    b.images.push_back(ds.samples[static_cast<std::size_t>(i * 3 % ds.size())].image);
    b.labels.push_back(ds.samples[static_cast<std::size_t>(i * 3 % ds.size())].label);
  }
  return b;
}

sgh::TrainState toy_state(std::uint64_t seed = 2) {
  return sgh::TrainState::initial(sgh::ModelConfig::tiny(8, 8, 3), seed);
}

// Total objective on [x, x] in train mode, without touching the state.
double objective(const sgh::ModelParams& p, const sgh::LabeledBatch& b, const sgh::TrainConfig& c) {
  std::vector<sgh::ImageTensor> images = b.images;
  images.insert(images.end(), b.images.begin(), b.images.end());
  const auto pass = sgh::forward(p, images, sgh::Mode::kTrain);
  return sgh::evaluate_objective(pass.out, b.labels, c.weights, c.terms).total;
}

std::vector<double> group_values(const sgh::ModelParams& p, sgh::ParamGroup g) {
  std::vector<double> out;
  for (const auto& t : p.tensors()) {
    if (t.group == g) out.insert(out.end(), t.values->begin(), t.values->end());
  }
  return out;
}

std::string bytes_of(const sgh::TrainState& s) {
  std::ostringstream os;
  sgh::save_checkpoint(s, os);
  return os.str();
}

sgh::TrainState from_bytes(const std::string& b) {
  std::istringstream is(b);
  return sgh::load_checkpoint(is);
}

}  // namespace

TEST(Schedule, StepDecay) {
  const sgh::TrainConfig c;
  EXPECT_EQ(sgh::lr_at(c, 0), 0.001);
  EXPECT_EQ(sgh::lr_at(c, 49), 0.001);
  EXPECT_NEAR(sgh::lr_at(c, 50), 0.0009, 1e-15);
  EXPECT_NEAR(sgh::lr_at(c, 100), 0.00081, 1e-15);
  EXPECT_THROW(sgh::lr_at(c, -1), sgh::ValidationError);
}

TEST(TrainConfig, DefaultsAndViolations) {
  sgh::TrainConfig c;
  EXPECT_EQ(c.batch_size, 256);
  EXPECT_EQ(c.learning_rate, 0.001);
  EXPECT_EQ(c.adam_beta1, 0.9);
  EXPECT_EQ(c.adam_beta2, 0.999);
  EXPECT_EQ(c.adam_epsilon, 1e-8);
  EXPECT_TRUE(c.violations().empty());
  c.epochs = 0;
  c.lr_decay = 1.5;
  c.learning_rate = 0;
  EXPECT_EQ(c.violations().size(), 3u);
}

TEST(Objective, NeedsTwiceTheBatchRows) {
  const auto p = toy_state().params;
  const auto batch = toy_batch(4);
  const auto pass = sgh::forward(p, batch.images, sgh::Mode::kTrain);
  EXPECT_THROW(sgh::evaluate_objective(pass.out, batch.labels, {}, {}), sgh::ValidationError);
  const int half[] = {0, 1};
  EXPECT_NO_THROW(sgh::evaluate_objective(pass.out, half, {}, {}));
}

TEST(TrainStep, SmallStepDescends) {
  const auto batch = toy_batch();
  for (double lr : {1e-3, 1e-4}) {
    auto state = toy_state();
    sgh::TrainConfig c;
    c.learning_rate = lr;
    const double before = objective(state.params, batch, c);
    sgh::train_step(state, c, batch, sgh::AugmentationPolicy::none());
    const double after = objective(state.params, batch, c);
    if (lr == 1e-4) {
      EXPECT_LT(after, before);
    } else {
      RecordProperty("decrease_at_1e-3", std::to_string(before - after));
    }
  }
}

TEST(TrainStep, DeterministicSuccessor) {
  const auto batch = toy_batch();
  auto a = toy_state();
  auto b = toy_state();
  const sgh::TrainConfig c;
  const sgh::AugmentationPolicy policy;
  sgh::train_step(a, c, batch, policy);
  sgh::train_step(b, c, batch, policy);
  EXPECT_EQ(bytes_of(a), bytes_of(b));
  EXPECT_EQ(a.iteration, 1u);
  ASSERT_EQ(a.history.size(), 1u);
  EXPECT_TRUE(std::isfinite(a.history[0].total));
}

TEST(TrainStep, FrozenFeaturesGiveClassifierTraining) {
  const auto batch = toy_batch();
  auto state = toy_state();
  const auto before = state.params;
  sgh::TrainConfig c;
  c.weights = {0.0, 0.0};
  c.frozen = {sgh::ParamGroup::kFeature, sgh::ParamGroup::kProjection};
  for (int i = 0; i < 3; ++i) sgh::train_step(state, c, batch, sgh::AugmentationPolicy{});
  EXPECT_EQ(group_values(state.params, sgh::ParamGroup::kFeature), group_values(before, sgh::ParamGroup::kFeature));
  EXPECT_EQ(group_values(state.params, sgh::ParamGroup::kProjection),
            group_values(before, sgh::ParamGroup::kProjection));
  EXPECT_NE(group_values(state.params, sgh::ParamGroup::kHashing), group_values(before, sgh::ParamGroup::kHashing));
  EXPECT_NE(group_values(state.params, sgh::ParamGroup::kClassifier),
            group_values(before, sgh::ParamGroup::kClassifier));
}

TEST(TrainStep, RoutingLeavesUnreachedHeadsUntouched) {
  const auto batch = toy_batch();
  {
    auto state = toy_state();
    const auto before = state.params;
    sgh::TrainConfig c;
    c.terms = {true, false, false, false};
    for (int i = 0; i < 3; ++i) sgh::train_step(state, c, batch, sgh::AugmentationPolicy{});
    EXPECT_EQ(group_values(state.params, sgh::ParamGroup::kHashing), group_values(before, sgh::ParamGroup::kHashing));
    EXPECT_NE(group_values(state.params, sgh::ParamGroup::kProjection),
              group_values(before, sgh::ParamGroup::kProjection));
  }
  {
    auto state = toy_state();
    const auto before = state.params;
    sgh::TrainConfig c;
    c.terms = {false, false, true, true};
    for (int i = 0; i < 3; ++i) sgh::train_step(state, c, batch, sgh::AugmentationPolicy{});
    EXPECT_EQ(group_values(state.params, sgh::ParamGroup::kProjection),
              group_values(before, sgh::ParamGroup::kProjection));
    EXPECT_NE(group_values(state.params, sgh::ParamGroup::kHashing), group_values(before, sgh::ParamGroup::kHashing));
  }
}

TEST(Checkpoint, ReloadContinuesTheSameTrajectory) {
  const auto batch = toy_batch();
  const sgh::TrainConfig c;
  const sgh::AugmentationPolicy policy;
  auto straight = toy_state();
  sgh::train_step(straight, c, batch, policy);
  auto reloaded = from_bytes(bytes_of(straight));
  EXPECT_EQ(reloaded.adam, straight.adam);
  EXPECT_TRUE(reloaded.params == straight.params);
  for (int i = 0; i < 5; ++i) {
    sgh::train_step(straight, c, batch, policy);
    sgh::train_step(reloaded, c, batch, policy);
    ASSERT_EQ(bytes_of(straight), bytes_of(reloaded)) << "step " << i;
  }
}

TEST(Checkpoint, ReloadAfterZeroStepsMatchesOneStep) {
  const auto batch = toy_batch();
  const sgh::TrainConfig c;
  auto a = toy_state();
  auto b = from_bytes(bytes_of(a));
  sgh::train_step(a, c, batch, {});
  sgh::train_step(b, c, batch, {});
  EXPECT_EQ(bytes_of(a), bytes_of(b));
}

TEST(Checkpoint, CorruptFilesRejected) {
  auto s = toy_state();
  sgh::train_step(s, sgh::TrainConfig{}, toy_batch(), {});
  const auto bytes = bytes_of(s);
  EXPECT_THROW(from_bytes(bytes.substr(0, bytes.size() / 2)), sgh::RuntimeError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(from_bytes(flipped), sgh::RuntimeError);
  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(from_bytes(version), sgh::RuntimeError);
  EXPECT_THROW(sgh::load_checkpoint(fs::path("/nonexistent/ckpt.sghc")), sgh::RuntimeError);
}

TEST(Fit, RejectsBadInputs) {
  const auto ds = sgh::make_synthetic_dataset(3, 4, 8, 1);
  auto state = toy_state();
  sgh::TrainConfig c;
  c.epochs = 0;
  c.batch_size = 4;
  EXPECT_THROW(sgh::fit(state, c, ds, {}), sgh::ValidationError);
  c.epochs = 1;
  c.batch_size = 13;
  EXPECT_THROW(sgh::fit(state, c, ds, {}), sgh::ValidationError);
  auto wrong = sgh::TrainState::initial(sgh::ModelConfig::tiny(8, 8, 5), 1);
  c.batch_size = 4;
  EXPECT_THROW(sgh::fit(wrong, c, ds, {}), sgh::ValidationError);
}

TEST(Fit, WritesArtifactsAndResumes) {
  const auto ds = sgh::make_synthetic_dataset(3, 8, 8, 1);
  const auto dir = fs::temp_directory_path() / "sgh_test_fit";
  fs::remove_all(dir);
  sgh::TrainConfig c;
  c.epochs = 4;
  c.batch_size = 8;
  c.checkpoint_every = 2;
  auto state = toy_state();
  std::ostringstream progress;
  const auto art = sgh::fit(state, c, ds, {}, {dir, &progress});
  EXPECT_EQ(art.checkpoints.size(), 2u);
  EXPECT_TRUE(fs::is_regular_file(dir / "checkpoints" / "epoch_0002.sghc"));
  EXPECT_TRUE(fs::is_regular_file(art.final_checkpoint));
  EXPECT_EQ(state.iteration, 12u);
  EXPECT_EQ(state.history.size(), 12u);

  std::ifstream csv(art.loss_history);
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "iteration,epoch,lr,L_SP,L_reg,L_sQ,L_cls,L_T");
  int lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  EXPECT_EQ(lines, 12);
  EXPECT_NE(progress.str().find("epoch 4/4"), std::string::npos);

  // Resuming from the epoch-2 checkpoint reproduces the final state.
  auto resumed = sgh::load_checkpoint(dir / "checkpoints" / "epoch_0002.sghc");
  sgh::fit(resumed, c, ds, {});
  EXPECT_EQ(bytes_of(resumed), bytes_of(state));
  fs::remove_all(dir);
}

TEST(Fit, ClassificationLossFallsOnSyntheticData) {
  const auto ds = sgh::make_synthetic_dataset(10, 50, 16, 7);
  sgh::TrainConfig c;
  c.epochs = 30;
  c.batch_size = 64;
  c.seed = 1;
  auto state = sgh::TrainState::initial(sgh::ModelConfig::tiny(16, 16, 10), 1);
  sgh::fit(state, c, ds, {});
  const std::size_t per_epoch = ds.size() / 64;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < per_epoch; ++i) {
    first += state.history[i].losses.cls;
    last += state.history[state.history.size() - 1 - i].losses.cls;
  }
  EXPECT_LT(last, first);
  for (const auto& r : state.history) {
    ASSERT_TRUE(std::isfinite(r.losses.sp) && std::isfinite(r.losses.reg) && std::isfinite(r.losses.sq) &&
                std::isfinite(r.losses.cls));
  }
}
