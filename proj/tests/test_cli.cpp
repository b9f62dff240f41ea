#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "sgh/sgh.hpp"

namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// A configuration small enough to train in a couple of seconds.
std::string small_ini(const fs::path& out) {
  return "[dataset]\nidentities = 3\nimages_per_identity = 6\nimage_size = 8\nqueries_per_identity = 2\n"
         "open_identities = 2\n[model]\ncode_bits = 8\nlatent_dim = 16\nprojection_dim = 8\n"
         "[train]\nepochs = 2\nbatch_size = 6\ncheckpoint_every = 1\n[output]\ndir = " +
         out.string() + "\n";
}

sgh::RunConfig parse_text(const std::string& text, const std::vector<std::string>& overrides = {}) {
  std::istringstream is(text);
  boost::property_tree::ptree tree;
  boost::property_tree::read_ini(is, tree);
  return sgh::parse_run_config(tree, overrides);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SGH_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(RunConfig, DefaultsMatchLibrary) {
  const auto c = parse_text("");
  EXPECT_EQ(c.train.weights.lambda1, 0.0002);
  EXPECT_EQ(c.train.weights.lambda2, 0.05);
  EXPECT_EQ(c.train.learning_rate, 0.001);
  EXPECT_EQ(c.train.batch_size, 256);
  EXPECT_EQ(c.train.lr_decay, 0.9);
  EXPECT_EQ(c.train.lr_decay_every, 50);
  EXPECT_TRUE(c.dataset.synthetic);
  EXPECT_EQ(c.augment, sgh::AugmentationPolicy{});
  EXPECT_EQ(c.eval.map_cutoff, 50u);
}

TEST(RunConfig, CollectsEveryViolation) {
  try {
    parse_text("[dataset]\nsynthetic = false\n[model]\ncode_bits = 2\nwidth = 3\n[train]\nepochs = x\n[extra]\na=1\n");
    FAIL() << "expected a ConfigError";
  } catch (const sgh::ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("dataset.path"), std::string::npos);
    EXPECT_NE(msg.find("model.code_bits"), std::string::npos);
    EXPECT_NE(msg.find("unknown key model.width"), std::string::npos);
    EXPECT_NE(msg.find("train.epochs"), std::string::npos);
    EXPECT_NE(msg.find("[extra]"), std::string::npos);
    EXPECT_EQ(e.problems().size(), 5u);
  }
}

TEST(RunConfig, MissingDatasetPathNamed) {
  try {
    parse_text("[dataset]\npath = /definitely/not/here\n");
    FAIL();
  } catch (const sgh::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("dataset.path"), std::string::npos);
  }
}

TEST(RunConfig, OverridesWinAndResolvedTextRoundTrips) {
  const auto c = parse_text("[train]\nseed = 3\n[eval]\ntop_m = 1,10\n", {"train.seed=7", "model.code_bits=24"});
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.model.code_bits, 24);
  EXPECT_EQ(c.eval.top_m, (std::vector<std::size_t>{1, 10}));
  EXPECT_EQ(sgh::to_ini(parse_text(sgh::to_ini(c))), sgh::to_ini(c));
  EXPECT_THROW(parse_text("", {"seed=7"}), sgh::ValidationError);
}

TEST(Splits, NamedSplitsAndOpenSet) {
  const auto c = parse_text(small_ini("unused"));
  const auto s = sgh::load_splits(c);
  EXPECT_EQ(s.db.size(), 12u);
  EXPECT_EQ(s.query.size(), 6u);
  ASSERT_TRUE(s.open_db.has_value());
  EXPECT_EQ(s.open_db->identity_count, 2);
  EXPECT_EQ(sgh::select_split(s, "open-query").size(), 4u);
  EXPECT_THROW(sgh::select_split(s, "train"), sgh::ValidationError);
}

TEST(Commands, TrainIsDeterministicAndWritesArtifacts) {
  TempDir dir("sgh_test_cli_train");
  std::ostringstream log;
  auto a = parse_text(small_ini(dir / "a"), {"train.seed=7"});
  auto b = parse_text(small_ini(dir / "b"), {"train.seed=7"});
  const auto ra = sgh::cmd_train(a, log);
  sgh::cmd_train(b, log);
  EXPECT_TRUE(fs::is_regular_file(dir / "a" / "resolved_config.ini"));
  EXPECT_TRUE(fs::is_regular_file(dir / "a" / "loss_history.csv"));
  EXPECT_TRUE(fs::is_regular_file(dir / "a" / "report" / "open" / "report.json"));
  for (const char* f : {"final.sghc", "checkpoints/epoch_0001.sghc", "db.sghi", "report/closed/report.json"}) {
    EXPECT_EQ(read_file(dir / "a" / f), read_file(dir / "b" / f)) << f;
  }
  EXPECT_GE(ra.artifacts.size(), 10u);
}

TEST(Commands, EncodeQueryEval) {
  TempDir dir("sgh_test_cli_encode");
  const auto ini = dir / "run.ini";
  write_file(ini, "[dataset]\nidentities = 10\nimages_per_identity = 50\nimage_size = 32\n");
  const auto ckpt = dir / "model.sghc";
  sgh::save_checkpoint(sgh::TrainState::initial(sgh::ModelConfig::tiny(32, 16, 10), 1), ckpt);
  std::ostringstream log;

  const sgh::DatasetSource db{{}, ini, "db", {}};
  sgh::cmd_encode(ckpt, db, dir / "a.sghi", std::nullopt, log);
  sgh::cmd_encode(ckpt, db, dir / "b.sghi", std::nullopt, log);
  const auto index = sgh::load_index(dir / "a.sghi");
  EXPECT_EQ(index.size(), 450u);
  EXPECT_EQ(index.bits(), 16);
  EXPECT_EQ(read_file(dir / "a.sghi"), read_file(dir / "b.sghi"));
  EXPECT_THROW(sgh::cmd_encode(ckpt, db, dir / "c.sghi", 64, log), sgh::ValidationError);
  EXPECT_THROW(sgh::cmd_encode(ckpt, {{}, ini, "db", {"dataset.image_size=16"}}, dir / "c.sghi", std::nullopt, log),
               sgh::ValidationError);

  std::stringstream rows;
  sgh::ImageTensor gray(40, 40);
  for (auto& v : gray.values()) v = 0.5f;
  sgh::write_png(gray, dir / "gray.png");
  sgh::cmd_query(dir / "a.sghi", ckpt, dir / "gray.png", 5, rows);
  int lines = 0;
  for (std::string line; std::getline(rows, line);) ++lines;
  EXPECT_EQ(lines, 6);
  EXPECT_THROW(sgh::cmd_query(dir / "missing.sghi", ckpt, dir / "gray.png", 5, rows), sgh::RuntimeError);

  const sgh::DatasetSource queries{{}, ini, "query", {}};
  const auto r1 = sgh::cmd_eval(dir / "a.sghi", ckpt, queries, sgh::Protocol::kClosed, {}, dir / "r1", 16, log);
  const auto r2 = sgh::cmd_eval(dir / "a.sghi", ckpt, queries, sgh::Protocol::kClosed, {}, dir / "r2", std::nullopt, log);
  ASSERT_EQ(r1.artifacts.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(read_file(r1.artifacts[i]), read_file(r2.artifacts[i]));
  EXPECT_THROW(sgh::cmd_eval(dir / "a.sghi", ckpt, queries, sgh::Protocol::kClosed, {}, dir / "r3", 12, log),
               sgh::ValidationError);
  const auto other = dir / "k12.sghc";
  sgh::save_checkpoint(sgh::TrainState::initial(sgh::ModelConfig::tiny(32, 12, 10), 1), other);
  EXPECT_THROW(sgh::cmd_eval(dir / "a.sghi", other, queries, sgh::Protocol::kClosed, {}, dir / "r3", std::nullopt, log),
               sgh::ValidationError);
}

TEST(Commands, EncodeFolderWithGrayscaleImage) {
  TempDir dir("sgh_test_cli_folder");
  for (const char* who : {"a", "b"}) fs::create_directories(dir / "data" / who);
  {
    std::ofstream os(dir / "data" / "a" / "x.pgm", std::ios::binary);
    os << "P2\n2 2\n255\n0 50 100 250\n";
  }
  sgh::write_png(sgh::ImageTensor(16, 16), dir / "data" / "b" / "y.png");
  const auto ckpt = dir / "m.sghc";
  sgh::save_checkpoint(sgh::TrainState::initial(sgh::ModelConfig::tiny(16, 8, 2), 1), ckpt);
  std::ostringstream log;
  sgh::cmd_encode(ckpt, {dir / "data", {}, {}, {}}, dir / "i.sghi", std::nullopt, log);
  EXPECT_EQ(sgh::load_index(dir / "i.sghi").size(), 2u);
}

TEST(Commands, AblationTargets) {
  TempDir dir("sgh_test_cli_ablate");
  auto cfg = parse_text(small_ini(dir / "run"));
  std::ostringstream log;
  EXPECT_THROW(sgh::cmd_ablate(cfg, "cls", log), sgh::ValidationError);
  EXPECT_THROW(sgh::cmd_ablate(cfg, "aug:rotate", log), sgh::ValidationError);
  EXPECT_THROW(sgh::cmd_ablate(cfg, "everything", log), sgh::ValidationError);
  EXPECT_FALSE(fs::exists(dir / "run"));
  const auto r = sgh::cmd_ablate(cfg, "aug:blur", log);
  EXPECT_TRUE(fs::is_regular_file(dir / "run" / "baseline" / "final.sghc"));
  EXPECT_TRUE(fs::is_regular_file(dir / "run" / "without_aug_blur" / "final.sghc"));
  const auto table = read_file(dir / "run" / "ablation.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "metric,baseline,without_aug_blur");
  EXPECT_EQ(r.artifacts.back(), dir / "run" / "ablation.json");

  for (const char* drop : {"sp", "reg", "sq"}) {
    auto copy = cfg;
    sgh::apply_drop(drop, copy);
    EXPECT_FALSE(copy.train.terms == cfg.train.terms) << drop;
  }
}

TEST(Commands, LossplotRows) {
  TempDir dir("sgh_test_cli_lossplot");
  std::ostringstream log;
  sgh::cmd_lossplot(dir / "q.csv", log);
  std::ifstream is(dir / "q.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "q,combined,double_squared,double_absolute");
  std::map<std::string, std::string> rows;
  int count = 0;
  while (std::getline(is, line)) {
    rows[line.substr(0, line.find(','))] = line.substr(line.find(',') + 1);
    ++count;
  }
  EXPECT_EQ(count, 401);
  EXPECT_EQ(rows["0.00"], "1,1,1");
  EXPECT_EQ(rows["1.00"], "0,0,0");
  EXPECT_EQ(rows["-1.00"], "0,0,0");
  EXPECT_EQ(rows["0.50"], "0.75,0.5625,0.5");
}

TEST(Binary, ExitCodes) {
  TempDir dir("sgh_test_cli_binary");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("train --help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("lossplot --out " + (dir / "l.csv").string() + " --bogus"), 1);
  EXPECT_EQ(run_cli("lossplot --out " + (dir / "l.csv").string()), 0);
  EXPECT_TRUE(fs::is_regular_file(dir / "l.csv"));

  write_file(dir / "bad.ini", "[train]\nepochs = 0\n[output]\ndir = " + (dir / "never").string() + "\n");
  EXPECT_EQ(run_cli("train --config " + (dir / "bad.ini").string()), 1);
  EXPECT_FALSE(fs::exists(dir / "never"));
  EXPECT_EQ(run_cli("ablate --config " + (dir / "bad.ini").string() + " --drop cls --epochs 1"), 1);
  EXPECT_EQ(run_cli("query --index " + (dir / "no.sghi").string() + " --checkpoint x --image y"), 2);
  EXPECT_EQ(run_cli("eval --index a --checkpoint b --out c --mode sideways"), 1);
}
