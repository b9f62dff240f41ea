// Command-line front end: train, encode, query, eval, ablate, lossplot.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sgh/sgh.hpp"

namespace {

struct RunFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::string output;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "Run config file (INI)")->required();
    cmd->add_option("--set", sets, "Override a config value, section.key=value (repeatable)");
    cmd->add_option("--seed", seed, "Override train.seed");
    cmd->add_option("--epochs", epochs, "Override train.epochs");
    cmd->add_option("--output", output, "Override output.dir");
  }

  sgh::RunConfig resolve() const {
    auto overrides = sets;
    if (seed) overrides.push_back("train.seed=" + std::to_string(*seed));
    if (epochs) overrides.push_back("train.epochs=" + std::to_string(*epochs));
    if (!output.empty()) overrides.push_back("output.dir=" + output);
    return sgh::load_run_config(config, overrides);
  }
};

struct SourceFlags {
  std::string dataset;
  std::string config;
  std::string split;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--dataset", dataset, "Image folder with one sub-directory per identity");
    cmd->add_option("--config", config, "Run config file that defines the splits");
    cmd->add_option("--split", split, "Split of --config: db, query, open-db or open-query");
    cmd->add_option("--set", sets, "Override a config value, section.key=value (repeatable)");
  }

  sgh::DatasetSource source() const { return {dataset, config, split, sets}; }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Similarity-guided deep hashing: training, encoding and retrieval evaluation"};
  app.require_subcommand(1);
  std::function<sgh::CommandResult()> action;

  RunFlags train_flags;
  auto* train = app.add_subcommand("train", "Train a model from a run config, then evaluate it");
  train_flags.attach(train);
  train->callback([&] { action = [&] { return sgh::cmd_train(train_flags.resolve()); }; });

  SourceFlags enc_src;
  std::string enc_ckpt, enc_out;
  std::optional<int> enc_size;
  auto* encode = app.add_subcommand("encode", "Encode a dataset into a binary-code index");
  encode->add_option("--checkpoint", enc_ckpt, "Checkpoint file")->required();
  enc_src.attach(encode);
  encode->add_option("--out", enc_out, "Output index file")->required();
  encode->add_option("--image-size", enc_size, "Expected input size; must match the checkpoint");
  encode->callback([&] {
    action = [&] { return sgh::cmd_encode(enc_ckpt, enc_src.source(), enc_out, enc_size); };
  });

  std::string q_index, q_ckpt, q_image;
  std::size_t q_top = 10;
  auto* query = app.add_subcommand("query", "Print the nearest index entries for one image");
  query->add_option("--index", q_index, "Index file")->required();
  query->add_option("--checkpoint", q_ckpt, "Checkpoint file")->required();
  query->add_option("--image", q_image, "Query image")->required();
  query->add_option("--top", q_top, "Number of results M")->capture_default_str();
  query->callback([&] { action = [&] { return sgh::cmd_query(q_index, q_ckpt, q_image, q_top); }; });

  SourceFlags ev_src;
  std::string ev_index, ev_ckpt, ev_mode = "closed", ev_out;
  std::optional<int> ev_bits;
  sgh::EvalSettings ev_settings;
  auto* eval = app.add_subcommand("eval", "Evaluate a query set against an index");
  eval->add_option("--index", ev_index, "Index file")->required();
  eval->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev_src.attach(eval);
  eval->add_option("--mode", ev_mode, "closed or open")->capture_default_str();
  eval->add_option("--out", ev_out, "Report directory")->required();
  eval->add_option("--bits", ev_bits, "Expected code length; must match index and checkpoint");
  eval->add_option("--map-cutoff", ev_settings.map_cutoff, "mAP cutoff")->capture_default_str();
  eval->add_option("--radius", ev_settings.hamming_radius, "Hamming radius for precision")->capture_default_str();
  eval->add_option("--top-m", ev_settings.top_m, "M values for precision@M")->delimiter(',')->capture_default_str();
  eval->callback([&] {
    action = [&] {
      return sgh::cmd_eval(ev_index, ev_ckpt, ev_src.source(), sgh::parse_protocol(ev_mode), ev_settings, ev_out,
                           ev_bits);
    };
  });

  RunFlags ab_flags;
  std::string ab_drop;
  auto* ablate = app.add_subcommand("ablate", "Train a baseline and a variant without one term or augmentation");
  ab_flags.attach(ablate);
  ablate->add_option("--drop", ab_drop, "sp, reg, sq or aug:<crop|flip|jitter|grayscale|blur>")->required();
  ablate->callback([&] { action = [&] { return sgh::cmd_ablate(ab_flags.resolve(), ab_drop); }; });

  std::string lp_out;
  auto* lossplot = app.add_subcommand("lossplot", "Write the three quantization penalty curves as CSV");
  lossplot->add_option("--out", lp_out, "Output CSV")->required();
  lossplot->callback([&] { action = [&] { return sgh::cmd_lossplot(lp_out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const auto result = action();
    sgh::print_artifacts(result, std::cout);
    return 0;
  } catch (const sgh::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
