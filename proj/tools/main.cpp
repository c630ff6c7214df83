// Command-line driver: one subcommand per pipeline stage. Progress goes to
// stderr; the only stdout output is one final JSON summary line, so runs are
// scriptable. Exit codes: 0 success, 1 runtime failure (single-line error on
// stderr), 2 configuration or usage error.
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "ralign/commands.hpp"

namespace {

// Errors must stay machine-parsable as exactly one stderr line.
std::string one_line(std::string msg) {
  for (char& c : msg)
    if (c == '\n' || c == '\r') c = ' ';
  return msg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental multi-modal alignment pipeline"};
  app.require_subcommand(1);

  ralign::CliArgs args;
  long long seed = 0;
  int steps = 0;
  double lambda = 0.0;

  const char* names[] = {"gen-data",  "pretrain-lm", "pretrain-base", "extend",
                         "pretrain",  "eval",        "mine-regions"};
  const char* descs[] = {
      "write a synthetic four-modality dataset",
      "train the caption generator, then freeze it",
      "train the alignment stack on image-text pairs, then freeze it",
      "add low-rank adapters for one new modality",
      "train adapters over the registered modalities (semi-hybrid schedule)",
      "score captioning/retrieval (and regions) on a split",
      "discover, caption, and filter image regions"};
  for (int i = 0; i < 7; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], descs[i]);
    sub->add_option("--config", args.config_path, "key = value settings file");
    sub->add_option("--out", args.out, "output artifact path");
    sub->add_option("--dataset-root", args.dataset_root, "dataset directory");
    sub->add_option("--checkpoint", args.checkpoint, "input checkpoint");
    sub->add_option("--modality", args.modality,
                    "modality name (repeatable where an order is meant)");
    sub->add_option("--seed", seed, "override the config seed")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--steps", steps, "override total optimization steps")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--lambda", lambda, "override the box-regression weight");
    sub->add_flag("--no-pafe", args.no_pafe,
                  "disable position-conditioned feature extraction");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the parse diagnostic
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  args.command = sub->get_name();
  if (sub->count("--seed")) args.seed = seed;
  if (sub->count("--steps")) args.steps = steps;
  if (sub->count("--lambda")) args.lambda = lambda;

  try {
    nlohmann::json summary = ralign::run_cli(args, std::cerr);
    std::cout << summary.dump() << std::endl;
    return 0;
  } catch (const ralign::ConfigError& e) {
    std::cerr << "config error: " << one_line(e.what()) << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << std::endl;
    return 1;
  }
}
