#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ralign/config.hpp"

#include "json.hpp"

namespace ralign {

// One parsed command-line invocation. Flags a command does not need are
// ignored; flags it requires raise ConfigError when absent.
struct CliArgs {
  std::string command;       // gen-data | pretrain-lm | pretrain-base |
                             // extend | pretrain | eval | mine-regions
  std::string config_path;   // optional; defaults apply when empty
  std::string out;           // artifact path (file or directory per command)
  std::string dataset_root;  // dataset directory from gen-data
  std::string checkpoint;    // input checkpoint path
  std::vector<std::string> modality;  // --modality, repeatable
  std::optional<long long> seed;      // overrides the config seed
  std::optional<int> steps;           // overrides total_steps
  std::optional<double> lambda;       // overrides the regression weight
  bool no_pafe = false;               // disables position conditioning
};

// Loads the config, applies flag overrides, dispatches to the command, and
// returns the summary object that belongs on stdout as one JSON line.
// Progress goes to `log` (stderr in the binary). Throws ConfigError for
// usage/config problems and std::runtime_error for runtime failures.
nlohmann::json run_cli(const CliArgs& args, std::ostream& log);

// The config after file parsing and flag overrides, exposed for tests.
RunConfig resolve_config(const CliArgs& args);

}  // namespace ralign
