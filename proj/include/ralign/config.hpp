#pragma once

#include <string>

#include "ralign/dataset.hpp"
#include "ralign/model.hpp"
#include "ralign/trainer.hpp"

namespace ralign {

// Everything a command-line run can configure, with working defaults. The
// file format is flat `key = value` text: one assignment per line, '#' starts
// a comment, blank lines are skipped. Every optimization-stage field is
// nameable; architecture dimensions use one shared `enc_d` because the
// encoders and the query transformer must agree on the token width.
struct RunConfig {
  u64 seed = 0;
  TrainConfig train;  // train.seed mirrors the top-level seed after parsing

  // Dataset generation (gen-data).
  int train_per_modality = 64;
  int test_per_modality = 16;

  // Architecture.
  ModelConfig model;

  // Evaluation (eval).
  std::string split = "test";

  // Region mining (mine-regions).
  std::string mine_split = "train";
  double tau = 0.9;
  double min_area_fraction = 0.001;

  void validate() const;  // throws ConfigError
};

// Parses `key = value` text. Unknown keys, malformed values, and duplicate
// assignments all raise ConfigError naming the key and line number.
RunConfig parse_run_config(const std::string& text);

// Reads and parses a config file; a missing file raises ConfigError.
RunConfig load_run_config(const std::string& path);

// Serializes every key in canonical order; parse(serialize(c)) == c.
std::string serialize_run_config(const RunConfig& cfg);

}  // namespace ralign
