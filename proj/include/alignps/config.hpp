#pragma once

#include <string>

#include "alignps/data.hpp"
#include "alignps/trainer.hpp"

namespace alignps {

struct EvalConfig {
  int gallery_size = 100;
};

/// Where the datasets live. Commands that need a split report the missing
/// field by name instead of failing on a dangling path later.
struct DataPaths {
  std::string train_dir;
  std::string test_dir;
};

/// One structured file covering the model, the optimizer, evaluation, and
/// data locations. Every key is optional and falls back to the built-in
/// default; unknown or mistyped keys are rejected with their full field
/// path so typos can't silently revert a knob to its default.
struct AppConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  DataPaths data;
};

AppConfig parse_app_config(const std::string &json_text);
AppConfig load_app_config(const std::string &path);

/// Full-schema dump (every key, current values); doubles as the schema
/// documentation and round-trips through parse_app_config.
std::string serialize_app_config(const AppConfig &c);

/// Scene-generator spec plus split sizes, same error discipline.
struct GenSpec {
  SyntheticSpec scene;
  int train_images = 200;
  int test_images = 50;
};

GenSpec parse_gen_spec(const std::string &json_text);
GenSpec load_gen_spec(const std::string &path);

}  // namespace alignps
