#pragma once

// JSON run configuration with strict key checking.
//
//   {"generator": {...}, "train": {...}, "data": {...}, "out_dir": "..."}
//
// Every section is optional and every key inside a section is optional;
// unknown keys are rejected. Resolution, video and frames are shared: if only
// one section sets them the others follow, and conflicting values are an
// error. With nothing set, runs are 16x16.

#include <stdexcept>
#include <string>

#include "mtm/stylegen.hpp"
#include "mtm/train.hpp"

namespace mtm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  GeneratorConfig generator;
  TrainConfig train;
  DataConfig data;
  std::string out_dir;

  /// Defaults for every field, 16x16.
  RunConfig();
  /// Throws ConfigError on any invalid field or cross-section mismatch.
  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
/// Names the path when the file is missing or unreadable.
RunConfig load_run_config(const std::string& path);

}  // namespace mtm
