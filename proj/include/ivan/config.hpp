#pragma once

#include <string>
#include <vector>

#include "ivan/augmentation.hpp"
#include "ivan/dataio.hpp"
#include "ivan/flow.hpp"
#include "ivan/metrics.hpp"
#include "ivan/objective.hpp"

namespace ivan {

/// Everything a CLI run depends on. Loaded from a flat `key = value` file,
/// then overridden by flags.
struct RunConfig {
  std::string out = "out";
  std::string checkpoint;
  std::string manifest;  // empty: generated phantoms
  std::string train_split = "train";
  std::string test_split = "test";

  PhantomSpec phantom;
  Index phantom_train = 200;  // leading phantom records used for training

  std::string sources = "T1,PD";
  std::string targets = "T2";
  Index min_channels = 0;
  DedupRule dedup = DedupRule::Mean;

  ModelTopology model;  // channels come from the augmentation plan
  TrainConfig train;
  MetricConfig metrics;

  int image_maxval = 65535;
  Index check_height = 32;
  Index check_width = 32;
  Index check_batch = 2;
  int verbosity = 1;

  RunConfig();
  void validate() const;
};

/// Every recognised key in echo order.
std::vector<std::string> config_keys();

/// Sets one key from its text form; unknown keys and bad values throw ConfigError.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

/// Applies `key = value` lines; '#' starts a comment, blank lines are skipped.
void apply_config_text(RunConfig& cfg, const std::string& text);

/// All keys with their values, one `key = value` per line. Parsing this text
/// into a default RunConfig reproduces `cfg`.
std::string resolved_config_text(const RunConfig& cfg);

}  // namespace ivan
