// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stasc/backends.hpp"
#include "stasc/core.hpp"
#include "stasc/eval.hpp"
#include "stasc/promptkit.hpp"
#include "stasc/selection.hpp"

namespace stasc::cli {

/// Process exit codes. Stable; scripts may depend on them.
enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kConfigError = 2,  // bad config, dataset, template, variant code or unknown model
  kBackendError = 3,  // generation retries exhausted, backend unreachable
  kTrainingFailed = 4,
  kHalted = 5,  // empty fine-tuning set under the halt policy
  kStateIntegrity = 6,
};

struct GenerationSettings {
  std::string backend = "mock";  // mock | http
  std::string endpoint;
  std::string token;
  std::size_t max_parallel = 8;
  bool batch_n = true;
  int timeout_ms = 120000;
};

struct TrainerSettings {
  std::string backend = "mock";  // mock | http | subprocess
  std::string endpoint;
  std::string token;
  std::string command;
  int poll_ms = 1000;
  int timeout_ms = 120000;
};

/// Resolved contents of a run config file. Paths are absolute.
struct AppConfig {
  std::string run_id = "run";
  VariantConfig variant;
  ModelId base_model{"M0"};
  std::uint64_t seed = 0;
  std::filesystem::path train;
  std::optional<std::filesystem::path> test;
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> initial_template;
  std::optional<std::filesystem::path> correction_template;
  promptkit::InitialAnswerSlot slot = promptkit::InitialAnswerSlot::FullText;
  std::string reward = "in_accuracy";
  bool score_full_text = false;
  EmptyFilterPolicy empty_filter_policy = EmptyFilterPolicy::Skip;
  selection::DatasetOptions dataset;
  bool evaluate = true;
  eval::Aggregation aggregation = eval::Aggregation::Mean;
  GenerationSettings generation;
  TrainerSettings trainer;
  std::optional<std::filesystem::path> mock_script;
  backends::RetryPolicy retry;
};

/// Command-line overrides; set fields win over environment and file.
struct Overrides {
  std::optional<std::string> variant;
  std::optional<int> n_init;
  std::optional<int> n_corr;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_dir;
  std::optional<std::string> gen_endpoint;
  std::optional<std::string> train_endpoint;
  std::optional<std::string> policy;
};

/// Parses a config object. Relative paths resolve against base_dir. Every
/// problem is appended to `violations` as "key: message".
AppConfig parse_app_config(const json& j, const std::filesystem::path& base_dir,
                           std::vector<std::string>& violations);

/// Reads the file, then applies STASC_* environment variables and overrides.
AppConfig load_app_config(const std::filesystem::path& path, const Overrides& overrides,
                          std::vector<std::string>& violations);

void apply_environment(AppConfig& cfg);
void apply_overrides(AppConfig& cfg, const Overrides& o, std::vector<std::string>& violations);

/// Snapshot written to <run_dir>/config.json. Tokens are omitted.
json app_config_to_json(const AppConfig& cfg);

/// Stable 64-bit hash used to draw dataset subsets.
std::uint64_t subset_hash(std::string_view id);

/// Keeps the `limit` rows with the smallest subset_hash of their id. Rows
/// without an id get "nq-" + hex hash of the question.
std::vector<QAItem> convert_nq(std::istream& in, std::size_t limit, std::vector<std::string>& violations);

/// Entry point: args exclude the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stasc::cli
