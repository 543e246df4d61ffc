// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stasc/error.hpp"

namespace stasc {

using json = nlohmann::json;

/// Opaque name of a model checkpoint addressable by the backends.
struct ModelId {
  std::string value;

  ModelId() = default;
  explicit ModelId(std::string v) : value(std::move(v)) {}

  bool empty() const noexcept { return value.empty(); }
  const std::string& str() const noexcept { return value; }

  friend auto operator<=>(const ModelId&, const ModelId&) = default;
};

enum class InitMode { Fixed, Evolving };
enum class FilterMode { Improving, NonDecreasing };
enum class FinetuneMode { Fixed, Evolving };
enum class EmptyFilterPolicy { Skip, Halt };

/// The three design axes of a run, named by a three-letter code such as "EIF".
struct VariantAxes {
  InitMode init = InitMode::Evolving;
  FilterMode filter = FilterMode::Improving;
  FinetuneMode finetune = FinetuneMode::Fixed;

  friend bool operator==(const VariantAxes&, const VariantAxes&) = default;
};

/// Parses "[FE][IN][FE]" case-insensitively. An optional "STaSC_" prefix is
/// accepted. Throws ConfigError naming the 1-based offending position.
VariantAxes parse_variant_code(std::string_view code);

/// Uppercase three-letter code, e.g. "EIF".
std::string format_variant_code(const VariantAxes& axes);

/// All eight codes in a fixed order (FIF, FIE, FNF, ...).
std::vector<std::string> all_variant_codes();

/// Named presets. "sc" keeps the generator frozen and fine-tunes the corrector
/// from the previous model (FIE). "star" has no correction step and is
/// rejected with ConfigError.
VariantAxes variant_preset(std::string_view name);

std::string to_string(InitMode m);
std::string to_string(FilterMode m);
std::string to_string(FinetuneMode m);
std::string to_string(EmptyFilterPolicy p);
EmptyFilterPolicy parse_empty_filter_policy(std::string_view s);

struct SamplingParams {
  double temperature = 1.0;
  double top_p = 1.0;
  int max_tokens = 512;

  friend bool operator==(const SamplingParams&, const SamplingParams&) = default;
};

struct TrainerHyperparams {
  int epochs = 1;
  int batch_size = 8;
  double learning_rate = 7e-6;
  double weight_decay = 0.1;
  std::string schedule = "cosine";

  friend bool operator==(const TrainerHyperparams&, const TrainerHyperparams&) = default;
};

/// Algorithm parameters of a run: the design axes plus N, N_init, N_corr and
/// the non-decreasing threshold.
struct VariantConfig {
  VariantAxes axes;
  int iterations = 1;
  int n_init = 1;
  int n_corr = 1;
  double threshold = 1.0;  // only read by the non-decreasing filter
  SamplingParams sampling;
  TrainerHyperparams trainer;

  /// Human-readable violations; empty when valid.
  std::vector<std::string> violations() const;
  void validate() const;  // throws ConfigError with the first violation

  std::string code() const { return format_variant_code(axes); }

  friend bool operator==(const VariantConfig&, const VariantConfig&) = default;
};

/// One dataset row.
struct QAItem {
  std::string id;
  std::string question;
  std::vector<std::string> references;

  friend bool operator==(const QAItem&, const QAItem&) = default;
};

/// Loads one-record-per-line {id, question, answers[]} files. Row-level
/// problems are reported with 1-based line numbers.
std::vector<QAItem> load_dataset(const std::filesystem::path& path);
std::vector<std::string> dataset_violations(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const std::vector<QAItem>& items);

struct RewardValue {
  double value = 0.0;

  friend auto operator<=>(const RewardValue&, const RewardValue&) = default;
};

/// Step 1 output: one initial answer.
struct AnswerSample {
  std::string item_id;
  int sample_index = 0;
  std::string raw_text;
  std::optional<std::string> parsed_answer;
  ModelId producer_model;

  friend bool operator==(const AnswerSample&, const AnswerSample&) = default;
};

/// Step 2 output: one correction of the initial answer (item_id, initial_index).
struct CorrectionSample {
  std::string item_id;
  int initial_index = 0;
  int correction_index = 0;
  std::string raw_text;
  std::optional<std::string> parsed_answer;
  ModelId producer_model;

  friend bool operator==(const CorrectionSample&, const CorrectionSample&) = default;
};

/// The unit Step 3 filters.
struct Trajectory {
  QAItem item;
  AnswerSample initial;
  CorrectionSample correction;
  RewardValue reward_initial;
  RewardValue reward_correction;
};

enum class RunStatus {
  Pending,
  SamplingInitial,
  SamplingCorrections,
  Filtering,
  Training,
  Evaluating,
  Done,
  Failed,
};

std::string to_string(RunStatus s);
RunStatus parse_run_status(std::string_view s);

/// Test-split metrics snapshot stored with each iteration record.
struct MetricSnapshot {
  double initial_acc = 0.0;
  double correction_acc = 0.0;
  double initial_std = 0.0;
  double correction_std = 0.0;
  std::string aggregation = "mean";
  ModelId generator;
  ModelId corrector;

  friend bool operator==(const MetricSnapshot&, const MetricSnapshot&) = default;
};

/// Last step whose output is persisted for an iteration.
enum class StepMark : int {
  Planned = 0,
  InitialSampled = 1,
  CorrectionsSampled = 2,
  Filtered = 3,
  Trained = 4,
  Evaluated = 5,
};

struct IterationRecord {
  int n = 0;
  ModelId generator;
  ModelId corrector;
  ModelId finetune_base;
  std::optional<ModelId> produced;
  bool trained = false;  // false when the empty-filter policy skipped training
  std::string train_job_id;
  int items_succeeded = 0;
  int items_failed = 0;
  std::size_t trajectories = 0;
  std::size_t improving = 0;
  std::size_t equal_kept = 0;
  std::size_t selected = 0;
  std::size_t dataset_records = 0;
  StepMark step = StepMark::Planned;
  std::optional<MetricSnapshot> metrics;
  std::vector<std::string> warnings;

  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct RunState {
  std::string run_id;
  VariantConfig config;
  ModelId base_model;
  std::uint64_t seed = 0;
  EmptyFilterPolicy empty_filter_policy = EmptyFilterPolicy::Skip;
  RunStatus status = RunStatus::Pending;
  std::string failure_reason;
  std::vector<IterationRecord> iterations;

  /// M_n for n >= 0. Throws StateIntegrityError when not yet produced.
  const ModelId& model_at(int n) const;
  const IterationRecord* find_iteration(int n) const;
  IterationRecord* find_iteration(int n);

  /// Contiguity from 1, produced-id presence and lineage checks.
  void check_integrity() const;

  friend bool operator==(const RunState&, const RunState&) = default;
};

struct ResolvedModels {
  ModelId generator;
  ModelId corrector;
  ModelId finetune_base;

  friend bool operator==(const ResolvedModels&, const ResolvedModels&) = default;
};

/// Model roles for iteration n (1-based):
///   generator     = M_0 if init is Fixed, else M_{n-1}
///   corrector     = M_{n-1}
///   finetune_base = M_0 if fine-tuning is Fixed, else M_{n-1}
ResolvedModels resolve_models(const RunState& state, int n);

json to_json(const VariantConfig& c);
VariantConfig variant_config_from_json(const json& j);
json to_json(const RunState& s);
RunState run_state_from_json(const json& j);

/// Writes to a sibling temporary file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

void save_state(const std::filesystem::path& path, const RunState& state);
RunState load_state(const std::filesystem::path& path);

}  // namespace stasc
