// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stasc/backends.hpp"
#include "stasc/core.hpp"
#include "stasc/eval.hpp"
#include "stasc/sampling.hpp"
#include "stasc/selection.hpp"

namespace stasc::loop {

struct LoopOptions {
  /// Unset: fresh runs use Skip, resumed runs keep the persisted policy.
  std::optional<EmptyFilterPolicy> empty_filter_policy;
  selection::DatasetOptions dataset;
  bool evaluate = true;  // only when a test split is given
  eval::Aggregation aggregation = eval::Aggregation::Mean;
  /// Invoked after every persisted step boundary.
  std::function<void(int n, StepMark step)> on_step_persisted;
};

struct RunSpec {
  std::string run_id;
  VariantConfig config;
  ModelId base_model;
  std::uint64_t seed = 0;
  std::vector<QAItem> train;
  std::vector<QAItem> test;
};

/// Run directory layout:
///   state.json
///   events.jsonl                       (diagnostics, wall-clock times)
///   iter_001/initial.jsonl             Step 1 samples with rewards
///   iter_001/initial_prompts.jsonl     {sha256, text}
///   iter_001/corrections.jsonl         Step 2 samples with rewards
///   iter_001/correction_prompts.jsonl  {sha256, text}, byte-exact
///   iter_001/trajectories.jsonl        one line per trajectory, with filter verdict
///   iter_001/filter.json               D_n counts
///   iter_001/finetune.jsonl            fine-tune records
///   iter_001/eval.json                 test-split reward matrices
///   report.md, metrics.json, curve.csv
class Driver {
 public:
  Driver(std::filesystem::path run_dir, SamplingSetup setup, backends::TrainerGateway& trainer,
         LoopOptions options = {});

  /// Preflight (backend pings, validation), then a fresh run. Throws before
  /// touching the run directory if preflight fails or state already exists.
  RunState run(const RunSpec& spec);

  /// Continues the persisted run from its last completed step.
  RunState resume(const std::vector<QAItem>& train, const std::vector<QAItem>& test);

  /// Executes the remaining steps of iteration n and persists after each.
  RunState run_iteration(RunState state, int n);

  std::filesystem::path state_path() const { return run_dir_ / "state.json"; }
  std::filesystem::path iteration_dir(int n) const;

 private:
  RunState drive(RunState state);
  void persist(RunState& state, int n, std::optional<StepMark> reached);
  void event(const json& e) const;
  SamplingSetup setup_for(const RunState& state) const;

  std::filesystem::path run_dir_;
  SamplingSetup setup_;
  backends::TrainerGateway& trainer_;
  LoopOptions options_;
  std::vector<QAItem> train_;
  std::vector<QAItem> test_;
};

/// Trajectories for an iteration, rebuilt from its persisted sample logs.
std::vector<Trajectory> load_trajectories(const std::filesystem::path& iter_dir, const std::vector<QAItem>& items);

/// Correction prompts keyed by trajectory, verified against their hashes.
selection::PromptLog load_prompt_log(const std::filesystem::path& iter_dir);

std::vector<json> read_jsonl(const std::filesystem::path& path);
std::string to_jsonl(const std::vector<json>& rows);

}  // namespace stasc::loop
