// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stasc/backends.hpp"
#include "stasc/core.hpp"
#include "stasc/promptkit.hpp"
#include "stasc/reward.hpp"

namespace stasc {

/// Models and items for one pass of Steps 1 and 2.
struct IterationPlan {
  int n = 0;
  ModelId generator;
  ModelId corrector;
  ModelId finetune_base;
  std::vector<QAItem> items;
  bool evaluation = false;  // test-split pass; uses a separate seed stream
};

/// Everything Steps 1-2 need besides the plan.
struct SamplingSetup {
  backends::GenerationGateway& gateway;
  promptkit::PromptTemplate initial_template = promptkit::default_initial_template();
  promptkit::PromptTemplate correction_template = promptkit::default_correction_template();
  promptkit::InitialAnswerSlot slot = promptkit::InitialAnswerSlot::FullText;
  reward::RewardFn reward = &reward::in_accuracy;
  bool score_full_text = false;
  VariantConfig config;
  std::uint64_t run_seed = 0;
};

struct InitialRecord {
  std::size_t seq = 0;
  AnswerSample sample;
  RewardValue reward;
  std::string prompt_sha;

  friend bool operator==(const InitialRecord&, const InitialRecord&) = default;
};

struct CorrectionRecord {
  std::size_t seq = 0;
  CorrectionSample sample;
  RewardValue reward;
  std::string prompt_sha;
  std::string prompt;  // byte-exact text sent to the corrector

  friend bool operator==(const CorrectionRecord&, const CorrectionRecord&) = default;
};

struct InitialStep {
  std::vector<InitialRecord> records;  // item order, then sample index
  std::vector<std::string> failed_items;
  std::map<std::string, std::string> prompts;  // sha -> text
};

struct CorrectionStep {
  std::vector<CorrectionRecord> records;  // item, initial index, correction index
  std::vector<std::string> failed_items;
};

/// Per-request seed derived from the run seed and the request coordinates.
std::uint64_t request_seed(std::uint64_t run_seed, const backends::RequestTag& tag);

/// Scores a sample: parsed answer by default, full text when configured.
RewardValue score_answer(const SamplingSetup& setup, const QAItem& item, const std::string& raw,
                         const std::optional<std::string>& parsed);

/// Step 1: n_init samples per item from the plan's generator. Items whose
/// requests exhaust their retries are reported in failed_items.
InitialStep sample_initial_answers(const IterationPlan& plan, const SamplingSetup& setup);

/// Step 2: n_corr corrections per initial answer from the plan's corrector.
/// Sequence numbers continue after the initial records. An item with any
/// failed request is dropped as a whole.
CorrectionStep sample_corrections(const std::vector<InitialRecord>& initials, const IterationPlan& plan,
                                  const SamplingSetup& setup);

/// Runs fn(0..count-1) on up to max_parallel threads. Exceptions propagate
/// after all workers stop; the lowest failing index wins.
void parallel_for(std::size_t count, std::size_t max_parallel, const std::function<void(std::size_t)>& fn);

json to_json(const InitialRecord& r);
InitialRecord initial_record_from_json(const json& j);
/// The prompt text is not serialized, only its hash.
json to_json(const CorrectionRecord& r);
CorrectionRecord correction_record_from_json(const json& j);

}  // namespace stasc
