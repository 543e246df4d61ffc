// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stasc/core.hpp"

namespace stasc::selection {

/// Step 3 predicates.
inline bool is_improving(const Trajectory& t) { return t.reward_correction > t.reward_initial; }
inline bool is_equal_kept(const Trajectory& t, double threshold) {
  return t.reward_correction == t.reward_initial && t.reward_initial.value >= threshold;
}

struct ItemCounts {
  std::size_t improving = 0;
  std::size_t equal_kept = 0;
  std::size_t selected = 0;
};

struct FilterOutcome {
  std::vector<Trajectory> improving;   // D_n^+
  std::vector<Trajectory> equal_kept;  // D_n^= (non-decreasing mode only)
  std::vector<Trajectory> selected;    // D_n, input order
  std::map<std::string, ItemCounts> per_item;
};

/// Keeps corrections whose reward strictly exceeds the initial answer's.
FilterOutcome filter_improving(std::span<const Trajectory> trajs);

/// Strict improvers plus corrections that tie an initial reward >= threshold.
FilterOutcome filter_non_decreasing(std::span<const Trajectory> trajs, double threshold);

FilterOutcome apply_filter(std::span<const Trajectory> trajs, FilterMode mode, double threshold);

/// Identifies one correction sample within an iteration.
struct TrajectoryKey {
  std::string item_id;
  int initial_index = 0;
  int correction_index = 0;

  friend auto operator<=>(const TrajectoryKey&, const TrajectoryKey&) = default;
};

TrajectoryKey key_of(const Trajectory& t);
std::string to_string(const TrajectoryKey& k);

/// Correction prompts exactly as sent, keyed by the correction they produced.
class PromptLog {
 public:
  void add(TrajectoryKey key, std::string prompt);
  const std::string* find(const TrajectoryKey& key) const;
  std::size_t size() const noexcept { return prompts_.size(); }

 private:
  std::map<TrajectoryKey, std::string> prompts_;
};

/// One supervised example. The trainer applies loss to `target` only.
struct FinetuneRecord {
  static constexpr std::string_view kLossOn = "target";

  std::string context;  // correction prompt as sent
  std::string target;   // correction raw text

  friend bool operator==(const FinetuneRecord&, const FinetuneRecord&) = default;
};

struct DatasetOptions {
  bool dedup = false;    // drop repeated (context, target) pairs
  int cap_per_item = 0;  // 0 = unlimited
};

struct DatasetBuild {
  std::vector<FinetuneRecord> records;
  std::size_t dropped_duplicates = 0;
  std::size_t dropped_by_cap = 0;
  std::size_t dropped_empty_target = 0;
  double duplication_ratio = 0.0;  // 1 - unique/total over selected pairs
};

/// One record per selected trajectory, ordered by (item id, initial index,
/// correction index). Throws StateIntegrityError if a prompt is missing.
DatasetBuild build_finetune_dataset(const FilterOutcome& outcome, const PromptLog& log,
                                    const DatasetOptions& options = {});

/// JSON Lines: {"context": ..., "target": ..., "loss_on": "target"}.
std::string serialize_dataset(std::span<const FinetuneRecord> records);
std::vector<FinetuneRecord> parse_dataset(std::string_view jsonl);

}  // namespace stasc::selection
