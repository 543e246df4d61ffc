// SPDX-License-Identifier: Apache-2.0
#include "stasc/selection.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace stasc::selection {

FilterOutcome filter_improving(std::span<const Trajectory> trajs) {
  FilterOutcome out;
  for (const auto& t : trajs) {
    auto& counts = out.per_item[t.item.id];
    if (is_improving(t)) {
      out.improving.push_back(t);
      out.selected.push_back(t);
      ++counts.improving;
      ++counts.selected;
    }
  }
  return out;
}

FilterOutcome filter_non_decreasing(std::span<const Trajectory> trajs, double threshold) {
  FilterOutcome out;
  for (const auto& t : trajs) {
    auto& counts = out.per_item[t.item.id];
    if (is_improving(t)) {
      out.improving.push_back(t);
      ++counts.improving;
    } else if (is_equal_kept(t, threshold)) {
      out.equal_kept.push_back(t);
      ++counts.equal_kept;
    } else {
      continue;
    }
    out.selected.push_back(t);
    ++counts.selected;
  }
  return out;
}

FilterOutcome apply_filter(std::span<const Trajectory> trajs, FilterMode mode, double threshold) {
  return mode == FilterMode::Improving ? filter_improving(trajs) : filter_non_decreasing(trajs, threshold);
}

TrajectoryKey key_of(const Trajectory& t) {
  return {t.item.id, t.correction.initial_index, t.correction.correction_index};
}

std::string to_string(const TrajectoryKey& k) {
  return k.item_id + "#" + std::to_string(k.initial_index) + "." + std::to_string(k.correction_index);
}

void PromptLog::add(TrajectoryKey key, std::string prompt) { prompts_[std::move(key)] = std::move(prompt); }

const std::string* PromptLog::find(const TrajectoryKey& key) const {
  auto it = prompts_.find(key);
  return it == prompts_.end() ? nullptr : &it->second;
}

DatasetBuild build_finetune_dataset(const FilterOutcome& outcome, const PromptLog& log,
                                    const DatasetOptions& options) {
  std::vector<const Trajectory*> order;
  order.reserve(outcome.selected.size());
  for (const auto& t : outcome.selected) order.push_back(&t);
  std::stable_sort(order.begin(), order.end(),
                   [](const Trajectory* a, const Trajectory* b) { return key_of(*a) < key_of(*b); });

  DatasetBuild build;
  std::set<std::pair<std::string, std::string>> seen;
  std::map<std::string, int> per_item;
  std::size_t unique = 0;
  for (const Trajectory* t : order) {
    auto key = key_of(*t);
    const std::string* prompt = log.find(key);
    if (!prompt) {
      throw StateIntegrityError("no logged correction prompt for trajectory " + to_string(key));
    }
    if (t->correction.raw_text.empty()) {
      ++build.dropped_empty_target;
      continue;
    }
    bool fresh = seen.emplace(*prompt, t->correction.raw_text).second;
    if (fresh) ++unique;
    if (options.dedup && !fresh) {
      ++build.dropped_duplicates;
      continue;
    }
    if (options.cap_per_item > 0 && per_item[key.item_id] >= options.cap_per_item) {
      ++build.dropped_by_cap;
      continue;
    }
    ++per_item[key.item_id];
    build.records.push_back(FinetuneRecord{*prompt, t->correction.raw_text});
  }
  std::size_t total = order.size() - build.dropped_empty_target;
  build.duplication_ratio = total == 0 ? 0.0 : 1.0 - static_cast<double>(unique) / static_cast<double>(total);
  return build;
}

std::string serialize_dataset(std::span<const FinetuneRecord> records) {
  std::string out;
  for (const auto& r : records) {
    json j{{"context", r.context}, {"target", r.target}, {"loss_on", FinetuneRecord::kLossOn}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<FinetuneRecord> parse_dataset(std::string_view jsonl) {
  std::vector<FinetuneRecord> out;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      FinetuneRecord r{j.at("context").get<std::string>(), j.at("target").get<std::string>()};
      if (j.value("loss_on", std::string(FinetuneRecord::kLossOn)) != FinetuneRecord::kLossOn) {
        throw StateIntegrityError("line " + std::to_string(lineno) + ": loss_on must be 'target'");
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw StateIntegrityError("fine-tune dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace stasc::selection
