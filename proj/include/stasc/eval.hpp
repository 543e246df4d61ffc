// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stasc/core.hpp"
#include "stasc/sampling.hpp"

namespace stasc::eval {

/// Within-item aggregation over samples, before the mean over items.
enum class Aggregation { Mean, Max };

std::string to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view s);

struct EvalRoles {
  ModelId generator;
  ModelId corrector;
};

struct IterationMetrics {
  int n = 0;
  EvalRoles roles;
  Aggregation aggregation = Aggregation::Mean;
  std::vector<std::string> item_ids;
  std::vector<std::vector<double>> initial_rewards;                  // [item][j]
  std::vector<std::vector<std::vector<double>>> correction_rewards;  // [item][j][k]
  std::vector<std::string> failed_items;
  double initial_acc = 0.0;
  double correction_acc = 0.0;
  double initial_std = 0.0;
  double correction_std = 0.0;

  MetricSnapshot snapshot() const;
};

/// Mean over items of the per-item mean (or max) over samples.
double aggregate(const std::vector<std::vector<double>>& per_item, Aggregation mode);

/// Population standard deviation of per-sample-slot accuracies: slot s is the
/// mean over items of sample s's reward.
double sample_slot_std(const std::vector<std::vector<double>>& per_item);

/// Fills the accuracy fields from the reward matrices.
void compute_metrics(IterationMetrics& m);

/// Samples initial answers and corrections on the test split with the given
/// roles and scores them. Rewards never reach the models. Throws
/// ValidationError when a test id also occurs in the train split.
IterationMetrics evaluate_iteration(int n, const EvalRoles& roles, const std::vector<QAItem>& test,
                                    const std::vector<QAItem>& train, const SamplingSetup& setup,
                                    Aggregation aggregation = Aggregation::Mean);

void check_disjoint(const std::vector<QAItem>& test, const std::vector<QAItem>& train);

json to_json(const IterationMetrics& m);
IterationMetrics iteration_metrics_from_json(const json& j);

struct CurvePoint {
  int n = 0;
  double initial_acc = 0.0;
  double initial_std = 0.0;
  double correction_acc = 0.0;
  double correction_std = 0.0;
};

struct RunSummary {
  double max_initial = 0.0;
  int argmax_initial = 0;
  double max_correction = 0.0;
  int argmax_correction = 0;
  std::vector<CurvePoint> curve;
};

/// Maxima over iterations. Throws ValidationError on an empty curve.
RunSummary summarize_run(std::span<const CurvePoint> curve);
RunSummary summarize_run(std::span<const IterationMetrics> metrics);

/// Row label plus the maximum columns, e.g.
///   | Run | max{r(Ŷ¹)} | max{r(Ŷ²)} |
std::string render_table(const std::string& label, const RunSummary& summary);
/// iteration,initial_acc,initial_std,correction_acc,correction_std
std::string render_curve_csv(const RunSummary& summary);

struct ReportFiles {
  std::filesystem::path table;    // report.md
  std::filesystem::path metrics;  // metrics.json
  std::filesystem::path curve;    // curve.csv
};

/// Writes the report for a run's evaluated iterations. Throws
/// ValidationError when no iteration has metrics.
ReportFiles write_report(const std::filesystem::path& run_dir, const RunState& state);

}  // namespace stasc::eval
