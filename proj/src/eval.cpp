// SPDX-License-Identifier: Apache-2.0
#include "stasc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace stasc::eval {

std::string to_string(Aggregation a) { return a == Aggregation::Mean ? "mean" : "max"; }

Aggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return Aggregation::Mean;
  if (s == "max") return Aggregation::Max;
  throw ConfigError("eval aggregation must be 'mean' or 'max', got '" + std::string(s) + "'");
}

MetricSnapshot IterationMetrics::snapshot() const {
  return MetricSnapshot{initial_acc, correction_acc, initial_std, correction_std,
                        to_string(aggregation), roles.generator, roles.corrector};
}

double aggregate(const std::vector<std::vector<double>>& per_item, Aggregation mode) {
  if (per_item.empty()) return 0.0;
  double total = 0.0;
  for (const auto& samples : per_item) {
    if (samples.empty()) continue;
    if (mode == Aggregation::Max) {
      total += *std::max_element(samples.begin(), samples.end());
    } else {
      double s = 0.0;
      for (double v : samples) s += v;
      total += s / static_cast<double>(samples.size());
    }
  }
  return total / static_cast<double>(per_item.size());
}

double sample_slot_std(const std::vector<std::vector<double>>& per_item) {
  if (per_item.empty()) return 0.0;
  std::size_t slots = per_item.front().size();
  for (const auto& row : per_item) slots = std::min(slots, row.size());
  if (slots < 2) return 0.0;
  std::vector<double> acc(slots, 0.0);
  for (const auto& row : per_item)
    for (std::size_t s = 0; s < slots; ++s) acc[s] += row[s];
  double mean = 0.0;
  for (auto& a : acc) {
    a /= static_cast<double>(per_item.size());
    mean += a;
  }
  mean /= static_cast<double>(slots);
  double var = 0.0;
  for (double a : acc) var += (a - mean) * (a - mean);
  return std::sqrt(var / static_cast<double>(slots));
}

namespace {

std::vector<std::vector<double>> flatten_corrections(const std::vector<std::vector<std::vector<double>>>& m) {
  std::vector<std::vector<double>> out;
  out.reserve(m.size());
  for (const auto& item : m) {
    std::vector<double> row;
    for (const auto& init : item) row.insert(row.end(), init.begin(), init.end());
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace

void compute_metrics(IterationMetrics& m) {
  auto corr = flatten_corrections(m.correction_rewards);
  m.initial_acc = aggregate(m.initial_rewards, m.aggregation);
  m.correction_acc = aggregate(corr, m.aggregation);
  m.initial_std = sample_slot_std(m.initial_rewards);
  m.correction_std = sample_slot_std(corr);
}

void check_disjoint(const std::vector<QAItem>& test, const std::vector<QAItem>& train) {
  std::set<std::string> train_ids;
  for (const auto& it : train) train_ids.insert(it.id);
  for (const auto& it : test) {
    if (train_ids.count(it.id)) {
      throw ValidationError("test item '" + it.id + "' also appears in the train split");
    }
  }
}

IterationMetrics evaluate_iteration(int n, const EvalRoles& roles, const std::vector<QAItem>& test,
                                    const std::vector<QAItem>& train, const SamplingSetup& setup,
                                    Aggregation aggregation) {
  check_disjoint(test, train);
  IterationPlan plan;
  plan.n = n;
  plan.generator = roles.generator;
  plan.corrector = roles.corrector;
  plan.finetune_base = roles.corrector;
  plan.items = test;
  plan.evaluation = true;

  auto initial = sample_initial_answers(plan, setup);
  auto corrections = sample_corrections(initial.records, plan, setup);

  IterationMetrics m;
  m.n = n;
  m.roles = roles;
  m.aggregation = aggregation;
  m.failed_items = initial.failed_items;
  m.failed_items.insert(m.failed_items.end(), corrections.failed_items.begin(), corrections.failed_items.end());
  std::set<std::string> failed(m.failed_items.begin(), m.failed_items.end());

  const auto n_init = static_cast<std::size_t>(setup.config.n_init);
  const auto n_corr = static_cast<std::size_t>(setup.config.n_corr);
  std::map<std::string, std::size_t> row_of;
  for (const auto& item : test) {
    if (failed.count(item.id)) continue;
    row_of[item.id] = m.item_ids.size();
    m.item_ids.push_back(item.id);
  }
  m.initial_rewards.assign(m.item_ids.size(), std::vector<double>(n_init, 0.0));
  m.correction_rewards.assign(m.item_ids.size(),
                              std::vector<std::vector<double>>(n_init, std::vector<double>(n_corr, 0.0)));
  for (const auto& r : initial.records) {
    auto it = row_of.find(r.sample.item_id);
    if (it == row_of.end()) continue;
    m.initial_rewards[it->second][static_cast<std::size_t>(r.sample.sample_index)] = r.reward.value;
  }
  for (const auto& r : corrections.records) {
    auto it = row_of.find(r.sample.item_id);
    if (it == row_of.end()) continue;
    m.correction_rewards[it->second][static_cast<std::size_t>(r.sample.initial_index)]
                        [static_cast<std::size_t>(r.sample.correction_index)] = r.reward.value;
  }
  compute_metrics(m);
  return m;
}

json to_json(const IterationMetrics& m) {
  return json{{"n", m.n},
              {"generator", m.roles.generator.value},
              {"corrector", m.roles.corrector.value},
              {"aggregation", to_string(m.aggregation)},
              {"initial_acc", m.initial_acc},
              {"correction_acc", m.correction_acc},
              {"initial_std", m.initial_std},
              {"correction_std", m.correction_std},
              {"item_ids", m.item_ids},
              {"failed_items", m.failed_items},
              {"initial_rewards", m.initial_rewards},
              {"correction_rewards", m.correction_rewards}};
}

IterationMetrics iteration_metrics_from_json(const json& j) {
  IterationMetrics m;
  m.n = j.at("n").get<int>();
  m.roles.generator = ModelId(j.at("generator").get<std::string>());
  m.roles.corrector = ModelId(j.at("corrector").get<std::string>());
  m.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
  m.initial_acc = j.at("initial_acc").get<double>();
  m.correction_acc = j.at("correction_acc").get<double>();
  m.initial_std = j.at("initial_std").get<double>();
  m.correction_std = j.at("correction_std").get<double>();
  m.item_ids = j.at("item_ids").get<std::vector<std::string>>();
  m.failed_items = j.at("failed_items").get<std::vector<std::string>>();
  m.initial_rewards = j.at("initial_rewards").get<std::vector<std::vector<double>>>();
  m.correction_rewards = j.at("correction_rewards").get<std::vector<std::vector<std::vector<double>>>>();
  return m;
}

RunSummary summarize_run(std::span<const CurvePoint> curve) {
  if (curve.empty()) throw ValidationError("cannot summarize a run with no evaluated iterations");
  RunSummary s;
  s.curve.assign(curve.begin(), curve.end());
  s.max_initial = curve.front().initial_acc;
  s.argmax_initial = curve.front().n;
  s.max_correction = curve.front().correction_acc;
  s.argmax_correction = curve.front().n;
  for (const auto& p : curve) {
    if (p.initial_acc > s.max_initial) {
      s.max_initial = p.initial_acc;
      s.argmax_initial = p.n;
    }
    if (p.correction_acc > s.max_correction) {
      s.max_correction = p.correction_acc;
      s.argmax_correction = p.n;
    }
  }
  return s;
}

RunSummary summarize_run(std::span<const IterationMetrics> metrics) {
  std::vector<CurvePoint> curve;
  for (const auto& m : metrics) {
    curve.push_back(CurvePoint{m.n, m.initial_acc, m.initial_std, m.correction_acc, m.correction_std});
  }
  return summarize_run(std::span<const CurvePoint>(curve));
}

namespace {

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

const CurvePoint& point_at(const RunSummary& s, int n) {
  for (const auto& p : s.curve)
    if (p.n == n) return p;
  return s.curve.front();
}

}  // namespace

std::string render_table(const std::string& label, const RunSummary& summary) {
  std::ostringstream out;
  out << "| Run | max{r(Ŷ¹)} | max{r(Ŷ²)} |\n";
  out << "|---|---|---|\n";
  out << "| " << label << " | " << fixed3(summary.max_initial) << " ± "
      << fixed3(point_at(summary, summary.argmax_initial).initial_std) << " | " << fixed3(summary.max_correction)
      << " ± " << fixed3(point_at(summary, summary.argmax_correction).correction_std) << " |\n";
  out << "\n";
  out << "| Iteration | r(Ŷ¹) | r(Ŷ²) |\n";
  out << "|---|---|---|\n";
  for (const auto& p : summary.curve) {
    out << "| " << p.n << " | " << fixed3(p.initial_acc) << " ± " << fixed3(p.initial_std) << " | "
        << fixed3(p.correction_acc) << " ± " << fixed3(p.correction_std) << " |\n";
  }
  out << "\n± is the standard deviation of per-sample-slot accuracies within an iteration.\n";
  return out.str();
}

std::string render_curve_csv(const RunSummary& summary) {
  std::ostringstream out;
  out << "iteration,initial_acc,initial_std,correction_acc,correction_std\n";
  for (const auto& p : summary.curve) {
    out << p.n << ',' << fixed3(p.initial_acc) << ',' << fixed3(p.initial_std) << ','
        << fixed3(p.correction_acc) << ',' << fixed3(p.correction_std) << '\n';
  }
  return out.str();
}

ReportFiles write_report(const std::filesystem::path& run_dir, const RunState& state) {
  std::vector<CurvePoint> curve;
  json iterations = json::array();
  for (const auto& r : state.iterations) {
    if (!r.metrics) continue;
    const auto& m = *r.metrics;
    curve.push_back(CurvePoint{r.n, m.initial_acc, m.initial_std, m.correction_acc, m.correction_std});
    iterations.push_back(json{{"n", r.n},
                              {"generator", m.generator.value},
                              {"corrector", m.corrector.value},
                              {"aggregation", m.aggregation},
                              {"initial_acc", m.initial_acc},
                              {"initial_std", m.initial_std},
                              {"correction_acc", m.correction_acc},
                              {"correction_std", m.correction_std}});
  }
  auto summary = summarize_run(std::span<const CurvePoint>(curve));
  const std::string label = "STaSC_" + state.config.code() + " (N_init=" + std::to_string(state.config.n_init) +
                            ", N_corr=" + std::to_string(state.config.n_corr) + ")";

  ReportFiles files{run_dir / "report.md", run_dir / "metrics.json", run_dir / "curve.csv"};
  write_file_atomic(files.table, render_table(label, summary));
  write_file_atomic(files.curve, render_curve_csv(summary));
  json metrics{{"variant", state.config.code()},
               {"n_init", state.config.n_init},
               {"n_corr", state.config.n_corr},
               {"max_initial_acc", summary.max_initial},
               {"max_initial_iteration", summary.argmax_initial},
               {"max_correction_acc", summary.max_correction},
               {"max_correction_iteration", summary.argmax_correction},
               {"iterations", iterations}};
  write_file_atomic(files.metrics, metrics.dump(2) + "\n");
  return files;
}

}  // namespace stasc::eval
