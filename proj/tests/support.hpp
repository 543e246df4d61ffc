// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "stasc/backends.hpp"
#include "stasc/core.hpp"
#include "stasc/loop.hpp"
#include "stasc/sampling.hpp"

namespace stasc::testing {

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

/// Items "<prefix>1".."<prefix>count" with distinct single-word answers.
std::vector<QAItem> make_items(const std::string& prefix, int count);

VariantConfig make_config(const std::string& code, int iterations, int n_init, int n_corr);

/// One skill for M0, no trained-model drift.
backends::MockScript skill_script(double initial_accuracy, double fix_rate, double keep_rate,
                                  std::uint64_t seed = 11);

/// Mock backend plus gateways, wired as the CLI would wire them.
struct MockStack {
  explicit MockStack(backends::MockScript script, std::size_t max_parallel = 4,
                     backends::RetryPolicy retry = fast_retry());
  static backends::RetryPolicy fast_retry();

  backends::MockBackend mock;
  backends::AuditLog audit;
  backends::GenerationGateway gateway;
  backends::TrainerGateway trainer;

  SamplingSetup setup(const VariantConfig& config, std::uint64_t seed = 5);
};

struct Scenario {
  VariantConfig config;
  backends::MockScript script;
  std::vector<QAItem> train;
  std::vector<QAItem> test;
  std::uint64_t seed = 5;
  loop::LoopOptions options;
};

/// Runs the scenario to completion in dir with a fresh mock stack.
RunState run_scenario(const std::filesystem::path& dir, const Scenario& s, MockStack* stack_out = nullptr);

/// The fixed golden scenario: STaSC_EIF, N=2, N_init=2, N_corr=2, three items.
Scenario golden_scenario();

/// Every regular file under root, keyed by relative path, minus excluded names.
std::map<std::string, std::string> read_tree(const std::filesystem::path& root,
                                             const std::set<std::string>& excluded = {"events.jsonl",
                                                                                      "audit.jsonl"});

std::string golden_path(const std::string& name);

/// Compares against tests/golden/<name>; rewrites it when STASC_UPDATE_GOLDENS=1.
bool matches_golden(const std::string& name, const std::string& actual);

}  // namespace stasc::testing
