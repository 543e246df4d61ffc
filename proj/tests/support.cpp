// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace stasc::testing {

namespace fs = std::filesystem;

TempDir::TempDir() {
  std::string tmpl = (fs::temp_directory_path() / "stasc-test-XXXXXX").string();
  if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
  path_ = tmpl;
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

std::vector<QAItem> make_items(const std::string& prefix, int count) {
  static const char* kAnswers[] = {"Paris",   "Jupiter", "Mozart",  "Nile",    "Everest", "Einstein",
                                   "Sahara",  "Tokyo",   "Picasso", "Amazon",  "Mercury", "Darwin"};
  std::vector<QAItem> items;
  for (int i = 1; i <= count; ++i) {
    QAItem it;
    it.id = prefix + std::to_string(i);
    it.question = "Question number " + std::to_string(i) + " from " + prefix + "?";
    it.references = {std::string(kAnswers[(i - 1) % 12]) + (i > 12 ? std::to_string(i) : "")};
    items.push_back(std::move(it));
  }
  return items;
}

VariantConfig make_config(const std::string& code, int iterations, int n_init, int n_corr) {
  VariantConfig c;
  c.axes = parse_variant_code(code);
  c.iterations = iterations;
  c.n_init = n_init;
  c.n_corr = n_corr;
  return c;
}

backends::MockScript skill_script(double initial_accuracy, double fix_rate, double keep_rate, std::uint64_t seed) {
  backends::MockScript s;
  s.skills["M0"] = backends::MockSkill{initial_accuracy, fix_rate, keep_rate};
  s.seed = seed;
  return s;
}

backends::RetryPolicy MockStack::fast_retry() {
  backends::RetryPolicy p;
  p.initial_backoff = std::chrono::milliseconds(1);
  p.max_backoff = std::chrono::milliseconds(4);
  return p;
}

MockStack::MockStack(backends::MockScript script, std::size_t max_parallel, backends::RetryPolicy retry)
    : mock(std::move(script)), gateway(mock, retry, max_parallel, &audit), trainer(mock, &audit) {}

SamplingSetup MockStack::setup(const VariantConfig& config, std::uint64_t seed) {
  SamplingSetup s{gateway};
  s.config = config;
  s.run_seed = seed;
  return s;
}

RunState run_scenario(const fs::path& dir, const Scenario& s, MockStack* stack_out) {
  auto script = s.script;
  script.add_answer_key(s.train);
  script.add_answer_key(s.test);
  std::unique_ptr<MockStack> owned;
  MockStack* stack = stack_out;
  if (!stack) {
    owned = std::make_unique<MockStack>(script);
    stack = owned.get();
  }
  loop::Driver driver(dir, stack->setup(s.config, s.seed), stack->trainer, s.options);
  return driver.run(loop::RunSpec{"scenario", s.config, ModelId("M0"), s.seed, s.train, s.test});
}

Scenario golden_scenario() {
  Scenario s;
  s.config = make_config("EIF", 2, 2, 2);
  s.script = skill_script(0.4, 0.7, 0.9, 3);
  s.script.train_delta = backends::MockSkill{0.1, 0.1, 0.0};
  s.train = make_items("g", 3);
  s.test = make_items("gt", 2);
  s.seed = 17;
  return s;
}

std::map<std::string, std::string> read_tree(const fs::path& root, const std::set<std::string>& excluded) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    if (excluded.count(entry.path().filename().string())) continue;
    out[fs::relative(entry.path(), root).string()] = read_file(entry.path());
  }
  return out;
}

std::string golden_path(const std::string& name) { return std::string(STASC_GOLDEN_DIR) + "/" + name; }

bool matches_golden(const std::string& name, const std::string& actual) {
  const char* update = std::getenv("STASC_UPDATE_GOLDENS");
  if (update && std::string(update) == "1") {
    write_file_atomic(golden_path(name), actual);
    return true;
  }
  if (!fs::exists(golden_path(name))) return false;
  return read_file(golden_path(name)) == actual;
}

}  // namespace stasc::testing
