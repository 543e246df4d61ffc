// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "stasc/hashing.hpp"
#include "stasc/loop.hpp"
#include "support.hpp"

using namespace stasc;
using namespace stasc::testing;
namespace fs = std::filesystem;

namespace {

Scenario small(const std::string& code, int iterations = 2) {
  Scenario s;
  s.config = make_config(code, iterations, 2, 2);
  s.script = skill_script(0.4, 0.8, 0.9);
  s.train = make_items("tr", 4);
  s.test = make_items("te", 2);
  return s;
}

struct Crash : std::runtime_error {
  Crash() : std::runtime_error("crash") {}
};

}  // namespace

TEST_CASE("a run writes the documented layout") {
  TempDir dir;
  auto state = run_scenario(dir.path(), small("EIF"));
  CHECK(state.status == RunStatus::Done);
  REQUIRE(state.iterations.size() == 2);
  for (const char* name : {"state.json", "events.jsonl", "report.md", "metrics.json", "curve.csv"})
    CHECK(fs::exists(dir / name));
  for (const char* name : {"initial.jsonl", "initial_prompts.jsonl", "corrections.jsonl", "correction_prompts.jsonl",
                           "trajectories.jsonl", "filter.json", "finetune.jsonl", "eval.json"}) {
    CHECK(fs::exists(dir / ("iter_001/" + std::string(name))));
    CHECK(fs::exists(dir / ("iter_002/" + std::string(name))));
  }
  CHECK(load_state(dir / "state.json") == state);
  for (const auto& r : state.iterations) {
    CHECK(r.step == StepMark::Evaluated);
    CHECK(r.trajectories == 4u * 2 * 2);
    CHECK(r.metrics.has_value());
  }
}

TEST_CASE("model lineage follows the variant axes") {
  TempDir fixed_dir, evolving_dir;
  auto fixed = run_scenario(fixed_dir.path(), small("FIF", 3));
  auto evolving = run_scenario(evolving_dir.path(), small("EIE", 3));
  REQUIRE(fixed.iterations.size() == 3);
  for (const auto& r : fixed.iterations) {
    CHECK(r.generator.value == "M0");
    CHECK(r.finetune_base.value == "M0");
    CHECK(r.produced->value == "M0+ft" + std::to_string(r.n));
  }
  CHECK(fixed.iterations[1].corrector.value == "M0+ft1");
  CHECK(evolving.iterations[2].generator.value == "M0+ft1+ft2");
  CHECK(evolving.iterations[2].finetune_base.value == "M0+ft1+ft2");
  CHECK(evolving.iterations[2].produced->value == "M0+ft1+ft2+ft3");
}

TEST_CASE("fine-tune records are correction-only and use the logged prompts") {
  TempDir dir;
  auto state = run_scenario(dir.path(), small("EIF", 1));
  auto iter = dir / "iter_001";
  auto log = loop::load_prompt_log(iter);
  auto records = selection::parse_dataset(read_file(iter / "finetune.jsonl"));
  CHECK(records.size() == state.iterations[0].dataset_records);
  std::set<std::string> logged;
  for (const auto& row : loop::read_jsonl(iter / "correction_prompts.jsonl")) logged.insert(row.at("text"));
  for (const auto& r : records) {
    CHECK(logged.count(r.context));
    CHECK_FALSE(r.target.empty());
  }
  for (const auto& row : loop::read_jsonl(iter / "finetune.jsonl")) {
    CHECK(row.size() == 3);
    CHECK(row.at("loss_on") == "target");
  }
}

TEST_CASE("trajectories rebuilt from disk match the filter verdicts") {
  TempDir dir;
  auto s = small("EIF", 1);
  auto state = run_scenario(dir.path(), s);
  auto ts = loop::load_trajectories(dir / "iter_001", s.train);
  CHECK(ts.size() == state.iterations[0].trajectories);
  auto outcome = selection::filter_improving(ts);
  CHECK(outcome.selected.size() == state.iterations[0].selected);
  std::size_t flagged = 0;
  for (const auto& row : loop::read_jsonl(dir / "iter_001/trajectories.jsonl"))
    if (row.at("selected").get<bool>()) ++flagged;
  CHECK(flagged == outcome.selected.size());
}

TEST_CASE("tampered prompt logs are detected") {
  TempDir dir;
  run_scenario(dir.path(), small("EIF", 1));
  auto path = dir / "iter_001/correction_prompts.jsonl";
  auto text = read_file(path);
  auto at = text.find("Question");
  REQUIRE(at != std::string::npos);
  text[at] = 'q';
  write_file_atomic(path, text);
  CHECK_THROWS_AS(loop::load_prompt_log(dir / "iter_001"), StateIntegrityError);
}

TEST_CASE("refuses to overwrite an existing run") {
  TempDir dir;
  auto s = small("EIF", 1);
  run_scenario(dir.path(), s);
  CHECK_THROWS_AS(run_scenario(dir.path(), s), ConfigError);
}

TEST_CASE("preflight rejects overlapping splits before writing") {
  TempDir dir;
  auto s = small("EIF", 1);
  s.test = s.train;
  CHECK_THROWS_AS(run_scenario(dir.path(), s), ValidationError);
  CHECK_FALSE(fs::exists(dir / "state.json"));
}

TEST_CASE("empty dataset under skip keeps the base model") {
  TempDir dir;
  auto s = small("EIE", 2);
  s.script = skill_script(0.0, 0.0, 1.0);
  auto state = run_scenario(dir.path(), s);
  CHECK(state.status == RunStatus::Done);
  for (const auto& r : state.iterations) {
    CHECK(r.selected == 0);
    CHECK_FALSE(r.trained);
    CHECK(r.produced->value == "M0");
    CHECK_FALSE(r.warnings.empty());
  }
}

TEST_CASE("empty dataset under halt leaves a resumable state") {
  TempDir dir;
  auto s = small("EIF", 2);
  s.script = skill_script(0.0, 0.0, 1.0);
  s.options.empty_filter_policy = EmptyFilterPolicy::Halt;
  CHECK_THROWS_AS(run_scenario(dir.path(), s), RunHalted);
  auto halted = load_state(dir / "state.json");
  CHECK(halted.status == RunStatus::Failed);
  CHECK(halted.iterations.back().step == StepMark::Filtered);

  auto script = s.script;
  script.add_answer_key(s.train);
  script.add_answer_key(s.test);
  MockStack stack(script);
  loop::LoopOptions opts;
  opts.empty_filter_policy = EmptyFilterPolicy::Skip;
  loop::Driver driver(dir.path(), stack.setup(s.config, s.seed), stack.trainer, opts);
  auto done = driver.resume(s.train, s.test);
  CHECK(done.status == RunStatus::Done);
  CHECK(done.empty_filter_policy == EmptyFilterPolicy::Skip);
  CHECK(done.iterations.size() == 2);
}

TEST_CASE("training failure marks the run failed") {
  TempDir dir;
  auto s = small("EIF", 2);
  s.script.failing_train_calls = {2};
  CHECK_THROWS_AS(run_scenario(dir.path(), s), TrainingError);
  auto st = load_state(dir / "state.json");
  CHECK(st.status == RunStatus::Failed);
  CHECK_FALSE(st.failure_reason.empty());
  CHECK(st.iterations.size() == 2);
  CHECK(st.iterations[0].step == StepMark::Evaluated);
}

TEST_CASE("crash at any step boundary resumes to the same artifacts") {
  auto s = small("EIE", 2);
  TempDir reference;
  run_scenario(reference.path(), s);
  auto want = read_tree(reference.path());

  int boundaries = 0;
  for (int crash_at = 1;; ++crash_at) {
    TempDir dir;
    int seen = 0;
    auto crashing = s;
    crashing.options.on_step_persisted = [&](int, StepMark) {
      if (++seen == crash_at) throw Crash();
    };
    try {
      run_scenario(dir.path(), crashing);
      boundaries = crash_at - 1;
      break;
    } catch (const Crash&) {
    }
    auto script = s.script;
    script.add_answer_key(s.train);
    script.add_answer_key(s.test);
    MockStack stack(script);
    loop::Driver driver(dir.path(), stack.setup(s.config, s.seed), stack.trainer, s.options);
    auto done = driver.resume(s.train, s.test);
    CHECK(done.status == RunStatus::Done);
    CAPTURE(crash_at);
    CHECK(read_tree(dir.path()) == want);
  }
  CHECK(boundaries == 12);
}

TEST_CASE("resume of a finished run is a no-op") {
  TempDir dir;
  auto s = small("EIF", 1);
  auto state = run_scenario(dir.path(), s);
  MockStack stack(s.script);
  loop::Driver driver(dir.path(), stack.setup(s.config, s.seed), stack.trainer);
  CHECK(driver.resume(s.train, s.test) == state);
  CHECK(stack.audit.generate_calls().empty());
}

TEST_CASE("evaluation can be disabled") {
  TempDir dir;
  auto s = small("EIF", 1);
  s.options.evaluate = false;
  auto state = run_scenario(dir.path(), s);
  CHECK(state.iterations[0].step == StepMark::Trained);
  CHECK_FALSE(state.iterations[0].metrics.has_value());
  CHECK_FALSE(fs::exists(dir / "report.md"));
}

TEST_CASE("jsonl helpers") {
  TempDir dir;
  std::vector<json> rows{json{{"a", 1}}, json{{"b", "x"}}};
  write_file_atomic(dir / "f.jsonl", loop::to_jsonl(rows));
  CHECK(loop::read_jsonl(dir / "f.jsonl") == rows);
  write_file_atomic(dir / "bad.jsonl", "{\"a\":1}\nnot json\n");
  CHECK_THROWS_AS(loop::read_jsonl(dir / "bad.jsonl"), StateIntegrityError);
  CHECK_THROWS_AS(loop::read_jsonl(dir / "missing.jsonl"), StateIntegrityError);
}
