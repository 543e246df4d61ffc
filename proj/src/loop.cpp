// SPDX-License-Identifier: Apache-2.0
#include "stasc/loop.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "stasc/hashing.hpp"

namespace stasc::loop {

namespace fs = std::filesystem;

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw StateIntegrityError("missing log file " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error&) {
      throw StateIntegrityError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON");
    }
  }
  return rows;
}

std::string to_jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

namespace {

std::map<std::string, const QAItem*> index_items(const std::vector<QAItem>& items) {
  std::map<std::string, const QAItem*> out;
  for (const auto& it : items) out[it.id] = &it;
  return out;
}

std::map<std::string, std::string> load_prompts(const fs::path& path) {
  std::map<std::string, std::string> prompts;
  for (const auto& row : read_jsonl(path)) {
    auto sha = row.at("sha256").get<std::string>();
    auto text = row.at("text").get<std::string>();
    if (sha256_hex(text) != sha) {
      throw StateIntegrityError(path.string() + ": prompt text does not match hash " + sha);
    }
    prompts.emplace(std::move(sha), std::move(text));
  }
  return prompts;
}

std::string prompts_jsonl(const std::vector<std::pair<std::string, std::string>>& ordered) {
  std::vector<json> rows;
  std::set<std::string> seen;
  for (const auto& [sha, text] : ordered) {
    if (seen.insert(sha).second) rows.push_back(json{{"sha256", sha}, {"text", text}});
  }
  return to_jsonl(rows);
}

std::string step_name(StepMark s) {
  switch (s) {
    case StepMark::Planned: return "planned";
    case StepMark::InitialSampled: return "initial_sampled";
    case StepMark::CorrectionsSampled: return "corrections_sampled";
    case StepMark::Filtered: return "filtered";
    case StepMark::Trained: return "trained";
    case StepMark::Evaluated: return "evaluated";
  }
  return "planned";
}

}  // namespace

std::vector<Trajectory> load_trajectories(const fs::path& iter_dir, const std::vector<QAItem>& items) {
  auto by_id = index_items(items);
  std::map<std::pair<std::string, int>, InitialRecord> initials;
  for (const auto& row : read_jsonl(iter_dir / "initial.jsonl")) {
    auto r = initial_record_from_json(row);
    initials.emplace(std::make_pair(r.sample.item_id, r.sample.sample_index), std::move(r));
  }
  std::vector<Trajectory> out;
  for (const auto& row : read_jsonl(iter_dir / "corrections.jsonl")) {
    auto c = correction_record_from_json(row);
    auto init = initials.find({c.sample.item_id, c.sample.initial_index});
    if (init == initials.end()) {
      throw StateIntegrityError("correction " + c.sample.item_id + "#" + std::to_string(c.sample.initial_index) +
                                "." + std::to_string(c.sample.correction_index) + " has no initial answer");
    }
    auto item = by_id.find(c.sample.item_id);
    if (item == by_id.end()) throw StateIntegrityError("log refers to unknown item '" + c.sample.item_id + "'");
    out.push_back(Trajectory{*item->second, init->second.sample, c.sample, init->second.reward, c.reward});
  }
  return out;
}

selection::PromptLog load_prompt_log(const fs::path& iter_dir) {
  auto prompts = load_prompts(iter_dir / "correction_prompts.jsonl");
  selection::PromptLog log;
  for (const auto& row : read_jsonl(iter_dir / "corrections.jsonl")) {
    auto c = correction_record_from_json(row);
    auto it = prompts.find(c.prompt_sha);
    if (it == prompts.end()) continue;  // build_finetune_dataset reports the gap
    log.add({c.sample.item_id, c.sample.initial_index, c.sample.correction_index}, it->second);
  }
  return log;
}

Driver::Driver(fs::path run_dir, SamplingSetup setup, backends::TrainerGateway& trainer, LoopOptions options)
    : run_dir_(std::move(run_dir)), setup_(std::move(setup)), trainer_(trainer), options_(std::move(options)) {}

fs::path Driver::iteration_dir(int n) const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%03d", n);
  return run_dir_ / buf;
}

SamplingSetup Driver::setup_for(const RunState& state) const {
  SamplingSetup s = setup_;
  s.config = state.config;
  s.run_seed = state.seed;
  return s;
}

void Driver::event(const json& e) const {
  std::ofstream out(run_dir_ / "events.jsonl", std::ios::app);
  json row = e;
  row["unix_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  out << row.dump() << '\n';
}

void Driver::persist(RunState& state, int n, std::optional<StepMark> reached) {
  if (reached) {
    if (auto* rec = state.find_iteration(n)) rec->step = *reached;
  }
  save_state(state_path(), state);
  if (reached) {
    event(json{{"event", "step"}, {"n", n}, {"step", step_name(*reached)}});
    if (options_.on_step_persisted) options_.on_step_persisted(n, *reached);
  }
}

RunState Driver::run(const RunSpec& spec) {
  if (fs::exists(state_path())) {
    throw ConfigError("run directory " + run_dir_.string() + " already holds a run; use resume");
  }
  spec.config.validate();
  if (spec.base_model.empty()) throw ConfigError("base_model must be nonempty");
  if (spec.train.empty()) throw ConfigError("train split is empty");
  if (!spec.test.empty()) eval::check_disjoint(spec.test, spec.train);
  setup_.gateway.ping();
  trainer_.ping();

  train_ = spec.train;
  test_ = spec.test;
  RunState state;
  state.run_id = spec.run_id;
  state.config = spec.config;
  state.base_model = spec.base_model;
  state.seed = spec.seed;
  state.empty_filter_policy = options_.empty_filter_policy.value_or(EmptyFilterPolicy::Skip);
  state.status = RunStatus::Pending;
  fs::create_directories(run_dir_);
  persist(state, 0, std::nullopt);
  event(json{{"event", "run_started"}, {"run_id", spec.run_id}, {"variant", spec.config.code()}});
  return drive(std::move(state));
}

RunState Driver::resume(const std::vector<QAItem>& train, const std::vector<QAItem>& test) {
  RunState state = load_state(state_path());
  if (state.status == RunStatus::Done) return state;
  if (!test.empty()) eval::check_disjoint(test, train);
  setup_.gateway.ping();
  trainer_.ping();

  train_ = train;
  test_ = test;
  std::vector<std::pair<ModelId, ModelId>> lineage;
  for (const auto& r : state.iterations) {
    if (r.trained && r.produced) lineage.emplace_back(*r.produced, r.finetune_base);
  }
  trainer_.adopt_lineage(lineage);
  if (options_.empty_filter_policy) state.empty_filter_policy = *options_.empty_filter_policy;
  state.failure_reason.clear();
  event(json{{"event", "run_resumed"}, {"run_id", state.run_id}});
  return drive(std::move(state));
}

RunState Driver::drive(RunState state) {
  for (int n = 1; n <= state.config.iterations; ++n) state = run_iteration(std::move(state), n);
  state.status = RunStatus::Done;
  persist(state, 0, std::nullopt);
  bool any_metrics = false;
  for (const auto& r : state.iterations) any_metrics = any_metrics || r.metrics.has_value();
  if (any_metrics) eval::write_report(run_dir_, state);
  event(json{{"event", "run_done"}, {"run_id", state.run_id}});
  return state;
}

RunState Driver::run_iteration(RunState state, int n) {
  if (n < 1 || n > state.config.iterations) {
    throw StateIntegrityError("iteration " + std::to_string(n) + " is outside 1.." +
                              std::to_string(state.config.iterations));
  }
  if (!state.find_iteration(n)) {
    if (static_cast<int>(state.iterations.size()) != n - 1) {
      throw StateIntegrityError("iteration " + std::to_string(n) + " requested before iteration " +
                                std::to_string(state.iterations.size() + 1));
    }
    auto models = resolve_models(state, n);
    IterationRecord rec;
    rec.n = n;
    rec.generator = models.generator;
    rec.corrector = models.corrector;
    rec.finetune_base = models.finetune_base;
    state.iterations.push_back(rec);
    state.status = RunStatus::SamplingInitial;
    persist(state, n, StepMark::Planned);
  }

  const fs::path dir = iteration_dir(n);
  const SamplingSetup setup = setup_for(state);
  auto record = [&state, n]() -> IterationRecord& { return *state.find_iteration(n); };
  {
    auto expected = resolve_models(state, n);
    const auto& rec = record();
    if (expected.generator != rec.generator || expected.corrector != rec.corrector ||
        expected.finetune_base != rec.finetune_base) {
      throw StateIntegrityError("iteration " + std::to_string(n) + " model roles disagree with the variant");
    }
  }
  IterationPlan plan{n, record().generator, record().corrector, record().finetune_base, train_, false};
  const bool evaluate = options_.evaluate && !test_.empty();
  const StepMark final_step = evaluate ? StepMark::Evaluated : StepMark::Trained;
  if (record().step >= final_step) return state;

  // Step 1: sample initial answers.
  if (record().step < StepMark::InitialSampled) {
    state.status = RunStatus::SamplingInitial;
    auto step = sample_initial_answers(plan, setup);
    std::vector<json> rows;
    std::vector<std::pair<std::string, std::string>> prompts;
    for (const auto& r : step.records) rows.push_back(to_json(r));
    for (const auto& [sha, text] : step.prompts) prompts.emplace_back(sha, text);
    fs::create_directories(dir);
    write_file_atomic(dir / "initial_prompts.jsonl", prompts_jsonl(prompts));
    write_file_atomic(dir / "initial.jsonl", to_jsonl(rows));
    auto& rec = record();
    rec.items_failed = static_cast<int>(step.failed_items.size());
    rec.items_succeeded = static_cast<int>(plan.items.size() - step.failed_items.size());
    rec.warnings.clear();
    for (const auto& id : step.failed_items) rec.warnings.push_back("initial sampling failed for item '" + id + "'");
    state.status = RunStatus::SamplingCorrections;
    persist(state, n, StepMark::InitialSampled);
  }

  // Step 2: sample corrections with M_{n-1}.
  if (record().step < StepMark::CorrectionsSampled) {
    state.status = RunStatus::SamplingCorrections;
    std::vector<InitialRecord> initials;
    for (const auto& row : read_jsonl(dir / "initial.jsonl")) initials.push_back(initial_record_from_json(row));
    auto step = sample_corrections(initials, plan, setup);
    std::vector<json> rows;
    std::vector<std::pair<std::string, std::string>> prompts;
    for (const auto& r : step.records) {
      rows.push_back(to_json(r));
      prompts.emplace_back(r.prompt_sha, r.prompt);
    }
    write_file_atomic(dir / "correction_prompts.jsonl", prompts_jsonl(prompts));
    write_file_atomic(dir / "corrections.jsonl", to_jsonl(rows));
    auto& rec = record();
    rec.items_failed += static_cast<int>(step.failed_items.size());
    rec.items_succeeded -= static_cast<int>(step.failed_items.size());
    for (const auto& id : step.failed_items) rec.warnings.push_back("correction sampling failed for item '" + id + "'");
    state.status = RunStatus::Filtering;
    persist(state, n, StepMark::CorrectionsSampled);
  }

  // Step 3: filter and build the correction-only dataset.
  if (record().step < StepMark::Filtered) {
    state.status = RunStatus::Filtering;
    auto trajectories = load_trajectories(dir, plan.items);
    auto outcome = selection::apply_filter(trajectories, state.config.axes.filter, state.config.threshold);
    auto log = load_prompt_log(dir);
    auto build = selection::build_finetune_dataset(outcome, log, options_.dataset);

    std::set<selection::TrajectoryKey> improving, equal;
    for (const auto& t : outcome.improving) improving.insert(selection::key_of(t));
    for (const auto& t : outcome.equal_kept) equal.insert(selection::key_of(t));
    auto initial_prompt_sha = [&]() {
      std::map<std::pair<std::string, int>, std::string> m;
      for (const auto& row : read_jsonl(dir / "initial.jsonl")) {
        m[{row.at("item_id").get<std::string>(), row.at("sample_index").get<int>()}] =
            row.at("prompt_sha256").get<std::string>();
      }
      return m;
    }();
    std::map<selection::TrajectoryKey, std::string> correction_prompt_sha;
    for (const auto& row : read_jsonl(dir / "corrections.jsonl")) {
      correction_prompt_sha[{row.at("item_id").get<std::string>(), row.at("initial_index").get<int>(),
                             row.at("correction_index").get<int>()}] = row.at("prompt_sha256").get<std::string>();
    }

    std::vector<json> rows;
    for (const auto& t : trajectories) {
      auto key = selection::key_of(t);
      const char* subset = improving.count(key) ? "improving" : equal.count(key) ? "equal" : nullptr;
      auto opt = [](const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); };
      rows.push_back(json{{"item_id", t.item.id},
                          {"initial_index", t.correction.initial_index},
                          {"correction_index", t.correction.correction_index},
                          {"generator", t.initial.producer_model.value},
                          {"corrector", t.correction.producer_model.value},
                          {"initial_prompt_sha256", initial_prompt_sha[{t.item.id, t.initial.sample_index}]},
                          {"correction_prompt_sha256", correction_prompt_sha[key]},
                          {"initial_raw", t.initial.raw_text},
                          {"initial_parsed", opt(t.initial.parsed_answer)},
                          {"correction_raw", t.correction.raw_text},
                          {"correction_parsed", opt(t.correction.parsed_answer)},
                          {"reward_initial", t.reward_initial.value},
                          {"reward_correction", t.reward_correction.value},
                          {"selected", subset != nullptr},
                          {"subset", subset ? json(subset) : json(nullptr)}});
    }
    json per_item = json::object();
    for (const auto& [id, c] : outcome.per_item) {
      per_item[id] = json{{"improving", c.improving}, {"equal_kept", c.equal_kept}, {"selected", c.selected}};
    }
    json filter{{"filter", to_string(state.config.axes.filter)},
                {"threshold", state.config.threshold},
                {"trajectories", trajectories.size()},
                {"improving", outcome.improving.size()},
                {"equal_kept", outcome.equal_kept.size()},
                {"selected", outcome.selected.size()},
                {"dataset_records", build.records.size()},
                {"dropped_duplicates", build.dropped_duplicates},
                {"dropped_by_cap", build.dropped_by_cap},
                {"dropped_empty_target", build.dropped_empty_target},
                {"duplication_ratio", build.duplication_ratio},
                {"per_item", per_item}};
    write_file_atomic(dir / "trajectories.jsonl", to_jsonl(rows));
    write_file_atomic(dir / "filter.json", filter.dump(2) + "\n");
    write_file_atomic(dir / "finetune.jsonl", selection::serialize_dataset(build.records));

    auto& rec = record();
    rec.trajectories = trajectories.size();
    rec.improving = outcome.improving.size();
    rec.equal_kept = outcome.equal_kept.size();
    rec.selected = outcome.selected.size();
    rec.dataset_records = build.records.size();
    if (build.dropped_empty_target > 0) {
      rec.warnings.push_back(std::to_string(build.dropped_empty_target) + " selected corrections had empty text");
    }
    state.status = RunStatus::Training;
    persist(state, n, StepMark::Filtered);
  }

  // Step 4: fine-tune.
  if (record().step < StepMark::Trained) {
    state.status = RunStatus::Training;
    auto& rec = record();
    if (rec.dataset_records == 0) {
      if (state.empty_filter_policy == EmptyFilterPolicy::Halt) {
        state.status = RunStatus::Failed;
        state.failure_reason = "iteration " + std::to_string(n) + ": no corrections passed the filter (halt policy)";
        persist(state, n, std::nullopt);
        event(json{{"event", "halted"}, {"n", n}});
        throw RunHalted(state.failure_reason);
      }
      rec.produced = rec.finetune_base;
      rec.trained = false;
      rec.warnings.push_back("empty fine-tuning set; training skipped, model carried over from " +
                             rec.finetune_base.value);
      event(json{{"event", "warning"}, {"n", n}, {"message", rec.warnings.back()}});
    } else {
      backends::TrainRequest req;
      req.base_model = rec.finetune_base;
      req.dataset_path = dir / "finetune.jsonl";
      req.num_records = rec.dataset_records;
      req.hyperparams = state.config.trainer;
      backends::TrainResult result;
      try {
        result = trainer_.train(req);
      } catch (const TrainingError& e) {
        state.status = RunStatus::Failed;
        state.failure_reason = "iteration " + std::to_string(n) + ": " + e.what();
        persist(state, n, std::nullopt);
        event(json{{"event", "training_failed"}, {"n", n}, {"reason", e.what()}});
        throw;
      }
      std::set<ModelId> known{state.base_model};
      for (const auto& r : state.iterations)
        if (r.produced) known.insert(*r.produced);
      if (known.count(result.model)) {
        throw StateIntegrityError("trainer returned already-known model id '" + result.model.value + "'");
      }
      auto& fresh = record();
      fresh.produced = result.model;
      fresh.trained = true;
      fresh.train_job_id = result.job_id;
      event(json{{"event", "trained"},
                 {"n", n},
                 {"base", req.base_model.value},
                 {"produced", result.model.value},
                 {"job_id", result.job_id},
                 {"wall_seconds", result.wall_seconds}});
    }
    state.status = evaluate ? RunStatus::Evaluating : RunStatus::SamplingInitial;
    persist(state, n, StepMark::Trained);
  }

  // Test-split evaluation of M_n.
  if (evaluate && record().step < StepMark::Evaluated) {
    state.status = RunStatus::Evaluating;
    const ModelId produced = *record().produced;
    eval::EvalRoles roles{state.config.axes.init == InitMode::Fixed ? state.base_model : produced, produced};
    auto metrics = eval::evaluate_iteration(n, roles, test_, train_, setup, options_.aggregation);
    write_file_atomic(dir / "eval.json", eval::to_json(metrics).dump() + "\n");
    record().metrics = metrics.snapshot();
    state.status = RunStatus::SamplingInitial;
    persist(state, n, StepMark::Evaluated);
  }
  return state;
}

}  // namespace stasc::loop
