// SPDX-License-Identifier: Apache-2.0
#include "stasc/cli.hpp"

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>

#include "stasc/hashing.hpp"
#include "stasc/loop.hpp"
#include "stasc/reward.hpp"
#include "stasc/sampling.hpp"

namespace stasc::cli {

namespace fs = std::filesystem;

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  return path.lexically_normal();
}

// Reads j[key] into out when present; type problems become violations.
template <typename T>
void take(const json& j, const char* key, T& out, std::vector<std::string>& v, const std::string& prefix = "") {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    v.push_back(prefix + key + ": wrong type");
  }
}

std::string slot_name(promptkit::InitialAnswerSlot s) {
  return s == promptkit::InitialAnswerSlot::FullText ? "full_text" : "final_answer";
}

const std::set<std::string> kTopLevelKeys = {
    "run_id",   "variant",       "preset",      "iterations",          "n_init",      "n_corr",
    "threshold", "sampling",     "hyperparams", "base_model",          "seed",        "train",
    "test",     "run_dir",       "templates",   "reward",              "score_full_text",
    "empty_filter_policy",       "dataset",     "eval",                "generation",  "trainer",
    "mock_script", "retry"};

}  // namespace

AppConfig parse_app_config(const json& j, const fs::path& base_dir, std::vector<std::string>& v) {
  AppConfig c;
  if (!j.is_object()) {
    v.emplace_back("config: top level must be an object");
    return c;
  }
  for (const auto& [key, _] : j.items()) {
    if (!kTopLevelKeys.count(key)) v.push_back(key + ": unknown key");
  }

  json variant_part = j;
  variant_part.erase("variant");
  variant_part.erase("preset");
  try {
    c.variant = variant_config_from_json(variant_part);
  } catch (const ConfigError& e) {
    v.push_back(std::string("config: ") + e.what());
  }
  try {
    if (j.contains("variant") && j.contains("preset")) {
      v.emplace_back("variant: give either 'variant' or 'preset', not both");
    } else if (j.contains("variant")) {
      c.variant.axes = parse_variant_code(j.at("variant").get<std::string>());
    } else if (j.contains("preset")) {
      c.variant.axes = variant_preset(j.at("preset").get<std::string>());
    }
  } catch (const ConfigError& e) {
    v.push_back(std::string(j.contains("variant") ? "variant: " : "preset: ") + e.what());
  } catch (const json::exception&) {
    v.emplace_back("variant: must be a string");
  }

  take(j, "run_id", c.run_id, v);
  std::string base = c.base_model.value;
  take(j, "base_model", base, v);
  c.base_model = ModelId(base);
  take(j, "seed", c.seed, v);

  std::string train, test, run_dir, script;
  take(j, "train", train, v);
  take(j, "test", test, v);
  take(j, "run_dir", run_dir, v);
  take(j, "mock_script", script, v);
  if (train.empty()) {
    v.emplace_back("train: required");
  } else {
    c.train = resolve(base_dir, train);
  }
  if (!test.empty()) c.test = resolve(base_dir, test);
  c.run_dir = resolve(base_dir, run_dir.empty() ? std::string("runs/") + c.run_id : run_dir);
  if (!script.empty()) c.mock_script = resolve(base_dir, script);

  if (j.contains("templates")) {
    const auto& t = j.at("templates");
    std::string initial, correction, slot;
    take(t, "initial", initial, v, "templates.");
    take(t, "correction", correction, v, "templates.");
    take(t, "initial_answer_slot", slot, v, "templates.");
    if (!initial.empty()) c.initial_template = resolve(base_dir, initial);
    if (!correction.empty()) c.correction_template = resolve(base_dir, correction);
    if (slot == "final_answer") {
      c.slot = promptkit::InitialAnswerSlot::FinalAnswerOnly;
    } else if (!slot.empty() && slot != "full_text") {
      v.push_back("templates.initial_answer_slot: must be 'full_text' or 'final_answer', got '" + slot + "'");
    }
  }

  take(j, "reward", c.reward, v);
  if (!reward::Registry::instance().contains(c.reward)) v.push_back("reward: unknown reward '" + c.reward + "'");
  take(j, "score_full_text", c.score_full_text, v);

  if (j.contains("empty_filter_policy")) {
    try {
      c.empty_filter_policy = parse_empty_filter_policy(j.at("empty_filter_policy").get<std::string>());
    } catch (const std::exception& e) {
      v.push_back(std::string("empty_filter_policy: ") + e.what());
    }
  }

  if (j.contains("dataset")) {
    take(j.at("dataset"), "dedup", c.dataset.dedup, v, "dataset.");
    take(j.at("dataset"), "cap_per_item", c.dataset.cap_per_item, v, "dataset.");
    if (c.dataset.cap_per_item < 0) v.emplace_back("dataset.cap_per_item: must be ≥ 0");
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    take(e, "enabled", c.evaluate, v, "eval.");
    std::string agg;
    take(e, "aggregation", agg, v, "eval.");
    if (!agg.empty()) {
      try {
        c.aggregation = eval::parse_aggregation(agg);
      } catch (const ConfigError& ex) {
        v.push_back(std::string("eval.aggregation: ") + ex.what());
      }
    }
  }

  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    take(g, "backend", c.generation.backend, v, "generation.");
    take(g, "endpoint", c.generation.endpoint, v, "generation.");
    take(g, "token", c.generation.token, v, "generation.");
    take(g, "max_parallel", c.generation.max_parallel, v, "generation.");
    take(g, "batch_n", c.generation.batch_n, v, "generation.");
    take(g, "timeout_ms", c.generation.timeout_ms, v, "generation.");
  }
  if (c.generation.backend != "mock" && c.generation.backend != "http") {
    v.push_back("generation.backend: must be 'mock' or 'http', got '" + c.generation.backend + "'");
  }
  if (c.generation.max_parallel == 0) v.emplace_back("generation.max_parallel: must be ≥ 1");

  if (j.contains("trainer")) {
    const auto& t = j.at("trainer");
    take(t, "backend", c.trainer.backend, v, "trainer.");
    take(t, "endpoint", c.trainer.endpoint, v, "trainer.");
    take(t, "token", c.trainer.token, v, "trainer.");
    take(t, "command", c.trainer.command, v, "trainer.");
    take(t, "poll_ms", c.trainer.poll_ms, v, "trainer.");
    take(t, "timeout_ms", c.trainer.timeout_ms, v, "trainer.");
  }
  if (c.trainer.backend != "mock" && c.trainer.backend != "http" && c.trainer.backend != "subprocess") {
    v.push_back("trainer.backend: must be 'mock', 'http' or 'subprocess', got '" + c.trainer.backend + "'");
  }

  if (j.contains("retry")) {
    const auto& r = j.at("retry");
    int initial_ms = static_cast<int>(c.retry.initial_backoff.count());
    int max_ms = static_cast<int>(c.retry.max_backoff.count());
    take(r, "max_attempts", c.retry.max_attempts, v, "retry.");
    take(r, "initial_backoff_ms", initial_ms, v, "retry.");
    take(r, "multiplier", c.retry.multiplier, v, "retry.");
    take(r, "max_backoff_ms", max_ms, v, "retry.");
    c.retry.initial_backoff = std::chrono::milliseconds(initial_ms);
    c.retry.max_backoff = std::chrono::milliseconds(max_ms);
    if (c.retry.max_attempts < 1) v.emplace_back("retry.max_attempts: must be ≥ 1");
  }
  return c;
}

void apply_environment(AppConfig& cfg) {
  auto env = [](const char* name) -> std::optional<std::string> {
    const char* value = std::getenv(name);
    if (!value || !*value) return std::nullopt;
    return std::string(value);
  };
  if (auto e = env("STASC_GEN_ENDPOINT")) {
    cfg.generation.backend = "http";
    cfg.generation.endpoint = *e;
  }
  if (auto e = env("STASC_TRAIN_ENDPOINT")) {
    cfg.trainer.backend = "http";
    cfg.trainer.endpoint = *e;
  }
  if (auto e = env("STASC_GEN_TOKEN")) cfg.generation.token = *e;
  if (auto e = env("STASC_TRAIN_TOKEN")) cfg.trainer.token = *e;
}

void apply_overrides(AppConfig& cfg, const Overrides& o, std::vector<std::string>& v) {
  if (o.variant) {
    try {
      cfg.variant.axes = variant_preset(*o.variant);
    } catch (const ConfigError& e) {
      v.push_back(std::string("variant: ") + e.what());
    }
  }
  if (o.n_init) cfg.variant.n_init = *o.n_init;
  if (o.n_corr) cfg.variant.n_corr = *o.n_corr;
  if (o.iterations) cfg.variant.iterations = *o.iterations;
  if (o.seed) cfg.seed = *o.seed;
  if (o.run_dir) cfg.run_dir = fs::absolute(*o.run_dir).lexically_normal();
  if (o.gen_endpoint) {
    cfg.generation.backend = "http";
    cfg.generation.endpoint = *o.gen_endpoint;
  }
  if (o.train_endpoint) {
    cfg.trainer.backend = "http";
    cfg.trainer.endpoint = *o.train_endpoint;
  }
  if (o.policy) {
    try {
      cfg.empty_filter_policy = parse_empty_filter_policy(*o.policy);
    } catch (const ConfigError& e) {
      v.push_back(std::string("policy-empty-filter: ") + e.what());
    }
  }
}

AppConfig load_app_config(const fs::path& path, const Overrides& overrides, std::vector<std::string>& v) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    v.push_back("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
    return {};
  }
  auto cfg = parse_app_config(j, fs::absolute(path).parent_path(), v);
  apply_environment(cfg);
  apply_overrides(cfg, overrides, v);
  for (const auto& msg : cfg.variant.violations()) v.push_back(msg);
  if (cfg.generation.backend == "http" && cfg.generation.endpoint.empty()) {
    v.emplace_back("generation.endpoint: required for the http backend");
  }
  if (cfg.trainer.backend == "http" && cfg.trainer.endpoint.empty()) {
    v.emplace_back("trainer.endpoint: required for the http backend");
  }
  if (cfg.trainer.backend == "subprocess" && cfg.trainer.command.empty()) {
    v.emplace_back("trainer.command: required for the subprocess backend");
  }
  return cfg;
}

json app_config_to_json(const AppConfig& c) {
  json j = to_json(c.variant);
  j["run_id"] = c.run_id;
  j["base_model"] = c.base_model.value;
  j["seed"] = c.seed;
  j["train"] = c.train.string();
  if (c.test) j["test"] = c.test->string();
  j["run_dir"] = c.run_dir.string();
  json t{{"initial_answer_slot", slot_name(c.slot)}};
  if (c.initial_template) t["initial"] = c.initial_template->string();
  if (c.correction_template) t["correction"] = c.correction_template->string();
  j["templates"] = t;
  j["reward"] = c.reward;
  j["score_full_text"] = c.score_full_text;
  j["empty_filter_policy"] = to_string(c.empty_filter_policy);
  j["dataset"] = json{{"dedup", c.dataset.dedup}, {"cap_per_item", c.dataset.cap_per_item}};
  j["eval"] = json{{"enabled", c.evaluate}, {"aggregation", eval::to_string(c.aggregation)}};
  j["generation"] = json{{"backend", c.generation.backend},
                         {"endpoint", c.generation.endpoint},
                         {"max_parallel", c.generation.max_parallel},
                         {"batch_n", c.generation.batch_n},
                         {"timeout_ms", c.generation.timeout_ms}};
  j["trainer"] = json{{"backend", c.trainer.backend},
                      {"endpoint", c.trainer.endpoint},
                      {"command", c.trainer.command},
                      {"poll_ms", c.trainer.poll_ms},
                      {"timeout_ms", c.trainer.timeout_ms}};
  if (c.mock_script) j["mock_script"] = c.mock_script->string();
  j["retry"] = json{{"max_attempts", c.retry.max_attempts},
                    {"initial_backoff_ms", c.retry.initial_backoff.count()},
                    {"multiplier", c.retry.multiplier},
                    {"max_backoff_ms", c.retry.max_backoff.count()}};
  return j;
}

std::uint64_t subset_hash(std::string_view id) { return fnv1a64(id); }

std::vector<QAItem> convert_nq(std::istream& in, std::size_t limit, std::vector<std::string>& v) {
  std::vector<std::pair<std::uint64_t, QAItem>> rows;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      v.push_back(where + "malformed JSON");
      continue;
    }
    QAItem item;
    try {
      item.question = j.at("question").get<std::string>();
      const json& answers = j.contains("answer") ? j.at("answer") : j.at("answers");
      if (answers.is_string()) {
        item.references.push_back(answers.get<std::string>());
      } else {
        item.references = answers.get<std::vector<std::string>>();
      }
      if (j.contains("id")) {
        item.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      }
    } catch (const json::exception&) {
      v.push_back(where + "expected {question, answer[]}");
      continue;
    }
    if (item.references.empty()) {
      v.push_back(where + "missing references");
      continue;
    }
    if (item.id.empty()) {
      char buf[24];
      std::snprintf(buf, sizeof buf, "nq-%016llx", static_cast<unsigned long long>(fnv1a64(item.question)));
      item.id = buf;
    }
    if (!seen.insert(item.id).second) continue;
    rows.emplace_back(subset_hash(item.id), std::move(item));
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second.id < b.second.id;
  });
  if (rows.size() > limit) rows.resize(limit);
  std::vector<QAItem> out;
  out.reserve(rows.size());
  for (auto& [_, item] : rows) out.push_back(std::move(item));
  return out;
}

namespace {

struct Wiring {
  std::unique_ptr<backends::MockBackend> mock;
  std::unique_ptr<backends::GenerationBackend> gen_owned;
  std::unique_ptr<backends::TrainerBackend> trainer_owned;
  backends::GenerationBackend* gen = nullptr;
  backends::TrainerBackend* trainer = nullptr;
  std::unique_ptr<backends::AuditLog> audit;
  std::unique_ptr<backends::GenerationGateway> gateway;
  std::unique_ptr<backends::TrainerGateway> trainer_gateway;
};

std::vector<QAItem> load_split(const std::optional<fs::path>& path) {
  if (!path) return {};
  return load_dataset(*path);
}

std::unique_ptr<Wiring> wire(const AppConfig& cfg, const std::vector<QAItem>& train, const std::vector<QAItem>& test,
                             const std::optional<fs::path>& audit_file) {
  auto w = std::make_unique<Wiring>();
  if (cfg.generation.backend == "mock" || cfg.trainer.backend == "mock") {
    backends::MockScript script;
    if (cfg.mock_script) {
      script = backends::MockScript::load(*cfg.mock_script);
    } else {
      script.skills[cfg.base_model.value] = backends::MockSkill{};
    }
    script.add_answer_key(train);
    script.add_answer_key(test);
    w->mock = std::make_unique<backends::MockBackend>(std::move(script));
  }
  if (cfg.generation.backend == "http") {
    backends::HttpEndpoint ep{cfg.generation.endpoint, cfg.generation.token,
                              std::chrono::milliseconds(cfg.generation.timeout_ms)};
    w->gen_owned = std::make_unique<backends::HttpGenerationBackend>(ep, cfg.generation.batch_n);
    w->gen = w->gen_owned.get();
  } else {
    w->gen = w->mock.get();
  }
  if (cfg.trainer.backend == "http") {
    backends::HttpEndpoint ep{cfg.trainer.endpoint, cfg.trainer.token,
                              std::chrono::milliseconds(cfg.trainer.timeout_ms)};
    w->trainer_owned =
        std::make_unique<backends::HttpTrainerBackend>(ep, std::chrono::milliseconds(cfg.trainer.poll_ms));
    w->trainer = w->trainer_owned.get();
  } else if (cfg.trainer.backend == "subprocess") {
    w->trainer_owned =
        std::make_unique<backends::SubprocessTrainerBackend>(cfg.trainer.command, cfg.run_dir / "trainer_jobs");
    w->trainer = w->trainer_owned.get();
  } else {
    w->trainer = w->mock.get();
  }
  w->audit = audit_file ? std::make_unique<backends::AuditLog>(*audit_file) : std::make_unique<backends::AuditLog>();
  w->gateway = std::make_unique<backends::GenerationGateway>(*w->gen, cfg.retry, cfg.generation.max_parallel,
                                                            w->audit.get());
  w->trainer_gateway = std::make_unique<backends::TrainerGateway>(*w->trainer, w->audit.get());
  return w;
}

promptkit::PromptTemplate template_or(const std::optional<fs::path>& path, promptkit::PromptTemplate fallback,
                                      promptkit::PromptKind kind, const char* key) {
  if (!path) return fallback;
  auto t = promptkit::load_template(*path);
  if (t.kind != kind) throw TemplateError(std::string(key) + ": template kind does not match");
  return t;
}

SamplingSetup make_setup(const AppConfig& cfg, backends::GenerationGateway& gateway) {
  auto initial = template_or(cfg.initial_template, promptkit::default_initial_template(),
                             promptkit::PromptKind::Initial, "templates.initial");
  auto correction = template_or(cfg.correction_template, promptkit::default_correction_template(),
                                promptkit::PromptKind::Correction, "templates.correction");
  initial.validate();
  correction.validate();
  SamplingSetup setup{gateway,
                      std::move(initial),
                      std::move(correction),
                      cfg.slot,
                      reward::Registry::instance().resolve(reward::RewardFnSpec{cfg.reward, {}}),
                      cfg.score_full_text,
                      cfg.variant,
                      cfg.seed};
  return setup;
}

std::string summary_line(const VariantConfig& v) {
  return "STaSC_" + v.code() + ", N=" + std::to_string(v.iterations) + ", N_init=" + std::to_string(v.n_init) +
         ", N_corr=" + std::to_string(v.n_corr);
}

void print_violations(const std::vector<std::string>& v, std::ostream& err) {
  for (const auto& msg : v) err << "error: " << msg << "\n";
}

// Full offline validation: config, datasets, templates, mock script. Never
// constructs a backend.
std::vector<std::string> offline_checks(const AppConfig& cfg) {
  std::vector<std::string> v;
  std::vector<QAItem> train, test;
  auto check_split = [&](const fs::path& path, const char* key, std::vector<QAItem>& out) {
    if (!fs::exists(path)) {
      v.push_back(std::string(key) + ": file not found: " + path.string());
      return;
    }
    auto rows = dataset_violations(path);
    for (const auto& r : rows) v.push_back(std::string(key) + ": " + path.filename().string() + " " + r);
    if (rows.empty()) out = load_dataset(path);
  };
  check_split(cfg.train, "train", train);
  if (cfg.test) check_split(*cfg.test, "test", test);
  if (!train.empty() && !test.empty()) {
    try {
      eval::check_disjoint(test, train);
    } catch (const ValidationError& e) {
      v.push_back(std::string("test: ") + e.what());
    }
  }
  auto check_template = [&](const std::optional<fs::path>& path, promptkit::PromptKind kind, const char* key) {
    if (!path) return;
    try {
      template_or(path, {}, kind, key).validate();
    } catch (const Error& e) {
      v.push_back(std::string(key) + ": " + e.what());
    }
  };
  check_template(cfg.initial_template, promptkit::PromptKind::Initial, "templates.initial");
  check_template(cfg.correction_template, promptkit::PromptKind::Correction, "templates.correction");
  if (cfg.mock_script && (cfg.generation.backend == "mock" || cfg.trainer.backend == "mock")) {
    try {
      backends::MockScript::load(*cfg.mock_script);
    } catch (const Error& e) {
      v.push_back(std::string("mock_script: ") + e.what());
    }
  }
  return v;
}

AppConfig load_snapshot(const fs::path& run_dir, const Overrides& o, std::vector<std::string>& v) {
  const fs::path snapshot = run_dir / "config.json";
  if (!fs::exists(snapshot)) throw ConfigError("run_dir: no config.json in " + run_dir.string());
  auto cfg = load_app_config(snapshot, o, v);
  cfg.run_dir = run_dir;
  return cfg;
}

int do_validate(const fs::path& config_path, const Overrides& o, std::ostream& out, std::ostream& err) {
  std::vector<std::string> v;
  auto cfg = load_app_config(config_path, o, v);
  if (v.empty()) v = offline_checks(cfg);
  if (!v.empty()) {
    print_violations(v, err);
    return kConfigError;
  }
  out << summary_line(cfg.variant) << "\n";
  return kOk;
}

int do_run(const fs::path& config_path, const Overrides& o, std::ostream& out, std::ostream& err) {
  std::vector<std::string> v;
  auto cfg = load_app_config(config_path, o, v);
  if (v.empty()) v = offline_checks(cfg);
  if (!v.empty()) {
    print_violations(v, err);
    return kConfigError;
  }
  if (fs::exists(cfg.run_dir / "state.json")) {
    throw ConfigError("run_dir: " + cfg.run_dir.string() + " already holds a run; use 'resume'");
  }
  auto train = load_dataset(cfg.train);
  auto test = load_split(cfg.test);
  fs::create_directories(cfg.run_dir);
  write_file_atomic(cfg.run_dir / "config.json", app_config_to_json(cfg).dump(2) + "\n");
  auto w = wire(cfg, train, test, cfg.run_dir / "audit.jsonl");

  loop::LoopOptions options;
  options.empty_filter_policy = cfg.empty_filter_policy;
  options.dataset = cfg.dataset;
  options.evaluate = cfg.evaluate;
  options.aggregation = cfg.aggregation;
  loop::Driver driver(cfg.run_dir, make_setup(cfg, *w->gateway), *w->trainer_gateway, options);
  loop::RunSpec spec{cfg.run_id, cfg.variant, cfg.base_model, cfg.seed, train, test};
  out << summary_line(cfg.variant) << "\n";
  auto state = driver.run(spec);
  out << "run " << state.run_id << " " << to_string(state.status) << ": final model " << state.model_at(
             static_cast<int>(state.iterations.size())).value
      << "\n";
  return kOk;
}

int do_resume(const fs::path& run_dir, const Overrides& o, std::ostream& out, std::ostream& err) {
  std::vector<std::string> v;
  auto cfg = load_snapshot(run_dir, o, v);
  if (!v.empty()) {
    print_violations(v, err);
    return kConfigError;
  }
  auto train = load_dataset(cfg.train);
  auto test = load_split(cfg.test);
  auto w = wire(cfg, train, test, cfg.run_dir / "audit.jsonl");
  loop::LoopOptions options;
  if (o.policy) options.empty_filter_policy = cfg.empty_filter_policy;
  options.dataset = cfg.dataset;
  options.evaluate = cfg.evaluate;
  options.aggregation = cfg.aggregation;
  loop::Driver driver(cfg.run_dir, make_setup(cfg, *w->gateway), *w->trainer_gateway, options);
  auto state = driver.resume(train, cfg.evaluate ? test : std::vector<QAItem>{});
  out << "run " << state.run_id << " " << to_string(state.status) << ": final model "
      << state.model_at(static_cast<int>(state.iterations.size())).value << "\n";
  return kOk;
}

int do_eval(const fs::path& run_dir, std::optional<int> only, const Overrides& o, std::ostream& out,
            std::ostream& err) {
  std::vector<std::string> v;
  auto cfg = load_snapshot(run_dir, o, v);
  if (!v.empty()) {
    print_violations(v, err);
    return kConfigError;
  }
  if (!cfg.test) throw ConfigError("test: the run has no test split to evaluate on");
  auto state = load_state(run_dir / "state.json");
  auto train = load_dataset(cfg.train);
  auto test = load_dataset(*cfg.test);
  auto w = wire(cfg, train, test, std::nullopt);
  std::vector<std::pair<ModelId, ModelId>> lineage;
  for (const auto& r : state.iterations)
    if (r.trained && r.produced) lineage.emplace_back(*r.produced, r.finetune_base);
  w->trainer_gateway->adopt_lineage(lineage);

  auto setup = make_setup(cfg, *w->gateway);
  setup.config = state.config;
  setup.run_seed = state.seed;
  int evaluated = 0;
  for (auto& r : state.iterations) {
    if (!r.produced || r.step < StepMark::Trained) continue;
    if (only && r.n != *only) continue;
    if (!only && r.metrics) continue;
    eval::EvalRoles roles{state.config.axes.init == InitMode::Fixed ? state.base_model : *r.produced, *r.produced};
    auto m = eval::evaluate_iteration(r.n, roles, test, train, setup, cfg.aggregation);
    char name[32];
    std::snprintf(name, sizeof name, "iter_%03d", r.n);
    write_file_atomic(run_dir / name / "eval.json", eval::to_json(m).dump() + "\n");
    r.metrics = m.snapshot();
    if (r.step < StepMark::Evaluated) r.step = StepMark::Evaluated;
    ++evaluated;
    out << "iteration " << r.n << ": initial " << m.initial_acc << ", correction " << m.correction_acc << "\n";
  }
  if (only && evaluated == 0) throw ConfigError("iteration: " + std::to_string(*only) + " has no trained model");
  save_state(run_dir / "state.json", state);
  bool any = std::any_of(state.iterations.begin(), state.iterations.end(),
                         [](const IterationRecord& r) { return r.metrics.has_value(); });
  if (any) eval::write_report(run_dir, state);
  return kOk;
}

int do_report(const fs::path& run_dir, std::ostream& out) {
  auto state = load_state(run_dir / "state.json");
  auto files = eval::write_report(run_dir, state);
  out << read_file(files.table);
  out << "\nwrote " << files.table.string() << ", " << files.metrics.string() << ", " << files.curve.string()
      << "\n";
  return kOk;
}

int do_convert(const fs::path& input, const fs::path& output, std::size_t limit, std::ostream& out,
               std::ostream& err) {
  std::ifstream in(input);
  if (!in) throw ConfigError("input: cannot open " + input.string());
  std::vector<std::string> v;
  auto items = convert_nq(in, limit, v);
  for (const auto& msg : v) err << "warning: " << input.filename().string() << " " << msg << "\n";
  write_dataset(output, items);
  out << "wrote " << items.size() << " items to " << output.string() << "\n";
  return kOk;
}

struct ServeOptions {
  std::string script;
  std::vector<std::string> datasets;
  std::string base_model = "M0";
  std::string host = "127.0.0.1";
  int port = 0;
  bool reject_batch_n = false;
  int running_polls = 0;
};

int do_mock_serve(const ServeOptions& o, std::ostream& out) {
  backends::MockScript script;
  if (!o.script.empty()) {
    script = backends::MockScript::load(o.script);
  } else {
    script.skills[o.base_model] = backends::MockSkill{};
  }
  for (const auto& d : o.datasets) script.add_answer_key(load_dataset(d));
  backends::MockBackend mock(std::move(script));

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  backends::BackendServer server(mock, mock, backends::ServerOptions{o.reject_batch_n, o.running_polls});
  server.start(o.host, o.port);
  out << "listening on " << server.url() << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  out << "stopped after " << server.requests_served() << " requests" << std::endl;
  return kOk;
}

int exit_code_for(std::ostream& err) {
  try {
    throw;
  } catch (const RunHalted& e) {
    err << "halted: " << e.what() << "\n";
    return kHalted;
  } catch (const TrainingError& e) {
    err << "training failed: " << e.what() << "\n";
    return kTrainingFailed;
  } catch (const StateIntegrityError& e) {
    err << "state error: " << e.what() << "\n";
    return kStateIntegrity;
  } catch (const BackendError& e) {
    err << "backend error: " << e.what() << "\n";
    return kBackendError;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const TemplateError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "unexpected error: " << e.what() << "\n";
    return kUnexpected;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-correction fine-tuning orchestrator", "stasc"};
  app.require_subcommand(1);

  Overrides o;
  std::string config_path, run_dir;
  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--variant", o.variant, "Variant code such as EIF, or a preset (sc)");
    cmd->add_option("--n-init", o.n_init, "Initial answers per question");
    cmd->add_option("--n-corr", o.n_corr, "Corrections per initial answer");
    cmd->add_option("--iterations", o.iterations, "Number of iterations N");
    cmd->add_option("--seed", o.seed, "Run seed");
  };
  auto add_endpoints = [&](CLI::App* cmd) {
    cmd->add_option("--gen-endpoint", o.gen_endpoint, "Generation server base URL");
    cmd->add_option("--train-endpoint", o.train_endpoint, "Trainer server base URL");
  };
  auto add_policy = [&](CLI::App* cmd) {
    cmd->add_option("--policy-empty-filter", o.policy, "skip or halt when no correction passes the filter")
        ->check(CLI::IsMember({"skip", "halt"}));
  };

  auto* run = app.add_subcommand("run", "Start a new run from a config file");
  run->add_option("--config", config_path, "Run config (JSON)")->required();
  run->add_option("--run-dir", o.run_dir, "Run directory");
  add_overrides(run);
  add_endpoints(run);
  add_policy(run);

  auto* resume = app.add_subcommand("resume", "Continue an interrupted run");
  resume->add_option("--run-dir", run_dir, "Run directory")->required();
  add_endpoints(resume);
  add_policy(resume);

  std::optional<int> eval_iteration;
  auto* evalc = app.add_subcommand("eval", "Evaluate trained iterations on the test split");
  evalc->add_option("--run-dir", run_dir, "Run directory")->required();
  evalc->add_option("--iteration", eval_iteration, "Re-evaluate only this iteration");
  add_endpoints(evalc);

  auto* report = app.add_subcommand("report", "Write report.md, metrics.json and curve.csv");
  report->add_option("--run-dir", run_dir, "Run directory")->required();

  auto* validate = app.add_subcommand("validate", "Check config, datasets and templates offline");
  validate->add_option("--config", config_path, "Run config (JSON)")->required();
  add_overrides(validate);
  add_policy(validate);

  ServeOptions serve;
  auto* mock_serve = app.add_subcommand("mock-serve", "Serve the scripted mock over HTTP");
  mock_serve->add_option("--script", serve.script, "Mock script (JSON)");
  mock_serve->add_option("--dataset", serve.datasets, "Dataset files supplying the answer key");
  mock_serve->add_option("--base-model", serve.base_model, "Model id known without a script");
  mock_serve->add_option("--host", serve.host, "Bind address");
  mock_serve->add_option("--port", serve.port, "Port (0 picks a free one)");
  mock_serve->add_flag("--reject-batch-n", serve.reject_batch_n, "Answer n>1 requests with 400");
  mock_serve->add_option("--running-polls", serve.running_polls, "Polls reported as running per job");

  std::string nq_in, nq_out;
  std::size_t limit = 500;
  auto* convert = app.add_subcommand("convert-nq", "Convert Natural Questions open JSON Lines");
  convert->add_option("--input", nq_in, "NQ-open file with {question, answer[]} rows")->required();
  convert->add_option("--output", nq_out, "Output dataset")->required();
  convert->add_option("--limit", limit, "Rows to keep, chosen by stable hash of id");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfigError;
  }

  try {
    if (*run) return do_run(config_path, o, out, err);
    if (*resume) return do_resume(run_dir, o, out, err);
    if (*evalc) return do_eval(run_dir, eval_iteration, o, out, err);
    if (*report) return do_report(run_dir, out);
    if (*validate) return do_validate(config_path, o, out, err);
    if (*mock_serve) return do_mock_serve(serve, out);
    if (*convert) return do_convert(nq_in, nq_out, limit, out, err);
  } catch (...) {
    return exit_code_for(err);
  }
  return kUnexpected;
}

}  // namespace stasc::cli
