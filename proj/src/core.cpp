// SPDX-License-Identifier: Apache-2.0
#include "stasc/core.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <system_error>


namespace stasc {

namespace {

char upper(char c) { return static_cast<char>(std::toupper(static_cast<unsigned char>(c))); }

std::string trim_copy(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n\f\v");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n\f\v");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

VariantAxes parse_variant_code(std::string_view code) {
  std::string_view body = code;
  if (body.size() > 6) {
    std::string prefix;
    for (char c : body.substr(0, 6)) prefix.push_back(upper(c));
    if (prefix == "STASC_") body.remove_prefix(6);
  }
  if (body.size() != 3) {
    throw ConfigError("variant code '" + std::string(code) +
                      "' must have exactly 3 letters [FE][IN][FE]");
  }
  VariantAxes axes;
  switch (upper(body[0])) {
    case 'F': axes.init = InitMode::Fixed; break;
    case 'E': axes.init = InitMode::Evolving; break;
    default:
      throw ConfigError("variant code '" + std::string(code) +
                        "': invalid initialization letter at position 1 (expected F or E)");
  }
  switch (upper(body[1])) {
    case 'I': axes.filter = FilterMode::Improving; break;
    case 'N': axes.filter = FilterMode::NonDecreasing; break;
    default:
      throw ConfigError("variant code '" + std::string(code) +
                        "': invalid filter letter at position 2 (expected I or N)");
  }
  switch (upper(body[2])) {
    case 'F': axes.finetune = FinetuneMode::Fixed; break;
    case 'E': axes.finetune = FinetuneMode::Evolving; break;
    default:
      throw ConfigError("variant code '" + std::string(code) +
                        "': invalid fine-tuning letter at position 3 (expected F or E)");
  }
  return axes;
}

std::string format_variant_code(const VariantAxes& axes) {
  std::string s(3, ' ');
  s[0] = axes.init == InitMode::Fixed ? 'F' : 'E';
  s[1] = axes.filter == FilterMode::Improving ? 'I' : 'N';
  s[2] = axes.finetune == FinetuneMode::Fixed ? 'F' : 'E';
  return s;
}

std::vector<std::string> all_variant_codes() {
  std::vector<std::string> out;
  for (char i : {'F', 'E'})
    for (char f : {'I', 'N'})
      for (char t : {'F', 'E'}) out.push_back(std::string{i, f, t});
  return out;
}

VariantAxes variant_preset(std::string_view name) {
  std::string lower;
  for (char c : name) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "sc") return {InitMode::Fixed, FilterMode::Improving, FinetuneMode::Evolving};
  if (lower == "star") {
    throw ConfigError(
        "preset 'star' samples no corrections; self-correction runs require n_corr >= 1");
  }
  return parse_variant_code(name);
}

std::string to_string(InitMode m) { return m == InitMode::Fixed ? "fixed" : "evolving"; }
std::string to_string(FilterMode m) {
  return m == FilterMode::Improving ? "improving" : "non_decreasing";
}
std::string to_string(FinetuneMode m) { return m == FinetuneMode::Fixed ? "fixed" : "evolving"; }
std::string to_string(EmptyFilterPolicy p) { return p == EmptyFilterPolicy::Skip ? "skip" : "halt"; }

EmptyFilterPolicy parse_empty_filter_policy(std::string_view s) {
  if (s == "skip") return EmptyFilterPolicy::Skip;
  if (s == "halt") return EmptyFilterPolicy::Halt;
  throw ConfigError("empty_filter_policy must be 'skip' or 'halt', got '" + std::string(s) + "'");
}

std::vector<std::string> VariantConfig::violations() const {
  std::vector<std::string> v;
  if (iterations < 1) v.emplace_back("iterations must be ≥ 1");
  if (n_init < 1) v.emplace_back("n_init must be ≥ 1");
  if (n_corr < 1) v.emplace_back("n_corr must be ≥ 1");
  if (!(threshold >= 0.0 && threshold <= 1.0)) v.emplace_back("threshold must be in [0, 1]");
  if (!(sampling.temperature >= 0.0)) v.emplace_back("sampling.temperature must be ≥ 0");
  if (!(sampling.top_p > 0.0 && sampling.top_p <= 1.0)) v.emplace_back("sampling.top_p must be in (0, 1]");
  if (sampling.max_tokens <= 0) v.emplace_back("sampling.max_tokens must be > 0");
  if (trainer.epochs <= 0) v.emplace_back("hyperparams.epochs must be > 0");
  if (trainer.batch_size <= 0) v.emplace_back("hyperparams.batch_size must be > 0");
  if (!(trainer.learning_rate > 0.0)) v.emplace_back("hyperparams.learning_rate must be > 0");
  if (!(trainer.weight_decay >= 0.0)) v.emplace_back("hyperparams.weight_decay must be ≥ 0");
  if (trainer.schedule.empty()) v.emplace_back("hyperparams.schedule must be nonempty");
  return v;
}

void VariantConfig::validate() const {
  auto v = violations();
  if (!v.empty()) throw ConfigError(v.front());
}

// --- dataset -----------------------------------------------------------------

namespace {

std::optional<QAItem> parse_dataset_line(const std::string& line, std::size_t lineno,
                                         std::vector<std::string>& errors) {
  auto where = "line " + std::to_string(lineno) + ": ";
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    errors.push_back(where + "not valid JSON");
    return std::nullopt;
  }
  if (!j.is_object()) {
    errors.push_back(where + "record must be an object");
    return std::nullopt;
  }
  QAItem item;
  if (!j.contains("id") || !(j["id"].is_string() || j["id"].is_number_integer())) {
    errors.push_back(where + "missing id");
    return std::nullopt;
  }
  item.id = j["id"].is_string() ? j["id"].get<std::string>() : std::to_string(j["id"].get<long long>());
  if (item.id.empty()) {
    errors.push_back(where + "empty id");
    return std::nullopt;
  }
  if (!j.contains("question") || !j["question"].is_string() ||
      trim_copy(j["question"].get<std::string>()).empty()) {
    errors.push_back(where + "missing or empty question");
    return std::nullopt;
  }
  item.question = j["question"].get<std::string>();
  const json* refs = nullptr;
  if (j.contains("answers")) refs = &j["answers"];
  if (!refs || !refs->is_array() || refs->empty()) {
    errors.push_back(where + "missing references (answers must be a nonempty list)");
    return std::nullopt;
  }
  for (const auto& r : *refs) {
    if (!r.is_string()) {
      errors.push_back(where + "answers must be strings");
      return std::nullopt;
    }
    item.references.push_back(r.get<std::string>());
  }
  return item;
}

std::vector<QAItem> read_dataset(const std::filesystem::path& path, std::vector<std::string>& errors) {
  std::ifstream in(path);
  if (!in) {
    errors.push_back("cannot open dataset " + path.string());
    return {};
  }
  std::vector<QAItem> items;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim_copy(line).empty()) continue;
    auto item = parse_dataset_line(line, lineno, errors);
    if (!item) continue;
    if (!seen.insert(item->id).second) {
      errors.push_back("line " + std::to_string(lineno) + ": duplicate id '" + item->id + "'");
      continue;
    }
    items.push_back(std::move(*item));
  }
  return items;
}

}  // namespace

std::vector<QAItem> load_dataset(const std::filesystem::path& path) {
  std::vector<std::string> errors;
  auto items = read_dataset(path, errors);
  if (!errors.empty()) throw ConfigError(path.string() + ": " + errors.front());
  return items;
}

std::vector<std::string> dataset_violations(const std::filesystem::path& path) {
  std::vector<std::string> errors;
  read_dataset(path, errors);
  for (auto& e : errors) e = path.filename().string() + ": " + e;
  return errors;
}

void write_dataset(const std::filesystem::path& path, const std::vector<QAItem>& items) {
  std::string out;
  for (const auto& it : items) {
    json j{{"id", it.id}, {"question", it.question}, {"answers", it.references}};
    out += j.dump() + "\n";
  }
  write_file_atomic(path, out);
}

// --- run state -----------------------------------------------------------------

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Pending: return "pending";
    case RunStatus::SamplingInitial: return "sampling_initial";
    case RunStatus::SamplingCorrections: return "sampling_corrections";
    case RunStatus::Filtering: return "filtering";
    case RunStatus::Training: return "training";
    case RunStatus::Evaluating: return "evaluating";
    case RunStatus::Done: return "done";
    case RunStatus::Failed: return "failed";
  }
  return "pending";
}

RunStatus parse_run_status(std::string_view s) {
  for (auto st : {RunStatus::Pending, RunStatus::SamplingInitial, RunStatus::SamplingCorrections,
                  RunStatus::Filtering, RunStatus::Training, RunStatus::Evaluating, RunStatus::Done,
                  RunStatus::Failed}) {
    if (to_string(st) == s) return st;
  }
  throw StateIntegrityError("unknown run status '" + std::string(s) + "'");
}

const IterationRecord* RunState::find_iteration(int n) const {
  for (const auto& r : iterations)
    if (r.n == n) return &r;
  return nullptr;
}

IterationRecord* RunState::find_iteration(int n) {
  for (auto& r : iterations)
    if (r.n == n) return &r;
  return nullptr;
}

const ModelId& RunState::model_at(int n) const {
  if (n == 0) return base_model;
  const auto* rec = find_iteration(n);
  if (!rec || !rec->produced) {
    throw StateIntegrityError("model M_" + std::to_string(n) + " has not been produced");
  }
  return *rec->produced;
}

void RunState::check_integrity() const {
  if (base_model.empty()) throw StateIntegrityError("base model id is empty");
  for (std::size_t i = 0; i < iterations.size(); ++i) {
    const auto& r = iterations[i];
    if (r.n != static_cast<int>(i) + 1) {
      throw StateIntegrityError("iteration records are not contiguous from 1 (found n=" +
                                std::to_string(r.n) + " at position " + std::to_string(i + 1) + ")");
    }
    bool reached = r.step >= StepMark::Trained;
    if (reached != r.produced.has_value()) {
      throw StateIntegrityError("iteration " + std::to_string(r.n) +
                                ": produced model present iff training step completed");
    }
    if (r.produced && !r.trained && *r.produced != r.finetune_base) {
      throw StateIntegrityError("iteration " + std::to_string(r.n) +
                                ": skipped training must keep the fine-tune base");
    }
    if (i + 1 < iterations.size() && !r.produced) {
      throw StateIntegrityError("iteration " + std::to_string(r.n) +
                                " is incomplete but later iterations exist");
    }
  }
}

ResolvedModels resolve_models(const RunState& state, int n) {
  if (n < 1) throw StateIntegrityError("iteration index must be ≥ 1");
  const ModelId& m0 = state.base_model;
  if (m0.empty()) throw StateIntegrityError("base model id is empty");
  if (n == 1) return {m0, m0, m0};
  const ModelId& prev = state.model_at(n - 1);
  const auto& axes = state.config.axes;
  return {
      axes.init == InitMode::Fixed ? m0 : prev,
      prev,
      axes.finetune == FinetuneMode::Fixed ? m0 : prev,
  };
}

// --- JSON ------------------------------------------------------------------------

json to_json(const VariantConfig& c) {
  return json{
      {"variant", c.code()},
      {"iterations", c.iterations},
      {"n_init", c.n_init},
      {"n_corr", c.n_corr},
      {"threshold", c.threshold},
      {"sampling",
       {{"temperature", c.sampling.temperature},
        {"top_p", c.sampling.top_p},
        {"max_tokens", c.sampling.max_tokens}}},
      {"hyperparams",
       {{"epochs", c.trainer.epochs},
        {"batch_size", c.trainer.batch_size},
        {"learning_rate", c.trainer.learning_rate},
        {"weight_decay", c.trainer.weight_decay},
        {"schedule", c.trainer.schedule}}},
  };
}

VariantConfig variant_config_from_json(const json& j) {
  VariantConfig c;
  try {
    if (j.contains("variant")) c.axes = parse_variant_code(j.at("variant").get<std::string>());
    c.iterations = j.value("iterations", c.iterations);
    c.n_init = j.value("n_init", c.n_init);
    c.n_corr = j.value("n_corr", c.n_corr);
    c.threshold = j.value("threshold", c.threshold);
    if (j.contains("sampling")) {
      const auto& s = j.at("sampling");
      c.sampling.temperature = s.value("temperature", c.sampling.temperature);
      c.sampling.top_p = s.value("top_p", c.sampling.top_p);
      c.sampling.max_tokens = s.value("max_tokens", c.sampling.max_tokens);
    }
    if (j.contains("hyperparams")) {
      const auto& h = j.at("hyperparams");
      c.trainer.epochs = h.value("epochs", c.trainer.epochs);
      c.trainer.batch_size = h.value("batch_size", c.trainer.batch_size);
      c.trainer.learning_rate = h.value("learning_rate", c.trainer.learning_rate);
      c.trainer.weight_decay = h.value("weight_decay", c.trainer.weight_decay);
      c.trainer.schedule = h.value("schedule", c.trainer.schedule);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed variant config: ") + e.what());
  }
  return c;
}

namespace {

json opt_model(const std::optional<ModelId>& m) { return m ? json(m->value) : json(nullptr); }

json to_json(const MetricSnapshot& m) {
  return json{{"initial_acc", m.initial_acc},       {"correction_acc", m.correction_acc},
              {"initial_std", m.initial_std},       {"correction_std", m.correction_std},
              {"aggregation", m.aggregation},       {"generator", m.generator.value},
              {"corrector", m.corrector.value}};
}

MetricSnapshot metric_from_json(const json& j) {
  MetricSnapshot m;
  m.initial_acc = j.at("initial_acc").get<double>();
  m.correction_acc = j.at("correction_acc").get<double>();
  m.initial_std = j.at("initial_std").get<double>();
  m.correction_std = j.at("correction_std").get<double>();
  m.aggregation = j.at("aggregation").get<std::string>();
  m.generator = ModelId(j.at("generator").get<std::string>());
  m.corrector = ModelId(j.at("corrector").get<std::string>());
  return m;
}

json to_json(const IterationRecord& r) {
  json j{{"n", r.n},
         {"generator", r.generator.value},
         {"corrector", r.corrector.value},
         {"finetune_base", r.finetune_base.value},
         {"produced", opt_model(r.produced)},
         {"trained", r.trained},
         {"train_job_id", r.train_job_id},
         {"items_succeeded", r.items_succeeded},
         {"items_failed", r.items_failed},
         {"counts",
          {{"trajectories", r.trajectories},
           {"improving", r.improving},
           {"equal_kept", r.equal_kept},
           {"selected", r.selected},
           {"dataset_records", r.dataset_records}}},
         {"step", static_cast<int>(r.step)},
         {"metrics", r.metrics ? to_json(*r.metrics) : json(nullptr)},
         {"warnings", r.warnings}};
  return j;
}

IterationRecord iteration_from_json(const json& j) {
  IterationRecord r;
  r.n = j.at("n").get<int>();
  r.generator = ModelId(j.at("generator").get<std::string>());
  r.corrector = ModelId(j.at("corrector").get<std::string>());
  r.finetune_base = ModelId(j.at("finetune_base").get<std::string>());
  if (!j.at("produced").is_null()) r.produced = ModelId(j.at("produced").get<std::string>());
  r.trained = j.at("trained").get<bool>();
  r.train_job_id = j.at("train_job_id").get<std::string>();
  r.items_succeeded = j.at("items_succeeded").get<int>();
  r.items_failed = j.at("items_failed").get<int>();
  const auto& c = j.at("counts");
  r.trajectories = c.at("trajectories").get<std::size_t>();
  r.improving = c.at("improving").get<std::size_t>();
  r.equal_kept = c.at("equal_kept").get<std::size_t>();
  r.selected = c.at("selected").get<std::size_t>();
  r.dataset_records = c.at("dataset_records").get<std::size_t>();
  int step = j.at("step").get<int>();
  if (step < 0 || step > static_cast<int>(StepMark::Evaluated)) {
    throw StateIntegrityError("iteration " + std::to_string(r.n) + ": invalid step mark");
  }
  r.step = static_cast<StepMark>(step);
  if (!j.at("metrics").is_null()) r.metrics = metric_from_json(j.at("metrics"));
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

}  // namespace

json to_json(const RunState& s) {
  json iters = json::array();
  for (const auto& r : s.iterations) iters.push_back(to_json(r));
  return json{{"run_id", s.run_id},
              {"config", to_json(s.config)},
              {"base_model", s.base_model.value},
              {"seed", s.seed},
              {"empty_filter_policy", to_string(s.empty_filter_policy)},
              {"status", to_string(s.status)},
              {"failure_reason", s.failure_reason},
              {"iterations", iters}};
}

RunState run_state_from_json(const json& j) {
  RunState s;
  try {
    s.run_id = j.at("run_id").get<std::string>();
    s.config = variant_config_from_json(j.at("config"));
    s.base_model = ModelId(j.at("base_model").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.empty_filter_policy = parse_empty_filter_policy(j.at("empty_filter_policy").get<std::string>());
    s.status = parse_run_status(j.at("status").get<std::string>());
    s.failure_reason = j.at("failure_reason").get<std::string>();
    for (const auto& r : j.at("iterations")) s.iterations.push_back(iteration_from_json(r));
  } catch (const json::exception& e) {
    throw StateIntegrityError(std::string("malformed run state: ") + e.what());
  } catch (const ConfigError& e) {
    throw StateIntegrityError(std::string("malformed run state: ") + e.what());
  }
  return s;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_state(const std::filesystem::path& path, const RunState& state) {
  write_file_atomic(path, to_json(state).dump(2) + "\n");
}

RunState load_state(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw StateIntegrityError("state file " + path.string() + " is not valid JSON");
  }
  auto s = run_state_from_json(j);
  s.check_integrity();
  return s;
}

}  // namespace stasc
