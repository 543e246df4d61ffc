// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <array>

#include "stasc/backends.hpp"
#include "stasc/hashing.hpp"
#include "stasc/promptkit.hpp"
#include "stasc/reward.hpp"

namespace stasc::backends {

namespace {

constexpr std::array<const char*, 6> kWrongAnswers = {
    "Alden Marsh", "Borealis Quint", "Corvin Dalth", "Dravenport Hollow", "Elsinore Vale", "Fennick Ashby",
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

bool wildcard_eq(const std::string& pattern, std::string_view value) {
  return pattern == "*" || pattern == value;
}

MockSkill skill_from_json(const json& j, MockSkill base = {}) {
  base.initial_accuracy = j.value("initial_accuracy", base.initial_accuracy);
  base.fix_rate = j.value("fix_rate", base.fix_rate);
  base.keep_rate = j.value("keep_rate", base.keep_rate);
  return base;
}

json skill_to_json(const MockSkill& s) {
  return json{{"initial_accuracy", s.initial_accuracy}, {"fix_rate", s.fix_rate}, {"keep_rate", s.keep_rate}};
}

}  // namespace

MockScript MockScript::from_json(const json& j) {
  MockScript s;
  try {
    if (j.contains("skills")) {
      for (const auto& [model, v] : j.at("skills").items()) s.skills[model] = skill_from_json(v);
    }
    if (j.contains("train_delta")) s.train_delta = skill_from_json(j.at("train_delta"), MockSkill{0.0, 0.0, 0.0});
    if (j.contains("answers")) s.answers = j.at("answers").get<std::map<std::string, std::string>>();
    if (j.contains("entries")) {
      for (const auto& e : j.at("entries")) {
        MockEntry m;
        m.model = e.value("model", m.model);
        m.stage = e.value("stage", m.stage);
        m.item = e.value("item", m.item);
        m.initial = e.value("initial", m.initial);
        m.sample = e.value("sample", m.sample);
        m.evaluation_only = e.value("evaluation_only", m.evaluation_only);
        m.text = e.at("text").get<std::string>();
        s.entries.push_back(std::move(m));
      }
    }
    if (j.contains("faults")) {
      for (const auto& f : j.at("faults")) {
        MockFault m;
        m.model = f.value("model", m.model);
        m.stage = f.value("stage", m.stage);
        m.item = f.value("item", m.item);
        m.times = f.value("times", m.times);
        m.status = f.value("status", m.status);
        s.faults.push_back(std::move(m));
      }
    }
    if (j.contains("failing_train_calls")) s.failing_train_calls = j.at("failing_train_calls").get<std::vector<int>>();
    if (j.contains("fallback_text") && !j.at("fallback_text").is_null()) {
      s.fallback_text = j.at("fallback_text").get<std::string>();
    }
    s.marker = j.value("marker", s.marker);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed mock script: ") + e.what());
  }
  return s;
}

MockScript MockScript::load(const std::filesystem::path& path) {
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw ConfigError("mock script " + path.string() + " is not valid JSON");
  }
}

json MockScript::to_json() const {
  json skills_j = json::object();
  for (const auto& [m, sk] : skills) skills_j[m] = skill_to_json(sk);
  json entries_j = json::array();
  for (const auto& e : entries) {
    entries_j.push_back(json{{"model", e.model}, {"stage", e.stage}, {"item", e.item},
                             {"initial", e.initial}, {"sample", e.sample},
                             {"evaluation_only", e.evaluation_only}, {"text", e.text}});
  }
  json faults_j = json::array();
  for (const auto& f : faults) {
    faults_j.push_back(json{{"model", f.model}, {"stage", f.stage}, {"item", f.item},
                            {"times", f.times}, {"status", f.status}});
  }
  return json{{"skills", skills_j},
              {"train_delta", skill_to_json(train_delta)},
              {"answers", answers},
              {"entries", entries_j},
              {"faults", faults_j},
              {"failing_train_calls", failing_train_calls},
              {"fallback_text", fallback_text ? json(*fallback_text) : json(nullptr)},
              {"marker", marker},
              {"seed", seed}};
}

void MockScript::add_answer_key(const std::vector<QAItem>& items) {
  for (const auto& it : items) {
    if (!it.references.empty()) answers.try_emplace(it.id, it.references.front());
  }
}

MockBackend::MockBackend(MockScript script) : script_(std::move(script)) {}

bool MockBackend::knows(const ModelId& m) const {
  std::lock_guard lock(mu_);
  if (script_.skills.count(m.value) || trained_skills_.count(m.value) || lineage_.count(m.value)) return true;
  return std::any_of(script_.entries.begin(), script_.entries.end(),
                     [&](const MockEntry& e) { return e.model == m.value; });
}

std::vector<ModelId> MockBackend::known_models() const {
  std::lock_guard lock(mu_);
  std::set<std::string> ids;
  for (const auto& [k, _] : script_.skills) ids.insert(k);
  for (const auto& [k, _] : lineage_) ids.insert(k);
  for (const auto& e : script_.entries)
    if (e.model != "*") ids.insert(e.model);
  std::vector<ModelId> out;
  for (const auto& id : ids) out.emplace_back(id);
  return out;
}

std::optional<MockSkill> MockBackend::skill_of(const ModelId& m) const {
  std::lock_guard lock(mu_);
  if (auto it = script_.skills.find(m.value); it != script_.skills.end()) return it->second;
  if (auto it = trained_skills_.find(m.value); it != trained_skills_.end()) return it->second;
  return std::nullopt;
}

std::optional<ModelId> MockBackend::base_of(const ModelId& m) const {
  std::lock_guard lock(mu_);
  if (auto it = lineage_.find(m.value); it != lineage_.end()) return ModelId(it->second);
  return std::nullopt;
}

const MockEntry* MockBackend::match_entry(const GenerationRequest& req, int sample) const {
  const auto stage = to_string(req.tag.stage);
  for (const auto& e : script_.entries) {
    if (!wildcard_eq(e.model, req.model.value)) continue;
    if (!wildcard_eq(e.stage, stage)) continue;
    if (!wildcard_eq(e.item, req.tag.item_id)) continue;
    if (e.initial >= 0 && e.initial != req.tag.initial_index) continue;
    if (e.sample >= 0 && e.sample != sample) continue;
    if (e.evaluation_only && !req.tag.evaluation) continue;
    return &e;
  }
  return nullptr;
}

std::string MockBackend::synthesize(const GenerationRequest& req, const MockSkill& skill, int sample) const {
  const std::string& answer = script_.answers.at(req.tag.item_id);
  std::uint64_t h = combine(combine(script_.seed, req.seed), static_cast<std::uint64_t>(sample));
  h = combine(h, req.model.value);
  const double u = unit_interval(h);
  const char* wrong = kWrongAnswers[mix64(h) % kWrongAnswers.size()];

  if (req.tag.stage == Stage::Initial) {
    bool right = u < skill.initial_accuracy;
    return std::string("Step-by-step reasoning: Recalling what is known about the question.\n") +
           script_.marker + " " + (right ? answer : std::string(wrong));
  }

  // The corrector only sees the prompt, so judge the initial answer from it.
  std::string_view prompt = req.prompt;
  constexpr std::string_view kSlot = "Initial Answer:";
  auto pos = prompt.rfind(kSlot);
  bool initial_right = false;
  if (pos != std::string_view::npos) {
    auto slot = prompt.substr(pos + kSlot.size());
    slot = slot.substr(0, slot.find("\nWrite a correction"));
    auto parsed = promptkit::parse_final_answer(slot, script_.marker);
    // Initial text without a marker: score the whole slot.
    if (!parsed) parsed = std::string(slot);
    std::array<std::string, 1> refs{answer};
    initial_right = reward::in_accuracy(parsed, refs).value == 1.0;
  }
  bool right = initial_right ? u < skill.keep_rate : u < skill.fix_rate;
  std::string reasoning = initial_right ? "Step-by-step reasoning: The initial answer holds up on review.\n"
                                        : "Step-by-step reasoning: Re-checking the initial answer against other options.\n";
  return reasoning + script_.marker + " " + (right ? answer : std::string(wrong));
}

std::vector<std::string> MockBackend::generate(const GenerationRequest& req) {
  if (!knows(req.model)) throw UnknownModelError("unknown model '" + req.model.value + "'");
  {
    std::lock_guard lock(mu_);
    const auto stage = to_string(req.tag.stage);
    for (std::size_t i = 0; i < script_.faults.size(); ++i) {
      const auto& f = script_.faults[i];
      if (!wildcard_eq(f.model, req.model.value) || !wildcard_eq(f.stage, stage) ||
          !wildcard_eq(f.item, req.tag.item_id)) {
        continue;
      }
      int& hits = fault_hits_[i];
      if (f.times < 0 || hits < f.times) {
        ++hits;
        throw TransportError("scripted fault " + std::to_string(f.status) + " for item '" + req.tag.item_id + "'",
                             f.status);
      }
    }
  }
  auto skill = skill_of(req.model);
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(req.num_samples));
  for (int k = 0; k < req.num_samples; ++k) {
    if (const auto* e = match_entry(req, k)) {
      out.push_back(e->text);
    } else if (skill && script_.answers.count(req.tag.item_id)) {
      out.push_back(synthesize(req, *skill, k));
    } else if (script_.fallback_text) {
      out.push_back(*script_.fallback_text);
    } else {
      throw ConfigError("mock script has no output for model '" + req.model.value + "', item '" +
                        req.tag.item_id + "'");
    }
  }
  return out;
}

TrainResult MockBackend::train(const TrainRequest& req) {
  if (!knows(req.base_model)) throw UnknownModelError("unknown base model '" + req.base_model.value + "'");
  auto base_skill = skill_of(req.base_model);
  std::lock_guard lock(mu_);
  const int k = train_counter_ + 1;
  if (std::find(script_.failing_train_calls.begin(), script_.failing_train_calls.end(), k) !=
      script_.failing_train_calls.end()) {
    throw TrainingError("mock trainer: job " + std::to_string(k) + " failed (scripted)");
  }
  train_counter_ = k;
  std::string id = req.base_model.value + "+ft" + std::to_string(k);
  while (lineage_.count(id) || script_.skills.count(id)) id += "'";
  lineage_[id] = req.base_model.value;
  if (base_skill) {
    MockSkill s = *base_skill;
    s.initial_accuracy = clamp01(s.initial_accuracy + script_.train_delta.initial_accuracy);
    s.fix_rate = clamp01(s.fix_rate + script_.train_delta.fix_rate);
    s.keep_rate = clamp01(s.keep_rate + script_.train_delta.keep_rate);
    trained_skills_[id] = s;
  }
  return TrainResult{ModelId(id), "mock-job-" + std::to_string(k), 0.0};
}

void MockBackend::adopt_lineage(const std::vector<std::pair<ModelId, ModelId>>& lineage) {
  for (const auto& [produced, base] : lineage) {
    if (knows(produced)) continue;
    auto base_skill = skill_of(base);
    std::lock_guard lock(mu_);
    lineage_[produced.value] = base.value;
    ++train_counter_;
    if (base_skill) {
      MockSkill s = *base_skill;
      s.initial_accuracy = clamp01(s.initial_accuracy + script_.train_delta.initial_accuracy);
      s.fix_rate = clamp01(s.fix_rate + script_.train_delta.fix_rate);
      s.keep_rate = clamp01(s.keep_rate + script_.train_delta.keep_rate);
      trained_skills_[produced.value] = s;
    }
  }
}

}  // namespace stasc::backends
