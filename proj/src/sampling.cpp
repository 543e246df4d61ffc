// SPDX-License-Identifier: Apache-2.0
#include "stasc/sampling.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>

#include "stasc/hashing.hpp"

namespace stasc {

namespace {

const QAItem& find_item(const IterationPlan& plan, const std::string& id) {
  for (const auto& it : plan.items)
    if (it.id == id) return it;
  throw StateIntegrityError("sample refers to unknown item '" + id + "'");
}

backends::GenerationRequest base_request(const SamplingSetup& setup, const ModelId& model, int n) {
  backends::GenerationRequest req;
  req.model = model;
  req.num_samples = n;
  req.temperature = setup.config.sampling.temperature;
  req.top_p = setup.config.sampling.top_p;
  req.max_tokens = setup.config.sampling.max_tokens;
  return req;
}

json opt_string(const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); }

std::optional<std::string> opt_string(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::string>();
}

}  // namespace

std::uint64_t request_seed(std::uint64_t run_seed, const backends::RequestTag& tag) {
  std::uint64_t h = combine(run_seed, static_cast<std::uint64_t>(tag.evaluation ? 1 : 0));
  h = combine(h, static_cast<std::uint64_t>(tag.iteration));
  h = combine(h, backends::to_string(tag.stage));
  h = combine(h, tag.item_id);
  h = combine(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(tag.initial_index)));
  // Servers commonly take signed 32/64-bit seeds; keep it in the positive int63 range.
  return h >> 1;
}

RewardValue score_answer(const SamplingSetup& setup, const QAItem& item, const std::string& raw,
                         const std::optional<std::string>& parsed) {
  if (setup.score_full_text) return setup.reward(std::optional<std::string>(raw), item.references);
  return setup.reward(parsed, item.references);
}

void parallel_for(std::size_t count, std::size_t max_parallel, const std::function<void(std::size_t)>& fn) {
  if (count == 0) return;
  const std::size_t workers = std::clamp<std::size_t>(max_parallel, 1, count);
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

InitialStep sample_initial_answers(const IterationPlan& plan, const SamplingSetup& setup) {
  const int n_init = setup.config.n_init;
  struct Slot {
    std::string prompt;
    std::vector<std::string> outputs;
    bool failed = false;
  };
  std::vector<Slot> slots(plan.items.size());

  parallel_for(plan.items.size(), setup.gateway.max_parallel(), [&](std::size_t i) {
    const QAItem& item = plan.items[i];
    Slot& slot = slots[i];
    slot.prompt = promptkit::render_initial_prompt(setup.initial_template, item);
    auto req = base_request(setup, plan.generator, n_init);
    req.prompt = slot.prompt;
    req.tag = {backends::Stage::Initial, item.id, -1, plan.n, plan.evaluation};
    req.seed = request_seed(setup.run_seed, req.tag);
    try {
      slot.outputs = setup.gateway.generate(req);
    } catch (const ConfigError&) {
      throw;
    } catch (const BackendError&) {
      slot.failed = true;
    }
  });

  InitialStep step;
  std::size_t seq = 0;
  for (std::size_t i = 0; i < plan.items.size(); ++i) {
    const QAItem& item = plan.items[i];
    if (slots[i].failed) {
      step.failed_items.push_back(item.id);
      continue;
    }
    auto sha = sha256_hex(slots[i].prompt);
    step.prompts.emplace(sha, slots[i].prompt);
    for (int j = 0; j < n_init; ++j) {
      InitialRecord r;
      r.seq = seq++;
      r.sample.item_id = item.id;
      r.sample.sample_index = j;
      r.sample.raw_text = slots[i].outputs[static_cast<std::size_t>(j)];
      r.sample.parsed_answer =
          promptkit::parse_final_answer(r.sample.raw_text, setup.initial_template.answer_marker);
      r.sample.producer_model = plan.generator;
      r.reward = score_answer(setup, item, r.sample.raw_text, r.sample.parsed_answer);
      r.prompt_sha = sha;
      step.records.push_back(std::move(r));
    }
  }
  return step;
}

CorrectionStep sample_corrections(const std::vector<InitialRecord>& initials, const IterationPlan& plan,
                                  const SamplingSetup& setup) {
  const int n_corr = setup.config.n_corr;
  // Group initial records by item, preserving order.
  std::vector<std::string> item_order;
  std::map<std::string, std::vector<const InitialRecord*>> by_item;
  std::size_t max_seq = 0;
  for (const auto& r : initials) {
    if (!by_item.count(r.sample.item_id)) item_order.push_back(r.sample.item_id);
    by_item[r.sample.item_id].push_back(&r);
    max_seq = std::max(max_seq, r.seq + 1);
  }

  struct Slot {
    std::vector<std::string> prompts;                // per initial
    std::vector<std::vector<std::string>> outputs;   // per initial
    bool failed = false;
  };
  std::vector<Slot> slots(item_order.size());

  parallel_for(item_order.size(), setup.gateway.max_parallel(), [&](std::size_t i) {
    const QAItem& item = find_item(plan, item_order[i]);
    Slot& slot = slots[i];
    for (const InitialRecord* init : by_item.at(item.id)) {
      std::string prompt;
      try {
        prompt = promptkit::render_correction_prompt(setup.correction_template, item, init->sample, setup.slot);
      } catch (const TemplateError&) {
        // An initial answer with no text cannot be corrected.
        if (!init->sample.raw_text.empty()) throw;
        slot.failed = true;
        return;
      }
      auto req = base_request(setup, plan.corrector, n_corr);
      req.prompt = prompt;
      req.tag = {backends::Stage::Correction, item.id, init->sample.sample_index, plan.n, plan.evaluation};
      req.seed = request_seed(setup.run_seed, req.tag);
      try {
        slot.outputs.push_back(setup.gateway.generate(req));
      } catch (const ConfigError&) {
        throw;
      } catch (const BackendError&) {
        slot.failed = true;
        return;
      }
      slot.prompts.push_back(std::move(prompt));
    }
  });

  CorrectionStep step;
  std::size_t seq = max_seq;
  for (std::size_t i = 0; i < item_order.size(); ++i) {
    const QAItem& item = find_item(plan, item_order[i]);
    if (slots[i].failed) {
      step.failed_items.push_back(item.id);
      continue;
    }
    const auto& inits = by_item.at(item.id);
    for (std::size_t j = 0; j < inits.size(); ++j) {
      auto sha = sha256_hex(slots[i].prompts[j]);
      for (int k = 0; k < n_corr; ++k) {
        CorrectionRecord r;
        r.seq = seq++;
        r.sample.item_id = item.id;
        r.sample.initial_index = inits[j]->sample.sample_index;
        r.sample.correction_index = k;
        r.sample.raw_text = slots[i].outputs[j][static_cast<std::size_t>(k)];
        r.sample.parsed_answer =
            promptkit::parse_final_answer(r.sample.raw_text, setup.correction_template.answer_marker);
        r.sample.producer_model = plan.corrector;
        r.reward = score_answer(setup, item, r.sample.raw_text, r.sample.parsed_answer);
        r.prompt_sha = sha;
        r.prompt = slots[i].prompts[j];
        step.records.push_back(std::move(r));
      }
    }
  }
  return step;
}

json to_json(const InitialRecord& r) {
  return json{{"seq", r.seq},
              {"item_id", r.sample.item_id},
              {"sample_index", r.sample.sample_index},
              {"producer_model", r.sample.producer_model.value},
              {"prompt_sha256", r.prompt_sha},
              {"raw_text", r.sample.raw_text},
              {"parsed_answer", opt_string(r.sample.parsed_answer)},
              {"reward", r.reward.value}};
}

InitialRecord initial_record_from_json(const json& j) {
  InitialRecord r;
  r.seq = j.at("seq").get<std::size_t>();
  r.sample.item_id = j.at("item_id").get<std::string>();
  r.sample.sample_index = j.at("sample_index").get<int>();
  r.sample.producer_model = ModelId(j.at("producer_model").get<std::string>());
  r.prompt_sha = j.at("prompt_sha256").get<std::string>();
  r.sample.raw_text = j.at("raw_text").get<std::string>();
  r.sample.parsed_answer = opt_string(j.at("parsed_answer"));
  r.reward.value = j.at("reward").get<double>();
  return r;
}

json to_json(const CorrectionRecord& r) {
  return json{{"seq", r.seq},
              {"item_id", r.sample.item_id},
              {"initial_index", r.sample.initial_index},
              {"correction_index", r.sample.correction_index},
              {"producer_model", r.sample.producer_model.value},
              {"prompt_sha256", r.prompt_sha},
              {"raw_text", r.sample.raw_text},
              {"parsed_answer", opt_string(r.sample.parsed_answer)},
              {"reward", r.reward.value}};
}

CorrectionRecord correction_record_from_json(const json& j) {
  CorrectionRecord r;
  r.seq = j.at("seq").get<std::size_t>();
  r.sample.item_id = j.at("item_id").get<std::string>();
  r.sample.initial_index = j.at("initial_index").get<int>();
  r.sample.correction_index = j.at("correction_index").get<int>();
  r.sample.producer_model = ModelId(j.at("producer_model").get<std::string>());
  r.prompt_sha = j.at("prompt_sha256").get<std::string>();
  r.sample.raw_text = j.at("raw_text").get<std::string>();
  r.sample.parsed_answer = opt_string(j.at("parsed_answer"));
  r.reward.value = j.at("reward").get<double>();
  return r;
}

}  // namespace stasc
