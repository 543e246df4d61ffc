// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <chrono>
#include <fstream>
#include <thread>

#include "stasc/backends.hpp"

namespace stasc::backends {

std::string to_string(Stage s) { return s == Stage::Initial ? "initial" : "correction"; }

Stage parse_stage(std::string_view s) {
  if (s == "initial") return Stage::Initial;
  if (s == "correction") return Stage::Correction;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

namespace {

json tag_json(const RequestTag& t) {
  return json{{"stage", to_string(t.stage)},
              {"item_id", t.item_id},
              {"initial_index", t.initial_index},
              {"iteration", t.iteration},
              {"evaluation", t.evaluation}};
}

}  // namespace

AuditLog::AuditLog(std::filesystem::path file) : file_(std::move(file)) {
  if (file_->has_parent_path()) std::filesystem::create_directories(file_->parent_path());
}

void AuditLog::append_line(const json& j) {
  if (!file_) return;
  std::ofstream out(*file_, std::ios::app);
  out << j.dump() << '\n';
}

void AuditLog::record(const GenerateCall& c) {
  std::lock_guard lock(mu_);
  generates_.push_back(c);
  append_line(json{{"event", "generate"},
                   {"model", c.model.value},
                   {"tag", tag_json(c.tag)},
                   {"n", c.num_samples},
                   {"seed", c.seed},
                   {"outputs", c.outputs}});
}

void AuditLog::record(const TrainCall& c) {
  std::lock_guard lock(mu_);
  trains_.push_back(c);
  append_line(json{{"event", "train"},
                   {"base_model", c.base_model.value},
                   {"produced", c.produced.value},
                   {"records", c.num_records},
                   {"job_id", c.job_id},
                   {"wall_seconds", c.wall_seconds}});
}

void AuditLog::record(const RetryEvent& e) {
  std::lock_guard lock(mu_);
  retries_.push_back(e);
  append_line(json{{"event", "retry"},
                   {"model", e.model.value},
                   {"tag", tag_json(e.tag)},
                   {"attempt", e.attempt},
                   {"reason", e.reason}});
}

std::vector<GenerateCall> AuditLog::generate_calls() const {
  std::lock_guard lock(mu_);
  return generates_;
}

std::vector<TrainCall> AuditLog::train_calls() const {
  std::lock_guard lock(mu_);
  return trains_;
}

std::vector<RetryEvent> AuditLog::retries() const {
  std::lock_guard lock(mu_);
  return retries_;
}

std::chrono::milliseconds RetryPolicy::backoff_for(int failed_attempt) const {
  double ms = static_cast<double>(initial_backoff.count());
  for (int i = 1; i < failed_attempt; ++i) ms *= multiplier;
  ms = std::min(ms, static_cast<double>(max_backoff.count()));
  return std::chrono::milliseconds(static_cast<long long>(ms));
}

void Semaphore::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [this] { return permits_ > 0; });
  --permits_;
}

void Semaphore::release() {
  {
    std::lock_guard lock(mu_);
    ++permits_;
  }
  cv_.notify_one();
}

GenerationGateway::GenerationGateway(GenerationBackend& backend, RetryPolicy policy,
                                     std::size_t max_parallel, AuditLog* audit)
    : backend_(backend),
      policy_(policy),
      max_parallel_(std::max<std::size_t>(1, max_parallel)),
      slots_(max_parallel_),
      audit_(audit) {}

std::vector<std::string> GenerationGateway::generate(const GenerationRequest& req) {
  if (req.num_samples < 1) throw ConfigError("num_samples must be ≥ 1");
  const int attempts = std::max(1, policy_.max_attempts);
  for (int attempt = 1;; ++attempt) {
    std::optional<std::string> failure;
    slots_.acquire();
    try {
      auto out = backend_.generate(req);
      slots_.release();
      if (static_cast<int>(out.size()) != req.num_samples) {
        throw BackendError("backend returned " + std::to_string(out.size()) + " completions, expected " +
                           std::to_string(req.num_samples));
      }
      if (audit_) audit_->record(GenerateCall{req.model, req.tag, req.num_samples, req.seed, out});
      return out;
    } catch (const TransportError& e) {
      slots_.release();
      failure = e.what();
    } catch (...) {
      slots_.release();
      throw;
    }
    if (audit_) audit_->record(RetryEvent{req.model, req.tag, attempt, *failure});
    if (attempt >= attempts) {
      throw BackendError("generation for item '" + req.tag.item_id + "' failed after " +
                         std::to_string(attempts) + " attempts: " + *failure);
    }
    std::this_thread::sleep_for(policy_.backoff_for(attempt));
  }
}

TrainResult TrainerGateway::train(const TrainRequest& req) {
  if (req.num_records == 0) throw ConfigError("refusing to train on an empty dataset");
  std::lock_guard lock(mu_);
  auto start = std::chrono::steady_clock::now();
  TrainResult result = backend_.train(req);
  if (result.wall_seconds == 0.0) {
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  if (result.model.empty()) throw TrainingError("trainer returned an empty model id");
  if (audit_) {
    audit_->record(TrainCall{req.base_model, result.model, req.num_records, result.job_id, result.wall_seconds});
  }
  return result;
}

}  // namespace stasc::backends
