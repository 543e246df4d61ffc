// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "stasc/core.hpp"

namespace stasc::backends {

enum class Stage { Initial, Correction };

std::string to_string(Stage s);
Stage parse_stage(std::string_view s);

/// Audit metadata carried alongside a request. Travels as X-Stasc-* headers
/// over HTTP so OpenAI-compatible servers can ignore it.
struct RequestTag {
  Stage stage = Stage::Initial;
  std::string item_id;
  int initial_index = -1;  // corrections only
  int iteration = 0;
  bool evaluation = false;
};

struct GenerationRequest {
  ModelId model;
  std::string prompt;
  int num_samples = 1;
  double temperature = 1.0;
  double top_p = 1.0;
  int max_tokens = 512;
  std::uint64_t seed = 0;
  RequestTag tag;
};

struct TrainRequest {
  ModelId base_model;
  std::filesystem::path dataset_path;  // JSON Lines of {context, target, loss_on}
  std::size_t num_records = 0;
  TrainerHyperparams hyperparams;
};

struct TrainResult {
  ModelId model;
  std::string job_id;
  double wall_seconds = 0.0;
};

class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;
  /// Exactly num_samples completions in sample-index order.
  virtual std::vector<std::string> generate(const GenerationRequest& req) = 0;
  /// Cheap reachability check. Throws BackendError.
  virtual void ping() = 0;
};

class TrainerBackend {
 public:
  virtual ~TrainerBackend() = default;
  /// Blocks until the job finishes. Throws TrainingError on a failed job.
  virtual TrainResult train(const TrainRequest& req) = 0;
  virtual void ping() = 0;
  /// Informs the trainer of models produced before a resume, as
  /// (produced, base) pairs in production order.
  virtual void adopt_lineage(const std::vector<std::pair<ModelId, ModelId>>& lineage) { (void)lineage; }
};

// --- audit ---------------------------------------------------------------------

struct GenerateCall {
  ModelId model;
  RequestTag tag;
  int num_samples = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;
};

struct TrainCall {
  ModelId base_model;
  ModelId produced;
  std::size_t num_records = 0;
  std::string job_id;
  double wall_seconds = 0.0;
};

struct RetryEvent {
  ModelId model;
  RequestTag tag;
  int attempt = 0;  // 1-based attempt that failed
  std::string reason;
};

/// Thread-safe in-memory record of backend traffic, optionally mirrored to a
/// JSON Lines file.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(std::filesystem::path file);

  void record(const GenerateCall& c);
  void record(const TrainCall& c);
  void record(const RetryEvent& e);

  std::vector<GenerateCall> generate_calls() const;
  std::vector<TrainCall> train_calls() const;
  std::vector<RetryEvent> retries() const;

 private:
  void append_line(const json& j);

  mutable std::mutex mu_;
  std::optional<std::filesystem::path> file_;
  std::vector<GenerateCall> generates_;
  std::vector<TrainCall> trains_;
  std::vector<RetryEvent> retries_;
};

// --- retry + bounded parallelism ------------------------------------------------

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{10000};

  std::chrono::milliseconds backoff_for(int failed_attempt) const;
};

class Semaphore {
 public:
  explicit Semaphore(std::size_t permits) : permits_(permits == 0 ? 1 : permits) {}
  void acquire();
  void release();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t permits_;
};

/// Front door used by the loop and eval: bounded concurrency, retries with
/// exponential backoff on TransportError, and auditing.
class GenerationGateway {
 public:
  GenerationGateway(GenerationBackend& backend, RetryPolicy policy, std::size_t max_parallel,
                    AuditLog* audit = nullptr);

  /// Throws BackendError once retries are exhausted; UnknownModelError is
  /// never retried.
  std::vector<std::string> generate(const GenerationRequest& req);
  void ping() { backend_.ping(); }
  std::size_t max_parallel() const noexcept { return max_parallel_; }

 private:
  GenerationBackend& backend_;
  RetryPolicy policy_;
  std::size_t max_parallel_;
  Semaphore slots_;
  AuditLog* audit_;
};

/// At most one training job in flight.
class TrainerGateway {
 public:
  TrainerGateway(TrainerBackend& backend, AuditLog* audit = nullptr) : backend_(backend), audit_(audit) {}

  /// Throws ConfigError on an empty dataset, TrainingError on failure.
  TrainResult train(const TrainRequest& req);
  void ping() { backend_.ping(); }
  void adopt_lineage(const std::vector<std::pair<ModelId, ModelId>>& lineage) {
    backend_.adopt_lineage(lineage);
  }

 private:
  TrainerBackend& backend_;
  AuditLog* audit_;
  std::mutex mu_;
};

// --- deterministic mock --------------------------------------------------------

/// Probabilities the mock uses to synthesize answers for a model.
struct MockSkill {
  double initial_accuracy = 0.5;  // P(initial answer correct)
  double fix_rate = 0.5;          // P(correction right | initial wrong)
  double keep_rate = 1.0;         // P(correction right | initial right)
};

/// A scripted output. "*" / -1 are wildcards; the first matching entry wins.
struct MockEntry {
  std::string model = "*";
  std::string stage = "*";
  std::string item = "*";
  int initial = -1;
  int sample = -1;
  bool evaluation_only = false;
  std::string text;
};

/// Transport fault: the first `times` matching calls fail with `status`
/// (-1 = every call).
struct MockFault {
  std::string model = "*";
  std::string stage = "*";
  std::string item = "*";
  int times = -1;
  int status = 503;
};

struct MockScript {
  std::map<std::string, MockSkill> skills;  // model id -> skill
  MockSkill train_delta{0.0, 0.0, 0.0};    // added to the base skill on each train
  std::map<std::string, std::string> answers;  // item id -> correct answer text
  std::vector<MockEntry> entries;
  std::vector<MockFault> faults;
  std::vector<int> failing_train_calls;  // 1-based fine-tune counters that fail
  std::optional<std::string> fallback_text;
  std::string marker = "Final Answer:";
  std::uint64_t seed = 0;

  static MockScript from_json(const json& j);
  static MockScript load(const std::filesystem::path& path);
  json to_json() const;

  /// Fills answers for items not already present, using the first reference.
  void add_answer_key(const std::vector<QAItem>& items);
};

/// Table-driven generation and trainer backend. Train of base B returns
/// B + "+ft<k>" for the k-th fine-tune of the run.
class MockBackend : public GenerationBackend, public TrainerBackend {
 public:
  explicit MockBackend(MockScript script);

  std::vector<std::string> generate(const GenerationRequest& req) override;
  void ping() override {}
  TrainResult train(const TrainRequest& req) override;
  void adopt_lineage(const std::vector<std::pair<ModelId, ModelId>>& lineage) override;

  bool knows(const ModelId& m) const;
  std::vector<ModelId> known_models() const;
  std::optional<MockSkill> skill_of(const ModelId& m) const;
  std::optional<ModelId> base_of(const ModelId& m) const;

  const MockScript& script() const noexcept { return script_; }

 private:
  std::string synthesize(const GenerationRequest& req, const MockSkill& skill, int sample) const;
  const MockEntry* match_entry(const GenerationRequest& req, int sample) const;

  MockScript script_;
  mutable std::mutex mu_;
  std::map<std::string, MockSkill> trained_skills_;
  std::map<std::string, std::string> lineage_;  // child -> base
  std::map<std::size_t, int> fault_hits_;
  int train_counter_ = 0;
};

// --- HTTP clients ----------------------------------------------------------------

struct HttpEndpoint {
  std::string base_url;  // e.g. http://127.0.0.1:8000 (optional path prefix)
  std::string token;     // bearer token; empty for none
  std::chrono::milliseconds timeout{120000};
};

/// OpenAI-compatible chat-completions client (one user message, n samples).
class HttpGenerationBackend : public GenerationBackend {
 public:
  explicit HttpGenerationBackend(HttpEndpoint endpoint, bool batch_n = true);

  std::vector<std::string> generate(const GenerationRequest& req) override;
  void ping() override;
  bool batching() const noexcept { return batch_n_.load(); }

 private:
  std::vector<std::string> request(const GenerationRequest& req, int n, std::uint64_t seed);

  HttpEndpoint endpoint_;
  std::atomic<bool> batch_n_;
};

/// Job API: POST /jobs, GET /jobs/{id} -> running | succeeded | failed.
class HttpTrainerBackend : public TrainerBackend {
 public:
  HttpTrainerBackend(HttpEndpoint endpoint,
                     std::chrono::milliseconds poll_interval = std::chrono::milliseconds(1000),
                     std::chrono::milliseconds job_timeout = std::chrono::hours(24));

  TrainResult train(const TrainRequest& req) override;
  void ping() override;

 private:
  HttpEndpoint endpoint_;
  std::chrono::milliseconds poll_interval_;
  std::chrono::milliseconds job_timeout_;
};

/// Runs `command <job-spec.json>`; the command writes the result file named in
/// the job spec: {"status": "succeeded"|"failed", "model_id": ..., "reason": ...}.
class SubprocessTrainerBackend : public TrainerBackend {
 public:
  SubprocessTrainerBackend(std::string command, std::filesystem::path work_dir);

  TrainResult train(const TrainRequest& req) override;
  void ping() override {}

 private:
  std::string command_;
  std::filesystem::path work_dir_;
  int jobs_ = 0;
  std::mutex mu_;
};

/// JSON body of a job submission, shared by the HTTP client and server.
json train_request_to_json(const TrainRequest& req, bool inline_records);

// --- HTTP server ---------------------------------------------------------------

struct ServerOptions {
  bool reject_batch_n = false;  // answer n>1 with 400
  int running_polls = 0;        // report "running" this many times per job
};

/// Serves the generation and trainer wire contracts over HTTP on top of any
/// backend pair. `mock-serve` uses it with MockBackend.
class BackendServer {
 public:
  BackendServer(GenerationBackend& gen, TrainerBackend& trainer, ServerOptions options = {});
  ~BackendServer();
  BackendServer(const BackendServer&) = delete;
  BackendServer& operator=(const BackendServer&) = delete;

  /// Binds to host:port (0 = any free port) and serves on a background
  /// thread. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

  std::size_t requests_served() const noexcept { return requests_.load(); }
  std::string url() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::atomic<std::size_t> requests_{0};
};

}  // namespace stasc::backends
