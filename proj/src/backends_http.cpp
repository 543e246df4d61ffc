// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "stasc/backends.hpp"

namespace stasc::backends {

namespace {

struct ParsedUrl {
  std::string origin;  // scheme://host:port
  std::string prefix;  // path prefix without trailing slash
};

ParsedUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint '" + url + "' must start with http://");
  auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl p;
  p.origin = url.substr(0, path_start);
  if (path_start != std::string::npos) {
    p.prefix = url.substr(path_start);
    while (!p.prefix.empty() && p.prefix.back() == '/') p.prefix.pop_back();
  }
  return p;
}

httplib::Client make_client(const HttpEndpoint& ep) {
  httplib::Client cli(split_url(ep.base_url).origin);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(ep.timeout).count();
  cli.set_connection_timeout(std::max<long long>(1, std::min<long long>(secs, 30)), 0);
  cli.set_read_timeout(secs, 0);
  cli.set_write_timeout(secs, 0);
  if (!ep.token.empty()) cli.set_bearer_token_auth(ep.token);
  return cli;
}

struct BatchRejected {};

bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

std::string error_message(const httplib::Result& res) {
  if (!res) return "transport error: " + httplib::to_string(res.error());
  std::string body = res->body.size() > 300 ? res->body.substr(0, 300) + "..." : res->body;
  return "HTTP " + std::to_string(res->status) + ": " + body;
}

httplib::Headers tag_headers(const RequestTag& tag) {
  return {{"X-Stasc-Stage", to_string(tag.stage)},
          {"X-Stasc-Item", tag.item_id},
          {"X-Stasc-Initial", std::to_string(tag.initial_index)},
          {"X-Stasc-Iteration", std::to_string(tag.iteration)},
          {"X-Stasc-Eval", tag.evaluation ? "1" : "0"}};
}

}  // namespace

// --- generation client ------------------------------------------------------------

HttpGenerationBackend::HttpGenerationBackend(HttpEndpoint endpoint, bool batch_n)
    : endpoint_(std::move(endpoint)), batch_n_(batch_n) {
  split_url(endpoint_.base_url);
}

std::vector<std::string> HttpGenerationBackend::request(const GenerationRequest& req, int n, std::uint64_t seed) {
  json body{{"model", req.model.value},
            {"messages", json::array({json{{"role", "user"}, {"content", req.prompt}}})},
            {"n", n},
            {"temperature", req.temperature},
            {"top_p", req.top_p},
            {"max_tokens", req.max_tokens},
            {"seed", seed}};
  auto cli = make_client(endpoint_);
  auto path = split_url(endpoint_.base_url).prefix + "/v1/chat/completions";
  auto res = cli.Post(path, tag_headers(req.tag), body.dump(), "application/json");
  if (!res) throw TransportError(error_message(res));
  if (retryable_status(res->status)) throw TransportError(error_message(res), res->status);
  if (res->status == 404) throw UnknownModelError("unknown model '" + req.model.value + "' (" + error_message(res) + ")");
  if (res->status == 400 && n > 1) {
    // Caller falls back to one request per sample.
    throw BatchRejected{};
  }
  if (res->status != 200) throw BackendError(error_message(res));
  std::vector<std::string> out;
  try {
    auto j = json::parse(res->body);
    for (const auto& choice : j.at("choices")) {
      out.push_back(choice.at("message").at("content").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw BackendError(std::string("malformed chat-completions response: ") + e.what());
  }
  return out;
}

std::vector<std::string> HttpGenerationBackend::generate(const GenerationRequest& req) {
  std::vector<std::string> out;
  if (req.num_samples > 1 && batch_n_.load()) {
    try {
      out = request(req, req.num_samples, req.seed);
    } catch (const BatchRejected&) {
      batch_n_.store(false);
    }
  }
  // Servers that reject or ignore n: top up one sample at a time.
  while (static_cast<int>(out.size()) < req.num_samples) {
    auto k = static_cast<std::uint64_t>(out.size());
    auto one = request(req, 1, req.num_samples == 1 ? req.seed : req.seed + k);
    if (one.empty()) throw BackendError("chat-completions response has no choices");
    out.push_back(std::move(one.front()));
  }
  out.resize(static_cast<std::size_t>(req.num_samples));
  return out;
}

void HttpGenerationBackend::ping() {
  auto cli = make_client(endpoint_);
  auto res = cli.Get(split_url(endpoint_.base_url).prefix + "/v1/models");
  if (!res || res->status != 200) {
    throw BackendError("generation endpoint " + endpoint_.base_url + " unreachable: " + error_message(res));
  }
}

// --- trainer client -------------------------------------------------------------

json train_request_to_json(const TrainRequest& req, bool inline_records) {
  json j{{"base_model", req.base_model.value},
         {"dataset_path", req.dataset_path.string()},
         {"num_records", req.num_records},
         {"hyperparams",
          {{"epochs", req.hyperparams.epochs},
           {"batch_size", req.hyperparams.batch_size},
           {"learning_rate", req.hyperparams.learning_rate},
           {"weight_decay", req.hyperparams.weight_decay},
           {"schedule", req.hyperparams.schedule}}}};
  if (inline_records) {
    json records = json::array();
    std::ifstream in(req.dataset_path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) records.push_back(json::parse(line));
    }
    j["records"] = std::move(records);
  }
  return j;
}

HttpTrainerBackend::HttpTrainerBackend(HttpEndpoint endpoint, std::chrono::milliseconds poll_interval,
                                       std::chrono::milliseconds job_timeout)
    : endpoint_(std::move(endpoint)), poll_interval_(poll_interval), job_timeout_(job_timeout) {
  split_url(endpoint_.base_url);
}

TrainResult HttpTrainerBackend::train(const TrainRequest& req) {
  auto start = std::chrono::steady_clock::now();
  auto cli = make_client(endpoint_);
  const auto prefix = split_url(endpoint_.base_url).prefix;
  auto res = cli.Post(prefix + "/jobs", train_request_to_json(req, true).dump(), "application/json");
  if (!res || (res->status != 200 && res->status != 201 && res->status != 202)) {
    throw TrainingError("job submission failed: " + error_message(res));
  }
  std::string job_id;
  try {
    job_id = json::parse(res->body).at("job_id").get<std::string>();
  } catch (const json::exception& e) {
    throw TrainingError(std::string("malformed job submission response: ") + e.what());
  }

  int transient_failures = 0;
  for (;;) {
    auto poll = cli.Get(prefix + "/jobs/" + job_id);
    if (!poll || retryable_status(poll->status)) {
      // Polling is idempotent; tolerate a few blips.
      if (++transient_failures > 5) throw TrainingError("lost contact with trainer: " + error_message(poll));
    } else if (poll->status != 200) {
      throw TrainingError("job " + job_id + " status query failed: " + error_message(poll));
    } else {
      transient_failures = 0;
      json st;
      try {
        st = json::parse(poll->body);
      } catch (const json::exception& e) {
        throw TrainingError("malformed job status for " + job_id);
      }
      auto status = st.value("status", std::string());
      if (status == "succeeded") {
        auto model = st.value("model_id", std::string());
        if (model.empty()) throw TrainingError("job " + job_id + " succeeded without a model id");
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return TrainResult{ModelId(model), job_id, secs};
      }
      if (status == "failed") {
        throw TrainingError("job " + job_id + " failed: " + st.value("reason", std::string("unknown")));
      }
      if (status != "running" && status != "queued") {
        throw TrainingError("job " + job_id + " reported unknown status '" + status + "'");
      }
    }
    if (std::chrono::steady_clock::now() - start > job_timeout_) {
      throw TrainingError("job " + job_id + " timed out");
    }
    std::this_thread::sleep_for(poll_interval_);
  }
}

void HttpTrainerBackend::ping() {
  auto cli = make_client(endpoint_);
  auto res = cli.Get(split_url(endpoint_.base_url).prefix + "/health");
  if (!res || res->status != 200) {
    throw BackendError("trainer endpoint " + endpoint_.base_url + " unreachable: " + error_message(res));
  }
}

// --- server -------------------------------------------------------------------

struct BackendServer::Impl {
  GenerationBackend& gen;
  TrainerBackend& trainer;
  ServerOptions options;
  httplib::Server server;
  std::thread thread;
  std::string host;
  int port = 0;

  std::mutex jobs_mu;
  std::mutex train_mu;
  struct Job {
    json status;
    int polls = 0;
  };
  std::map<std::string, Job> jobs;
  int next_job = 1;

  Impl(GenerationBackend& g, TrainerBackend& t, ServerOptions o) : gen(g), trainer(t), options(o) {}
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& type, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", {{"message", message}, {"type", type}}}}.dump(), "application/json");
}

std::string header_or(const httplib::Request& req, const char* key, const std::string& fallback) {
  return req.has_header(key) ? req.get_header_value(key) : fallback;
}

}  // namespace

BackendServer::BackendServer(GenerationBackend& gen, TrainerBackend& trainer, ServerOptions options)
    : impl_(std::make_unique<Impl>(gen, trainer, options)) {
  auto& svr = impl_->server;
  Impl* impl = impl_.get();
  auto* counter = &requests_;

  svr.Get("/health", [counter](const httplib::Request&, httplib::Response& res) {
    ++*counter;
    res.set_content(R"({"status":"ok"})", "application/json");
  });

  svr.Get("/v1/models", [counter](const httplib::Request&, httplib::Response& res) {
    ++*counter;
    res.set_content(R"({"object":"list","data":[]})", "application/json");
  });

  svr.Post("/v1/chat/completions", [impl, counter](const httplib::Request& req, httplib::Response& res) {
    ++*counter;
    GenerationRequest g;
    try {
      auto body = json::parse(req.body);
      g.model = ModelId(body.at("model").get<std::string>());
      const auto& messages = body.at("messages");
      if (!messages.is_array() || messages.empty()) throw std::invalid_argument("messages must be nonempty");
      g.prompt = messages.back().at("content").get<std::string>();
      g.num_samples = body.value("n", 1);
      g.temperature = body.value("temperature", 1.0);
      g.top_p = body.value("top_p", 1.0);
      g.max_tokens = body.value("max_tokens", 512);
      g.seed = body.value("seed", std::uint64_t{0});
      g.tag.stage = parse_stage(header_or(req, "X-Stasc-Stage", "initial"));
      g.tag.item_id = header_or(req, "X-Stasc-Item", "");
      g.tag.initial_index = std::stoi(header_or(req, "X-Stasc-Initial", "-1"));
      g.tag.iteration = std::stoi(header_or(req, "X-Stasc-Iteration", "0"));
      g.tag.evaluation = header_or(req, "X-Stasc-Eval", "0") == "1";
    } catch (const std::exception& e) {
      send_error(res, 400, "invalid_request_error", e.what());
      return;
    }
    if (g.num_samples < 1) {
      send_error(res, 400, "invalid_request_error", "n must be ≥ 1");
      return;
    }
    if (g.num_samples > 1 && impl->options.reject_batch_n) {
      send_error(res, 400, "invalid_request_error", "n > 1 is not supported");
      return;
    }
    try {
      auto outputs = impl->gen.generate(g);
      json choices = json::array();
      for (std::size_t i = 0; i < outputs.size(); ++i) {
        choices.push_back(json{{"index", i},
                               {"message", {{"role", "assistant"}, {"content", outputs[i]}}},
                               {"finish_reason", "stop"}});
      }
      res.set_content(json{{"object", "chat.completion"}, {"model", g.model.value}, {"choices", choices}}.dump(),
                      "application/json");
    } catch (const UnknownModelError& e) {
      send_error(res, 404, "model_not_found", e.what());
    } catch (const TransportError& e) {
      send_error(res, e.status() > 0 ? e.status() : 503, "server_error", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "server_error", e.what());
    }
  });

  svr.Post("/jobs", [impl, counter](const httplib::Request& req, httplib::Response& res) {
    ++*counter;
    TrainRequest t;
    try {
      auto body = json::parse(req.body);
      t.base_model = ModelId(body.at("base_model").get<std::string>());
      t.dataset_path = body.value("dataset_path", std::string());
      t.num_records = body.contains("records") ? body.at("records").size() : body.value("num_records", std::size_t{0});
      if (body.contains("hyperparams")) {
        const auto& h = body.at("hyperparams");
        t.hyperparams.epochs = h.value("epochs", t.hyperparams.epochs);
        t.hyperparams.batch_size = h.value("batch_size", t.hyperparams.batch_size);
        t.hyperparams.learning_rate = h.value("learning_rate", t.hyperparams.learning_rate);
        t.hyperparams.weight_decay = h.value("weight_decay", t.hyperparams.weight_decay);
        t.hyperparams.schedule = h.value("schedule", t.hyperparams.schedule);
      }
    } catch (const std::exception& e) {
      send_error(res, 400, "invalid_request_error", e.what());
      return;
    }
    json status;
    {
      std::lock_guard lock(impl->train_mu);
      try {
        auto result = impl->trainer.train(t);
        status = json{{"status", "succeeded"}, {"model_id", result.model.value}};
      } catch (const std::exception& e) {
        status = json{{"status", "failed"}, {"reason", e.what()}};
      }
    }
    std::string id;
    {
      std::lock_guard lock(impl->jobs_mu);
      id = "job-" + std::to_string(impl->next_job++);
      status["job_id"] = id;
      impl->jobs[id] = Impl::Job{status, 0};
    }
    res.status = 202;
    res.set_content(json{{"job_id", id}}.dump(), "application/json");
  });

  svr.Get(R"(/jobs/([^/]+))", [impl, counter](const httplib::Request& req, httplib::Response& res) {
    ++*counter;
    std::lock_guard lock(impl->jobs_mu);
    auto it = impl->jobs.find(req.matches[1].str());
    if (it == impl->jobs.end()) {
      send_error(res, 404, "not_found", "unknown job");
      return;
    }
    auto& job = it->second;
    if (job.polls++ < impl->options.running_polls) {
      res.set_content(json{{"job_id", it->first}, {"status", "running"}}.dump(), "application/json");
      return;
    }
    res.set_content(job.status.dump(), "application/json");
  });
}

BackendServer::~BackendServer() { stop(); }

int BackendServer::start(const std::string& host, int port) {
  impl_->host = host;
  if (port == 0) {
    impl_->port = impl_->server.bind_to_any_port(host);
  } else {
    if (!impl_->server.bind_to_port(host, port)) throw BackendError("cannot bind " + host + ":" + std::to_string(port));
    impl_->port = port;
  }
  if (impl_->port <= 0) throw BackendError("cannot bind " + host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void BackendServer::listen(const std::string& host, int port) {
  impl_->host = host;
  impl_->port = port;
  if (!impl_->server.listen(host, port)) throw BackendError("cannot listen on " + host + ":" + std::to_string(port));
}

void BackendServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::string BackendServer::url() const { return "http://" + impl_->host + ":" + std::to_string(impl_->port); }

}  // namespace stasc::backends
