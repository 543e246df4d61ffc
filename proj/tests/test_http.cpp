// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>

#include "stasc/backends.hpp"
#include "stasc/promptkit.hpp"
#include "support.hpp"

using namespace stasc;
using namespace stasc::backends;
using stasc::testing::MockStack;
using stasc::testing::TempDir;

namespace {

MockScript script() {
  MockScript s = stasc::testing::skill_script(0.5, 0.5, 1.0);
  s.answers["q1"] = "Paris";
  s.answers["q2"] = "Nile";
  return s;
}

GenerationRequest request(const std::string& model, const std::string& item, int n) {
  GenerationRequest r;
  r.model = ModelId(model);
  r.prompt = "Question: " + item;
  r.num_samples = n;
  r.seed = 3;
  r.tag = {Stage::Initial, item, -1, 1, false};
  return r;
}

HttpEndpoint endpoint(const BackendServer& server) {
  return HttpEndpoint{server.url(), "", std::chrono::milliseconds(5000)};
}

RetryPolicy fast() { return MockStack::fast_retry(); }

// Wire-contract checks every generation backend must pass, in process or
// over HTTP.
void check_generation_contract(GenerationBackend& backend) {
  CHECK_NOTHROW(backend.ping());
  auto three = backend.generate(request("M0", "q1", 3));
  CHECK(three.size() == 3);
  auto one = backend.generate(request("M0", "q2", 1));
  CHECK(one.size() == 1);
  CHECK(backend.generate(request("M0", "q2", 1)) == one);
  CHECK_THROWS_AS(backend.generate(request("ghost", "q1", 1)), UnknownModelError);
}

void check_trainer_contract(TrainerBackend& trainer, const std::filesystem::path& dataset) {
  CHECK_NOTHROW(trainer.ping());
  TrainRequest req;
  req.base_model = ModelId("M0");
  req.dataset_path = dataset;
  req.num_records = 1;
  auto a = trainer.train(req);
  CHECK_FALSE(a.model.empty());
  CHECK(a.model.value != "M0");
  auto b = trainer.train(req);
  CHECK(b.model != a.model);
}

std::filesystem::path one_record(const TempDir& dir) {
  auto path = dir / "finetune.jsonl";
  write_file_atomic(path, R"({"context":"c","loss_on":"target","target":"t"})" "\n");
  return path;
}

}  // namespace

TEST_CASE("conformance: in-process mock") {
  TempDir dir;
  MockBackend mock(script());
  check_generation_contract(mock);
  MockBackend trainer(script());
  check_trainer_contract(trainer, one_record(dir));
}

TEST_CASE("conformance: mock over HTTP") {
  TempDir dir;
  MockBackend mock(script());
  BackendServer server(mock, mock);
  server.start();
  HttpGenerationBackend gen(endpoint(server));
  check_generation_contract(gen);
  HttpTrainerBackend trainer(endpoint(server), std::chrono::milliseconds(1));
  check_trainer_contract(trainer, one_record(dir));
}

TEST_CASE("HTTP outputs equal in-process outputs when batching") {
  MockBackend direct(script());
  MockBackend served(script());
  BackendServer server(served, served);
  server.start();
  HttpGenerationBackend gen(endpoint(server));
  auto req = request("M0", "q1", 4);
  CHECK(gen.generate(req) == direct.generate(req));
}

TEST_CASE("request metadata travels in headers") {
  auto s = script();
  s.entries.push_back(MockEntry{"M0", "correction", "q2", 1, -1, true, "scripted by metadata"});
  MockBackend mock(s);
  BackendServer server(mock, mock);
  server.start();
  HttpGenerationBackend gen(endpoint(server));
  auto req = request("M0", "q2", 2);
  req.tag = {Stage::Correction, "q2", 1, 2, true};
  auto out = gen.generate(req);
  CHECK(out == std::vector<std::string>{"scripted by metadata", "scripted by metadata"});
}

TEST_CASE("429 twice then success through the gateway") {
  auto s = script();
  s.faults.push_back(MockFault{"*", "*", "q1", 2, 429});
  MockBackend mock(s);
  BackendServer server(mock, mock);
  server.start();
  HttpGenerationBackend gen(endpoint(server));
  AuditLog audit;
  GenerationGateway gateway(gen, fast(), 2, &audit);
  auto out = gateway.generate(request("M0", "q1", 2));
  CHECK(out.size() == 2);
  CHECK(audit.retries().size() == 2);
  CHECK(server.requests_served() == 3);
}

TEST_CASE("server errors surface as retryable transport errors") {
  auto s = script();
  s.faults.push_back(MockFault{"*", "*", "q1", -1, 503});
  MockBackend mock(s);
  BackendServer server(mock, mock);
  server.start();
  HttpGenerationBackend gen(endpoint(server));
  try {
    gen.generate(request("M0", "q1", 1));
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(e.status() == 503);
  }
  GenerationGateway gateway(gen, fast(), 1);
  CHECK_THROWS_AS(gateway.generate(request("M0", "q1", 1)), BackendError);
}

TEST_CASE("batch n falls back to one request per sample") {
  MockBackend mock(script());
  BackendServer server(mock, mock, ServerOptions{true, 0});
  server.start();
  HttpGenerationBackend gen(endpoint(server));
  auto out = gen.generate(request("M0", "q1", 3));
  CHECK(out.size() == 3);
  CHECK_FALSE(gen.batching());
  CHECK(server.requests_served() == 4);  // rejected batch + three singles
  auto again = gen.generate(request("M0", "q1", 3));
  CHECK(again == out);
  CHECK(server.requests_served() == 7);  // no batch attempt once disabled
}

TEST_CASE("unknown model is fatal and not retried") {
  MockBackend mock(script());
  BackendServer server(mock, mock);
  server.start();
  HttpGenerationBackend gen(endpoint(server));
  GenerationGateway gateway(gen, fast(), 1);
  CHECK_THROWS_AS(gateway.generate(request("ghost", "q1", 2)), UnknownModelError);
  CHECK(server.requests_served() == 1);
}

TEST_CASE("trainer polls a running job until it succeeds") {
  TempDir dir;
  MockBackend mock(script());
  BackendServer server(mock, mock, ServerOptions{false, 3});
  server.start();
  HttpTrainerBackend trainer(endpoint(server), std::chrono::milliseconds(1));
  TrainRequest req;
  req.base_model = ModelId("M0");
  req.dataset_path = one_record(dir);
  req.num_records = 1;
  auto r = trainer.train(req);
  CHECK(r.model.value == "M0+ft1");
  CHECK(r.job_id == "job-1");
  CHECK(server.requests_served() == 1 + 4);  // submit + 3 running + final
}

TEST_CASE("failed training job reports its reason") {
  TempDir dir;
  auto s = script();
  s.failing_train_calls = {1};
  MockBackend mock(s);
  BackendServer server(mock, mock);
  server.start();
  HttpTrainerBackend trainer(endpoint(server), std::chrono::milliseconds(1));
  TrainRequest req;
  req.base_model = ModelId("M0");
  req.dataset_path = one_record(dir);
  req.num_records = 1;
  CHECK_THROWS_WITH_AS(trainer.train(req), doctest::Contains("scripted"), TrainingError);
}

TEST_CASE("unreachable endpoints fail ping") {
  HttpGenerationBackend gen(HttpEndpoint{"http://127.0.0.1:1", "", std::chrono::milliseconds(1000)});
  CHECK_THROWS_AS(gen.ping(), BackendError);
  CHECK_THROWS_AS(gen.generate(request("M0", "q1", 1)), TransportError);
  CHECK_THROWS_AS(HttpGenerationBackend(HttpEndpoint{"localhost:80", "", {}}), ConfigError);
}

TEST_CASE("train request json carries hyperparameters and inline records") {
  TempDir dir;
  TrainRequest req;
  req.base_model = ModelId("M0");
  req.dataset_path = one_record(dir);
  req.num_records = 1;
  auto j = train_request_to_json(req, true);
  CHECK(j.at("hyperparams").at("learning_rate").get<double>() == doctest::Approx(7e-6));
  CHECK(j.at("hyperparams").at("schedule") == "cosine");
  REQUIRE(j.at("records").size() == 1);
  CHECK(j.at("records")[0].at("loss_on") == "target");
  CHECK_FALSE(train_request_to_json(req, false).contains("records"));
}

TEST_CASE("subprocess trainer") {
  TempDir dir;
  auto script_path = dir / "train.sh";
  {
    std::ofstream out(script_path);
    out << "#!/bin/sh\n"
        << "result=$(sed -n 's/.*\"result_path\": \"\\(.*\\)\".*/\\1/p' \"$1\")\n"
        << "base=$(sed -n 's/.*\"base_model\": \"\\(.*\\)\".*/\\1/p' \"$1\")\n"
        << "if [ \"$base\" = \"bad\" ]; then\n"
        << "  printf '{\"status\": \"failed\", \"reason\": \"out of memory\"}' > \"$result\"\n"
        << "else\n"
        << "  printf '{\"status\": \"succeeded\", \"model_id\": \"%s-sub\"}' \"$base\" > \"$result\"\n"
        << "fi\n";
  }
  std::filesystem::permissions(script_path, std::filesystem::perms::owner_all);
  SubprocessTrainerBackend trainer(script_path.string(), dir / "jobs");
  TrainRequest req;
  req.base_model = ModelId("M0");
  req.dataset_path = one_record(dir);
  req.num_records = 1;
  CHECK(trainer.train(req).model.value == "M0-sub");
  req.base_model = ModelId("bad");
  CHECK_THROWS_WITH_AS(trainer.train(req), doctest::Contains("out of memory"), TrainingError);

  SubprocessTrainerBackend failing("false", dir / "jobs2");
  CHECK_THROWS_AS(failing.train(req), TrainingError);
}
