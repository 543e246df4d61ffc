// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "stasc/cli.hpp"
#include "stasc/loop.hpp"
#include "support.hpp"

using namespace stasc;
using namespace stasc::testing;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Writes datasets and a config into dir; returns the config path.
fs::path write_run(const TempDir& dir, json extra = json::object()) {
  write_dataset(dir / "train.jsonl", make_items("tr", 4));
  write_dataset(dir / "test.jsonl", make_items("te", 2));
  json script = skill_script(0.4, 0.8, 0.9).to_json();
  write_file_atomic(dir / "mock.json", script.dump());
  json cfg{{"run_id", "cli"},
           {"variant", "EIF"},
           {"iterations", 2},
           {"n_init", 2},
           {"n_corr", 2},
           {"seed", 3},
           {"base_model", "M0"},
           {"train", "train.jsonl"},
           {"test", "test.jsonl"},
           {"run_dir", "out"},
           {"mock_script", "mock.json"},
           {"retry", {{"initial_backoff_ms", 1}, {"max_backoff_ms", 2}}}};
  cfg.update(extra);
  write_file_atomic(dir / "config.json", cfg.dump(2));
  return dir / "config.json";
}

struct EnvGuard {
  explicit EnvGuard(const char* name, const char* value) : name_(name) { setenv(name, value, 1); }
  ~EnvGuard() { unsetenv(name_); }
  const char* name_;
};

}  // namespace

TEST_CASE("validate prints the summary line") {
  TempDir dir;
  auto r = invoke({"validate", "--config", write_run(dir).string()});
  CHECK(r.code == cli::kOk);
  CHECK(r.out == "STaSC_EIF, N=2, N_init=2, N_corr=2\n");
}

TEST_CASE("bad variant codes exit 2 and name the field") {
  TempDir dir;
  auto r = invoke({"validate", "--config", write_run(dir, {{"variant", "QQQ"}}).string()});
  CHECK(r.code == cli::kConfigError);
  CHECK(r.err.find("variant") != std::string::npos);
  auto star = invoke({"validate", "--config", write_run(dir, {{"variant", nullptr}, {"preset", "star"}}).string()});
  CHECK(star.code == cli::kConfigError);
}

TEST_CASE("config problems are all reported") {
  TempDir dir;
  auto path = write_run(dir, {{"n_init", "two"}, {"bogus", 1}, {"train", "missing.jsonl"}});
  auto r = invoke({"validate", "--config", path.string()});
  CHECK(r.code == cli::kConfigError);
  CHECK(r.err.find("bogus") != std::string::npos);
  CHECK(invoke({"validate"}).code == cli::kConfigError);
  CHECK(invoke({"frobnicate"}).code == cli::kConfigError);
}

TEST_CASE("validate never touches the network") {
  TempDir dir;
  backends::MockBackend mock(skill_script(0.5, 0.5, 0.5));
  backends::BackendServer server(mock, mock);
  server.start();
  auto path = write_run(dir, {{"generation", {{"backend", "http"}, {"endpoint", server.url()}}},
                              {"trainer", {{"backend", "http"}, {"endpoint", server.url()}}}});
  CHECK(invoke({"validate", "--config", path.string()}).code == cli::kOk);
  CHECK(server.requests_served() == 0);
}

TEST_CASE("flags beat environment beats file") {
  TempDir dir;
  auto path = write_run(dir, {{"generation", {{"backend", "http"}, {"endpoint", "http://file:1"}}}});
  std::vector<std::string> v;
  CHECK(cli::load_app_config(path, {}, v).generation.endpoint == "http://file:1");
  {
    EnvGuard env("STASC_GEN_ENDPOINT", "http://env:2");
    EnvGuard token("STASC_GEN_TOKEN", "secret");
    auto cfg = cli::load_app_config(path, {}, v);
    CHECK(cfg.generation.endpoint == "http://env:2");
    CHECK(cfg.generation.token == "secret");
    CHECK(cli::app_config_to_json(cfg).dump().find("secret") == std::string::npos);
    cli::Overrides o;
    o.gen_endpoint = "http://flag:3";
    o.variant = "EIE";
    o.n_init = 5;
    cfg = cli::load_app_config(path, o, v);
    CHECK(cfg.generation.endpoint == "http://flag:3");
    CHECK(format_variant_code(cfg.variant.axes) == "EIE");
    CHECK(cfg.variant.n_init == 5);
  }
  CHECK(v.empty());
  CHECK(cli::load_app_config(path, {}, v).run_dir == dir / "out");
}

TEST_CASE("run, report and resume through the CLI") {
  TempDir dir;
  auto path = write_run(dir);
  auto r = invoke({"run", "--config", path.string(), "--variant", "EIE"});
  REQUIRE(r.code == cli::kOk);
  auto state = load_state(dir / "out/state.json");
  CHECK(state.status == RunStatus::Done);
  CHECK(format_variant_code(state.config.axes) == "EIE");
  CHECK(state.iterations.back().produced->value == "M0+ft1+ft2");
  CHECK(fs::exists(dir / "out/config.json"));
  CHECK(fs::exists(dir / "out/audit.jsonl"));

  auto rep = invoke({"report", "--run-dir", (dir / "out").string()});
  CHECK(rep.code == cli::kOk);
  CHECK(rep.out.starts_with("| Run | max{r(Ŷ¹)} | max{r(Ŷ²)} |"));
  CHECK(invoke({"resume", "--run-dir", (dir / "out").string()}).code == cli::kOk);
  CHECK(invoke({"eval", "--run-dir", (dir / "out").string(), "--iteration", "1"}).code == cli::kOk);
  CHECK(invoke({"run", "--config", path.string()}).code == cli::kConfigError);
}

TEST_CASE("failure exit codes") {
  TempDir a, b, c;
  auto halting = write_run(a, {{"empty_filter_policy", "halt"}});
  json never = skill_script(0.0, 0.0, 1.0).to_json();
  write_file_atomic(a / "mock.json", never.dump());
  CHECK(invoke({"run", "--config", halting.string()}).code == cli::kHalted);
  auto resumed = invoke({"resume", "--run-dir", (a / "out").string(), "--policy-empty-filter", "skip"});
  CHECK(resumed.code == cli::kOk);

  auto failing = write_run(b);
  auto script = skill_script(0.4, 0.8, 0.9);
  script.failing_train_calls = {1};
  write_file_atomic(b / "mock.json", script.to_json().dump());
  CHECK(invoke({"run", "--config", failing.string()}).code == cli::kTrainingFailed);

  auto broken = write_run(c, {{"generation", {{"backend", "http"}, {"endpoint", "http://127.0.0.1:1"}}}});
  CHECK(invoke({"run", "--config", broken.string()}).code == cli::kBackendError);

  CHECK(invoke({"resume", "--run-dir", (c / "nowhere").string()}).code == cli::kConfigError);
  write_file_atomic(b / "out/state.json", "{\"run_id\": ");
  CHECK(invoke({"resume", "--run-dir", (b / "out").string()}).code == cli::kStateIntegrity);
}

TEST_CASE("convert-nq keeps a stable hashed subset") {
  TempDir dir;
  std::string rows;
  for (int i = 0; i < 20; ++i)
    rows += json{{"question", "q" + std::to_string(i)}, {"answer", {"a" + std::to_string(i)}}}.dump() + "\n";
  write_file_atomic(dir / "nq.jsonl", rows);
  auto r = invoke({"convert-nq", "--input", (dir / "nq.jsonl").string(), "--output", (dir / "out.jsonl").string(),
                "--limit", "5"});
  CHECK(r.code == cli::kOk);
  auto items = load_dataset(dir / "out.jsonl");
  CHECK(items.size() == 5);
  for (const auto& it : items) CHECK(it.id.starts_with("nq-"));

  std::istringstream again(rows);
  std::vector<std::string> v;
  auto direct = cli::convert_nq(again, 5, v);
  CHECK(direct == items);
  CHECK(cli::subset_hash("x") == cli::subset_hash("x"));
}

TEST_CASE("mock-serve drives a run over HTTP") {
  TempDir dir;
  auto path = write_run(dir);
  auto log = dir / "serve.log";
  std::string cmd = std::string(STASC_CLI_PATH) + " mock-serve --script " + (dir / "mock.json").string() +
                    " --dataset " + (dir / "train.jsonl").string() + " --dataset " + (dir / "test.jsonl").string() +
                    " --port 0 --running-polls 1 > " + log.string() + " 2>&1 & echo $!";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p);
  int pid = 0;
  REQUIRE(std::fscanf(p, "%d", &pid) == 1);
  pclose(p);

  std::string url;
  for (int i = 0; i < 200 && url.empty(); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
    if (!fs::exists(log)) continue;
    auto text = read_file(log);
    auto at = text.find("listening on ");
    auto nl = text.find('\n', at);
    if (at != std::string::npos && nl != std::string::npos) url = text.substr(at + 13, nl - at - 13);
  }
  REQUIRE_FALSE(url.empty());

  auto r = invoke({"run", "--config", path.string(), "--gen-endpoint", url, "--train-endpoint", url});
  CHECK(r.code == cli::kOk);
  auto state = load_state(dir / "out/state.json");
  CHECK(state.status == RunStatus::Done);
  CHECK(state.iterations.back().produced->value == "M0+ft2");
  auto config = json::parse(read_file(dir / "out/config.json"));
  CHECK(config.at("generation").at("backend") == "http");

  kill(pid, SIGTERM);
  for (int i = 0; i < 200 && kill(pid, 0) == 0; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  CHECK(kill(pid, 0) != 0);
}

TEST_CASE("shipped example config validates") {
  auto r = invoke({"validate", "--config", std::string(STASC_SOURCE_DIR) + "/configs/example.json"});
  CHECK(r.code == cli::kOk);
  CHECK(r.out == "STaSC_EIF, N=2, N_init=3, N_corr=2\n");
}
