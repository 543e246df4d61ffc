// SPDX-License-Identifier: Apache-2.0
#include <cctype>
#include <chrono>
#include <cstdlib>

#include <sys/wait.h>

#include "stasc/backends.hpp"

namespace stasc::backends {

namespace {

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out.push_back(c);
  }
  return out + "'";
}

}  // namespace

SubprocessTrainerBackend::SubprocessTrainerBackend(std::string command, std::filesystem::path work_dir)
    : command_(std::move(command)), work_dir_(std::move(work_dir)) {
  if (command_.empty()) throw ConfigError("trainer command must be nonempty");
}

TrainResult SubprocessTrainerBackend::train(const TrainRequest& req) {
  std::lock_guard lock(mu_);
  const int k = ++jobs_;
  std::filesystem::create_directories(work_dir_);
  std::string safe = req.base_model.value.substr(0, 40);
  for (char& c : safe)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '+') c = '_';
  const auto stem = "job_" + safe + "_" + std::to_string(k);
  auto spec_path = std::filesystem::absolute(work_dir_ / (stem + ".spec.json"));
  auto result_path = std::filesystem::absolute(work_dir_ / (stem + ".result.json"));
  std::filesystem::remove(result_path);

  json spec = train_request_to_json(req, false);
  spec["dataset_path"] = std::filesystem::absolute(req.dataset_path).string();
  spec["result_path"] = result_path.string();
  write_file_atomic(spec_path, spec.dump(2) + "\n");

  auto start = std::chrono::steady_clock::now();
  int rc = std::system((command_ + " " + shell_quote(spec_path.string())).c_str());
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (rc == -1 || !WIFEXITED(rc) || WEXITSTATUS(rc) != 0) {
    throw TrainingError("trainer command exited with status " + std::to_string(rc));
  }
  if (!std::filesystem::exists(result_path)) {
    throw TrainingError("trainer command wrote no result file " + result_path.string());
  }
  json result;
  try {
    result = json::parse(read_file(result_path));
  } catch (const json::exception& e) {
    throw TrainingError("malformed trainer result file " + result_path.string());
  }
  auto status = result.value("status", std::string());
  if (status == "failed") throw TrainingError("trainer failed: " + result.value("reason", std::string("unknown")));
  if (status != "succeeded") throw TrainingError("trainer result has unknown status '" + status + "'");
  auto model = result.value("model_id", std::string());
  if (model.empty()) throw TrainingError("trainer result has no model_id");
  return TrainResult{ModelId(model), result.value("job_id", stem), secs};
}

}  // namespace stasc::backends
