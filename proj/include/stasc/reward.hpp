// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stasc/core.hpp"

namespace stasc::reward {

/// Lowercase, NFC-normalize, turn punctuation into spaces, collapse runs of
/// whitespace and trim. Total: malformed UTF-8 is treated as Latin-1 bytes.
std::string normalize_answer(std::string_view text);

/// 1 when some normalized reference is a substring of the normalized answer,
/// else 0. An absent answer scores 0. Throws ConfigError on an empty
/// reference list.
RewardValue in_accuracy(const std::optional<std::string>& generated,
                        std::span<const std::string> references);

using RewardFn =
    std::function<RewardValue(const std::optional<std::string>&, std::span<const std::string>)>;

struct RewardFnSpec {
  std::string name = "in_accuracy";
  std::map<std::string, std::string> params;
};

/// Name -> reward function. Ships "in_accuracy".
class Registry {
 public:
  static Registry& instance();

  void add(std::string name, RewardFn fn);
  bool contains(std::string_view name) const;
  /// Throws ConfigError when the name is unknown.
  RewardFn resolve(const RewardFnSpec& spec) const;
  std::vector<std::string> names() const;

 private:
  Registry();
  std::map<std::string, RewardFn, std::less<>> fns_;
};

}  // namespace stasc::reward
