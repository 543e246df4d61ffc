// SPDX-License-Identifier: Apache-2.0
#include "stasc/reward.hpp"

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

namespace stasc::reward {

namespace {

bool valid_utf8(std::string_view s) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  std::string back;
  u.toUTF8String(back);
  return back == s;
}

icu::UnicodeString decode(std::string_view s) {
  if (valid_utf8(s)) {
    return icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  }
  icu::UnicodeString u;
  for (unsigned char c : s) u.append(static_cast<UChar32>(c));
  return u;
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  icu::UnicodeString u = decode(text);
  u.toLower(icu::Locale::getRoot());
  if (U_SUCCESS(status)) {
    icu::UnicodeString composed = nfc->normalize(u, status);
    if (U_SUCCESS(status)) u = composed;
  }

  icu::UnicodeString out;
  bool pending_space = false;
  for (int32_t i = 0; i < u.length();) {
    UChar32 c = u.char32At(i);
    i += U16_LENGTH(c);
    if (u_ispunct(c) || u_isUWhiteSpace(c)) {
      pending_space = !out.isEmpty();
      continue;
    }
    if (pending_space) out.append(static_cast<UChar32>(' '));
    pending_space = false;
    out.append(c);
  }
  std::string result;
  out.toUTF8String(result);
  return result;
}

RewardValue in_accuracy(const std::optional<std::string>& generated,
                        std::span<const std::string> references) {
  if (references.empty()) throw ConfigError("in_accuracy requires at least one reference answer");
  if (!generated) return {0.0};
  const std::string hay = normalize_answer(*generated);
  for (const auto& ref : references) {
    const std::string needle = normalize_answer(ref);
    // An all-punctuation reference normalizes to "" and would match anything.
    if (needle.empty()) continue;
    if (hay.find(needle) != std::string::npos) return {1.0};
  }
  return {0.0};
}

Registry& Registry::instance() {
  static Registry r;
  return r;
}

Registry::Registry() { fns_.emplace("in_accuracy", &in_accuracy); }

void Registry::add(std::string name, RewardFn fn) { fns_[std::move(name)] = std::move(fn); }

bool Registry::contains(std::string_view name) const { return fns_.find(name) != fns_.end(); }

RewardFn Registry::resolve(const RewardFnSpec& spec) const {
  auto it = fns_.find(spec.name);
  if (it == fns_.end()) throw ConfigError("unknown reward function '" + spec.name + "'");
  return it->second;
}

std::vector<std::string> Registry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : fns_) out.push_back(k);
  return out;
}

}  // namespace stasc::reward
