// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stasc/core.hpp"

namespace stasc::promptkit {

enum class PromptKind { Initial, Correction };

/// What goes into the {initial_answer} slot of the correction prompt.
enum class InitialAnswerSlot { FullText, FinalAnswerOnly };

inline constexpr std::string_view kQuestionPlaceholder = "{question}";
inline constexpr std::string_view kInitialAnswerPlaceholder = "{initial_answer}";
inline constexpr std::string_view kDefaultMarker = "Final Answer:";

/// A prompt is rendered as the nonempty parts of
///   role_preamble, few_shot_examples..., body
/// joined by blank lines, with placeholders substituted in the body only.
struct PromptTemplate {
  PromptKind kind = PromptKind::Initial;
  std::string role_preamble;
  std::vector<std::string> few_shot_examples;  // complete exchange blocks
  std::string body;
  std::string answer_marker{kDefaultMarker};

  /// Throws TemplateError unless every required placeholder occurs exactly
  /// once in the body and the marker is nonempty.
  void validate() const;
};

PromptTemplate default_initial_template();
/// Two-shot correction prompt.
PromptTemplate default_correction_template();
/// Same instructions as the default correction prompt without exemplars.
PromptTemplate zero_shot_correction_template();

/// Template file format:
///
///   ---
///   kind: initial|correction
///   marker: Final Answer:
///   ---
///   <literal template text, up to EOF>
///
/// The literal text becomes the body; preamble and exemplars are inline.
PromptTemplate parse_template(std::string_view file_text);
PromptTemplate load_template(const std::filesystem::path& path);
/// Inverse of parse_template; flattens preamble and exemplars into the body.
std::string serialize_template(const PromptTemplate& tmpl);

std::string render_initial_prompt(const PromptTemplate& tmpl, const QAItem& item);

std::string render_correction_prompt(const PromptTemplate& tmpl, const QAItem& item,
                                     const AnswerSample& initial,
                                     InitialAnswerSlot slot = InitialAnswerSlot::FullText);

/// Text after the last case-insensitive occurrence of marker, with leading
/// whitespace removed, cut at the first blank line and trimmed. Absent when
/// the marker never occurs or nothing follows it.
std::optional<std::string> parse_final_answer(std::string_view raw, std::string_view marker);

}  // namespace stasc::promptkit
