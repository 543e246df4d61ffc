// SPDX-License-Identifier: Apache-2.0
#include "stasc/promptkit.hpp"

#include <algorithm>
#include <cctype>

namespace stasc::promptkit {

namespace {

constexpr std::string_view kWhitespace = " \t\r\n\f\v";

std::string_view trim(std::string_view s) {
  auto b = s.find_first_not_of(kWhitespace);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(kWhitespace);
  return s.substr(b, e - b + 1);
}

std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string kind_name(PromptKind k) { return k == PromptKind::Initial ? "initial" : "correction"; }

void require_kind(const PromptTemplate& tmpl, PromptKind expected) {
  if (tmpl.kind != expected) {
    throw TemplateError("expected a " + kind_name(expected) + " template, got " + kind_name(tmpl.kind));
  }
}

// Single left-to-right pass so substituted values are never rescanned.
std::string substitute(std::string_view body,
                       std::initializer_list<std::pair<std::string_view, std::string_view>> values) {
  std::string out;
  out.reserve(body.size() + 256);
  std::size_t i = 0;
  while (i < body.size()) {
    bool replaced = false;
    if (body[i] == '{') {
      for (const auto& [key, value] : values) {
        if (body.compare(i, key.size(), key) == 0) {
          out.append(value);
          i += key.size();
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out.push_back(body[i++]);
  }
  return out;
}

std::string assemble(const PromptTemplate& tmpl, std::string body) {
  std::string out;
  auto add = [&out](std::string_view part) {
    if (part.empty()) return;
    if (!out.empty()) out += "\n\n";
    out.append(part);
  };
  add(tmpl.role_preamble);
  for (const auto& shot : tmpl.few_shot_examples) add(shot);
  add(body);
  return out;
}

const char* const kCorrectionPreamble =
    "You are a helpful reasoning assistant in general domain question answering.Your task is to "
    "correct the initial response if it is incorrect.\n"
    "\n"
    "Below is the question and the initial answer. Generate a correction to the initial answer if "
    "it is incorrect. Disregard the information you already have, look for other options. Do not "
    "use the information that does not match your criteria.\n"
    "\n"
    "Step-by-step reasoning:\n"
    "\n"
    "Final Answer:";

const char* const kShotRonaldo =
    "Question: Which Portuguese soccer player has the most goals?\n"
    "\n"
    "Step-by-step reasoning: Christiano Ronaldo has scored 900 goals in a career spanning 22 years. "
    "I cannot think of anyone else scoring more than him.\n"
    "\n"
    "Final Answer: Christiano Ronaldo\n"
    "\n"
    "Step-by-step reasoning: Yes, Christiano Ronaldo is the correct answer. Other details are "
    "unimportant.\n"
    "\n"
    "Final Answer: Christiano Ronaldo";

const char* const kShotEllenPage =
    "Question: Which actress played in both movies: one about pregnancy and the other about "
    "Tracey?\n"
    "\n"
    "Step-by-step reasoning: 1. Identify movies about pregnancy and about Tracey. 2. Movies about "
    "pregnancy include 'Juno' and 'Knocked Up'. 3. Movie about Tracey is likely 'Tracy Chapman' or "
    "a documentary, but 'Tracy' could be a reference to 'Tracy Flick' in the movie 'Election'. 4. "
    "Considering well-known movies with these themes, actress Reese Witherspoon comes to mind as a "
    "possible match.\n"
    "\n"
    "Final Answer: Reese Witherspoon\n"
    "\n"
    "Step-by-step reasoning: Let's break down the answer. 'Juno' is indeed a movie about pregnancy, "
    "but it starred Ellen Page (now Elliot Page), not Reese Witherspoon. Reese Witherspoon did not "
    "star in 'Juno.' Therefore, the association between Reese Witherspoon and 'Juno' is incorrect. "
    "Movies About Tracey is likely 'Tracey Fragments (2007)', a movie in which Ellen Page also "
    "starred as the lead character, Tracey Berkowitz. Ellen Page (Elliot Page) connects both "
    "movies.\n"
    "\n"
    "Final answer: Ellen Page (now Elliot Page)";

}  // namespace

void PromptTemplate::validate() const {
  if (answer_marker.empty()) throw TemplateError("answer marker must be nonempty");
  std::vector<std::string_view> required{kQuestionPlaceholder};
  if (kind == PromptKind::Correction) required.push_back(kInitialAnswerPlaceholder);
  for (auto ph : required) {
    auto n = count_occurrences(body, ph);
    if (n != 1) {
      throw TemplateError(kind_name(kind) + " template body must contain " + std::string(ph) +
                          " exactly once (found " + std::to_string(n) + ")");
    }
  }
  if (kind == PromptKind::Initial && count_occurrences(body, kInitialAnswerPlaceholder) != 0) {
    throw TemplateError("initial template must not reference {initial_answer}");
  }
}

PromptTemplate default_initial_template() {
  PromptTemplate t;
  t.kind = PromptKind::Initial;
  t.role_preamble =
      "You are a helpful reasoning assistant in general domain question answering. Please reason "
      "through the question step by step very shortly before giving a final answer.\n"
      "\n"
      "Generate a short chain-of-thought rationale very shortly, and then provide the final answer.\n"
      "\n"
      "Step-by-step reasoning:\n"
      "Final Answer:";
  t.body =
      "Question: {question}\n"
      "\n"
      "Reason step by step very shortly, then conclude with the answer.";
  return t;
}

PromptTemplate default_correction_template() {
  PromptTemplate t = zero_shot_correction_template();
  t.few_shot_examples = {kShotRonaldo, kShotEllenPage};
  return t;
}

PromptTemplate zero_shot_correction_template() {
  PromptTemplate t;
  t.kind = PromptKind::Correction;
  t.role_preamble = kCorrectionPreamble;
  t.body =
      "Question: {question}\n"
      "\n"
      "Initial Answer: {initial_answer}\n"
      "Write a correction if the initial answer is incorrect.";
  return t;
}

PromptTemplate parse_template(std::string_view text) {
  auto next_line = [&text](std::size_t& pos) -> std::optional<std::string_view> {
    if (pos >= text.size()) return std::nullopt;
    auto nl = text.find('\n', pos);
    std::string_view line = nl == std::string_view::npos ? text.substr(pos) : text.substr(pos, nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
  };

  std::size_t pos = 0;
  auto first = next_line(pos);
  if (!first || *first != "---") throw TemplateError("template file must start with a '---' header line");

  PromptTemplate t;
  bool have_kind = false;
  bool closed = false;
  while (auto line = next_line(pos)) {
    if (*line == "---") {
      closed = true;
      break;
    }
    if (trim(*line).empty()) continue;
    auto colon = line->find(':');
    if (colon == std::string_view::npos) {
      throw TemplateError("malformed header line '" + std::string(*line) + "'");
    }
    auto key = trim(line->substr(0, colon));
    // The marker itself ends with ':' so only the first colon splits.
    auto value = trim(line->substr(colon + 1));
    if (key == "kind") {
      if (value == "initial") t.kind = PromptKind::Initial;
      else if (value == "correction") t.kind = PromptKind::Correction;
      else throw TemplateError("unknown template kind '" + std::string(value) + "'");
      have_kind = true;
    } else if (key == "marker") {
      t.answer_marker = std::string(value);
    } else {
      throw TemplateError("unknown header key '" + std::string(key) + "'");
    }
  }
  if (!closed) throw TemplateError("template header is not closed by '---'");
  if (!have_kind) throw TemplateError("template header must declare kind");
  t.body = std::string(text.substr(pos));
  t.validate();
  return t;
}

PromptTemplate load_template(const std::filesystem::path& path) {
  try {
    return parse_template(read_file(path));
  } catch (const TemplateError& e) {
    throw TemplateError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw TemplateError(e.what());
  }
}

std::string serialize_template(const PromptTemplate& tmpl) {
  std::string out = "---\nkind: " + kind_name(tmpl.kind) + "\nmarker: " + tmpl.answer_marker + "\n---\n";
  out += assemble(tmpl, tmpl.body);
  return out;
}

std::string render_initial_prompt(const PromptTemplate& tmpl, const QAItem& item) {
  require_kind(tmpl, PromptKind::Initial);
  tmpl.validate();
  return assemble(tmpl, substitute(tmpl.body, {{kQuestionPlaceholder, item.question}}));
}

std::string render_correction_prompt(const PromptTemplate& tmpl, const QAItem& item,
                                     const AnswerSample& initial, InitialAnswerSlot slot) {
  require_kind(tmpl, PromptKind::Correction);
  tmpl.validate();
  if (initial.raw_text.empty()) {
    throw TemplateError("initial answer " + initial.item_id + "#" + std::to_string(initial.sample_index) +
                        " has empty text");
  }
  std::string_view answer = initial.raw_text;
  if (slot == InitialAnswerSlot::FinalAnswerOnly && initial.parsed_answer) answer = *initial.parsed_answer;
  return assemble(tmpl, substitute(tmpl.body, {{kQuestionPlaceholder, item.question},
                                               {kInitialAnswerPlaceholder, answer}}));
}

std::optional<std::string> parse_final_answer(std::string_view raw, std::string_view marker) {
  if (marker.empty()) return std::nullopt;
  const std::string hay = ascii_lower(raw);
  const std::string needle = ascii_lower(marker);
  auto pos = hay.rfind(needle);
  if (pos == std::string::npos) return std::nullopt;

  std::string_view rest = raw.substr(pos + marker.size());
  auto start = rest.find_first_not_of(kWhitespace);
  if (start == std::string_view::npos) return std::nullopt;
  rest.remove_prefix(start);

  // Cut at the first line that is empty or whitespace only.
  std::size_t cut = rest.size();
  for (auto nl = rest.find('\n'); nl != std::string_view::npos; nl = rest.find('\n', nl + 1)) {
    auto line_end = rest.find('\n', nl + 1);
    auto line = rest.substr(nl + 1, line_end == std::string_view::npos ? std::string_view::npos
                                                                        : line_end - nl - 1);
    if (line.find_first_not_of(" \t\r\f\v") == std::string_view::npos) {
      cut = nl;
      break;
    }
  }
  auto answer = trim(rest.substr(0, cut));
  if (answer.empty()) return std::nullopt;
  return std::string(answer);
}

}  // namespace stasc::promptkit
