// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <random>

#include "stasc/promptkit.hpp"
#include "support.hpp"

using namespace stasc;
using namespace stasc::promptkit;

namespace {

QAItem sistine() { return QAItem{"s1", "Who painted the ceiling of the Sistine Chapel?", {"Michelangelo"}}; }

AnswerSample initial_sample(std::string raw) {
  AnswerSample a;
  a.item_id = "s1";
  a.raw_text = std::move(raw);
  a.parsed_answer = parse_final_answer(a.raw_text, kDefaultMarker);
  a.producer_model = ModelId("M0");
  return a;
}

// Scan-from-end oracle for the last marker, written independently of the
// implementation: walk backwards comparing lowercase ASCII.
std::optional<std::string> oracle_parse(const std::string& raw, const std::string& marker) {
  auto lower = [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); };
  for (std::size_t i = raw.size() >= marker.size() ? raw.size() - marker.size() + 1 : 0; i-- > 0;) {
    bool hit = true;
    for (std::size_t k = 0; k < marker.size() && hit; ++k) hit = lower(raw[i + k]) == lower(marker[k]);
    if (!hit) continue;
    std::string rest = raw.substr(i + marker.size());
    std::size_t b = 0;
    while (b < rest.size() && std::isspace(static_cast<unsigned char>(rest[b]))) ++b;
    rest = rest.substr(b);
    // keep lines up to the first one that is empty or whitespace only
    std::string kept;
    std::size_t at = 0;
    bool first = true;
    while (at <= rest.size()) {
      auto nl = rest.find('\n', at);
      std::string line = rest.substr(at, nl == std::string::npos ? std::string::npos : nl - at);
      bool blank = line.find_first_not_of(" \t\r\f\v") == std::string::npos;
      if (!first && blank) break;
      kept += (first ? "" : "\n") + line;
      first = false;
      if (nl == std::string::npos) break;
      at = nl + 1;
    }
    rest = kept;
    while (!rest.empty() && std::isspace(static_cast<unsigned char>(rest.back()))) rest.pop_back();
    if (rest.empty()) return std::nullopt;
    return rest;
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("default initial prompt matches the hand-built rendering") {
  auto text = render_initial_prompt(default_initial_template(), sistine());
  CHECK(text == read_file(stasc::testing::golden_path("initial_prompt.txt")));
  CHECK(text.find("Question: Who painted the ceiling of the Sistine Chapel?") != std::string::npos);
  CHECK(text.ends_with("\n\nReason step by step very shortly, then conclude with the answer."));
}

TEST_CASE("default correction prompt matches the hand-built rendering") {
  auto init = initial_sample(
      "Step-by-step reasoning: The ceiling frescoes were commissioned by Pope Julius II.\n\nFinal Answer: Raphael");
  auto text = render_correction_prompt(default_correction_template(), sistine(), init);
  CHECK(text == read_file(stasc::testing::golden_path("correction_prompt_2shot.txt")));

  auto ronaldo = text.find("Christiano Ronaldo");
  auto ellen = text.find("Ellen Page");
  auto question = text.find("Question: Who painted");
  auto slot = text.find("Initial Answer: Step-by-step reasoning: The ceiling");
  auto instruction = text.rfind("Write a correction if the initial answer is incorrect.");
  CHECK(ronaldo < ellen);
  CHECK(ellen < question);
  CHECK(question < slot);
  CHECK(slot < instruction);
}

TEST_CASE("zero-shot correction prompt has no exemplars") {
  auto init = initial_sample("Final Answer: Raphael");
  auto text = render_correction_prompt(zero_shot_correction_template(), sistine(), init);
  CHECK(text.find("Ronaldo") == std::string::npos);
  CHECK(text.find("Ellen Page") == std::string::npos);
  CHECK(text.find("Initial Answer: Final Answer: Raphael") != std::string::npos);
}

TEST_CASE("final-answer-only slot") {
  auto init = initial_sample("Step-by-step reasoning: hmm.\nFinal Answer: Raphael");
  auto text = render_correction_prompt(zero_shot_correction_template(), sistine(), init,
                                       InitialAnswerSlot::FinalAnswerOnly);
  CHECK(text.find("Initial Answer: Raphael\n") != std::string::npos);
  CHECK(text.find("hmm") == std::string::npos);
}

TEST_CASE("template validation") {
  auto t = default_initial_template();
  t.body = "No placeholder here";
  CHECK_THROWS_AS(render_initial_prompt(t, sistine()), TemplateError);
  t.body = "{question} and {question}";
  CHECK_THROWS_AS(t.validate(), TemplateError);
  t.body = "{question} {initial_answer}";
  CHECK_THROWS_AS(t.validate(), TemplateError);

  auto c = zero_shot_correction_template();
  c.body = "Question: {question}";
  CHECK_THROWS_AS(c.validate(), TemplateError);
  c = zero_shot_correction_template();
  c.answer_marker.clear();
  CHECK_THROWS_AS(c.validate(), TemplateError);
}

TEST_CASE("empty initial answer cannot be rendered") {
  auto init = initial_sample("");
  CHECK_THROWS_AS(render_correction_prompt(default_correction_template(), sistine(), init), TemplateError);
}

TEST_CASE("rendering keeps values verbatim") {
  QAItem item{"x", "Line one\nline two {initial_answer} {question}", {"a"}};
  auto text = render_initial_prompt(default_initial_template(), item);
  CHECK(text.find("Question: Line one\nline two {initial_answer} {question}\n") != std::string::npos);
  CHECK(render_initial_prompt(default_initial_template(), item) == text);
}

TEST_CASE("rendering is injective in the question") {
  std::set<std::string> prompts;
  for (int i = 0; i < 200; ++i) {
    QAItem item{"x", "Question variant " + std::to_string(i), {"a"}};
    prompts.insert(render_initial_prompt(default_initial_template(), item));
  }
  CHECK(prompts.size() == 200);
}

TEST_CASE("parse_final_answer examples") {
  CHECK(parse_final_answer("...reasoning...\nFinal Answer: Paris\n", kDefaultMarker) == std::optional<std::string>("Paris"));
  CHECK(parse_final_answer("Final Answer: A\n...\nFinal Answer: B", kDefaultMarker) == std::optional<std::string>("B"));
  CHECK_FALSE(parse_final_answer("no marker here", kDefaultMarker).has_value());
  CHECK_FALSE(parse_final_answer("Final Answer:   \n", kDefaultMarker).has_value());
  CHECK(parse_final_answer("Final answer: Ellen Page (now Elliot Page)", kDefaultMarker) ==
        std::optional<std::string>("Ellen Page (now Elliot Page)"));
  CHECK(parse_final_answer("Final Answer: first line\nsecond line\n\nignored", kDefaultMarker) ==
        std::optional<std::string>("first line\nsecond line"));
}

TEST_CASE("parse_final_answer agrees with a scan-from-end oracle") {
  std::mt19937 rng(3);
  const std::vector<std::string> pieces = {"Final Answer:", "final answer:", "FINAL ANSWER:", "Paris", " ", "\n",
                                           "\n\n", "x", "reasoning", ":", "Final", "Answer"};
  for (int i = 0; i < 5000; ++i) {
    std::string raw;
    int len = static_cast<int>(rng() % 10);
    for (int k = 0; k < len; ++k) raw += pieces[rng() % pieces.size()];
    CAPTURE(raw);
    CHECK(parse_final_answer(raw, kDefaultMarker) == oracle_parse(raw, "Final Answer:"));
  }
}

TEST_CASE("mock-style outputs parse back to their answer") {
  for (const std::string answer : {"Paris", "Ellen Page (now Elliot Page)", "42", "a: b"}) {
    auto prompt = render_initial_prompt(default_initial_template(), sistine());
    std::string raw = prompt + "\nreasoning\nFinal Answer: " + answer;
    CHECK(parse_final_answer(raw, kDefaultMarker) == std::optional<std::string>(answer));
  }
}

TEST_CASE("template files round-trip") {
  auto file = "---\nkind: correction\nmarker: Answer:\n---\nQ: {question}\nA0: {initial_answer}\nFix it.";
  auto t = parse_template(file);
  CHECK(t.kind == PromptKind::Correction);
  CHECK(t.answer_marker == "Answer:");
  CHECK(t.body == "Q: {question}\nA0: {initial_answer}\nFix it.");
  CHECK(parse_template(serialize_template(t)).body == t.body);

  auto init = initial_sample("Final Answer: Raphael");
  auto d = default_correction_template();
  auto flat = parse_template(serialize_template(d));
  CHECK(render_correction_prompt(flat, sistine(), init) == render_correction_prompt(d, sistine(), init));

  CHECK_THROWS_AS(parse_template("kind: initial\n{question}"), TemplateError);
  CHECK_THROWS_AS(parse_template("---\nkind: other\n---\n{question}"), TemplateError);
}

TEST_CASE("shipped template files equal the built-ins") {
  auto init = initial_sample("Final Answer: Raphael");
  auto dir = std::filesystem::path(STASC_SOURCE_DIR) / "templates";
  CHECK(render_initial_prompt(load_template(dir / "initial.txt"), sistine()) ==
        render_initial_prompt(default_initial_template(), sistine()));
  CHECK(render_correction_prompt(load_template(dir / "correction.txt"), sistine(), init) ==
        render_correction_prompt(default_correction_template(), sistine(), init));
  CHECK(render_correction_prompt(load_template(dir / "correction_zero_shot.txt"), sistine(), init) ==
        render_correction_prompt(zero_shot_correction_template(), sistine(), init));
}
