#include "cprobe/csv.hpp"
#include "cprobe/error.hpp"
#include "cprobe/storygen.hpp"

#include "testkit.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace cprobe;
using namespace cprobe::storygen;

namespace {

std::string fixture(const std::string& name) {
  std::ifstream in(std::filesystem::path(CPROBE_FIXTURES) / "prompts" / name, std::ios::binary);
  REQUIRE(in);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const std::string kTransition1 = "Mara now trained twice as long as anyone, set on winning the regional title.";
const std::string kTransition2 = "She wanted the captaincy and worked every drill until it was hers.";

std::string paragraph(int p) {
  std::string out;
  for (int s = 1; s <= 10; ++s) {
    if (s > 1) out += ' ';
    out += "Person " + std::to_string(p) + "-" + std::to_string(s) + " walked to the field.";
  }
  return out;
}

std::string draft() { return paragraph(1) + "\n\n" + paragraph(2) + "\n\n" + paragraph(3); }
std::string full_story() {
  return paragraph(1) + "\n\n" + kTransition1 + "\n\n" + paragraph(2) + "\n\n" + kTransition2 + "\n\n" + paragraph(3);
}

bool is_classifier(const chat::ChatRequest& r) { return r.messages.front().role == "system"; }

// Labels 1 for the two transition sentences and 0 otherwise, unless
// `stray` names a sentence that should also come back as 1.
std::string classify(const chat::ChatRequest& r, const std::string& stray = {}) {
  const auto& s = r.messages.back().content;
  return (s == kTransition1 || s == kTransition2 || s == stray) ? "1" : "0";
}

Story accepted_story() {
  Story s;
  s.story_id = "s";
  s.sentences = split_sentences(full_story());
  return s;
}

}  // namespace

TEST_CASE("golden story prompts") {
  CHECK(story_initial_prompt(conceptgen::builtin_concept("ambition"), "sports") ==
        fixture("story_initial_ambition_sports.txt"));
  CHECK(story_continuation_prompt(conceptgen::builtin_concept("envy")) == fixture("story_continuation_envy.txt"));
  CHECK(format_explicit_words({"a", "b"}) == "\"a\" or \"b\"");
  CHECK(format_explicit_words({"a"}) == "\"a\"");
}

TEST_CASE("expected labels mark sentences 11 and 22") {
  const auto l = expected_labels();
  REQUIRE(l.size() == 32);
  for (int i = 1; i <= 32; ++i) CHECK(l[static_cast<std::size_t>(i - 1)] == ((i == 11 || i == 22) ? 1 : 0));
}

TEST_CASE("sentence splitter golden cases") {
  using V = std::vector<std::string>;
  CHECK(split_sentences("One. Two! Three?") == V{"One.", "Two!", "Three?"});
  CHECK(split_sentences("He said \"Go.\" Then he left.") == V{"He said \"Go.\"", "Then he left."});
  CHECK(split_sentences("Pi is 3.14 today. Ok.") == V{"Pi is 3.14 today.", "Ok."});
  CHECK(split_sentences("Wait... what? Yes.") == V{"Wait... what?", "Yes."});
  CHECK(split_sentences("She smiled. \"Really?\" he asked.") == V{"She smiled.", "\"Really?\" he asked."});
  CHECK(split_sentences("Dr. Smith arrived. He sat.") == V{"Dr.", "Smith arrived.", "He sat."});
  CHECK(split_sentences("No end mark") == V{"No end mark"});
  CHECK(split_sentences("  ").empty());
  CHECK(split_sentences("It ended (finally.) Then rain.") == V{"It ended (finally.)", "Then rain."});
  CHECK(split_sentences("Curly \xE2\x80\x9CHi.\xE2\x80\x9D Next.") == V{"Curly \xE2\x80\x9CHi.\xE2\x80\x9D", "Next."});
}

TEST_CASE("property: splitting then rejoining preserves the text up to whitespace") {
  Rng rng(31);
  const std::vector<std::string> words = {"the", "Team", "ran", "\"Go!\"", "fast.", "Why?", "ok", "Yes!", "3.5", "(end.)"};
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const int n = 1 + static_cast<int>(rng.below(30));
    for (int i = 0; i < n; ++i) {
      text += words[rng.below(words.size())];
      text += rng.below(4) == 0 ? "\n" : (rng.below(3) == 0 ? "  " : " ");
    }
    const auto sentences = split_sentences(text);
    std::string joined;
    for (const auto& s : sentences) joined += (joined.empty() ? "" : " ") + s;
    std::istringstream a(text), b(joined);
    std::vector<std::string> ta, tb;
    for (std::string t; a >> t;) ta.push_back(t);
    for (std::string t; b >> t;) tb.push_back(t);
    CHECK(ta == tb);
    for (const auto& s : sentences) CHECK_FALSE(s.empty());
  }
}

TEST_CASE("paragraph splitting and the initial structure check") {
  CHECK(split_paragraphs("a\n\nb\n \n c").size() == 3);
  CHECK(split_paragraphs("a\nb\nc").size() == 3);
  CHECK(split_paragraphs("a\nb\n\nc") == std::vector<std::string>{"a\nb", "c"});
  CHECK(has_initial_structure(draft()));
  CHECK_FALSE(has_initial_structure(paragraph(1) + "\n\n" + paragraph(2)));
  CHECK_FALSE(has_initial_structure(paragraph(1) + "\n\n" + paragraph(2) + "\n\n" + paragraph(3) + " Extra one."));
}

TEST_CASE("well-formed two-turn chat yields a 32-sentence candidate") {
  const auto spec = conceptgen::builtin_concept("ambition");
  std::vector<chat::ChatRequest> seen;
  chat::FunctionEndpoint stub([&](const chat::ChatRequest& r) {
    seen.push_back(r);
    return r.messages.size() == 1 ? draft() : full_story();
  });
  const auto c = generate_story(spec, "sports", stub, "story7");
  REQUIRE(c.story.has_value());
  CHECK(c.story->story_id == "story7");
  CHECK(c.story->context == "sports");
  CHECK(c.story->sentences.size() == 32);
  CHECK(c.story->sentences[10] == kTransition1);
  CHECK(c.story->sentences[21] == kTransition2);
  REQUIRE(seen.size() == 2);
  CHECK(seen[0].messages[0].content == story_initial_prompt(spec, "sports"));
  REQUIRE(seen[1].messages.size() == 3);
  CHECK(seen[1].messages[1].role == "assistant");
  CHECK(seen[1].messages[1].content == draft());
  CHECK(seen[1].messages[2].content == story_continuation_prompt(spec));
}

TEST_CASE("malformed drafts are regenerated once, then rejected") {
  const auto spec = conceptgen::builtin_concept("ambition");
  int calls = 0;
  std::vector<int> variants;
  chat::FunctionEndpoint thirty([&](const chat::ChatRequest& r) {
    ++calls;
    variants.push_back(r.variant);
    return paragraph(1) + " " + paragraph(2) + " " + paragraph(3);
  });
  const auto c = generate_story(spec, "sports", thirty);
  CHECK_FALSE(c.story.has_value());
  CHECK(c.reason == "structure");
  CHECK(calls == 2);
  CHECK(variants == std::vector<int>{0, 1});
  CHECK(c.raw_replies.size() == 2);

  // Good draft, but the final story still has 30 sentences.
  chat::FunctionEndpoint short_final([](const chat::ChatRequest&) { return draft(); });
  const auto c2 = generate_story(spec, "sports", short_final);
  CHECK_FALSE(c2.story.has_value());
  CHECK(c2.reason == "sentence_count");

  // First draft bad, regeneration good.
  int n = 0;
  chat::FunctionEndpoint second_try([&](const chat::ChatRequest& r) -> std::string {
    if (r.messages.size() == 3) return full_story();
    return n++ == 0 ? paragraph(1) : draft();
  });
  CHECK(generate_story(spec, "sports", second_try).story.has_value());
}

TEST_CASE("validation: accepted pattern, stray label, stem") {
  const auto ambition = conceptgen::builtin_concept("ambition");
  auto story = accepted_story();
  chat::FunctionEndpoint good([](const chat::ChatRequest& r) { return classify(r); });
  const auto v = validate_story(story, ambition, good, 2);
  CHECK(v.accepted);
  CHECK(story.sentence_labels == expected_labels());

  auto stray_story = accepted_story();
  const auto stray = stray_story.sentences[4];
  chat::FunctionEndpoint stray_stub([&](const chat::ChatRequest& r) { return classify(r, stray); });
  const auto v2 = validate_story(stray_story, ambition, stray_stub);
  CHECK_FALSE(v2.accepted);
  CHECK(v2.reason == "label_pattern");
  CHECK(stray_story.sentence_labels.empty());

  auto unlabeled = accepted_story();
  chat::FunctionEndpoint vague([](const chat::ChatRequest& r) { return is_classifier(r) ? "unsure" : ""; });
  CHECK(validate_story(unlabeled, ambition, vague).reason == "label_pattern");

  const auto envy = conceptgen::builtin_concept("envy");
  auto jealous = accepted_story();
  jealous.sentences[10] = "Her jealousy grew as her rival lifted the trophy.";
  int classifier_calls = 0;
  chat::FunctionEndpoint counting([&](const chat::ChatRequest& r) {
    ++classifier_calls;
    return classify(r);
  });
  const auto v3 = validate_story(jealous, envy, counting);
  CHECK_FALSE(v3.accepted);
  CHECK(v3.reason == "stem");
  CHECK(classifier_calls == 0);

  Story short_story;
  short_story.sentences.assign(31, "A.");
  CHECK_THROWS_AS(validate_story(short_story, ambition, good), DataError);
}

TEST_CASE("property: every corruption class is caught") {
  const auto spec = conceptgen::builtin_concept("ambition");
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    auto story = accepted_story();
    const auto kind = rng.below(3);
    const auto pos = rng.below(32);
    std::string stray;
    std::string silenced;
    std::string expected_reason;
    if (kind == 0) {
      // A paragraph sentence labelled as carrying the concept.
      auto p = pos;
      while (p == 10 || p == 21) p = rng.below(32);
      stray = story.sentences[p];
      expected_reason = "label_pattern";
    } else if (kind == 1) {
      silenced = rng.below(2) ? kTransition1 : kTransition2;
      expected_reason = "label_pattern";
    } else {
      story.sentences[pos] += rng.below(2) ? " She aspired to more." : " An ambitious plan.";
      expected_reason = "stem";
    }
    chat::FunctionEndpoint stub([&](const chat::ChatRequest& r) -> std::string {
      const auto& s = r.messages.back().content;
      if (s == silenced) return "0";
      return classify(r, stray);
    });
    const auto v = validate_story(story, spec, stub);
    CHECK_FALSE(v.accepted);
    CHECK(v.reason == expected_reason);
  }
}

TEST_CASE("generate_stories cycles contexts and stops at the target") {
  auto spec = conceptgen::builtin_concept("ambition");
  spec.contexts = {"sports", "music"};
  int story_calls = 0;
  chat::FunctionEndpoint stub([&](const chat::ChatRequest& r) -> std::string {
    if (is_classifier(r)) return classify(r);
    if (r.messages.size() == 1) {
      ++story_calls;
      // Every story whose first prompt mentions music is malformed.
      return r.messages[0].content.find("context of music") != std::string::npos ? "Bad." : draft();
    }
    return full_story();
  });
  const auto result = generate_stories(spec, stub, 2, 10);
  CHECK(result.accepted.size() == 2);
  CHECK(result.attempts == 3);
  CHECK(result.rejected.at("structure") == 1);
  CHECK(result.accepted[0].context == "sports");
  CHECK(result.accepted[0].story_id == "story0");
  CHECK(result.accepted[1].story_id == "story2");

  const auto capped = generate_stories(spec, stub, 5, 4);
  CHECK(capped.attempts == 4);
  CHECK(capped.accepted.size() == 2);
}

TEST_CASE("story csv matches the extractor schema") {
  testkit::TempDir dir;
  auto story = accepted_story();
  story.sentence_labels = expected_labels();
  story.context = "sports";
  write_story_csv(dir / "stories.csv", {story});
  const auto table = read_csv(dir / "stories.csv");
  CHECK(table.header == std::vector<std::string>{"input_text", "label", "story_id", "context"});
  REQUIRE(table.rows.size() == 1);
  CHECK(split_sentences(table.rows[0][0]) == story.sentences);
  CHECK(table.rows[0][1].starts_with("[0, 0,"));
  CHECK(embedstore::parse_label_list(table.rows[0][1]) == expected_labels());
}
