#pragma once

#include "cprobe/chat.hpp"
#include "cprobe/conceptgen.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cprobe::storygen {

inline constexpr int kSentencesPerStory = 32;
inline constexpr int kParagraphs = 3;
inline constexpr int kSentencesPerParagraph = 10;
// 1-based positions of the two concept-bearing transition sentences.
inline constexpr std::array<int, 2> kTransitionSentences = {11, 22};

struct Story {
  std::string story_id;
  std::string context;
  std::vector<std::string> sentences;
  std::vector<int> sentence_labels;
};

// Expected labels of an accepted story: 1 at the transitions, 0 elsewhere.
std::vector<int> expected_labels();

std::string story_initial_prompt(const conceptgen::ConceptSpec& spec, std::string_view context);
std::string story_continuation_prompt(const conceptgen::ConceptSpec& spec);
// "a", "b", "c", or "d"
std::string format_explicit_words(const std::vector<std::string>& words);

// Splits after '.', '!' or '?' (plus any closing quotes or brackets) when the
// next non-space character is an uppercase letter, optionally behind an
// opening quote, or when the text ends. Sentences are trimmed.
std::vector<std::string> split_sentences(std::string_view text);
// Blocks separated by blank lines; a text without blank lines falls back to
// one paragraph per line.
std::vector<std::string> split_paragraphs(std::string_view text);
// Three paragraphs of ten sentences each.
bool has_initial_structure(std::string_view text);

struct Candidate {
  std::optional<Story> story;
  std::string reason;  // "structure" or "sentence_count" on rejection
  std::vector<std::string> raw_replies;
};

// Two-turn chat. `attempt` separates otherwise identical conversations so
// journals keep every attempt.
Candidate generate_story(const conceptgen::ConceptSpec& spec,
                         std::string_view context,
                         chat::ChatEndpoint& endpoint,
                         std::string story_id = "story0",
                         int attempt = 0);

struct Validation {
  bool accepted = false;
  std::string reason;  // "stem" or "label_pattern" on rejection
  std::vector<std::optional<int>> labels;
};

// Stems are checked first; only stem-free stories are relabeled. On
// acceptance story.sentence_labels is filled in.
Validation validate_story(Story& story, const conceptgen::ConceptSpec& spec, chat::ChatEndpoint& endpoint, int jobs = 1);

struct StoryRunResult {
  std::vector<Story> accepted;
  std::map<std::string, std::size_t> rejected;  // reason -> count
  int attempts = 0;
};

// Cycles through spec.contexts until `target` stories pass validation or
// `max_attempts` candidates have been tried.
StoryRunResult generate_stories(const conceptgen::ConceptSpec& spec,
                                chat::ChatEndpoint& endpoint,
                                int target,
                                int max_attempts,
                                int jobs = 1);

// input_text,label,story_id,context with label as "[0, 0, 1, ...]".
void write_story_csv(const std::filesystem::path& path, const std::vector<Story>& stories);

}  // namespace cprobe::storygen
