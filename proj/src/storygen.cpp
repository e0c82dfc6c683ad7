#include "cprobe/storygen.hpp"

#include "cprobe/common.hpp"
#include "cprobe/csv.hpp"
#include "cprobe/embedstore.hpp"
#include "cprobe/error.hpp"
#include "cprobe/probekit.hpp"

#include <cctype>
#include <sstream>

namespace cprobe::storygen {
namespace {

bool starts_with_at(std::string_view text, std::size_t pos, std::string_view prefix) {
  return text.substr(pos, prefix.size()) == prefix;
}

// Length of a closing quote or bracket at pos, 0 if none.
std::size_t closing_mark(std::string_view text, std::size_t pos) {
  if (pos >= text.size()) return 0;
  const char c = text[pos];
  if (c == '"' || c == '\'' || c == ')' || c == ']') return 1;
  if (starts_with_at(text, pos, "\xE2\x80\x9D") || starts_with_at(text, pos, "\xE2\x80\x99")) return 3;
  return 0;
}

std::size_t opening_mark(std::string_view text, std::size_t pos) {
  if (pos >= text.size()) return 0;
  const char c = text[pos];
  if (c == '"' || c == '\'' || c == '(' || c == '[') return 1;
  if (starts_with_at(text, pos, "\xE2\x80\x9C") || starts_with_at(text, pos, "\xE2\x80\x98")) return 3;
  return 0;
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

}  // namespace

std::vector<int> expected_labels() {
  std::vector<int> labels(kSentencesPerStory, 0);
  for (const int s : kTransitionSentences) labels[static_cast<std::size_t>(s - 1)] = 1;
  return labels;
}

std::string format_explicit_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0) {
      out += words.size() > 2 ? ", " : " ";
      if (i + 1 == words.size()) out += "or ";
    }
    out += "\"" + words[i] + "\"";
  }
  return out;
}

std::string story_initial_prompt(const conceptgen::ConceptSpec& spec, std::string_view context) {
  const auto& c = spec.name;
  std::string p;
  p += "Generate a 3-paragraph story, where each paragraph is made up of 10 sentences.\n";
  p += "You must abide by that 10-sentence rule.\n";
  p += "The paragraphs must be coherent and logically connected to form a meaningful narrative.\n";
  p += "All sentences in those paragraphs must be irrelevant to the concept of " + c + ".\n";
  p += c + " is " + spec.definition + ".\n";
  p += "The story must be focused on human subjects, not on the environment or animals.\n";
  p += "The story must be in the context of " + std::string(context) + ".\n";
  p += "The story must be written so that later, it can be changed to include the concept of " + c +
       ", but the original story you generate must have this concept absent.\n";
  p += "Do not number the paragraphs or the sentences within the paragraphs and do not include any special characters "
       "to highlight the different paragraphs.";
  return p;
}

std::string story_continuation_prompt(const conceptgen::ConceptSpec& spec) {
  const auto& c = spec.name;
  std::string p;
  p += "Given this story, connect each paragraph to the next one with only one connecting sentence per connection.\n";
  p += "Each connecting sentence must be coherent and logically connected to both paragraphs it joins.\n";
  p += "The tone of the connecting sentences should match the tone of the story.\n";
  p += "The concept of " + c + " must be obvious in the connecting sentences.\n";
  p += c + " is " + spec.definition + ".\n";
  p += "The connecting sentences must not include words that make " + c + " explicit such as " +
       format_explicit_words(spec.explicit_words) + ".\n";
  p += "You can make very slight modifications to the original story to ensure that the connecting sentences are "
       "coherent and logically connected to the story, but the modified sentences must maintain the irrelevance to " +
       c + ".\n";
  p += "Include the whole story with the connecting sentences in your output, not just the connecting sentences.\n";
  p += "Do not include any special characters to highlight the connecting sentences.";
  return p;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  std::size_t i = 0;
  auto emit = [&](std::size_t end) {
    auto s = trim(text.substr(start, end - start));
    if (!s.empty()) out.push_back(std::move(s));
    start = end;
  };
  while (i < text.size()) {
    const char c = text[i];
    if (c != '.' && c != '!' && c != '?') {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end < text.size() && (text[end] == '.' || text[end] == '!' || text[end] == '?')) ++end;
    while (const auto len = closing_mark(text, end)) end += len;

    std::size_t next = end;
    while (next < text.size() && is_space(text[next])) ++next;
    if (next == text.size()) {
      emit(end);
      break;
    }
    if (next > end) {
      const std::size_t letter = next + opening_mark(text, next);
      if (letter < text.size() && std::isupper(static_cast<unsigned char>(text[letter]))) {
        emit(end);
      }
    }
    i = end;
  }
  if (start < text.size()) emit(text.size());
  return out;
}

std::vector<std::string> split_paragraphs(std::string_view text) {
  std::vector<std::string> lines;
  {
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
  }
  bool has_blank = false;
  bool seen_text = false;
  for (const auto& line : lines) {
    if (trim(line).empty()) {
      if (seen_text) has_blank = true;
    } else {
      seen_text = true;
    }
  }
  std::vector<std::string> paragraphs;
  std::string current;
  auto flush = [&] {
    auto t = trim(current);
    if (!t.empty()) paragraphs.push_back(std::move(t));
    current.clear();
  };
  for (const auto& line : lines) {
    if (trim(line).empty()) {
      flush();
      continue;
    }
    if (!has_blank) {
      current = line;
      flush();
      continue;
    }
    if (!current.empty()) current += '\n';
    current += line;
  }
  flush();
  return paragraphs;
}

bool has_initial_structure(std::string_view text) {
  const auto paragraphs = split_paragraphs(text);
  if (static_cast<int>(paragraphs.size()) != kParagraphs) return false;
  for (const auto& p : paragraphs) {
    if (static_cast<int>(split_sentences(p).size()) != kSentencesPerParagraph) return false;
  }
  return true;
}

Candidate generate_story(const conceptgen::ConceptSpec& spec,
                         std::string_view context,
                         chat::ChatEndpoint& endpoint,
                         std::string story_id,
                         int attempt) {
  Candidate candidate;
  const auto initial = story_initial_prompt(spec, context);

  chat::ChatRequest first;
  first.messages = {{"user", initial}};
  first.temperature = 1.0;
  first.variant = 2 * attempt;
  auto draft = endpoint.complete(first);
  candidate.raw_replies.push_back(draft);
  if (!has_initial_structure(draft)) {
    first.variant = 2 * attempt + 1;
    draft = endpoint.complete(first);
    candidate.raw_replies.push_back(draft);
    if (!has_initial_structure(draft)) {
      candidate.reason = "structure";
      return candidate;
    }
  }

  chat::ChatRequest second;
  second.messages = {{"user", initial}, {"assistant", draft}, {"user", story_continuation_prompt(spec)}};
  second.temperature = 1.0;
  second.variant = first.variant;
  const auto full = endpoint.complete(second);
  candidate.raw_replies.push_back(full);

  auto sentences = split_sentences(full);
  if (static_cast<int>(sentences.size()) != kSentencesPerStory) {
    candidate.reason = "sentence_count";
    return candidate;
  }
  Story story;
  story.story_id = std::move(story_id);
  story.context = std::string(context);
  story.sentences = std::move(sentences);
  candidate.story = std::move(story);
  return candidate;
}

Validation validate_story(Story& story, const conceptgen::ConceptSpec& spec, chat::ChatEndpoint& endpoint, int jobs) {
  Validation v;
  if (static_cast<int>(story.sentences.size()) != kSentencesPerStory) {
    throw DataError("story " + story.story_id + " has " + std::to_string(story.sentences.size()) + " sentences");
  }
  for (const auto& s : story.sentences) {
    if (conceptgen::contains_stem(s, spec.stems)) {
      v.reason = "stem";
      return v;
    }
  }
  v.labels = conceptgen::relabel(spec, story.sentences, endpoint, jobs);
  const auto expected = expected_labels();
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (!v.labels[i] || *v.labels[i] != expected[i]) {
      v.reason = "label_pattern";
      return v;
    }
  }
  story.sentence_labels = expected;
  v.accepted = true;
  return v;
}

StoryRunResult generate_stories(const conceptgen::ConceptSpec& spec,
                                chat::ChatEndpoint& endpoint,
                                int target,
                                int max_attempts,
                                int jobs) {
  if (spec.contexts.empty()) throw ConfigError("concept spec has no contexts");
  StoryRunResult result;
  const int n_contexts = static_cast<int>(spec.contexts.size());
  const int chunk = std::max(1, jobs);
  while (static_cast<int>(result.accepted.size()) < target && result.attempts < max_attempts) {
    const int count = std::min(chunk, max_attempts - result.attempts);
    std::vector<Candidate> candidates(static_cast<std::size_t>(count));
    std::vector<Validation> validations(static_cast<std::size_t>(count));
    const int base = result.attempts;
    probekit::parallel_for(count, jobs, [&](int k) {
      const int i = base + k;
      auto& cand = candidates[static_cast<std::size_t>(k)];
      cand = generate_story(spec, spec.contexts[static_cast<std::size_t>(i % n_contexts)], endpoint,
                            "story" + std::to_string(i), i / n_contexts);
      if (cand.story) validations[static_cast<std::size_t>(k)] = validate_story(*cand.story, spec, endpoint);
    });
    for (int k = 0; k < count; ++k) {
      ++result.attempts;
      auto& cand = candidates[static_cast<std::size_t>(k)];
      if (!cand.story) {
        ++result.rejected[cand.reason];
      } else if (!validations[static_cast<std::size_t>(k)].accepted) {
        ++result.rejected[validations[static_cast<std::size_t>(k)].reason];
      } else if (static_cast<int>(result.accepted.size()) < target) {
        result.accepted.push_back(std::move(*cand.story));
      }
    }
  }
  return result;
}

void write_story_csv(const std::filesystem::path& path, const std::vector<Story>& stories) {
  std::ostringstream out;
  write_csv_row(out, {"input_text", "label", "story_id", "context"});
  for (const auto& story : stories) {
    std::string text;
    for (std::size_t i = 0; i < story.sentences.size(); ++i) {
      if (i) text += ' ';
      text += story.sentences[i];
    }
    write_csv_row(out, {text, embedstore::format_label_list(story.sentence_labels), story.story_id, story.context});
  }
  write_text_file(path, out.str());
}

}  // namespace cprobe::storygen
