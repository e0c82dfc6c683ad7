#pragma once

#include "cprobe/chat.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cprobe::conceptgen {

struct ConceptSpec {
  std::string name;
  // Stored without a trailing period; prompts that need one add it.
  std::string definition;
  std::optional<std::string> extra_instructions;
  std::vector<std::string> stems;  // lowercase
  std::vector<std::string> contexts;
  std::vector<std::string> explicit_words;
};

// workplace, academia, sports, ... social media.
const std::vector<std::string>& default_contexts();

// The four shipped concepts: ambition, investigation, democracy, envy.
std::vector<std::string> builtin_concept_names();
// Case-insensitive; throws ConfigError for unknown names.
ConceptSpec builtin_concept(std::string_view name);

// JSON object with the ConceptSpec fields. A "name" that matches a shipped
// concept fills every absent field from it; otherwise definition is required
// and contexts default to default_contexts().
ConceptSpec load_concept_spec(const std::filesystem::path& path);
ConceptSpec parse_concept_spec(std::string_view json_text);
std::string concept_spec_json(const ConceptSpec& spec);

struct Template {
  std::string id;
  std::string text;
};

// One template per non-empty line; ids are "t1", "t2", ... by line number.
std::vector<Template> load_templates(const std::filesystem::path& path);

// ---- prompts -------------------------------------------------------------

std::string template_filter_prompt(std::string_view candidate);
std::string positive_generator_prompt(const ConceptSpec& spec, int num_examples, std::string_view context);
std::string negative_generator_prompt(const ConceptSpec& spec, int num_examples, std::string_view context);
std::string classifier_prompt(const ConceptSpec& spec);
// "1. first\n2. second\n..."
std::string enumerate_templates(const std::vector<std::string>& texts);

// ---- reply parsing -------------------------------------------------------

struct Enumerated {
  int index = 0;
  std::string text;
};

// Lines of the form "N. text" or "N) text". Indices must increase strictly;
// out-of-order or duplicate indices are skipped. Unnumbered lines continue
// the previous item.
std::vector<Enumerated> parse_enumerated(std::string_view reply);
// First whitespace token that is exactly 0 or 1 once surrounding punctuation
// is stripped.
std::optional<int> parse_binary_label(std::string_view reply);
// First token reading True or False (case-insensitive, quotes stripped).
std::optional<bool> parse_true_false(std::string_view reply);

// ---- pipeline stages -----------------------------------------------------

struct FilterResult {
  std::vector<Template> kept;
  std::vector<Template> rejected;
  std::vector<Template> unparseable;
};

FilterResult filter_templates(const std::vector<Template>& candidates, chat::ChatEndpoint& endpoint, int jobs = 1);

enum class Polarity { positive, negative };

struct GenBatch {
  std::vector<std::string> template_ids;
  std::string context;
  Polarity polarity = Polarity::positive;
  std::vector<std::string> raw_outputs;  // one per attempt
  std::vector<Enumerated> parsed_examples;
};

struct GeneratedPair {
  std::string pair_id;
  std::string template_id;
  std::string context;
  std::string positive_text;
  std::string negative_text;
};

struct GenerationResult {
  std::vector<GeneratedPair> pairs;
  std::vector<GenBatch> batches;
  std::size_t retried_batches = 0;
  std::size_t discarded_items = 0;
};

// Index of the context used for the example at 0-based position `i`.
std::size_t context_index(std::size_t i, int num_per_call, std::size_t num_contexts);

// Two conversations (positive and negative generators), each fed
// num_per_call templates per turn. The context advances every batch and
// wraps around; each conversation restarts whenever the context list wraps.
GenerationResult generate_pairs(const ConceptSpec& spec,
                                const std::vector<Template>& templates,
                                chat::ChatEndpoint& endpoint,
                                int num_per_call = 5);

// One temperature-0 call per text; nullopt marks an unparseable reply.
std::vector<std::optional<int>> relabel(const ConceptSpec& spec,
                                        const std::vector<std::string>& texts,
                                        chat::ChatEndpoint& endpoint,
                                        int jobs = 1);

// Lowercase stem found inside any whitespace/punctuation-delimited word.
bool contains_stem(std::string_view text, const std::vector<std::string>& stems);

struct LabeledPair {
  GeneratedPair pair;
  std::optional<int> positive_label;
  std::optional<int> negative_label;
};

struct DatasetRow {
  std::string input_text;
  int label = 0;
  std::string pair_id;
  std::string source_template_id;
};

struct FinalizeResult {
  std::vector<DatasetRow> rows;
  std::map<std::string, std::size_t> dropped;  // unlabeled, same_label, stem
  std::size_t kept_pairs = 0;
};

// Keeps pairs whose labels are opposite and that contain no stem. Each kept
// pair contributes its label-1 text first.
FinalizeResult finalize_dataset(const std::vector<LabeledPair>& pairs, const ConceptSpec& spec);

// input_text,label,pair_id,source_template_id
void write_dataset_csv(const std::filesystem::path& path, const std::vector<DatasetRow>& rows);

}  // namespace cprobe::conceptgen
