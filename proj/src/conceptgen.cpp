#include "cprobe/conceptgen.hpp"

#include "cprobe/common.hpp"
#include "cprobe/csv.hpp"
#include "cprobe/error.hpp"
#include "cprobe/probekit.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <sstream>

namespace cprobe::conceptgen {
namespace {

using nlohmann::json;

struct Builtin {
  const char* name;
  const char* definition;
  const char* extra;  // nullptr when the concept has no extra line
  std::vector<std::string> stems;
  std::vector<std::string> explicit_words;
};

const std::vector<Builtin>& builtins() {
  static const std::vector<Builtin> table = {
      {"ambition",
       "a character's desire to achieve a goal, higher status, or result through their efforts, skill, or courage",
       "The generated examples MUST show this in a positive way (the example must not convey a lack of ambition).",
       {"ambit", "aspir"},
       {"ambition", "ambitious", "aspire", "aspiration"}},
      {"investigation",
       "a systematic process of inquiry or examination conducted to uncover facts, gather information, or solve a "
       "problem, typically involving careful observation, analysis, and evaluation of evidence or data to arrive at "
       "conclusions or determine the truth about a particular matter",
       nullptr,
       {"investigat", "examin"},
       {"investigation", "investigate", "examine", "examination"}},
      {"democracy",
       "a system of governance in which decision-making power is vested in the people, either directly or through "
       "elected representatives. It is based on equal rights for everyone, the rule of law (no one, not even "
       "leaders, is above the law) and the idea that those in power are accountable to the people",
       "Try to minimize using keywords, like \"vote\", \"representative\", \"collective\", that make the concept too "
       "obvious in the context.",
       {"democra"},
       {"democracy", "democratic", "democratize"}},
      {"envy",
       "the feeling of resentment or discontent evoked by another individual\xE2\x80\x99s perceived advantage, which "
       "the subject lacks and desires or deems necessary to acquire",
       "Avoid mentioning words like \"envy\", \"envious\", \"jealous\", or \"jealousy\" in the examples.",
       {"env", "jealous"},
       {"envy", "envious", "jealous", "jealousy"}},
  };
  return table;
}

ConceptSpec from_builtin(const Builtin& b) {
  ConceptSpec spec;
  spec.name = b.name;
  spec.definition = b.definition;
  if (b.extra) spec.extra_instructions = b.extra;
  spec.stems = b.stems;
  spec.contexts = default_contexts();
  spec.explicit_words = b.explicit_words;
  return spec;
}

const Builtin* find_builtin(std::string_view name) {
  const auto lowered = to_lower(name);
  for (const auto& b : builtins()) {
    if (lowered == b.name) return &b;
  }
  return nullptr;
}

std::string strip_punct(std::string_view token) {
  auto is_edge = [](unsigned char c) { return std::ispunct(c) != 0; };
  std::size_t begin = 0;
  std::size_t end = token.size();
  while (begin < end && is_edge(static_cast<unsigned char>(token[begin]))) ++begin;
  while (end > begin && is_edge(static_cast<unsigned char>(token[end - 1]))) --end;
  return std::string(token.substr(begin, end - begin));
}

std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::string generator_prompt(const ConceptSpec& spec, int num_examples, std::string_view context, Polarity polarity) {
  const std::string& c = spec.name;
  std::string p;
  p += "Generate enumerated examples which mimic the provided sentences only in terms of subject-verb order, but not "
       "in semantic meaning.\n";
  if (polarity == Polarity::positive) {
    p += "The semantic meaning should be changed so that the concept of " + c + " is obvious in the context.\n";
    p += c + " is " + spec.definition + "\n";
  } else {
    p += "The semantic meaning should be changed so that the context is irrelevant to the concept of " + c +
         " whatsoever.\n";
    p += c + " is " + spec.definition + "\n";
    p += "Irrelevance to " + c + " means not showing these traits in the text, and not even showing the opposite of this.\n";
    p += "The context must still be focused on human subjects rather than on the setting or surrounding environment.\n";
  }
  p += "You can add a few more words to the original example length to achieve this, or you can use a slightly fewer "
       "number of words.\n";
  p += "Do not repeat the ideas in the previously generated examples.\n";
  if (polarity == Polarity::positive && spec.extra_instructions && !spec.extra_instructions->empty()) {
    p += *spec.extra_instructions + "\n";
  }
  p += "Do not refer to the characters as \"The ___\".\n";
  p += "Generate exactly " + std::to_string(num_examples) +
       " examples based on the given enumerated examples. Output only the example and its enumeration. The examples "
       "that you generate must be in the context of " +
       std::string(context) + ". Here are the enumerated examples:";
  return p;
}

std::vector<std::string> string_list(const json& j, const char* key) {
  std::vector<std::string> out;
  for (const auto& item : j.at(key)) out.push_back(item.get<std::string>());
  return out;
}

}  // namespace

const std::vector<std::string>& default_contexts() {
  static const std::vector<std::string> contexts = {
      "workplace", "academia", "sports",     "entrepreneurship", "politics",    "arts",
      "music",     "community", "science", "technology",       "social media",
  };
  return contexts;
}

std::vector<std::string> builtin_concept_names() {
  std::vector<std::string> names;
  for (const auto& b : builtins()) names.emplace_back(b.name);
  return names;
}

ConceptSpec builtin_concept(std::string_view name) {
  if (const auto* b = find_builtin(name)) return from_builtin(*b);
  throw ConfigError("unknown concept '" + std::string(name) + "'");
}

ConceptSpec parse_concept_spec(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw SchemaError("concept spec: " + std::string(e.what()));
  }
  if (!j.is_object() || !j.contains("name")) {
    throw SchemaError("concept spec must be an object with a name");
  }
  try {
    ConceptSpec spec;
    const auto name = j.at("name").get<std::string>();
    if (const auto* b = find_builtin(name)) {
      spec = from_builtin(*b);
    } else {
      spec.name = name;
      spec.contexts = default_contexts();
      if (!j.contains("definition")) throw SchemaError("concept spec for '" + name + "' needs a definition");
    }
    if (j.contains("definition")) {
      spec.definition = j.at("definition").get<std::string>();
      while (!spec.definition.empty() && spec.definition.back() == '.') spec.definition.pop_back();
    }
    if (j.contains("extra_instructions")) {
      if (j.at("extra_instructions").is_null()) {
        spec.extra_instructions.reset();
      } else {
        spec.extra_instructions = j.at("extra_instructions").get<std::string>();
      }
    }
    if (j.contains("stems")) {
      spec.stems = string_list(j, "stems");
      for (auto& s : spec.stems) s = to_lower(s);
    }
    if (j.contains("contexts")) spec.contexts = string_list(j, "contexts");
    if (j.contains("explicit_words")) spec.explicit_words = string_list(j, "explicit_words");
    if (spec.contexts.empty()) throw SchemaError("concept spec needs at least one context");
    return spec;
  } catch (const json::exception& e) {
    throw SchemaError("concept spec: " + std::string(e.what()));
  }
}

ConceptSpec load_concept_spec(const std::filesystem::path& path) {
  return parse_concept_spec(read_text_file(path));
}

std::string concept_spec_json(const ConceptSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["definition"] = spec.definition;
  j["extra_instructions"] = spec.extra_instructions ? json(*spec.extra_instructions) : json(nullptr);
  j["stems"] = spec.stems;
  j["contexts"] = spec.contexts;
  j["explicit_words"] = spec.explicit_words;
  return j.dump(2);
}

std::vector<Template> load_templates(const std::filesystem::path& path) {
  std::vector<Template> out;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    out.push_back({"t" + std::to_string(lineno), line});
  }
  return out;
}

std::string template_filter_prompt(std::string_view candidate) {
  std::string p =
      "Classify the following example as either \"True\" or \"False\" based on the given conditions:\n"
      "\n"
      "- The text must contain complete and coherent sentences with actionable verbs.\n"
      "- The text must be free of out-of-place words, numbers (like chapter titles), or ISBN numbers.\n"
      "- The text should mainly focus on human subjects and their actions/interactions, not on the surrounding "
      "environment or non-human subjects.\n"
      "\n"
      "classify as \"True\" only if all of these conditions are met, otherwise, classify as \"False\".\n"
      "\n"
      "Example:\n";
  p += candidate;
  return p;
}

std::string positive_generator_prompt(const ConceptSpec& spec, int num_examples, std::string_view context) {
  return generator_prompt(spec, num_examples, context, Polarity::positive);
}

std::string negative_generator_prompt(const ConceptSpec& spec, int num_examples, std::string_view context) {
  return generator_prompt(spec, num_examples, context, Polarity::negative);
}

std::string classifier_prompt(const ConceptSpec& spec) {
  return "Classify the following input as either implying the concept of " + spec.name + " or not.\n" + spec.name +
         " is " + spec.definition + "\n" + "If the given input implies " + spec.name + ", output 1, else output 0.";
}

std::string enumerate_templates(const std::vector<std::string>& texts) {
  std::string out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (i) out += '\n';
    out += std::to_string(i + 1) + ". " + texts[i];
  }
  return out;
}

std::vector<Enumerated> parse_enumerated(std::string_view reply) {
  std::vector<Enumerated> items;
  bool last_accepted = false;
  std::istringstream in{std::string(reply)};
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    std::size_t digits = 0;
    while (digits < t.size() && std::isdigit(static_cast<unsigned char>(t[digits]))) ++digits;
    const bool numbered = digits > 0 && digits < 7 && digits < t.size() && (t[digits] == '.' || t[digits] == ')');
    if (!numbered) {
      if (last_accepted) items.back().text += " " + t;
      continue;
    }
    const int index = std::stoi(t.substr(0, digits));
    auto text = trim(std::string_view(t).substr(digits + 1));
    if (!items.empty() && index <= items.back().index) {
      last_accepted = false;
      continue;
    }
    items.push_back({index, std::move(text)});
    last_accepted = true;
  }
  std::erase_if(items, [](const Enumerated& e) { return e.text.empty(); });
  return items;
}

std::optional<int> parse_binary_label(std::string_view reply) {
  for (const auto& tok : whitespace_tokens(reply)) {
    const auto s = strip_punct(tok);
    if (s == "0") return 0;
    if (s == "1") return 1;
  }
  return std::nullopt;
}

std::optional<bool> parse_true_false(std::string_view reply) {
  for (const auto& tok : whitespace_tokens(reply)) {
    const auto s = to_lower(strip_punct(tok));
    if (s == "true") return true;
    if (s == "false") return false;
  }
  return std::nullopt;
}

FilterResult filter_templates(const std::vector<Template>& candidates, chat::ChatEndpoint& endpoint, int jobs) {
  std::vector<std::optional<bool>> verdicts(candidates.size());
  probekit::parallel_for(static_cast<int>(candidates.size()), jobs, [&](int i) {
    chat::ChatRequest request;
    request.messages = {{"user", template_filter_prompt(candidates[static_cast<std::size_t>(i)].text)}};
    request.temperature = 0.0;
    verdicts[static_cast<std::size_t>(i)] = parse_true_false(endpoint.complete(request));
  });
  FilterResult result;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!verdicts[i]) {
      result.unparseable.push_back(candidates[i]);
    } else if (*verdicts[i]) {
      result.kept.push_back(candidates[i]);
    } else {
      result.rejected.push_back(candidates[i]);
    }
  }
  return result;
}

std::size_t context_index(std::size_t i, int num_per_call, std::size_t num_contexts) {
  if (num_per_call < 1 || num_contexts == 0) throw ConfigError("num_per_call and contexts must be positive");
  return (i / static_cast<std::size_t>(num_per_call)) % num_contexts;
}

GenerationResult generate_pairs(const ConceptSpec& spec,
                                const std::vector<Template>& templates,
                                chat::ChatEndpoint& endpoint,
                                int num_per_call) {
  if (templates.empty()) throw ConfigError("no templates to generate from");
  if (spec.contexts.empty()) throw ConfigError("concept spec has no contexts");
  if (num_per_call < 1) throw ConfigError("num_per_call must be positive");

  GenerationResult result;
  std::vector<chat::ChatMessage> history[2];
  const std::size_t n_batches = (templates.size() + num_per_call - 1) / static_cast<std::size_t>(num_per_call);

  for (std::size_t b = 0; b < n_batches; ++b) {
    const auto first = b * static_cast<std::size_t>(num_per_call);
    const auto last = std::min(templates.size(), first + static_cast<std::size_t>(num_per_call));
    const int count = static_cast<int>(last - first);
    const auto& context = spec.contexts[context_index(first, num_per_call, spec.contexts.size())];
    if (b % spec.contexts.size() == 0) {
      history[0].clear();
      history[1].clear();
    }

    std::vector<std::string> texts;
    std::vector<std::string> ids;
    for (std::size_t t = first; t < last; ++t) {
      texts.push_back(templates[t].text);
      ids.push_back(templates[t].id);
    }

    std::vector<Enumerated> parsed[2];
    for (int side = 0; side < 2; ++side) {
      const auto polarity = side == 0 ? Polarity::positive : Polarity::negative;
      const auto prompt = generator_prompt(spec, count, context, polarity) + "\n" + enumerate_templates(texts);
      chat::ChatRequest request;
      request.messages = history[side];
      request.messages.push_back({"user", prompt});
      request.temperature = 1.0;

      GenBatch batch;
      batch.template_ids = ids;
      batch.context = context;
      batch.polarity = polarity;
      auto reply = endpoint.complete(request);
      batch.raw_outputs.push_back(reply);
      batch.parsed_examples = parse_enumerated(reply);
      if (static_cast<int>(batch.parsed_examples.size()) != count) {
        ++result.retried_batches;
        request.variant = 1;
        reply = endpoint.complete(request);
        batch.raw_outputs.push_back(reply);
        batch.parsed_examples = parse_enumerated(reply);
      }
      std::erase_if(batch.parsed_examples, [&](const Enumerated& e) { return e.index < 1 || e.index > count; });
      history[side].push_back({"user", prompt});
      history[side].push_back({"assistant", reply});
      parsed[side] = batch.parsed_examples;
      result.batches.push_back(std::move(batch));
    }

    std::size_t paired = 0;
    for (const auto& pos : parsed[0]) {
      const auto neg = std::find_if(parsed[1].begin(), parsed[1].end(),
                                    [&](const Enumerated& e) { return e.index == pos.index; });
      if (neg == parsed[1].end()) continue;
      const auto& tmpl = templates[first + static_cast<std::size_t>(pos.index - 1)];
      result.pairs.push_back({"pair-" + tmpl.id, tmpl.id, context, pos.text, neg->text});
      ++paired;
    }
    result.discarded_items += parsed[0].size() + parsed[1].size() - 2 * paired;
  }
  return result;
}

std::vector<std::optional<int>> relabel(const ConceptSpec& spec,
                                        const std::vector<std::string>& texts,
                                        chat::ChatEndpoint& endpoint,
                                        int jobs) {
  const auto system = classifier_prompt(spec);
  std::vector<std::optional<int>> labels(texts.size());
  probekit::parallel_for(static_cast<int>(texts.size()), jobs, [&](int i) {
    chat::ChatRequest request;
    request.messages = {{"system", system}, {"user", texts[static_cast<std::size_t>(i)]}};
    request.temperature = 0.0;
    labels[static_cast<std::size_t>(i)] = parse_binary_label(endpoint.complete(request));
  });
  return labels;
}

bool contains_stem(std::string_view text, const std::vector<std::string>& stems) {
  std::string word;
  auto check = [&] {
    if (word.empty()) return false;
    const auto lowered = to_lower(word);
    word.clear();
    return std::any_of(stems.begin(), stems.end(),
                       [&](const std::string& s) { return !s.empty() && lowered.find(to_lower(s)) != std::string::npos; });
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || std::ispunct(c)) {
      if (check()) return true;
    } else {
      word.push_back(ch);
    }
  }
  return check();
}

FinalizeResult finalize_dataset(const std::vector<LabeledPair>& pairs, const ConceptSpec& spec) {
  FinalizeResult result;
  result.dropped = {{"unlabeled", 0}, {"same_label", 0}, {"stem", 0}};
  for (const auto& lp : pairs) {
    if (!lp.positive_label || !lp.negative_label) {
      ++result.dropped["unlabeled"];
      continue;
    }
    if (*lp.positive_label == *lp.negative_label) {
      ++result.dropped["same_label"];
      continue;
    }
    if (contains_stem(lp.pair.positive_text, spec.stems) || contains_stem(lp.pair.negative_text, spec.stems)) {
      ++result.dropped["stem"];
      continue;
    }
    const bool positive_first = *lp.positive_label == 1;
    const auto& text1 = positive_first ? lp.pair.positive_text : lp.pair.negative_text;
    const auto& text0 = positive_first ? lp.pair.negative_text : lp.pair.positive_text;
    result.rows.push_back({text1, 1, lp.pair.pair_id, lp.pair.template_id});
    result.rows.push_back({text0, 0, lp.pair.pair_id, lp.pair.template_id});
    ++result.kept_pairs;
  }
  return result;
}

void write_dataset_csv(const std::filesystem::path& path, const std::vector<DatasetRow>& rows) {
  std::ostringstream out;
  write_csv_row(out, {"input_text", "label", "pair_id", "source_template_id"});
  for (const auto& r : rows) {
    write_csv_row(out, {r.input_text, std::to_string(r.label), r.pair_id, r.source_template_id});
  }
  write_text_file(path, out.str());
}

}  // namespace cprobe::conceptgen
