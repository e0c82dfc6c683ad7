#include "cprobe/conceptgen.hpp"
#include "cprobe/csv.hpp"
#include "cprobe/error.hpp"

#include "testkit.hpp"

#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <mutex>
#include <sstream>

using namespace cprobe;
using namespace cprobe::conceptgen;

namespace {

std::string fixture(const std::string& name) {
  std::ifstream in(std::filesystem::path(CPROBE_FIXTURES) / "prompts" / name, std::ios::binary);
  REQUIRE(in);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string last_user(const chat::ChatRequest& r) { return r.messages.back().content; }

// Replies with one line per enumerated template, tagging polarity and context
// so the tests can see which prompt produced which text.
std::string echo_reply(const chat::ChatRequest& r) {
  const auto prompt = last_user(r);
  const bool positive = prompt.find("is obvious in the context") != std::string::npos;
  const auto ctx_at = prompt.find("in the context of ") + 18;
  const auto context = prompt.substr(ctx_at, prompt.find(". Here are", ctx_at) - ctx_at);
  const auto list = prompt.substr(prompt.find("enumerated examples:\n") + 21);
  std::string reply;
  for (const auto& item : parse_enumerated(list)) {
    reply += std::to_string(item.index) + ". " + (positive ? "POS " : "NEG ") + context + " " + item.text + "\n";
  }
  return reply;
}

std::vector<Template> numbered_templates(int n) {
  std::vector<Template> t;
  for (int i = 1; i <= n; ++i) t.push_back({"t" + std::to_string(i), "Template number " + std::to_string(i) + "."});
  return t;
}

GeneratedPair pair(const std::string& id, std::string pos, std::string neg) {
  return {id, "t-" + id, "workplace", std::move(pos), std::move(neg)};
}

}  // namespace

TEST_CASE("shipped concepts") {
  CHECK(builtin_concept_names() == std::vector<std::string>{"ambition", "investigation", "democracy", "envy"});
  const auto a = builtin_concept("Ambition");
  CHECK(a.stems == std::vector<std::string>{"ambit", "aspir"});
  CHECK(builtin_concept("envy").stems == std::vector<std::string>{"env", "jealous"});
  CHECK(builtin_concept("democracy").stems == std::vector<std::string>{"democra"});
  CHECK(builtin_concept("investigation").stems == std::vector<std::string>{"investigat", "examin"});
  CHECK_FALSE(builtin_concept("investigation").extra_instructions.has_value());
  CHECK(a.contexts.size() == 11);
  CHECK(a.contexts.front() == "workplace");
  CHECK(a.contexts.back() == "social media");
  CHECK(a.definition.back() != '.');
  CHECK_THROWS_AS(builtin_concept("greed"), ConfigError);
}

TEST_CASE("concept spec json") {
  const auto spec = parse_concept_spec(R"({"name": "ambition", "contexts": ["sports"]})");
  CHECK(spec.contexts == std::vector<std::string>{"sports"});
  CHECK(spec.stems == builtin_concept("ambition").stems);

  const auto custom = parse_concept_spec(R"({"name": "greed", "definition": "wanting too much.", "stems": ["GREED"]})");
  CHECK(custom.definition == "wanting too much");
  CHECK(custom.stems == std::vector<std::string>{"greed"});
  CHECK(custom.contexts == default_contexts());
  CHECK_THROWS_AS(parse_concept_spec(R"({"name": "greed"})"), SchemaError);
  CHECK_THROWS_AS(parse_concept_spec("[1]"), SchemaError);

  const auto back = parse_concept_spec(concept_spec_json(builtin_concept("envy")));
  CHECK(back.definition == builtin_concept("envy").definition);
  CHECK(back.extra_instructions == builtin_concept("envy").extra_instructions);
  CHECK(back.explicit_words == builtin_concept("envy").explicit_words);
}

TEST_CASE("golden prompts") {
  CHECK(template_filter_prompt("CHAPTER IV. 1873") == fixture("filter_chapter.txt"));
  CHECK(positive_generator_prompt(builtin_concept("ambition"), 5, "workplace") ==
        fixture("positive_ambition_5_workplace.txt"));
  CHECK(negative_generator_prompt(builtin_concept("ambition"), 5, "workplace") ==
        fixture("negative_ambition_5_workplace.txt"));
  CHECK(positive_generator_prompt(builtin_concept("investigation"), 3, "science") ==
        fixture("positive_investigation_3_science.txt"));
  CHECK(classifier_prompt(builtin_concept("envy")) == fixture("classifier_envy.txt"));
  CHECK(enumerate_templates({"a", "b"}) == "1. a\n2. b");
}

TEST_CASE("enumerated reply parsing") {
  const auto items = parse_enumerated("Sure:\n1. First one.\n2) Second\n   continues here\n2. dup\n4. Fourth\n3. late\n");
  REQUIRE(items.size() == 3);
  CHECK(items[0].index == 1);
  CHECK(items[0].text == "First one.");
  CHECK(items[1].text == "Second continues here");
  CHECK(items[2].index == 4);
  CHECK(parse_enumerated("no numbers here").empty());
}

TEST_CASE("label and verdict parsing") {
  CHECK(parse_binary_label("1") == 1);
  CHECK(parse_binary_label("Output: 0.") == 0);
  CHECK_FALSE(parse_binary_label("maybe").has_value());
  CHECK_FALSE(parse_binary_label("10").has_value());
  CHECK(parse_true_false("\"True\"") == true);
  CHECK(parse_true_false("false.") == false);
  CHECK_FALSE(parse_true_false("unsure").has_value());
}

TEST_CASE("template filter follows the endpoint verdicts") {
  const std::vector<Template> candidates = {{"t1", "CHAPTER IV. 1873"}, {"t2", "She opened the door and smiled."},
                                            {"t3", "???"}};
  chat::FunctionEndpoint stub([](const chat::ChatRequest& r) -> std::string {
    CHECK(r.temperature == 0.0);
    const auto p = last_user(r);
    if (p.ends_with("1873")) return "False";
    if (p.ends_with("smiled.")) return "True";
    return "I cannot tell";
  });
  const auto result = filter_templates(candidates, stub, 2);
  REQUIRE(result.kept.size() == 1);
  CHECK(result.kept[0].text == "She opened the door and smiled.");
  CHECK(result.kept[0].id == "t2");
  REQUIRE(result.rejected.size() == 1);
  CHECK(result.rejected[0].id == "t1");
  REQUIRE(result.unparseable.size() == 1);
}

TEST_CASE("context rotation arithmetic") {
  std::vector<std::size_t> seq;
  for (std::size_t i = 0; i < 12; ++i) seq.push_back(context_index(i, 5, 11));
  CHECK(seq == std::vector<std::size_t>{0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2});
  CHECK(context_index(55, 5, 11) == 0);
  CHECK_THROWS_AS(context_index(0, 0, 11), ConfigError);
}

TEST_CASE("generate_pairs: contexts rotate per batch and pairs join by index") {
  auto spec = builtin_concept("ambition");
  std::mutex m;
  std::vector<chat::ChatRequest> seen;
  chat::FunctionEndpoint stub([&](const chat::ChatRequest& r) {
    std::lock_guard lock(m);
    seen.push_back(r);
    return echo_reply(r);
  });
  const auto templates = numbered_templates(12);
  const auto result = generate_pairs(spec, templates, stub, 5);
  REQUIRE(result.pairs.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto& p = result.pairs[i];
    const auto& ctx = spec.contexts[i < 5 ? 0 : (i < 10 ? 1 : 2)];
    CHECK(p.template_id == templates[i].id);
    CHECK(p.context == ctx);
    CHECK(p.positive_text == "POS " + ctx + " " + templates[i].text);
    CHECK(p.negative_text == "NEG " + ctx + " " + templates[i].text);
  }
  CHECK(result.retried_batches == 0);
  CHECK(result.discarded_items == 0);
  REQUIRE(result.batches.size() == 6);
  // Each conversation keeps its earlier turns: the third positive request
  // carries two prior user/assistant exchanges.
  CHECK(seen[4].messages.size() == 5);
  CHECK(seen[4].temperature == 1.0);
  CHECK(last_user(seen[4]).find("Generate exactly 2 examples") != std::string::npos);
  CHECK(last_user(seen[0]).starts_with(positive_generator_prompt(spec, 5, "workplace") + "\n1. Template number 1."));
  CHECK(last_user(seen[1]).starts_with(negative_generator_prompt(spec, 5, "workplace")));
}

TEST_CASE("generate_pairs: conversations restart when the context list wraps") {
  auto spec = builtin_concept("ambition");
  spec.contexts = {"workplace", "sports"};
  std::vector<std::size_t> history_sizes;
  chat::FunctionEndpoint stub([&](const chat::ChatRequest& r) {
    history_sizes.push_back(r.messages.size());
    return echo_reply(r);
  });
  generate_pairs(spec, numbered_templates(6), stub, 2);
  CHECK(history_sizes == std::vector<std::size_t>{1, 1, 3, 3, 1, 1});
}

TEST_CASE("generate_pairs: count mismatch retries once, then keeps the partial batch") {
  const auto spec = builtin_concept("envy");
  int calls = 0;
  chat::FunctionEndpoint stub([&](const chat::ChatRequest& r) -> std::string {
    ++calls;
    const auto full = echo_reply(r);
    if (last_user(r).find("is obvious") != std::string::npos) {
      // Positive side always drops its last line.
      return full.substr(0, full.rfind('\n', full.size() - 2) + 1);
    }
    return full;
  });
  const auto result = generate_pairs(spec, numbered_templates(3), stub, 3);
  CHECK(calls == 3);
  CHECK(result.retried_batches == 1);
  CHECK(result.pairs.size() == 2);
  CHECK(result.discarded_items == 1);
  CHECK(result.batches[0].raw_outputs.size() == 2);
  CHECK(result.batches[1].raw_outputs.size() == 1);
  CHECK_THROWS_AS(generate_pairs(spec, {}, stub, 3), ConfigError);
}

TEST_CASE("relabel") {
  const auto spec = builtin_concept("ambition");
  chat::FunctionEndpoint stub([&](const chat::ChatRequest& r) -> std::string {
    CHECK(r.messages.front().content == classifier_prompt(spec));
    CHECK(r.temperature == 0.0);
    if (r.messages.back().content == "yes") return "1";
    if (r.messages.back().content == "no") return "0";
    return "maybe";
  });
  const auto labels = relabel(spec, {"yes", "no", "hmm"}, stub, 2);
  REQUIRE(labels.size() == 3);
  CHECK(labels[0] == 1);
  CHECK(labels[1] == 0);
  CHECK_FALSE(labels[2].has_value());
}

TEST_CASE("stem matching") {
  const std::vector<std::string> stems = {"ambit", "aspir"};
  CHECK(contains_stem("He was ambitious.", stems));
  CHECK(contains_stem("an OVERAMBITIOUS plan", stems));
  CHECK(contains_stem("her aspirations", stems));
  CHECK_FALSE(contains_stem("She walked home.", stems));
  CHECK(contains_stem("Envy, plain and simple", {"env"}));
}

TEST_CASE("finalize: drop reasons and positive-first ordering") {
  const auto spec = builtin_concept("ambition");
  std::vector<LabeledPair> pairs = {
      {pair("a", "She trained daily to win.", "She ate lunch."), 1, 0},
      {pair("b", "x", "y"), 1, 1},
      {pair("c", "She wanted more.", "He was ambitious about lunch."), 1, 0},
      {pair("d", "p", "q"), std::nullopt, 0},
      {pair("e", "He sat still.", "He fought for the title."), 0, 1},
  };
  const auto r = finalize_dataset(pairs, spec);
  CHECK(r.kept_pairs == 2);
  CHECK(r.dropped.at("same_label") == 1);
  CHECK(r.dropped.at("stem") == 1);
  CHECK(r.dropped.at("unlabeled") == 1);
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows[0].input_text == "She trained daily to win.");
  CHECK(r.rows[0].label == 1);
  CHECK(r.rows[1].label == 0);
  CHECK(r.rows[2].input_text == "He fought for the title.");
  CHECK(r.rows[2].label == 1);
  CHECK(r.rows[3].input_text == "He sat still.");
  CHECK(r.rows[0].pair_id == "a");
  CHECK(r.rows[0].source_template_id == "t-a");
}

TEST_CASE("property: finalize output is balanced and stem filtering is idempotent") {
  const auto spec = builtin_concept("ambition");
  const std::vector<std::string> words = {"She", "ran", "ambitiously", "home", "aspired", "to", "lead", "the", "team"};
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<LabeledPair> pairs;
    const int n = static_cast<int>(rng.below(30));
    for (int i = 0; i < n; ++i) {
      auto sentence = [&] {
        std::string s;
        for (int w = 0; w < 4; ++w) s += words[rng.below(words.size())] + " ";
        return s;
      };
      auto label = [&]() -> std::optional<int> {
        const auto r = rng.below(5);
        if (r == 0) return std::nullopt;
        return static_cast<int>(r % 2);
      };
      pairs.push_back({pair("p" + std::to_string(i), sentence(), sentence()), label(), label()});
    }
    const auto once = finalize_dataset(pairs, spec);
    const auto ones = std::count_if(once.rows.begin(), once.rows.end(), [](const DatasetRow& r) { return r.label == 1; });
    CHECK(static_cast<std::size_t>(ones) * 2 == once.rows.size());
    std::size_t dropped = 0;
    for (const auto& [reason, count] : once.dropped) dropped += count;
    CHECK(dropped + once.kept_pairs == pairs.size());

    // Feed the kept rows back as pairs: nothing more is dropped.
    std::vector<LabeledPair> again;
    for (std::size_t i = 0; i < once.rows.size(); i += 2) {
      again.push_back({pair(once.rows[i].pair_id, once.rows[i].input_text, once.rows[i + 1].input_text), 1, 0});
    }
    CHECK(finalize_dataset(again, spec).kept_pairs == again.size());

    // Order independence: reversing the input keeps the same set of pairs.
    auto reversed = pairs;
    std::reverse(reversed.begin(), reversed.end());
    auto ids = [](const FinalizeResult& r) {
      std::vector<std::string> v;
      for (const auto& row : r.rows) v.push_back(row.pair_id);
      std::sort(v.begin(), v.end());
      return v;
    };
    CHECK(ids(finalize_dataset(reversed, spec)) == ids(once));
  }
}

TEST_CASE("recorded journal replays the whole pipeline byte-for-byte") {
  testkit::TempDir dir;
  const auto spec = builtin_concept("ambition");
  const auto templates = numbered_templates(10);
  const auto journal = dir / "journal.jsonl";

  auto live = std::make_shared<chat::FunctionEndpoint>(
      [](const chat::ChatRequest& r) -> std::string {
        if (r.messages.front().role == "system") return r.messages.back().content.starts_with("POS") ? "1" : "0";
        return echo_reply(r);
      },
      "recorded-model");
  auto run = [&](chat::ChatEndpoint& ep) {
    const auto gen = generate_pairs(spec, templates, ep);
    std::vector<std::string> texts;
    for (const auto& p : gen.pairs) {
      texts.push_back(p.positive_text);
      texts.push_back(p.negative_text);
    }
    const auto labels = relabel(spec, texts, ep);
    std::vector<LabeledPair> lp;
    for (std::size_t i = 0; i < gen.pairs.size(); ++i) lp.push_back({gen.pairs[i], labels[2 * i], labels[2 * i + 1]});
    write_dataset_csv(dir / "out.csv", finalize_dataset(lp, spec).rows);
    return read_text_file(dir / "out.csv");
  };

  chat::JournalEndpoint recorder(journal, live);
  const auto recorded = run(recorder);
  chat::JournalEndpoint replay(journal, nullptr, "recorded-model");
  CHECK(run(replay) == recorded);
  CHECK(replay.misses() == 0);
  const auto table = read_csv(dir / "out.csv");
  CHECK(table.header == std::vector<std::string>{"input_text", "label", "pair_id", "source_template_id"});
}

TEST_CASE("templates file") {
  testkit::TempDir dir;
  std::ofstream(dir / "templates.txt") << "First line.\n\n  \nSecond line.\r\n";
  const auto t = load_templates(dir / "templates.txt");
  REQUIRE(t.size() == 2);
  CHECK(t[0].id == "t1");
  CHECK(t[1].id == "t4");
  CHECK(t[1].text == "Second line.");
}
