#include "cprobe/cli.hpp"

#include "cprobe/agreement.hpp"
#include "cprobe/chat.hpp"
#include "cprobe/common.hpp"
#include "cprobe/conceptgen.hpp"
#include "cprobe/controls.hpp"
#include "cprobe/csv.hpp"
#include "cprobe/embedstore.hpp"
#include "cprobe/error.hpp"
#include "cprobe/probekit.hpp"
#include "cprobe/reduce.hpp"
#include "cprobe/storygen.hpp"
#include "cprobe/storytrack.hpp"
#include "cprobe/svg.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>

namespace cprobe::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Options that name files or directories read by a command; their contents
// are hashed into the run manifest.
const std::set<std::string> kInputOptions = {
    "store", "control-store", "template-store", "csv",      "probe",   "probe-dir",    "traces",
    "annotations", "concept-spec", "templates", "accuracy", "sweep", "aggregate", "kde", "journal",
};
// Options that never change numeric output.
const std::set<std::string> kUnhashedOptions = {"out", "jobs", "config", "help"};

struct Globals {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string config;
};

struct Env {
  std::ostream& out;
  std::ostream& err;
  const Globals& globals;
  fs::path out_dir;
};

json report_json(const probekit::EvalReport& report) {
  json j;
  j["accuracy"] = report.accuracy;
  j["mean"] = report.mean;
  j["stddev"] = report.stddev;
  j["n_test"] = report.n_test;
  j["per_seed_accuracies"] = report.per_seed_accuracies;
  return j;
}

std::string join_doubles(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ';';
    out += format_number(values[i]);
  }
  return out;
}

std::vector<int> resolve_layers(const std::string& spec, const embedstore::EmbeddingStore& store,
                                RepresentativeKind kind) {
  if (to_lower(trim(spec)) == "all") {
    auto layers = store.layers(kind);
    if (layers.empty()) {
      throw NotExtractedError("store has no " + std::string(to_string(kind)) + " layers");
    }
    return layers;
  }
  return parse_int_list(spec);
}

std::vector<int> resolve_layer_list(const std::string& spec) {
  if (spec.empty() || to_lower(trim(spec)) == "all") return {};
  return parse_int_list(spec);
}

probekit::TrainConfig train_config(float lr, int batch, int epochs, int patience, std::uint64_t seed) {
  probekit::TrainConfig cfg;
  cfg.learning_rate = lr;
  cfg.batch_size = batch;
  cfg.max_epochs = epochs;
  cfg.early_stop_patience = patience;
  cfg.seed = seed;
  return cfg;
}

struct TrainFlags {
  float lr = 0.005f;
  int batch = 512;
  int epochs = 500;
  int patience = 10;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--batch-size", batch, "minibatch size");
    app->add_option("--epochs", epochs, "maximum epochs");
    app->add_option("--patience", patience, "early-stopping patience in epochs");
  }
  probekit::TrainConfig config(std::uint64_t seed) const { return train_config(lr, batch, epochs, patience, seed); }
};

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

// ---- endpoint wiring -----------------------------------------------------

struct EndpointFlags {
  std::string endpoint = "https://api.openai.com/v1";
  std::string model = "gpt-4o-2024-08-06";
  std::string journal;
  bool replay = false;

  void add(CLI::App* app) {
    app->add_option("--endpoint", endpoint, "chat-completions base URL");
    app->add_option("--model", model, "chat model name");
    app->add_option("--journal", journal, "request/response journal (default: <out>/journal.jsonl)");
    app->add_flag("--replay", replay, "serve every request from the journal; fail on a miss");
  }

  std::shared_ptr<chat::ChatEndpoint> build(const fs::path& out_dir) const {
    const fs::path journal_path = journal.empty() ? out_dir / "journal.jsonl" : fs::path(journal);
    if (replay) {
      return std::make_shared<chat::JournalEndpoint>(journal_path, nullptr, model);
    }
    std::string key;
    for (const char* var : {"CPROBE_API_KEY", "OPENAI_API_KEY"}) {
      if (const char* v = std::getenv(var); v && *v) {
        key = v;
        break;
      }
    }
    auto http = std::make_shared<chat::HttpChatEndpoint>(endpoint, model, key);
    auto retrying = std::make_shared<chat::RetryingEndpoint>(http);
    return std::make_shared<chat::JournalEndpoint>(journal_path, retrying, model);
  }
};

struct ConceptFlags {
  std::string concept_name;
  std::string concept_spec;

  void add(CLI::App* app) {
    app->add_option("--concept", concept_name, "shipped concept (ambition, investigation, democracy, envy)");
    app->add_option("--concept-spec", concept_spec, "ConceptSpec JSON file");
  }
  conceptgen::ConceptSpec load() const {
    if (!concept_spec.empty()) return conceptgen::load_concept_spec(concept_spec);
    if (concept_name.empty()) throw ConfigError("either --concept or --concept-spec is required");
    return conceptgen::builtin_concept(concept_name);
  }
};

// ---- commands ------------------------------------------------------------

struct ImportCmd {
  std::string csv;
  bool stories = false;
  std::int64_t split_seed = -1;

  void add(CLI::App* app) {
    app->add_option("--csv", csv, "released dataset or story CSV")->required();
    app->add_flag("--stories", stories, "the CSV holds stories with per-sentence label lists");
    app->add_option("--split-seed", split_seed, "split seed (default: --seed)");
  }

  void run(Env& env) const {
    if (stories) {
      const auto records = embedstore::import_story_csv(csv);
      std::ostringstream lines;
      std::size_t mismatched = 0;
      for (const auto& rec : records) {
        const auto sentences = storygen::split_sentences(rec.text);
        json j;
        j["story_id"] = rec.story_id;
        j["sentences"] = sentences;
        j["sentence_labels"] = rec.sentence_labels;
        json words = json::array();
        json sentence_index = json::array();
        for (std::size_t s = 0; s < sentences.size(); ++s) {
          for (const auto& w : storytrack::split_words(sentences[s])) {
            words.push_back(w);
            sentence_index.push_back(static_cast<int>(s + 1));
          }
        }
        j["words"] = words;
        j["word_sentence_index"] = sentence_index;
        if (sentences.size() != rec.sentence_labels.size()) ++mismatched;
        lines << j.dump() << '\n';
      }
      write_text_file(env.out_dir / "stories.jsonl", lines.str());
      json summary{{"n_stories", records.size()}, {"label_count_mismatches", mismatched}};
      write_json(env.out_dir / "import_summary.json", summary);
      env.out << summary.dump() << '\n';
      return;
    }
    const auto seed = split_seed >= 0 ? static_cast<std::uint64_t>(split_seed) : env.globals.seed;
    const auto rows = embedstore::import_released_csv(csv, seed);
    embedstore::write_examples_jsonl(env.out_dir / "examples.jsonl", rows);
    std::map<std::string, std::size_t> counts{{"train", 0}, {"val", 0}, {"test", 0}};
    for (const auto& r : rows) ++counts[std::string(to_string(r.split))];
    json summary{{"n_rows", rows.size()}, {"splits", counts}};
    write_json(env.out_dir / "import_summary.json", summary);
    env.out << summary.dump() << '\n';
  }
};

struct TrainCmd {
  std::string store;
  std::string layers;
  std::string kind = "nth";
  int seeds = 5;
  TrainFlags flags;

  void add(CLI::App* app) {
    app->add_option("--store", store, "embedding store directory")->required();
    app->add_option("--layer", layers, "layer, comma list, or 'all'")->required();
    app->add_option("--kind", kind, "representative embedding: nth or mean");
    app->add_option("--seeds", seeds, "probes per layer (seeds seed..seed+n-1)");
    flags.add(app);
  }

  void run(Env& env) const {
    const auto st = embedstore::EmbeddingStore::open(store);
    const auto k = parse_kind(kind);
    json reports = json::array();
    std::ostringstream csv;
    write_csv_row(csv, {"layer", "kind", "mean_acc", "stddev", "n_test", "per_seed"});
    for (const int layer : resolve_layers(layers, st, k)) {
      const auto data = probekit::load_dataset(st, layer, k);
      probekit::EnsembleOptions opts;
      opts.n_seeds = seeds;
      opts.jobs = env.globals.jobs;
      opts.layer = layer;
      opts.kind = k;
      const auto result = probekit::train_ensemble(data, flags.config(env.globals.seed), opts);
      json files = json::array();
      for (const auto& probe : result.probes) {
        const auto name = probekit::probe_file_name(layer, k, probe.seed);
        probekit::save_probe(env.out_dir / "probes" / name, probe);
        files.push_back("probes/" + name);
      }
      auto j = report_json(result.report);
      j["layer"] = layer;
      j["kind"] = kind;
      j["seeds"] = seeds;
      j["parameter_count"] = result.probes.front().parameter_count();
      j["n_train"] = data.train.rows();
      j["n_val"] = data.val.rows();
      j["probes"] = files;
      reports.push_back(j);
      write_csv_row(csv, {std::to_string(layer), kind, format_number(result.report.mean),
                          format_number(result.report.stddev), std::to_string(result.report.n_test),
                          join_doubles(result.report.per_seed_accuracies)});
    }
    write_text_file(env.out_dir / "accuracy.csv", csv.str());
    const json doc = reports.size() == 1 ? reports.front() : reports;
    write_json(env.out_dir / "report.json", doc);
    env.out << doc.dump() << '\n';
  }
};

struct EvalCmd {
  std::vector<std::string> probes;
  std::string probe_dir;
  std::string store;
  std::string split = "test";

  void add(CLI::App* app) {
    app->add_option("--probe", probes, "probe file(s)");
    app->add_option("--probe-dir", probe_dir, "directory of probe files");
    app->add_option("--store", store, "embedding store directory")->required();
    app->add_option("--split", split, "train, val, test or all");
  }

  void run(Env& env) const {
    std::vector<fs::path> files(probes.begin(), probes.end());
    if (!probe_dir.empty()) {
      std::vector<fs::path> found;
      for (const auto& entry : fs::directory_iterator(probe_dir)) {
        if (entry.path().extension() == ".probe") found.push_back(entry.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    }
    if (files.empty()) throw ConfigError("give --probe or --probe-dir");
    const bool all_splits = split == "all";
    const Split wanted = all_splits ? Split::train : parse_split(split);

    const auto st = embedstore::EmbeddingStore::open(store);
    std::ostringstream scores;
    write_csv_row(scores, {"probe", "example_id", "label", "score", "predicted"});
    json results = json::array();
    std::vector<double> accs;
    for (const auto& file : files) {
      const auto probe = probekit::load_probe(file);
      const auto layer = st.read_layer(probe.layer, probe.kind);
      std::size_t n = 0;
      std::size_t correct = 0;
      for (std::size_t i = 0; i < layer.rows->size(); ++i) {
        const auto& row = (*layer.rows)[i];
        if (!all_splits && row.split != wanted) continue;
        const auto r = layer.matrix.row(static_cast<Eigen::Index>(i));
        const float s = probekit::score(probe, std::span<const float>(r.data(), static_cast<std::size_t>(r.size())));
        const int predicted = s > probe.threshold ? 1 : 0;
        correct += predicted == row.label;
        ++n;
        write_csv_row(scores, {file.filename().string(), row.example_id, std::to_string(row.label),
                               format_number(s), std::to_string(predicted)});
      }
      if (n == 0) throw DataError("split '" + split + "' is empty");
      const double acc = static_cast<double>(correct) / static_cast<double>(n);
      accs.push_back(acc);
      results.push_back({{"probe", file.filename().string()},
                         {"layer", probe.layer},
                         {"kind", std::string(to_string(probe.kind))},
                         {"seed", probe.seed},
                         {"accuracy", acc},
                         {"n", n}});
    }
    const auto report = probekit::make_report(accs, 0);
    json doc{{"split", split}, {"probes", results}, {"mean", report.mean}, {"stddev", report.stddev}};
    write_text_file(env.out_dir / "scores.csv", scores.str());
    write_json(env.out_dir / "eval.json", doc);
    env.out << doc.dump() << '\n';
  }
};

struct SweepCmd {
  std::string store;
  std::string template_store;
  int layer = 0;
  std::string kind = "nth";
  std::string dims = "20,40,80,max";
  int seeds = 5;
  TrainFlags flags;

  void add(CLI::App* app) {
    app->add_option("--store", store, "embedding store directory")->required();
    app->add_option("--template-store", template_store, "store of template embeddings used to fit the PCA basis");
    app->add_option("--layer", layer, "layer")->required();
    app->add_option("--kind", kind, "nth or mean");
    app->add_option("--dims", dims, "ascending probe sizes, 'max' = d_model");
    app->add_option("--seeds", seeds, "probes per size");
    flags.add(app);
  }

  void run(Env& env) const {
    const auto st = embedstore::EmbeddingStore::open(store);
    std::optional<embedstore::EmbeddingStore> templates;
    if (!template_store.empty()) templates = embedstore::EmbeddingStore::open(template_store);
    const auto k = parse_kind(kind);
    const auto parsed = reduce::parse_dims(dims, st.manifest().d_model);
    const auto rows = reduce::sweep_probe_size(st, templates ? &*templates : nullptr, layer, k, parsed,
                                               flags.config(env.globals.seed), seeds, env.globals.jobs);
    std::ostringstream csv;
    write_csv_row(csv, {"dim", "mean_acc", "stddev", "parameters"});
    json j = json::array();
    for (const auto& r : rows) {
      write_csv_row(csv, {r.dim.label, format_number(r.report.mean), format_number(r.report.stddev),
                          std::to_string(r.parameter_count)});
      auto rj = report_json(r.report);
      rj["dim"] = r.dim.label;
      rj["k"] = r.dim.dim;
      rj["identity"] = r.identity;
      j.push_back(rj);
    }
    write_text_file(env.out_dir / "sweep.csv", csv.str());
    const json doc{{"layer", layer}, {"kind", kind}, {"rows", j}};
    write_json(env.out_dir / "sweep.json", doc);
    env.out << doc.dump() << '\n';
  }
};

struct ControlCmd {
  std::string mode;
  std::string store;
  std::string control_store;
  std::string layers;
  std::string kind = "nth";
  int seeds = 5;
  TrainFlags flags;

  void add(CLI::App* app) {
    app->add_option("--mode", mode, "labels | embeddings:provided | embeddings:gaussian")->required();
    app->add_option("--store", store, "embedding store directory")->required();
    app->add_option("--control-store", control_store, "randomized-token store (embeddings:provided)");
    app->add_option("--layer", layers, "layer, comma list, or 'all'")->required();
    app->add_option("--kind", kind, "nth or mean");
    app->add_option("--seeds", seeds, "probes per layer");
    flags.add(app);
  }

  void run(Env& env) const {
    const auto st = embedstore::EmbeddingStore::open(store);
    const auto k = parse_kind(kind);
    std::optional<embedstore::EmbeddingStore> control;
    if (mode == "embeddings:provided") {
      if (control_store.empty()) throw ConfigError("embeddings:provided needs --control-store");
      control = embedstore::EmbeddingStore::open(control_store);
    } else if (mode != "labels" && mode != "embeddings:gaussian") {
      throw ConfigError("unknown control mode '" + mode + "'");
    }
    const auto cfg = flags.config(env.globals.seed);
    std::ostringstream csv;
    write_csv_row(csv, {"layer", "mode", "mean_acc", "stddev", "n_test", "per_seed"});
    json reports = json::array();
    for (const int layer : resolve_layers(layers, st, k)) {
      const auto result = mode == "labels"
                              ? controls::random_label_control(st, layer, k, cfg, seeds, env.globals.jobs)
                              : controls::random_embedding_control(st, control ? &*control : nullptr, layer, k, cfg,
                                                                   seeds, env.globals.jobs);
      auto j = report_json(result.report);
      j["layer"] = layer;
      j["kind"] = kind;
      j["mode"] = mode;
      reports.push_back(j);
      write_csv_row(csv, {std::to_string(layer), mode, format_number(result.report.mean),
                          format_number(result.report.stddev), std::to_string(result.report.n_test),
                          join_doubles(result.report.per_seed_accuracies)});
    }
    write_text_file(env.out_dir / "control.csv", csv.str());
    const json doc = reports.size() == 1 ? reports.front() : reports;
    write_json(env.out_dir / "control.json", doc);
    env.out << doc.dump() << '\n';
  }
};

struct TrackCmd {
  std::string store;
  std::string probe;
  std::string probe_dir;
  std::string layers = "all";
  std::optional<std::uint64_t> probe_seed;
  std::string trace_kind = "final_subword";
  std::vector<std::string> stories;
  int window = 10;

  void add(CLI::App* app) {
    app->add_option("--store", store, "token-level embedding store")->required();
    app->add_option("--probe", probe, "single probe file (its layer is used)");
    app->add_option("--probe-dir", probe_dir, "directory written by 'train'");
    app->add_option("--layer", layers, "layers to track with --probe-dir, comma list or 'all'");
    app->add_option("--probe-seed", probe_seed, "which seed's probe to load from --probe-dir (default: --seed, the first seed 'train' used)");
    app->add_option("--trace-kind", trace_kind, "final_subword or cumulative_mean");
    app->add_option("--story", stories, "restrict to these story ids");
    app->add_option("--window", window, "smoothing window for the smoothed column");
  }

  void run(Env& env) const {
    const auto st = embedstore::EmbeddingStore::open(store);
    const auto tk = storytrack::parse_trace_kind(trace_kind);
    std::vector<probekit::Probe> probes;
    if (!probe.empty()) {
      probes.push_back(probekit::load_probe(probe));
    } else if (!probe_dir.empty()) {
      auto wanted = resolve_layer_list(layers);
      if (wanted.empty()) wanted = st.layers(RepresentativeKind::token_level);
      const std::uint64_t seed = probe_seed.value_or(env.globals.seed);
      for (const int layer : wanted) {
        probes.push_back(probekit::load_probe(fs::path(probe_dir) /
                                              probekit::probe_file_name(layer, storytrack::probe_kind_for(tk), seed)));
      }
    } else {
      throw ConfigError("give --probe or --probe-dir");
    }

    std::vector<std::size_t> story_indices;
    if (stories.empty()) {
      for (std::size_t i = 0; i < st.alignments().size(); ++i) story_indices.push_back(i);
    } else {
      for (const auto& id : stories) story_indices.push_back(st.story_index(id));
    }

    std::vector<storytrack::TrackTrace> traces(probes.size() * story_indices.size());
    probekit::parallel_for(static_cast<int>(traces.size()), env.globals.jobs, [&](int t) {
      const auto& p = probes[static_cast<std::size_t>(t) / story_indices.size()];
      const auto story = story_indices[static_cast<std::size_t>(t) % story_indices.size()];
      const auto tokens = st.read_story_tokens(p.layer, story);
      traces[static_cast<std::size_t>(t)] = storytrack::track(tokens, st.alignments()[story], p, tk);
    });
    storytrack::write_trace_csv(env.out_dir / "traces.csv", traces, window);
    const json doc{{"traces", traces.size()}, {"layers", probes.size()}, {"stories", story_indices.size()},
                   {"trace_kind", trace_kind}};
    env.out << doc.dump() << '\n';
  }
};

std::vector<storytrack::TrackTrace> load_traces(const std::string& path, std::optional<int> layer,
                                                const std::string& kind_filter) {
  auto traces = storytrack::read_trace_csv(path);
  std::erase_if(traces, [&](const storytrack::TrackTrace& t) {
    return (layer && t.layer != *layer) ||
           (!kind_filter.empty() && t.kind != storytrack::parse_trace_kind(kind_filter));
  });
  if (traces.empty()) throw DataError("no traces match the requested layer/kind");
  return traces;
}

void require_single_group(const std::vector<storytrack::TrackTrace>& traces) {
  for (const auto& t : traces) {
    if (t.layer != traces.front().layer || t.kind != traces.front().kind) {
      throw ConfigError("traces span several layers or kinds; select one with --layer and --trace-kind");
    }
  }
}

struct AggregateCmd {
  std::string traces;
  std::optional<int> layer;
  std::string trace_kind;
  int window = 10;

  void add(CLI::App* app) {
    app->add_option("--traces", traces, "traces.csv from 'track'")->required();
    app->add_option("--layer", layer, "layer to aggregate");
    app->add_option("--trace-kind", trace_kind, "final_subword or cumulative_mean");
    app->add_option("--window", window, "smoothing window for the smoothed column");
  }

  void run(Env& env) const {
    const auto ts = load_traces(traces, layer, trace_kind);
    require_single_group(ts);
    const auto agg = storytrack::aggregate(ts);
    storytrack::write_aggregate_csv(env.out_dir / "aggregate.csv", agg, window);
    const json doc{{"layer", ts.front().layer},
                   {"trace_kind", std::string(storytrack::to_string(ts.front().kind))},
                   {"n_stories", agg.n_stories},
                   {"positions", agg.mean.size()},
                   {"rejected", agg.rejected}};
    write_json(env.out_dir / "aggregate.json", doc);
    env.out << doc.dump() << '\n';
  }
};

const char* segment_color(storytrack::Segment s) {
  switch (s) {
    case storytrack::Segment::paragraph1: return "#d62728";
    case storytrack::Segment::transition1: return "#2ca02c";
    case storytrack::Segment::paragraph2: return "#ff7f0e";
    case storytrack::Segment::transition2: return "#98df8a";
    case storytrack::Segment::paragraph3: return "#8c564b";
  }
  return "#000000";
}

struct KdeCmd {
  std::string traces;
  std::optional<int> layer;
  std::string trace_kind;
  int grid = 512;

  void add(CLI::App* app) {
    app->add_option("--traces", traces, "traces.csv from 'track'")->required();
    app->add_option("--layer", layer, "layer");
    app->add_option("--trace-kind", trace_kind, "final_subword or cumulative_mean");
    app->add_option("--grid", grid, "grid points on [0, 1]");
  }

  void run(Env& env) const {
    const auto ts = load_traces(traces, layer, trace_kind);
    require_single_group(ts);
    const auto kde = storytrack::segment_kde(ts, ts.front().layer, grid);
    storytrack::write_kde_csv(env.out_dir / "kde.csv", kde);
    svg::LineChart chart;
    chart.title = "Probe output density by story segment, layer " + std::to_string(kde.layer);
    chart.x_label = "probe output";
    chart.y_label = "density";
    json segs = json::array();
    for (const auto& d : kde.segments) {
      segs.push_back({{"segment", std::string(storytrack::to_string(d.segment))},
                      {"n", d.n},
                      {"bandwidth", d.bandwidth},
                      {"point_mass", d.point_mass ? json(*d.point_mass) : json(nullptr)}});
      if (d.density.empty()) continue;
      chart.series.push_back({std::string(storytrack::to_string(d.segment)), kde.grid, d.density,
                              segment_color(d.segment), false});
    }
    write_text_file(env.out_dir / "kde.svg", svg::render(chart));
    const json doc{{"layer", kde.layer}, {"segments", segs}};
    write_json(env.out_dir / "kde.json", doc);
    env.out << doc.dump() << '\n';
  }
};

struct BestLayerCmd {
  std::string traces;
  std::string trace_kind;

  void add(CLI::App* app) {
    app->add_option("--traces", traces, "traces.csv covering several layers")->required();
    app->add_option("--trace-kind", trace_kind, "final_subword or cumulative_mean");
  }

  void run(Env& env) const {
    const auto ts = load_traces(traces, std::nullopt, trace_kind);
    std::map<int, std::vector<storytrack::TrackTrace>> per_layer;
    for (const auto& t : ts) {
      if (t.kind != ts.front().kind) throw ConfigError("traces mix kinds; choose one with --trace-kind");
      per_layer[t.layer].push_back(t);
    }
    const auto best = storytrack::select_best_layer(per_layer);
    std::ostringstream csv;
    write_csv_row(csv, {"layer", "separation", "transition_above", "paragraph_below", "n_transition", "n_paragraph"});
    for (const auto& s : best.table) {
      write_csv_row(csv, {std::to_string(s.layer), format_number(s.separation), format_number(s.transition_above),
                          format_number(s.paragraph_below), std::to_string(s.n_transition),
                          std::to_string(s.n_paragraph)});
    }
    write_text_file(env.out_dir / "best_layer.csv", csv.str());
    const json doc{{"best_layer", best.layer}, {"layers", best.table.size()}};
    write_json(env.out_dir / "best_layer.json", doc);
    env.out << doc.dump() << '\n';
  }
};

struct AgreementCmd {
  std::string annotations;

  void add(CLI::App* app) {
    app->add_option("--annotations", annotations, "CSV: example_id,rater_id,label,borderline")->required();
  }

  void run(Env& env) const {
    const auto table = agreement::read_annotations_csv(annotations);
    const auto kept = agreement::confident_filter(table);
    const auto matrix = agreement::kappa_matrix(table);
    agreement::write_confident_csv(env.out_dir / "confident.csv", kept);
    agreement::write_kappa_matrix_csv(env.out_dir / "kappa_matrix.csv", table.raters, matrix);
    json fleiss;
    try {
      fleiss = agreement::fleiss_kappa(table.labels);
    } catch (const UndefinedKappaError&) {
      fleiss = nullptr;
    }
    const json doc{{"n_examples", table.example_ids.size()},
                   {"n_raters", table.raters.size()},
                   {"fleiss_kappa", fleiss},
                   {"n_kept", kept.size()}};
    write_json(env.out_dir / "agreement.json", doc);
    env.out << doc.dump() << '\n';
  }
};

struct GenDatasetCmd {
  ConceptFlags concept_flags;
  EndpointFlags endpoint;
  std::string templates;
  int num_per_call = 5;
  bool filter = false;
  int limit = 0;

  void add(CLI::App* app) {
    concept_flags.add(app);
    endpoint.add(app);
    app->add_option("--templates", templates, "templates.txt, one template per line")->required();
    app->add_option("--num-per-call", num_per_call, "templates per generator call; the context rotates per call");
    app->add_flag("--filter-templates", filter, "screen templates with the filter prompt first");
    app->add_option("--limit", limit, "use only the first N templates (0 = all)");
  }

  void run(Env& env) const {
    const auto spec = concept_flags.load();
    auto tmpl = conceptgen::load_templates(templates);
    if (limit > 0 && static_cast<std::size_t>(limit) < tmpl.size()) tmpl.resize(static_cast<std::size_t>(limit));
    const auto ep = endpoint.build(env.out_dir);
    json summary;
    summary["templates"] = tmpl.size();
    if (filter) {
      const auto filtered = conceptgen::filter_templates(tmpl, *ep, env.globals.jobs);
      std::string kept;
      for (const auto& t : filtered.kept) kept += t.text + "\n";
      write_text_file(env.out_dir / "kept_templates.txt", kept);
      summary["filter"] = {{"kept", filtered.kept.size()},
                           {"rejected", filtered.rejected.size()},
                           {"unparseable", filtered.unparseable.size()}};
      tmpl = filtered.kept;
    }
    const auto gen = conceptgen::generate_pairs(spec, tmpl, *ep, num_per_call);
    std::vector<std::string> texts;
    for (const auto& p : gen.pairs) {
      texts.push_back(p.positive_text);
      texts.push_back(p.negative_text);
    }
    const auto labels = conceptgen::relabel(spec, texts, *ep, env.globals.jobs);
    std::vector<conceptgen::LabeledPair> labeled;
    for (std::size_t i = 0; i < gen.pairs.size(); ++i) {
      labeled.push_back({gen.pairs[i], labels[2 * i], labels[2 * i + 1]});
    }
    const auto fin = conceptgen::finalize_dataset(labeled, spec);
    conceptgen::write_dataset_csv(env.out_dir / "dataset.csv", fin.rows);
    summary["pairs_generated"] = gen.pairs.size();
    summary["retried_batches"] = gen.retried_batches;
    summary["discarded_items"] = gen.discarded_items;
    summary["dropped"] = fin.dropped;
    summary["kept_pairs"] = fin.kept_pairs;
    summary["rows"] = fin.rows.size();
    write_json(env.out_dir / "gen_summary.json", summary);
    env.out << summary.dump() << '\n';
  }
};

struct GenStoriesCmd {
  ConceptFlags concept_flags;
  EndpointFlags endpoint;
  int count = 50;
  int max_attempts = 200;

  void add(CLI::App* app) {
    concept_flags.add(app);
    endpoint.add(app);
    app->add_option("--count", count, "accepted stories wanted");
    app->add_option("--max-attempts", max_attempts, "candidate stories to try at most");
  }

  void run(Env& env) const {
    const auto spec = concept_flags.load();
    const auto ep = endpoint.build(env.out_dir);
    const auto result = storygen::generate_stories(spec, *ep, count, max_attempts, env.globals.jobs);
    storygen::write_story_csv(env.out_dir / "stories.csv", result.accepted);
    const json summary{{"accepted", result.accepted.size()}, {"attempts", result.attempts}, {"rejected", result.rejected}};
    write_json(env.out_dir / "stories_summary.json", summary);
    env.out << summary.dump() << '\n';
  }
};

// Green for concept sentences, red otherwise.
std::vector<svg::Band> sentence_bands(const std::vector<int>& sentence_of_position,
                                      const std::vector<int>& sentence_labels) {
  std::vector<svg::Band> bands;
  std::size_t i = 0;
  while (i < sentence_of_position.size()) {
    std::size_t j = i;
    while (j < sentence_of_position.size() && sentence_of_position[j] == sentence_of_position[i]) ++j;
    const int s = sentence_of_position[i];
    const bool concept_present =
        s >= 1 && static_cast<std::size_t>(s) <= sentence_labels.size() && sentence_labels[static_cast<std::size_t>(s - 1)] == 1;
    bands.push_back({static_cast<double>(i + 1) - 0.5, static_cast<double>(j) + 0.5,
                     concept_present ? "#2ca02c" : "#d62728", 0.15});
    i = j;
  }
  return bands;
}

struct ReportCmd {
  std::string traces;
  std::string story;
  std::optional<int> layer;
  std::string trace_kind;
  std::string accuracy;
  std::string sweep;
  std::string aggregate_csv;
  std::string kde;
  int window = 10;

  void add(CLI::App* app) {
    app->add_option("--traces", traces, "traces.csv; renders one story's track");
    app->add_option("--story", story, "story id to render (default: first)");
    app->add_option("--layer", layer, "layer to render from --traces");
    app->add_option("--trace-kind", trace_kind, "final_subword or cumulative_mean");
    app->add_option("--accuracy", accuracy, "accuracy.csv from 'train' (accuracy by layer)");
    app->add_option("--sweep", sweep, "sweep.csv from 'sweep-pca' (accuracy by probe size)");
    app->add_option("--aggregate", aggregate_csv, "aggregate.csv from 'aggregate'");
    app->add_option("--kde", kde, "kde.csv from 'kde'");
    app->add_option("--window", window, "moving-average window for word tracks");
  }

  void run(Env& env) const {
    json written = json::array();
    if (!traces.empty()) {
      auto ts = load_traces(traces, layer, trace_kind);
      const auto it = story.empty() ? ts.begin()
                                    : std::find_if(ts.begin(), ts.end(),
                                                   [&](const storytrack::TrackTrace& t) { return t.story_id == story; });
      if (it == ts.end()) throw DataError("story '" + story + "' not in traces");
      const auto smoothed = storytrack::smooth(it->outputs, window);
      svg::LineChart chart;
      chart.title = "Story " + it->story_id + ", layer " + std::to_string(it->layer) + " (" +
                    std::string(storytrack::to_string(it->kind)) + ")";
      chart.x_label = "word index";
      chart.y_label = "probe output (" + std::to_string(window) + "-word moving average)";
      chart.y_range = std::pair{0.0, 1.0};
      chart.hlines = {0.5};
      chart.bands = sentence_bands(it->word_sentence_index, it->sentence_labels);
      std::vector<double> xs;
      for (std::size_t i = 0; i < smoothed.size(); ++i) xs.push_back(static_cast<double>(i + 1));
      chart.series.push_back({"smoothed", xs, std::vector<double>(smoothed.begin(), smoothed.end()), "#1f77b4", false});
      write_text_file(env.out_dir / "trace.svg", svg::render(chart));
      written.push_back("trace.svg");
    }
    if (!accuracy.empty()) {
      const auto table = read_csv(accuracy);
      const auto c_layer = table.require_column("layer");
      const auto c_kind = table.require_column("kind");
      const auto c_mean = table.require_column("mean_acc");
      std::map<std::string, svg::Series> by_kind;
      for (const auto& row : table.rows) {
        auto& s = by_kind[row[c_kind]];
        s.name = row[c_kind];
        s.x.push_back(std::stod(row[c_layer]));
        s.y.push_back(std::stod(row[c_mean]));
        s.markers = true;
      }
      svg::LineChart chart;
      chart.title = "Probe accuracy by layer";
      chart.x_label = "layer";
      chart.y_label = "mean test accuracy";
      chart.y_range = std::pair{0.0, 1.0};
      chart.hlines = {0.5};
      const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd"};
      std::size_t c = 0;
      for (auto& [kind, s] : by_kind) {
        s.color = colors[c++ % 4];
        chart.series.push_back(s);
      }
      write_text_file(env.out_dir / "accuracy_by_layer.svg", svg::render(chart));
      written.push_back("accuracy_by_layer.svg");
    }
    if (!sweep.empty()) {
      const auto table = read_csv(sweep);
      const auto c_params = table.require_column("parameters");
      const auto c_mean = table.require_column("mean_acc");
      svg::Series s{"mean accuracy", {}, {}, "#1f77b4", true};
      for (const auto& row : table.rows) {
        s.x.push_back(std::stod(row[c_params]));
        s.y.push_back(std::stod(row[c_mean]));
      }
      svg::LineChart chart;
      chart.title = "Probe accuracy by probe size";
      chart.x_label = "probe parameters";
      chart.y_label = "mean test accuracy";
      chart.y_range = std::pair{0.0, 1.0};
      chart.series.push_back(s);
      write_text_file(env.out_dir / "accuracy_by_params.svg", svg::render(chart));
      written.push_back("accuracy_by_params.svg");
    }
    if (!aggregate_csv.empty()) {
      const auto table = read_csv(aggregate_csv);
      const auto c_pos = table.require_column("position");
      const auto c_sentence = table.require_column("sentence");
      const auto c_mean = table.require_column("mean");
      const auto c_smoothed = table.require_column("smoothed");
      const auto c_label = table.require_column("label");
      std::vector<double> xs, mean, smoothed;
      std::vector<int> sentence_of;
      std::vector<int> labels;
      for (const auto& row : table.rows) {
        xs.push_back(std::stod(row[c_pos]));
        mean.push_back(std::stod(row[c_mean]));
        smoothed.push_back(std::stod(row[c_smoothed]));
        const int s = std::stoi(row[c_sentence]);
        sentence_of.push_back(s);
        if (s >= 1 && !row[c_label].empty()) {
          if (labels.size() < static_cast<std::size_t>(s)) labels.resize(static_cast<std::size_t>(s), 0);
          labels[static_cast<std::size_t>(s - 1)] = std::stoi(row[c_label]);
        }
      }
      svg::LineChart chart;
      chart.title = "Aggregate probe output across stories";
      chart.x_label = "aligned word position";
      chart.y_label = "mean probe output";
      chart.y_range = std::pair{0.0, 1.0};
      chart.hlines = {0.5};
      chart.bands = sentence_bands(sentence_of, labels);
      chart.series.push_back({"mean", xs, mean, "#7f7f7f", false});
      chart.series.push_back({"smoothed", xs, smoothed, "#1f77b4", false});
      write_text_file(env.out_dir / "aggregate.svg", svg::render(chart));
      written.push_back("aggregate.svg");
    }
    if (!kde.empty()) {
      const auto table = read_csv(kde);
      const auto c_segment = table.require_column("segment");
      const auto c_x = table.require_column("x");
      const auto c_density = table.require_column("density");
      std::vector<std::string> order;
      std::map<std::string, svg::Series> by_segment;
      for (const auto& row : table.rows) {
        if (row[c_density] == "inf") continue;
        if (!by_segment.count(row[c_segment])) order.push_back(row[c_segment]);
        auto& s = by_segment[row[c_segment]];
        s.name = row[c_segment];
        s.x.push_back(std::stod(row[c_x]));
        s.y.push_back(std::stod(row[c_density]));
      }
      svg::LineChart chart;
      chart.title = "Probe output density by story segment";
      chart.x_label = "probe output";
      chart.y_label = "density";
      for (const auto& name : order) {
        auto s = by_segment[name];
        s.color = name.rfind("transition", 0) == 0 ? "#2ca02c" : "#d62728";
        chart.series.push_back(s);
      }
      write_text_file(env.out_dir / "kde.svg", svg::render(chart));
      written.push_back("kde.svg");
    }
    if (written.empty()) throw ConfigError("report needs at least one of --traces, --accuracy, --sweep, --aggregate, --kde");
    const json doc{{"written", written}};
    env.out << doc.dump() << '\n';
  }
};

// ---- manifest --------------------------------------------------------------

std::string option_key(const CLI::Option* opt) {
  auto name = opt->get_name();
  while (!name.empty() && name.front() == '-') name.erase(name.begin());
  return name;
}

json run_manifest(const CLI::App& app, const CLI::App& sub, const Globals& globals) {
  json options = json::object();
  json inputs = json::object();
  auto record = [&](const CLI::App& owner) {
    for (const auto* opt : owner.get_options()) {
      const auto key = option_key(opt);
      if (key.empty() || kUnhashedOptions.count(key)) continue;
      std::string value;
      if (opt->count() > 0) {
        const auto& results = opt->results();
        for (std::size_t i = 0; i < results.size(); ++i) {
          if (i) value += ',';
          value += results[i];
        }
      } else {
        value = opt->get_default_str();
      }
      options[key] = value;
      if (kInputOptions.count(key) && opt->count() > 0) {
        for (const auto& path : opt->results()) {
          if (fs::exists(path)) inputs[key + ":" + path] = hash_path(path);
        }
      }
    }
  };
  record(app);
  record(sub);
  json m;
  m["tool"] = "cprobe";
  m["subcommand"] = sub.get_name();
  m["seed"] = globals.seed;
  m["options"] = options;
  m["config_hash"] = to_hex(fnv1a64(sub.get_name() + "\n" + options.dump()));
  m["input_hashes"] = inputs;
  return m;
}

std::string scalar_flag_value(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_number_float()) return format_number(v.get<double>());
  throw ConfigError("config value " + v.dump() + " is not a scalar");
}

void append_flags(const json& obj, std::vector<std::string>& out) {
  for (const auto& [key, value] : obj.items()) {
    if (value.is_object()) continue;
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_array()) {
      std::string joined;
      for (std::size_t i = 0; i < value.size(); ++i) {
        if (i) joined += ',';
        joined += scalar_flag_value(value[i]);
      }
      out.push_back(flag);
      out.push_back(joined);
    } else if (!value.is_null()) {
      out.push_back(flag);
      out.push_back(scalar_flag_value(value));
    }
  }
}

}  // namespace

std::vector<std::string> config_to_flags(const std::string& json_text, const std::string& subcommand) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  std::vector<std::string> flags;
  append_flags(j, flags);
  if (j.contains(subcommand) && j.at(subcommand).is_object()) append_flags(j.at(subcommand), flags);
  return flags;
}

int run(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Concept probing toolkit: datasets, linear probes, controls and story tracking", "cprobe"};
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.fallthrough();

  Globals globals;
  std::string out_dir = "cprobe_out";
  app.add_option("--seed", globals.seed, "base random seed");
  app.add_option("--jobs", globals.jobs, "worker threads across layers, seeds and stories");
  app.add_option("--config", globals.config, "JSON file whose members mirror the command-line flags");
  app.add_option("--out", out_dir, "output directory");

  ImportCmd import_cmd;
  TrainCmd train_cmd;
  EvalCmd eval_cmd;
  SweepCmd sweep_cmd;
  ControlCmd control_cmd;
  TrackCmd track_cmd;
  AggregateCmd aggregate_cmd;
  KdeCmd kde_cmd;
  BestLayerCmd best_cmd;
  AgreementCmd agreement_cmd;
  GenDatasetCmd gen_dataset_cmd;
  GenStoriesCmd gen_stories_cmd;
  ReportCmd report_cmd;

  std::map<std::string, std::function<void(Env&)>> handlers;
  auto add = [&](const char* name, const char* help, auto& cmd) {
    auto* sub = app.add_subcommand(name, help);
    cmd.add(sub);
    handlers[name] = [&cmd](Env& env) { cmd.run(env); };
  };
  add("gen-dataset", "generate a concept dataset through a chat endpoint", gen_dataset_cmd);
  add("gen-stories", "generate and validate 32-sentence stories", gen_stories_cmd);
  add("import", "import a released dataset or story CSV", import_cmd);
  add("train", "train probe ensembles per layer", train_cmd);
  add("eval", "score saved probes on a store split", eval_cmd);
  add("sweep-pca", "accuracy as a function of PCA probe size", sweep_cmd);
  add("control", "random-label and random-embedding control tasks", control_cmd);
  add("track", "word-level probe traces over stories", track_cmd);
  add("aggregate", "left-padded cross-story average of traces", aggregate_cmd);
  add("kde", "per-segment densities of probe outputs", kde_cmd);
  add("best-layer", "rank layers by transition/paragraph separation", best_cmd);
  add("agreement", "kappa statistics and confident-label filtering", agreement_cmd);
  add("report", "render SVG charts from result CSVs", report_cmd);

  std::vector<std::string> args = args_in;
  try {
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    }
    if (!config_path.empty()) {
      const auto sub_it = std::find_if(args.begin(), args.end(), [&](const std::string& a) { return handlers.count(a); });
      if (sub_it != args.end()) {
        const auto flags = config_to_flags(read_text_file(config_path), *sub_it);
        args.insert(sub_it + 1, flags.begin(), flags.end());
      }
    }
  } catch (const Error& e) {
    err << json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << '\n';
    return kExitUsage;
  }

  std::vector<std::string> argv_storage{"cprobe"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const auto* sub = app.get_subcommands().front();
  Env env{out, err, globals, fs::path(out_dir)};
  try {
    if (globals.jobs < 1) throw ConfigError("--jobs must be at least 1");
    const auto manifest = run_manifest(app, *sub, globals);
    fs::create_directories(env.out_dir);
    handlers.at(sub->get_name())(env);
    write_text_file(env.out_dir / "run_manifest.json", manifest.dump(2) + "\n");
  } catch (const Error& e) {
    err << json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << '\n';
    return kExitModuleError;
  } catch (const fs::filesystem_error& e) {
    err << json{{"error", {{"kind", "io"}, {"message", e.what()}}}}.dump() << '\n';
    return kExitModuleError;
  } catch (const std::exception& e) {
    err << json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << '\n';
    return kExitModuleError;
  }
  return kExitOk;
}

}  // namespace cprobe::cli
