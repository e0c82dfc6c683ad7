#include "cprobe/embedstore.hpp"

#include "cprobe/csv.hpp"
#include "cprobe/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace cprobe::embedstore {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kExamplesFile = "examples.jsonl";
constexpr const char* kAlignmentsFile = "alignments.jsonl";

std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0x000000FFu) << 24) | ((v & 0x0000FF00u) << 8) |
         ((v & 0x00FF0000u) >> 8) | ((v & 0xFF000000u) >> 24);
}

void write_f32_blob(const fs::path& path, const MatrixF& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("failed to open " + path.string() + " for writing");
  const auto count = static_cast<std::size_t>(m.size());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const auto swapped = byteswap32(std::bit_cast<std::uint32_t>(m.data()[i]));
      out.write(reinterpret_cast<const char*>(&swapped), sizeof(swapped));
    }
  }
  if (!out) throw IoError("failed to write " + path.string());
}

void read_f32_into(const fs::path& path, std::int64_t offset_floats, float* dst, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("failed to open " + path.string());
  in.seekg(static_cast<std::streamoff>(offset_floats * 4), std::ios::beg);
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(float))) {
    throw IoError("short read from " + path.string());
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < count; ++i) {
      dst[i] = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(dst[i])));
    }
  }
}

json row_to_json(const ExampleRow& row) {
  json j;
  j["example_id"] = row.example_id;
  j["text"] = row.text;
  j["label"] = row.label;
  j["split"] = std::string(to_string(row.split));
  j["pair_id"] = row.pair_id;
  j["source_template_id"] = row.source_template_id ? json(*row.source_template_id) : json(nullptr);
  return j;
}

ExampleRow row_from_json(const json& j, std::size_t line) {
  try {
    ExampleRow row;
    row.example_id = j.at("example_id").get<std::string>();
    row.text = j.at("text").get<std::string>();
    row.label = j.at("label").get<int>();
    row.split = parse_split(j.at("split").get<std::string>());
    row.pair_id = j.value("pair_id", std::string{});
    if (j.contains("source_template_id") && !j["source_template_id"].is_null()) {
      row.source_template_id = j["source_template_id"].get<std::string>();
    }
    if (row.label != 0 && row.label != 1) {
      throw ValueError(line, "label must be 0 or 1");
    }
    return row;
  } catch (const json::exception& e) {
    throw SchemaError("examples.jsonl line " + std::to_string(line) + ": " + e.what());
  }
}

json alignment_to_json(const TokenAlignment& a) {
  json j;
  j["story_id"] = a.story_id;
  j["words"] = a.words;
  j["word_final_token_index"] = a.word_final_token_index;
  j["num_tokens"] = a.num_tokens;
  j["token_offset"] = a.token_offset;
  j["word_sentence_index"] = a.word_sentence_index;
  j["sentence_labels"] = a.sentence_labels;
  return j;
}

TokenAlignment alignment_from_json(const json& j) {
  TokenAlignment a;
  a.story_id = j.at("story_id").get<std::string>();
  a.words = j.at("words").get<std::vector<std::string>>();
  a.word_final_token_index = j.at("word_final_token_index").get<std::vector<int>>();
  a.num_tokens = j.at("num_tokens").get<int>();
  a.token_offset = j.value("token_offset", std::int64_t{0});
  a.word_sentence_index = j.value("word_sentence_index", std::vector<int>{});
  a.sentence_labels = j.value("sentence_labels", std::vector<int>{});
  return a;
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw SchemaError(path.filename().string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void validate_rows(const std::vector<ExampleRow>& rows) {
  std::unordered_set<std::string> ids;
  std::unordered_map<std::string, std::vector<int>> pairs;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (!ids.insert(row.example_id).second) {
      throw DuplicateIdError("duplicate example_id '" + row.example_id + "'");
    }
    if (row.label != 0 && row.label != 1) {
      throw ValueError(i, "label of '" + row.example_id + "' must be 0 or 1");
    }
    if (!row.pair_id.empty()) pairs[row.pair_id].push_back(row.label);
  }
  for (const auto& [pair_id, labels] : pairs) {
    if (labels.size() > 2 || (labels.size() == 2 && labels[0] == labels[1])) {
      throw ValueError(0, "pair '" + pair_id + "' must link one positive and one negative row");
    }
  }
}

}  // namespace

std::optional<ModelDims> known_model_dims(std::string_view model_id) {
  static const std::map<std::string, ModelDims> table = {
      {"llama-3-8b", {4096, 32}},      {"meta-llama-3-8b", {4096, 32}},
      {"gemma-2-2b", {2304, 26}},      {"gemma-2-9b", {3584, 42}},
      {"qwen2.5-0.5b", {896, 24}},     {"qwen2.5-1.5b", {1536, 28}},
      {"qwen2.5-3b", {2048, 36}},      {"qwen2.5-7b", {3584, 28}},
  };
  std::string name = to_lower(model_id);
  if (const auto slash = name.rfind('/'); slash != std::string::npos) {
    name = name.substr(slash + 1);
  }
  if (const auto it = table.find(name); it != table.end()) return it->second;
  return std::nullopt;
}

void TokenAlignment::validate() const {
  if (word_final_token_index.size() != words.size()) {
    throw AlignmentError("story '" + story_id + "': " + std::to_string(words.size()) + " words but " +
                         std::to_string(word_final_token_index.size()) + " final-token indices");
  }
  for (std::size_t i = 0; i < word_final_token_index.size(); ++i) {
    const int idx = word_final_token_index[i];
    if (idx < 0 || (i > 0 && idx <= word_final_token_index[i - 1])) {
      throw AlignmentError("story '" + story_id + "': final-token indices must be strictly increasing");
    }
  }
  if (!word_final_token_index.empty() && word_final_token_index.back() >= num_tokens) {
    throw AlignmentError("story '" + story_id + "': final-token index beyond num_tokens");
  }
  if (num_tokens < static_cast<int>(words.size())) {
    throw AlignmentError("story '" + story_id + "': fewer tokens than words");
  }
  if (!word_sentence_index.empty() && word_sentence_index.size() != words.size()) {
    throw AlignmentError("story '" + story_id + "': word_sentence_index length differs from word count");
  }
}

std::string blob_file_name(int layer, RepresentativeKind kind) {
  return "layer" + std::to_string(layer) + "_" + std::string(to_string(kind)) + ".f32";
}

void write_store(const fs::path& dir,
                 const StoreManifest& manifest,
                 const std::vector<ExampleRow>& rows,
                 const std::vector<LayerBlob>& blobs,
                 const std::vector<TokenAlignment>& alignments) {
  if (manifest.d_model <= 0 || manifest.num_layers <= 0) {
    throw SchemaError("d_model and num_layers must be positive");
  }
  if (manifest.dtype != "f32") {
    throw SchemaError("unsupported dtype '" + manifest.dtype + "'");
  }
  if (const auto dims = known_model_dims(manifest.model_id)) {
    if (dims->d_model != manifest.d_model || dims->num_layers != manifest.num_layers) {
      throw SchemaError("manifest dims for " + manifest.model_id + " do not match the reference table (d_model " +
                        std::to_string(dims->d_model) + ", " + std::to_string(dims->num_layers) + " layers)");
    }
  }
  validate_rows(rows);

  std::int64_t total_tokens = 0;
  for (const auto& a : alignments) {
    a.validate();
    if (a.token_offset != total_tokens) {
      throw AlignmentError("story '" + a.story_id + "': token_offset must equal the running token count");
    }
    total_tokens += a.num_tokens;
  }

  std::set<std::pair<int, RepresentativeKind>> seen;
  for (const auto& blob : blobs) {
    if (blob.layer < 0 || blob.layer > manifest.num_layers) {
      throw RangeError("layer " + std::to_string(blob.layer) + " outside [0, " +
                       std::to_string(manifest.num_layers) + "]");
    }
    if (!manifest.representative_kinds.contains(blob.kind)) {
      throw SchemaError("blob kind " + std::string(to_string(blob.kind)) + " not listed in manifest");
    }
    if (!seen.insert({blob.layer, blob.kind}).second) {
      throw SchemaError("layer " + std::to_string(blob.layer) + " kind " + std::string(to_string(blob.kind)) +
                        " given twice");
    }
    const std::int64_t expected_rows = blob.kind == RepresentativeKind::token_level
                                           ? total_tokens
                                           : static_cast<std::int64_t>(rows.size());
    if (blob.data.rows() != expected_rows || blob.data.cols() != manifest.d_model) {
      throw ShapeError(blob.layer, "layer " + std::to_string(blob.layer) + " (" +
                                       std::string(to_string(blob.kind)) + ") has shape " +
                                       std::to_string(blob.data.rows()) + "x" + std::to_string(blob.data.cols()) +
                                       ", expected " + std::to_string(expected_rows) + "x" +
                                       std::to_string(manifest.d_model));
    }
  }
  if (!alignments.empty() && alignments.size() != rows.size()) {
    throw AlignmentError("token_level stores need one alignment per example row");
  }
  for (std::size_t i = 0; i < alignments.size(); ++i) {
    if (alignments[i].story_id != rows[i].example_id) {
      throw AlignmentError("alignment " + std::to_string(i) + " is for '" + alignments[i].story_id +
                           "' but row is '" + rows[i].example_id + "'");
    }
  }

  fs::create_directories(dir);

  json m;
  m["model_id"] = manifest.model_id;
  m["d_model"] = manifest.d_model;
  m["num_layers"] = manifest.num_layers;
  m["dtype"] = manifest.dtype;
  json kinds = json::array();
  for (const auto kind : manifest.representative_kinds) kinds.push_back(std::string(to_string(kind)));
  m["representative_kinds"] = kinds;
  m["created_at"] = manifest.created_at;
  m["num_rows"] = rows.size();
  m["num_tokens"] = total_tokens;
  json blob_list = json::array();
  for (const auto& [layer, kind] : seen) {
    blob_list.push_back({{"layer", layer}, {"kind", std::string(to_string(kind))},
                         {"file", blob_file_name(layer, kind)}});
  }
  m["blobs"] = blob_list;

  for (const auto& blob : blobs) {
    write_f32_blob(dir / blob_file_name(blob.layer, blob.kind), blob.data);
  }
  write_examples_jsonl(dir / kExamplesFile, rows);
  if (!alignments.empty()) {
    std::ostringstream out;
    for (const auto& a : alignments) out << alignment_to_json(a).dump() << '\n';
    write_text_file(dir / kAlignmentsFile, out.str());
  }
  // Manifest last: a store without one is an incomplete write.
  write_text_file(dir / kManifestFile, m.dump(2) + "\n");
}

EmbeddingStore EmbeddingStore::open(const fs::path& dir) {
  if (!fs::exists(dir / kManifestFile)) {
    throw IoError("no manifest.json in " + dir.string());
  }
  EmbeddingStore store;
  store.dir_ = dir;
  json m;
  try {
    m = json::parse(read_text_file(dir / kManifestFile));
    auto& man = store.manifest_;
    man.model_id = m.at("model_id").get<std::string>();
    man.d_model = m.at("d_model").get<int>();
    man.num_layers = m.at("num_layers").get<int>();
    man.dtype = m.value("dtype", std::string("f32"));
    for (const auto& k : m.at("representative_kinds")) man.representative_kinds.insert(parse_kind(k.get<std::string>()));
    man.created_at = m.value("created_at", std::string{});
    store.total_tokens_ = m.value("num_tokens", std::int64_t{0});
  } catch (const json::exception& e) {
    throw SchemaError("manifest.json: " + std::string(e.what()));
  }
  if (store.manifest_.dtype != "f32") {
    throw SchemaError("unsupported dtype '" + store.manifest_.dtype + "'");
  }

  std::size_t lineno = 0;
  for (const auto& j : read_jsonl(dir / kExamplesFile)) {
    store.rows_.push_back(row_from_json(j, ++lineno));
  }
  validate_rows(store.rows_);

  if (fs::exists(dir / kAlignmentsFile)) {
    for (const auto& j : read_jsonl(dir / kAlignmentsFile)) {
      try {
        store.alignments_.push_back(alignment_from_json(j));
      } catch (const json::exception& e) {
        throw SchemaError("alignments.jsonl: " + std::string(e.what()));
      }
    }
  }

  for (const auto& b : m.value("blobs", json::array())) {
    const int layer = b.at("layer").get<int>();
    const auto kind = parse_kind(b.at("kind").get<std::string>());
    const auto path = dir / blob_file_name(layer, kind);
    if (!fs::exists(path)) {
      throw IoError("manifest lists missing blob " + path.string());
    }
    const std::int64_t nrows = kind == RepresentativeKind::token_level
                                   ? store.total_tokens_
                                   : static_cast<std::int64_t>(store.rows_.size());
    const auto expected = static_cast<std::uintmax_t>(nrows) * store.manifest_.d_model * 4;
    if (fs::file_size(path) != expected) {
      throw IoError("blob " + path.filename().string() + " has " + std::to_string(fs::file_size(path)) +
                    " bytes, expected " + std::to_string(expected));
    }
    store.blobs_.insert({layer, kind});
  }
  return store;
}

bool EmbeddingStore::has_blob(int layer, RepresentativeKind kind) const {
  return blobs_.contains({layer, kind});
}

std::vector<int> EmbeddingStore::layers(RepresentativeKind kind) const {
  std::vector<int> out;
  for (const auto& [layer, k] : blobs_) {
    if (k == kind) out.push_back(layer);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void EmbeddingStore::check_layer_kind(int layer, RepresentativeKind kind) const {
  if (layer < 0 || layer > manifest_.num_layers) {
    throw RangeError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(manifest_.num_layers) + "]");
  }
  if (!manifest_.representative_kinds.contains(kind) || !has_blob(layer, kind)) {
    throw NotExtractedError("layer " + std::to_string(layer) + " kind " + std::string(to_string(kind)) +
                            " was not extracted into " + dir_.string());
  }
}

LayerData EmbeddingStore::read_layer(int layer, RepresentativeKind kind) const {
  check_layer_kind(layer, kind);
  const std::int64_t nrows =
      kind == RepresentativeKind::token_level ? total_tokens_ : static_cast<std::int64_t>(rows_.size());
  LayerData out;
  out.matrix.resize(nrows, manifest_.d_model);
  read_f32_into(dir_ / blob_file_name(layer, kind), 0, out.matrix.data(), static_cast<std::size_t>(out.matrix.size()));
  out.rows = &rows_;
  return out;
}

MatrixF EmbeddingStore::read_story_tokens(int layer, std::size_t story_index) const {
  check_layer_kind(layer, RepresentativeKind::token_level);
  if (story_index >= alignments_.size()) {
    throw RangeError("story index " + std::to_string(story_index) + " out of range");
  }
  const auto& a = alignments_[story_index];
  MatrixF m(a.num_tokens, manifest_.d_model);
  read_f32_into(dir_ / blob_file_name(layer, RepresentativeKind::token_level),
                a.token_offset * manifest_.d_model, m.data(), static_cast<std::size_t>(m.size()));
  return m;
}

std::size_t EmbeddingStore::story_index(std::string_view story_id) const {
  for (std::size_t i = 0; i < alignments_.size(); ++i) {
    if (alignments_[i].story_id == story_id) return i;
  }
  throw RangeError("no story '" + std::string(story_id) + "' in store");
}

LayerData read_layer(const EmbeddingStore& store, int layer, RepresentativeKind kind) {
  return store.read_layer(layer, kind);
}

void assign_splits(std::vector<ExampleRow>& rows, std::uint64_t seed) {
  const std::size_t n = rows.size();
  const std::size_t n_train = (n * 7) / 10;
  const std::size_t n_val = n / 10;

  // Groups in order of first appearance; unpaired rows are singletons.
  std::vector<std::vector<std::size_t>> groups;
  std::unordered_map<std::string, std::size_t> group_of;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pid = rows[i].pair_id;
    if (pid.empty()) {
      groups.push_back({i});
      continue;
    }
    auto [it, inserted] = group_of.try_emplace(pid, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }

  Rng rng(derive_seed(seed, 0x53504c4954ULL));
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::size_t train = 0;
  std::size_t val = 0;
  for (const auto g : order) {
    const auto size = groups[g].size();
    Split split = Split::test;
    if (train + size <= n_train) {
      split = Split::train;
      train += size;
    } else if (val + size <= n_val) {
      split = Split::val;
      val += size;
    }
    for (const auto i : groups[g]) rows[i].split = split;
  }
}

std::vector<ExampleRow> import_released_csv(const fs::path& path, std::uint64_t split_seed) {
  const auto table = read_csv(path);
  const auto text_col = table.require_column("input_text");
  const auto label_col = table.require_column("label");
  const auto id_col = table.column("example_id");
  const auto pair_col = table.column("pair_id");
  const auto template_col = table.column("source_template_id");

  std::vector<ExampleRow> rows;
  rows.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& rec = table.rows[r];
    // Row numbers in messages are 1-based data rows (header excluded).
    if (rec.size() <= std::max(text_col, label_col)) {
      throw SchemaError("row " + std::to_string(r + 1) + " has too few columns");
    }
    const auto label_text = trim(rec[label_col]);
    int label = -1;
    if (label_text == "0" || label_text == "0.0") label = 0;
    if (label_text == "1" || label_text == "1.0") label = 1;
    if (label < 0) {
      throw ValueError(r + 1, "row " + std::to_string(r + 1) + ": label '" + label_text + "' is not 0 or 1");
    }
    ExampleRow row;
    row.example_id = id_col && !rec.at(*id_col).empty() ? rec.at(*id_col) : "ex" + std::to_string(r);
    row.text = rec[text_col];
    row.label = label;
    if (pair_col && *pair_col < rec.size()) row.pair_id = rec[*pair_col];
    if (template_col && *template_col < rec.size() && !rec[*template_col].empty()) {
      row.source_template_id = rec[*template_col];
    }
    rows.push_back(std::move(row));
  }
  validate_rows(rows);
  assign_splits(rows, split_seed);
  return rows;
}

std::vector<int> parse_label_list(std::string_view text) {
  std::vector<int> labels;
  for (const char c : text) {
    if (c == '0' || c == '1') {
      labels.push_back(c - '0');
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      throw SchemaError("label list holds a value other than 0/1: " + std::string(text));
    }
  }
  return labels;
}

std::string format_label_list(const std::vector<int>& labels) {
  std::string out = "[";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(labels[i]);
  }
  return out + "]";
}

std::vector<StoryRecord> import_story_csv(const fs::path& path) {
  const auto table = read_csv(path);
  const auto text_col = table.require_column("input_text");
  const auto label_col = table.require_column("label");
  const auto id_col = table.column("story_id");
  std::vector<StoryRecord> out;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& rec = table.rows[r];
    if (rec.size() <= std::max(text_col, label_col)) {
      throw SchemaError("row " + std::to_string(r + 1) + " has too few columns");
    }
    StoryRecord story;
    story.story_id = id_col && !rec.at(*id_col).empty() ? rec.at(*id_col) : "story" + std::to_string(r);
    story.text = rec[text_col];
    story.sentence_labels = parse_label_list(rec[label_col]);
    out.push_back(std::move(story));
  }
  return out;
}

void write_examples_jsonl(const fs::path& path, const std::vector<ExampleRow>& rows) {
  std::ostringstream out;
  for (const auto& row : rows) out << row_to_json(row).dump() << '\n';
  write_text_file(path, out.str());
}

std::vector<ExampleRow> read_examples_jsonl(const fs::path& path) {
  std::vector<ExampleRow> rows;
  std::size_t lineno = 0;
  for (const auto& j : read_jsonl(path)) rows.push_back(row_from_json(j, ++lineno));
  return rows;
}

}  // namespace cprobe::embedstore
