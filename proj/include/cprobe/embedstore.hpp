#pragma once

#include "cprobe/common.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

// On-disk embedding corpus. A store directory holds
//
//   manifest.json       StoreManifest plus the list of extracted blobs
//   examples.jsonl      one ExampleRow per line, row order = matrix row order
//   alignments.jsonl    one TokenAlignment per story (token_level stores only)
//   layer{L}_{kind}.f32 row-major little-endian float32, rows x d_model
//
// For token_level blobs the rows are the concatenated tokens of every story;
// each alignment records where its story's tokens start.
namespace cprobe::embedstore {

struct ModelDims {
  int d_model = 0;
  int num_layers = 0;
};

// Width and transformer depth of the seven reference models. Matching is on
// the last path component of the id, case-insensitively ("meta-llama/Meta-Llama-3-8B"
// and "Llama-3-8B" are the same model).
std::optional<ModelDims> known_model_dims(std::string_view model_id);

struct StoreManifest {
  std::string model_id;
  int d_model = 0;
  // Transformer layers; valid layer indices are 0..num_layers with 0 the
  // embedding layer.
  int num_layers = 0;
  std::string dtype = "f32";
  std::set<RepresentativeKind> representative_kinds;
  std::string created_at;
};

struct ExampleRow {
  std::string example_id;
  std::string text;
  int label = 0;
  Split split = Split::train;
  std::string pair_id;
  std::optional<std::string> source_template_id;
};

struct TokenAlignment {
  std::string story_id;
  std::vector<std::string> words;
  std::vector<int> word_final_token_index;
  int num_tokens = 0;
  // Offset of this story's first token in the token_level blob.
  std::int64_t token_offset = 0;
  // 1-based sentence of each word and 0/1 label of each sentence; written by
  // the extractor from the story file.
  std::vector<int> word_sentence_index;
  std::vector<int> sentence_labels;

  // Throws AlignmentError when the invariants do not hold.
  void validate() const;
};

struct LayerBlob {
  int layer = 0;
  RepresentativeKind kind = RepresentativeKind::nth;
  MatrixF data;
};

std::string blob_file_name(int layer, RepresentativeKind kind);

// Validates every precondition before touching the filesystem: shape
// mismatch raises ShapeError naming the layer, duplicate ids raise
// DuplicateIdError.
void write_store(const std::filesystem::path& dir,
                 const StoreManifest& manifest,
                 const std::vector<ExampleRow>& rows,
                 const std::vector<LayerBlob>& blobs,
                 const std::vector<TokenAlignment>& alignments = {});

struct LayerData {
  MatrixF matrix;
  const std::vector<ExampleRow>* rows = nullptr;
};

class EmbeddingStore {
 public:
  static EmbeddingStore open(const std::filesystem::path& dir);

  const StoreManifest& manifest() const { return manifest_; }
  const std::vector<ExampleRow>& rows() const { return rows_; }
  const std::vector<TokenAlignment>& alignments() const { return alignments_; }
  const std::filesystem::path& dir() const { return dir_; }

  bool has_blob(int layer, RepresentativeKind kind) const;
  std::vector<int> layers(RepresentativeKind kind) const;

  // Layer outside [0, num_layers] -> RangeError. Layer/kind never written ->
  // NotExtractedError. Disk problems -> IoError.
  LayerData read_layer(int layer, RepresentativeKind kind) const;

  // Token embeddings (num_tokens x d_model) for one story of a token_level store.
  MatrixF read_story_tokens(int layer, std::size_t story_index) const;
  std::size_t story_index(std::string_view story_id) const;

 private:
  void check_layer_kind(int layer, RepresentativeKind kind) const;

  std::filesystem::path dir_;
  StoreManifest manifest_;
  std::vector<ExampleRow> rows_;
  std::vector<TokenAlignment> alignments_;
  std::set<std::pair<int, RepresentativeKind>> blobs_;
  std::int64_t total_tokens_ = 0;
};

// Free-function form of EmbeddingStore::read_layer.
LayerData read_layer(const EmbeddingStore& store, int layer, RepresentativeKind kind);

// 70/10/20 split: |train| = floor(0.7 N), |val| = floor(0.1 N), rest test.
// Rows sharing a non-empty pair_id land in the same split. The result is a
// pure function of row order and seed.
void assign_splits(std::vector<ExampleRow>& rows, std::uint64_t seed);

// Reads a released dataset CSV (columns input_text,label; optional
// example_id, pair_id, source_template_id) and assigns splits.
std::vector<ExampleRow> import_released_csv(const std::filesystem::path& path,
                                            std::uint64_t split_seed);

struct StoryRecord {
  std::string story_id;
  std::string text;
  std::vector<int> sentence_labels;
};

// Story CSVs carry input_text plus a label column holding the per-sentence
// label list, e.g. "[0, 0, 1, ...]".
std::vector<StoryRecord> import_story_csv(const std::filesystem::path& path);
std::vector<int> parse_label_list(std::string_view text);
std::string format_label_list(const std::vector<int>& labels);

void write_examples_jsonl(const std::filesystem::path& path, const std::vector<ExampleRow>& rows);
std::vector<ExampleRow> read_examples_jsonl(const std::filesystem::path& path);

}  // namespace cprobe::embedstore
