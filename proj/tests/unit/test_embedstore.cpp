#include "cprobe/embedstore.hpp"
#include "cprobe/error.hpp"

#include "testkit.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>
#include <map>

using namespace cprobe;
using namespace cprobe::embedstore;

namespace {

StoreManifest manifest(int d, int layers, std::set<RepresentativeKind> kinds = {RepresentativeKind::nth}) {
  StoreManifest m;
  m.model_id = "test-model";
  m.d_model = d;
  m.num_layers = layers;
  m.representative_kinds = std::move(kinds);
  m.created_at = "2024-01-01T00:00:00Z";
  return m;
}

std::vector<ExampleRow> rows(int n) {
  std::vector<ExampleRow> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)].example_id = "r" + std::to_string(i);
    out[static_cast<std::size_t>(i)].text = "text " + std::to_string(i);
    out[static_cast<std::size_t>(i)].label = i % 2;
  }
  return out;
}

bool bit_equal(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

std::string write_csv_file(const testkit::fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
  return path.string();
}

}  // namespace

TEST_CASE("zero matrix blob is 32 zero bytes and round-trips") {
  testkit::TempDir dir;
  const MatrixF zeros = MatrixF::Zero(2, 4);
  write_store(dir.path(), manifest(4, 1), rows(2), {{0, RepresentativeKind::nth, zeros}});
  const auto blob = dir / blob_file_name(0, RepresentativeKind::nth);
  REQUIRE(testkit::fs::file_size(blob) == 32);
  const auto bytes = read_text_file(blob);
  CHECK(bytes == std::string(32, '\0'));
  const auto store = EmbeddingStore::open(dir.path());
  CHECK(bit_equal(store.read_layer(0, RepresentativeKind::nth).matrix, zeros));
}

TEST_CASE("random 16x8 matrix round-trips bit-exactly") {
  testkit::TempDir dir;
  const MatrixF m = testkit::gaussian(16, 8, 7);
  write_store(dir.path(), manifest(8, 3), rows(16), {{2, RepresentativeKind::nth, m}});
  const auto store = EmbeddingStore::open(dir.path());
  const auto data = store.read_layer(2, RepresentativeKind::nth);
  CHECK(bit_equal(data.matrix, m));
  REQUIRE(data.rows != nullptr);
  CHECK(data.rows->size() == 16);
  CHECK((*data.rows)[5].example_id == "r5");
}

TEST_CASE("property: every layer and kind round-trips for random stores") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    testkit::TempDir dir;
    const int n = 1 + static_cast<int>(rng.below(30));
    const int d = 1 + static_cast<int>(rng.below(12));
    const int layers = static_cast<int>(rng.below(4));
    std::vector<LayerBlob> blobs;
    for (int l = 0; l <= layers; ++l) {
      for (const auto k : {RepresentativeKind::nth, RepresentativeKind::mean}) {
        MatrixF m = testkit::gaussian(n, d, rng.next_u64());
        // Include awkward values too.
        m(0, 0) = -0.0f;
        if (d > 1) m(0, 1) = std::numeric_limits<float>::denorm_min();
        blobs.push_back({l, k, m});
      }
    }
    auto r = rows(n);
    r[0].source_template_id = "t9";
    r[0].pair_id = "p0";
    write_store(dir.path(), manifest(d, std::max(layers, 1), {RepresentativeKind::nth, RepresentativeKind::mean}), r,
                blobs);
    const auto store = EmbeddingStore::open(dir.path());
    for (const auto& b : blobs) CHECK(bit_equal(store.read_layer(b.layer, b.kind).matrix, b.data));
    CHECK(store.rows()[0].source_template_id == std::optional<std::string>("t9"));
    CHECK(store.rows()[0].pair_id == "p0");
    CHECK(store.manifest().d_model == d);
  }
}

TEST_CASE("shape mismatch names the layer") {
  testkit::TempDir dir;
  try {
    write_store(dir.path(), manifest(4, 5), rows(3), {{4, RepresentativeKind::nth, MatrixF::Zero(2, 4)}});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.layer() == 4);
    CHECK(std::string(e.what()).find('4') != std::string::npos);
  }
  // Nothing was written.
  CHECK_FALSE(testkit::fs::exists(dir / "manifest.json"));
}

TEST_CASE("duplicate example ids are rejected") {
  testkit::TempDir dir;
  auto r = rows(3);
  r[2].example_id = r[0].example_id;
  CHECK_THROWS_AS(write_store(dir.path(), manifest(2, 1), r, {{0, RepresentativeKind::nth, MatrixF::Zero(3, 2)}}),
                  DuplicateIdError);
}

TEST_CASE("read_layer errors distinguish range, not-extracted and io") {
  testkit::TempDir dir;
  write_store(dir.path(), manifest(4, 32), rows(2), {{0, RepresentativeKind::nth, MatrixF::Ones(2, 4)}});
  const auto store = EmbeddingStore::open(dir.path());
  CHECK(store.read_layer(0, RepresentativeKind::nth).matrix.rows() == 2);
  CHECK_THROWS_AS(store.read_layer(33, RepresentativeKind::nth), RangeError);
  CHECK_THROWS_AS(store.read_layer(-1, RepresentativeKind::nth), RangeError);
  CHECK_THROWS_AS(store.read_layer(0, RepresentativeKind::mean), NotExtractedError);
  CHECK_THROWS_AS(store.read_layer(5, RepresentativeKind::nth), NotExtractedError);
  testkit::fs::resize_file(dir / blob_file_name(0, RepresentativeKind::nth), 7);
  CHECK_THROWS_AS(store.read_layer(0, RepresentativeKind::nth), IoError);
  CHECK_THROWS_AS(EmbeddingStore::open(dir / "missing"), IoError);
}

TEST_CASE("known model dimensions follow the reference table") {
  const auto llama = known_model_dims("meta-llama/Meta-Llama-3-8B");
  REQUIRE(llama.has_value());
  CHECK(llama->d_model == 4096);
  CHECK(llama->num_layers == 32);
  CHECK_FALSE(known_model_dims("no-such-model").has_value());
}

TEST_CASE("manifest dims must agree with a known model") {
  testkit::TempDir dir;
  auto m = manifest(4, 1);
  m.model_id = "Llama-3-8B";
  CHECK_THROWS_AS(write_store(dir.path(), m, rows(1), {{0, RepresentativeKind::nth, MatrixF::Zero(1, 4)}}), Error);
}

TEST_CASE("splits: 10 rows give 7/1/2") {
  auto r = rows(10);
  assign_splits(r, 1);
  std::map<Split, int> count;
  for (const auto& row : r) ++count[row.split];
  CHECK(count[Split::train] == 7);
  CHECK(count[Split::val] == 1);
  CHECK(count[Split::test] == 2);
}

TEST_CASE("property: split sizes follow floor(0.7N), floor(0.1N), remainder") {
  for (int n = 1; n <= 300; n += 7) {
    auto r = rows(n);
    assign_splits(r, static_cast<std::uint64_t>(n));
    std::map<Split, int> count;
    for (const auto& row : r) ++count[row.split];
    CHECK(count[Split::train] == (n * 7) / 10);
    CHECK(count[Split::val] == n / 10);
    CHECK(count[Split::test] == n - (n * 7) / 10 - n / 10);
  }
}

TEST_CASE("splits are a pure function of order and seed") {
  auto a = rows(100), b = rows(100), c = rows(100);
  assign_splits(a, 5);
  assign_splits(b, 5);
  assign_splits(c, 6);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].split == b[i].split);
    any_diff |= a[i].split != c[i].split;
  }
  CHECK(any_diff);
}

TEST_CASE("pair members share a split") {
  auto r = rows(200);
  for (std::size_t i = 0; i < r.size(); ++i) r[i].pair_id = "p" + std::to_string(i / 2);
  assign_splits(r, 3);
  for (std::size_t i = 0; i < r.size(); i += 2) CHECK(r[i].split == r[i + 1].split);
}

TEST_CASE("import_released_csv: columns, labels and errors") {
  testkit::TempDir dir;
  std::string text = "input_text,label\n";
  for (int i = 0; i < 10; ++i) text += "\"Sentence, number " + std::to_string(i) + ".\"," + std::to_string(i % 2) + "\n";
  const auto rows10 = import_released_csv(write_csv_file(dir / "ok.csv", text), 1);
  REQUIRE(rows10.size() == 10);
  CHECK(rows10[3].text == "Sentence, number 3.");
  CHECK(rows10[3].label == 1);
  CHECK(rows10[3].pair_id.empty());

  CHECK_THROWS_AS(import_released_csv(write_csv_file(dir / "nolabel.csv", "input_text\nabc\n"), 1), SchemaError);
  try {
    import_released_csv(write_csv_file(dir / "bad.csv", "input_text,label\na,0\nb,2\n"), 1);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(e.row() == 2);
  }
}

TEST_CASE("story csv import and label lists") {
  testkit::TempDir dir;
  const auto recs = import_story_csv(
      write_csv_file(dir / "s.csv", "input_text,label\n\"One. Two.\",\"[0, 1]\"\n\"Three.\",[1]\n"));
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].sentence_labels == std::vector<int>{0, 1});
  CHECK(recs[1].story_id == "story1");
  CHECK(format_label_list({0, 1, 0}) == "[0, 1, 0]");
  CHECK(parse_label_list("[0, 1, 0]") == std::vector<int>{0, 1, 0});
  CHECK_THROWS_AS(parse_label_list("[0, 2]"), SchemaError);
}

TEST_CASE("examples jsonl round-trips") {
  testkit::TempDir dir;
  auto r = rows(5);
  r[1].source_template_id = "t3";
  r[2].text = "quote \" and newline\n";
  assign_splits(r, 9);
  write_examples_jsonl(dir / "e.jsonl", r);
  const auto back = read_examples_jsonl(dir / "e.jsonl");
  REQUIRE(back.size() == r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(back[i].example_id == r[i].example_id);
    CHECK(back[i].text == r[i].text);
    CHECK(back[i].split == r[i].split);
    CHECK(back[i].source_template_id == r[i].source_template_id);
  }
}

TEST_CASE("token-level stores carry alignments and slice story tokens") {
  testkit::TempDir dir;
  TokenAlignment a{"s0", {"Hello", "world."}, {0, 2}, 3, 0, {1, 1}, {0}};
  TokenAlignment b{"s1", {"Hi."}, {1}, 2, 3, {1}, {1}};
  std::vector<ExampleRow> r(2);
  r[0].example_id = "s0";
  r[1].example_id = "s1";
  const MatrixF tokens = testkit::gaussian(5, 4, 1);
  write_store(dir.path(), manifest(4, 1, {RepresentativeKind::token_level}), r,
              {{1, RepresentativeKind::token_level, tokens}}, {a, b});
  const auto store = EmbeddingStore::open(dir.path());
  REQUIRE(store.alignments().size() == 2);
  CHECK(store.alignments()[1].words == std::vector<std::string>{"Hi."});
  CHECK(store.story_index("s1") == 1);
  const auto t1 = store.read_story_tokens(1, 1);
  CHECK(bit_equal(t1, tokens.bottomRows(2)));
  CHECK(store.layers(RepresentativeKind::token_level) == std::vector<int>{1});
}

TEST_CASE("alignment invariants are enforced") {
  TokenAlignment ok{"s", {"a", "b"}, {0, 1}, 2, 0, {}, {}};
  CHECK_NOTHROW(ok.validate());
  auto not_increasing = ok;
  not_increasing.word_final_token_index = {1, 1};
  CHECK_THROWS_AS(not_increasing.validate(), AlignmentError);
  auto past_end = ok;
  past_end.word_final_token_index = {0, 2};
  CHECK_THROWS_AS(past_end.validate(), AlignmentError);
  auto wrong_count = ok;
  wrong_count.word_final_token_index = {0};
  CHECK_THROWS_AS(wrong_count.validate(), AlignmentError);
}
