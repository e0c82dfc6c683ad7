#pragma once

#include "cprobe/common.hpp"
#include "cprobe/embedstore.hpp"
#include "cprobe/probekit.hpp"
#include "cprobe/storytrack.hpp"

#include <filesystem>
#include <string>
#include <vector>

// Synthetic data with known answers, shared by the unit tests and the
// acceptance binary.
namespace testkit {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "cprobe");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// x = noise(sigma) + label * shift * v with labels alternating 0/1, so the
// classes are balanced. v is a fixed random unit vector.
struct PlantedSpec {
  int n = 2000;
  int d = 128;
  double noise = 1.0;
  double shift = 1.5;
  std::uint64_t seed = 1;
};

cprobe::VectorF unit_direction(int d, std::uint64_t seed);

struct PlantedData {
  cprobe::MatrixF x;
  std::vector<int> labels;
  cprobe::VectorF direction;
};

PlantedData make_planted(const PlantedSpec& spec);

// Rows with example ids e0..e{n-1}, the given labels and a 70/10/20 split.
std::vector<cprobe::embedstore::ExampleRow> make_rows(const std::vector<int>& labels, std::uint64_t split_seed);

// Splits a matrix by ExampleRow::split, in row order.
cprobe::probekit::ProbeDataset to_dataset(const cprobe::MatrixF& x,
                                          const std::vector<cprobe::embedstore::ExampleRow>& rows);

// Writes a one-layer (layer `layer`) nth store of the planted data.
PlantedData write_planted_store(const fs::path& dir, const PlantedSpec& spec, int layer = 0);

// Template embeddings whose top principal component is `v`:
// t = noise(1) + a * v with a ~ N(0, 9).
cprobe::MatrixF planted_templates(int n, const cprobe::VectorF& v, std::uint64_t seed);

void write_template_store(const fs::path& dir, const cprobe::MatrixF& templates, int layer = 0);

// Gaussian matrix with i.i.d. N(0, 1) entries.
cprobe::MatrixF gaussian(int rows, int cols, std::uint64_t seed);

// ---- story oracle ---------------------------------------------------------

// Stories of 32 sentences (3..8 words each, 1..3 tokens per word). Token
// embeddings are N(0, 1) noise; on `informative_layer` every token of the
// transition sentences 11 and 22 also carries strength * v. A matching
// concept store (nth and mean kinds, same layers) holds examples
// noise + label * strength * v on the informative layer and pure noise on
// the others.
struct StorySpec {
  int n_stories = 12;
  int d = 32;
  int num_layers = 2;  // layers 0..2
  int informative_layer = 1;
  double strength = 4.0;
  int concept_examples = 2000;
  std::uint64_t seed = 11;
};

struct StoryFixture {
  fs::path concept_store;
  fs::path story_store;
  cprobe::VectorF direction;
};

StoryFixture write_story_fixture(const fs::path& root, const StorySpec& spec);

// Trains one probe per (layer, kind) from the concept store with default
// hyperparameters and seed 0.
cprobe::probekit::Probe train_story_probe(const fs::path& concept_store, int layer, cprobe::RepresentativeKind kind);

// Tracks every story of the story store at one layer.
std::vector<cprobe::storytrack::TrackTrace> track_all(const fs::path& story_store,
                                                      const cprobe::probekit::Probe& probe,
                                                      cprobe::storytrack::TraceKind kind);

// Fraction of transition-sentence words above 0.5 and of paragraph words
// below 0.5, computed directly from the traces.
struct PatternFractions {
  double transition_above = 0.0;
  double paragraph_below = 0.0;
};
PatternFractions pattern_fractions(const std::vector<cprobe::storytrack::TrackTrace>& traces);

}  // namespace testkit
