#pragma once

#include "cprobe/common.hpp"
#include "cprobe/embedstore.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace cprobe::probekit {

enum class Optimizer { adam };
enum class EarlyStopMetric { val_accuracy };

// Defaults are the published probe hyperparameters.
struct TrainConfig {
  float learning_rate = 0.005f;
  int batch_size = 512;
  int max_epochs = 500;
  Optimizer optimizer = Optimizer::adam;
  int early_stop_patience = 10;
  EarlyStopMetric early_stop_metric = EarlyStopMetric::val_accuracy;
  std::uint64_t seed = 0;

  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_epsilon = 1e-8f;
};

struct LabeledMatrix {
  MatrixF x;
  std::vector<int> y;

  Eigen::Index rows() const { return x.rows(); }
};

struct ProbeDataset {
  LabeledMatrix train;
  LabeledMatrix val;
  LabeledMatrix test;

  int dim() const { return static_cast<int>(train.x.cols()); }
};

// Linear probe: score(x) = sigmoid(w . (B^T (x - center)) + bias). Without a
// basis, B is the identity and k = d_model.
struct Probe {
  VectorF weights;
  float bias = 0.0f;
  VectorF center;
  std::optional<MatrixF> basis;  // d_model x k, orthonormal columns
  float threshold = 0.5f;
  int layer = -1;
  RepresentativeKind kind = RepresentativeKind::nth;
  std::uint64_t seed = 0;

  int input_dim() const { return static_cast<int>(center.size()); }
  int k() const { return static_cast<int>(weights.size()); }
  std::size_t parameter_count() const { return weights.size() + 1; }
};

float sigmoid(float z);

// Throws DimensionError when x has the wrong length.
float score(const Probe& probe, std::span<const float> x);
// Presence is strictly above the threshold; a score of exactly 0.5 is absent.
bool classify(const Probe& probe, std::span<const float> x);
std::vector<float> score_rows(const Probe& probe, const MatrixF& x);
double accuracy(const Probe& probe, const LabeledMatrix& data);

// Binary cross-entropy minimised with Adam; returns the snapshot with the best
// validation accuracy (an empty validation split falls back to training
// accuracy). Deterministic for a given config.seed.
Probe train_probe(const LabeledMatrix& train,
                  const LabeledMatrix& val,
                  const TrainConfig& config,
                  const std::optional<MatrixF>& basis = std::nullopt);

struct EvalReport {
  double accuracy = 0.0;
  std::size_t n_test = 0;
  std::vector<double> per_seed_accuracies;
  double mean = 0.0;
  double stddev = 0.0;
};

// Mean and population standard deviation of the per-seed accuracies.
EvalReport make_report(std::vector<double> per_seed, std::size_t n_test);

struct EnsembleResult {
  EvalReport report;
  std::vector<Probe> probes;
};

struct EnsembleOptions {
  int n_seeds = 5;
  int jobs = 1;
  int layer = -1;
  RepresentativeKind kind = RepresentativeKind::nth;
  std::optional<MatrixF> basis;
};

// Seeds config.seed .. config.seed + n_seeds - 1. Errors from any seed are
// rethrown.
EnsembleResult train_ensemble(const ProbeDataset& data, const TrainConfig& config, const EnsembleOptions& options);

// Splits one store layer by ExampleRow::split.
ProbeDataset load_dataset(const embedstore::EmbeddingStore& store, int layer, RepresentativeKind kind);

EnsembleResult train_ensemble(const embedstore::EmbeddingStore& store,
                              int layer,
                              RepresentativeKind kind,
                              const TrainConfig& config,
                              int n_seeds = 5,
                              int jobs = 1);

// Runs fn(i) for i in [0, n) on up to `jobs` threads; the first exception wins.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

// File layout: one JSON header line, then little-endian float32 blobs for
// bias (1), weights (k), center (d_model) and, if present, basis (d_model x k,
// row-major).
void save_probe(const std::filesystem::path& path, const Probe& probe);
Probe load_probe(const std::filesystem::path& path);

std::string probe_file_name(int layer, RepresentativeKind kind, std::uint64_t seed);

}  // namespace cprobe::probekit
