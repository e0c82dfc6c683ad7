#include "cprobe/controls.hpp"

#include "cprobe/error.hpp"

#include <cmath>
#include <numeric>

namespace cprobe::controls {
namespace {

constexpr std::uint64_t kLabelStream = 0x4c4142454c53ULL;     // "LABELS"
constexpr std::uint64_t kGaussianStream = 0x474155535349ULL;  // "GAUSSI"

using probekit::EnsembleOptions;
using probekit::EnsembleResult;
using probekit::LabeledMatrix;
using probekit::ProbeDataset;
using probekit::TrainConfig;

// Shared ensemble loop: `prepare(i, seed)` yields the train/val pair for seed
// i, the probe is trained on it and scored on data.test.
template <class Prepare>
EnsembleResult run_control(const ProbeDataset& data,
                           const TrainConfig& config,
                           const EnsembleOptions& options,
                           Prepare prepare) {
  if (options.n_seeds < 1) throw ConfigError("n_seeds must be at least 1");
  if (data.test.x.rows() == 0) throw DataError("test split is empty");
  EnsembleResult result;
  result.probes.resize(static_cast<std::size_t>(options.n_seeds));
  std::vector<double> accs(static_cast<std::size_t>(options.n_seeds));
  probekit::parallel_for(options.n_seeds, options.jobs, [&](int i) {
    TrainConfig seeded = config;
    seeded.seed = config.seed + static_cast<std::uint64_t>(i);
    const auto [train, val] = prepare(seeded.seed);
    auto probe = probekit::train_probe(train, val, seeded, options.basis);
    probe.layer = options.layer;
    probe.kind = options.kind;
    accs[static_cast<std::size_t>(i)] = probekit::accuracy(probe, data.test);
    result.probes[static_cast<std::size_t>(i)] = std::move(probe);
  });
  result.report = probekit::make_report(std::move(accs), static_cast<std::size_t>(data.test.x.rows()));
  return result;
}

void require_aligned(const LabeledMatrix& truth, const LabeledMatrix& control, const char* name) {
  if (truth.x.rows() != control.x.rows()) {
    throw AlignmentError(std::string(name) + " split has " + std::to_string(truth.x.rows()) +
                         " rows, control store has " + std::to_string(control.x.rows()));
  }
  if (truth.y != control.y) {
    throw AlignmentError(std::string(name) + " labels differ between the store and the control store");
  }
  if (truth.x.rows() > 0 && truth.x.cols() != control.x.cols()) {
    throw AlignmentError(std::string(name) + " embedding width differs between the store and the control store");
  }
}

}  // namespace

std::string split_checksum(const LabeledMatrix& split) {
  std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(split.x.data()),
                                             static_cast<std::size_t>(split.x.size()) * sizeof(float)));
  h = fnv1a64(std::string_view(reinterpret_cast<const char*>(split.y.data()), split.y.size() * sizeof(int)), h);
  const std::string shape = std::to_string(split.x.rows()) + "x" + std::to_string(split.x.cols());
  return to_hex(fnv1a64(shape, h));
}

ProbeDataset shuffle_labels(const ProbeDataset& data, std::uint64_t seed) {
  ProbeDataset out = data;
  Rng rng(derive_seed(seed, kLabelStream));
  rng.shuffle(out.train.y);
  rng.shuffle(out.val.y);
  return out;
}

MatrixF gaussian_surrogate(const MatrixF& reference, Eigen::Index rows, Rng& rng) {
  if (reference.rows() == 0) throw DataError("cannot match statistics of an empty split");
  const Eigen::RowVectorXd mean = reference.cast<double>().colwise().mean();
  const Eigen::MatrixXd centered = reference.cast<double>().rowwise() - mean;
  const Eigen::RowVectorXd stddev =
      (centered.array().square().colwise().sum() / static_cast<double>(reference.rows())).sqrt();
  MatrixF out(rows, reference.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < reference.cols(); ++c) {
      out(r, c) = static_cast<float>(mean[c] + stddev[c] * rng.normal());
    }
  }
  return out;
}

EnsembleResult random_label_control(const ProbeDataset& data,
                                    const TrainConfig& config,
                                    const EnsembleOptions& options) {
  return run_control(data, config, options, [&](std::uint64_t seed) {
    auto shuffled = shuffle_labels(data, seed);
    return std::pair{std::move(shuffled.train), std::move(shuffled.val)};
  });
}

EmbeddingControlMode parse_embedding_mode(std::string_view text) {
  if (text == "provided") return EmbeddingControlMode::provided;
  if (text == "gaussian") return EmbeddingControlMode::gaussian;
  throw ConfigError("unknown embedding control mode '" + std::string(text) + "'");
}

EnsembleResult random_embedding_control(const ProbeDataset& data,
                                        const ProbeDataset& control,
                                        const TrainConfig& config,
                                        const EnsembleOptions& options) {
  require_aligned(data.train, control.train, "train");
  require_aligned(data.val, control.val, "val");
  return run_control(data, config, options, [&](std::uint64_t) { return std::pair{control.train, control.val}; });
}

EnsembleResult gaussian_embedding_control(const ProbeDataset& data,
                                          const TrainConfig& config,
                                          const EnsembleOptions& options) {
  return run_control(data, config, options, [&](std::uint64_t seed) {
    Rng rng(derive_seed(seed, kGaussianStream));
    LabeledMatrix train{gaussian_surrogate(data.train.x, data.train.x.rows(), rng), data.train.y};
    LabeledMatrix val{gaussian_surrogate(data.train.x, data.val.x.rows(), rng), data.val.y};
    return std::pair{std::move(train), std::move(val)};
  });
}

EnsembleResult random_label_control(const embedstore::EmbeddingStore& store,
                                    int layer,
                                    RepresentativeKind kind,
                                    const TrainConfig& config,
                                    int n_seeds,
                                    int jobs) {
  EnsembleOptions options;
  options.n_seeds = n_seeds;
  options.jobs = jobs;
  options.layer = layer;
  options.kind = kind;
  return random_label_control(probekit::load_dataset(store, layer, kind), config, options);
}

EnsembleResult random_embedding_control(const embedstore::EmbeddingStore& store,
                                        const embedstore::EmbeddingStore* control_store,
                                        int layer,
                                        RepresentativeKind kind,
                                        const TrainConfig& config,
                                        int n_seeds,
                                        int jobs) {
  EnsembleOptions options;
  options.n_seeds = n_seeds;
  options.jobs = jobs;
  options.layer = layer;
  options.kind = kind;
  const auto data = probekit::load_dataset(store, layer, kind);
  if (control_store == nullptr) {
    return gaussian_embedding_control(data, config, options);
  }
  return random_embedding_control(data, probekit::load_dataset(*control_store, layer, kind), config, options);
}

}  // namespace cprobe::controls
