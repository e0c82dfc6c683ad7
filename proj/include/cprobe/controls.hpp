#pragma once

#include "cprobe/common.hpp"
#include "cprobe/embedstore.hpp"
#include "cprobe/probekit.hpp"

#include <string>

namespace cprobe::controls {

// Order-sensitive digest of a split's embeddings and labels.
std::string split_checksum(const probekit::LabeledMatrix& split);

// Train and val labels permuted independently; test untouched.
probekit::ProbeDataset shuffle_labels(const probekit::ProbeDataset& data, std::uint64_t seed);

// Draws `rows` i.i.d. normal rows with the per-dimension mean and population
// variance of `reference`.
MatrixF gaussian_surrogate(const MatrixF& reference, Eigen::Index rows, Rng& rng);

// Seed i shuffles with a stream derived from config.seed + i and then trains
// with that same seed; every probe is scored on the untouched test split.
probekit::EnsembleResult random_label_control(const probekit::ProbeDataset& data,
                                              const probekit::TrainConfig& config,
                                              const probekit::EnsembleOptions& options);

enum class EmbeddingControlMode { provided, gaussian };

EmbeddingControlMode parse_embedding_mode(std::string_view text);

// Provided mode: train/val embeddings come from `control`, which must carry
// the same row counts and labels (AlignmentError otherwise).
probekit::EnsembleResult random_embedding_control(const probekit::ProbeDataset& data,
                                                  const probekit::ProbeDataset& control,
                                                  const probekit::TrainConfig& config,
                                                  const probekit::EnsembleOptions& options);

// Gaussian mode: train/val embeddings are redrawn per seed from the train
// split's per-dimension statistics; labels are kept.
probekit::EnsembleResult gaussian_embedding_control(const probekit::ProbeDataset& data,
                                                    const probekit::TrainConfig& config,
                                                    const probekit::EnsembleOptions& options);

probekit::EnsembleResult random_label_control(const embedstore::EmbeddingStore& store,
                                              int layer,
                                              RepresentativeKind kind,
                                              const probekit::TrainConfig& config,
                                              int n_seeds = 5,
                                              int jobs = 1);

// control_store == nullptr selects gaussian mode.
probekit::EnsembleResult random_embedding_control(const embedstore::EmbeddingStore& store,
                                                  const embedstore::EmbeddingStore* control_store,
                                                  int layer,
                                                  RepresentativeKind kind,
                                                  const probekit::TrainConfig& config,
                                                  int n_seeds = 5,
                                                  int jobs = 1);

}  // namespace cprobe::controls
