#pragma once

#include "cprobe/common.hpp"
#include "cprobe/embedstore.hpp"
#include "cprobe/probekit.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace cprobe::reduce {

struct PCABasis {
  MatrixF components;  // d_model x k, orthonormal columns
  VectorF mean;
  std::vector<double> explained_variance;
  // Total variance of the centered template matrix, summed over all axes.
  double total_variance = 0.0;
  std::string source = "template_embeddings";

  int k() const { return static_cast<int>(components.cols()); }
  int d() const { return static_cast<int>(components.rows()); }

  // Coordinates of (x - mean) in the basis, one row per input row.
  MatrixF project(const MatrixF& x) const;
  // Maps coordinates back to the ambient space.
  MatrixF reconstruct(const MatrixF& coords) const;
  // The leading `k` components as their own basis.
  PCABasis truncated(int k) const;
};

// Top-k right singular vectors of the mean-centered template matrix. Each
// component's largest-magnitude coordinate is made positive. Throws
// RankError when k > min(rows - 1, d_model) or k < 1.
PCABasis fit_pca(const MatrixF& templates, int k);

struct SweepDim {
  std::string label;  // as written on the command line ("20", "max")
  int dim = 0;
};

// Parses "20,40,80,max". "max" means d_model. Dims must be strictly
// ascending, positive and at most d_model (ConfigError otherwise).
std::vector<SweepDim> parse_dims(std::string_view text, int d_model);

struct SweepRow {
  SweepDim dim;
  probekit::EvalReport report;
  std::size_t parameter_count = 0;
  bool identity = false;
};

struct SweepOptions {
  int n_seeds = 5;
  int jobs = 1;
  int layer = -1;
  RepresentativeKind kind = RepresentativeKind::nth;
};

// One ensemble per dim. A dim equal to d_model uses no projection at all;
// smaller dims project through the leading components of one PCA fit on
// `templates`. Templates are mandatory whenever any dim is below d_model.
std::vector<SweepRow> sweep_probe_size(const probekit::ProbeDataset& data,
                                       const MatrixF* templates,
                                       const std::vector<SweepDim>& dims,
                                       const probekit::TrainConfig& config,
                                       const SweepOptions& options);

// Store form: the template basis is fit on `template_store` at the same
// layer and kind as the probe.
std::vector<SweepRow> sweep_probe_size(const embedstore::EmbeddingStore& store,
                                       const embedstore::EmbeddingStore* template_store,
                                       int layer,
                                       RepresentativeKind kind,
                                       const std::vector<SweepDim>& dims,
                                       const probekit::TrainConfig& config,
                                       int n_seeds = 5,
                                       int jobs = 1);

}  // namespace cprobe::reduce
