#include "cprobe/reduce.hpp"

#include "cprobe/error.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <charconv>
#include <cmath>

namespace cprobe::reduce {

MatrixF PCABasis::project(const MatrixF& x) const {
  if (x.cols() != components.rows()) {
    throw DimensionError("basis expects " + std::to_string(components.rows()) + " columns, got " +
                         std::to_string(x.cols()));
  }
  const Eigen::MatrixXd centered = x.cast<double>().rowwise() - mean.cast<double>().transpose();
  return (centered * components.cast<double>()).cast<float>();
}

MatrixF PCABasis::reconstruct(const MatrixF& coords) const {
  if (coords.cols() != components.cols()) {
    throw DimensionError("expected " + std::to_string(components.cols()) + " coordinates, got " +
                         std::to_string(coords.cols()));
  }
  const Eigen::MatrixXd back = coords.cast<double>() * components.cast<double>().transpose();
  return (back.rowwise() + mean.cast<double>().transpose()).cast<float>();
}

PCABasis PCABasis::truncated(int new_k) const {
  if (new_k < 1 || new_k > k()) {
    throw RankError("cannot truncate a " + std::to_string(k()) + "-component basis to " + std::to_string(new_k));
  }
  PCABasis out = *this;
  out.components = components.leftCols(new_k);
  out.explained_variance.resize(static_cast<std::size_t>(new_k));
  return out;
}

PCABasis fit_pca(const MatrixF& templates, int k) {
  const auto rows = templates.rows();
  const auto d = templates.cols();
  const auto max_rank = std::min<Eigen::Index>(rows - 1, d);
  if (k < 1 || k > max_rank) {
    throw RankError("cannot fit " + std::to_string(k) + " components from " + std::to_string(rows) + " rows of width " +
                    std::to_string(d) + " (at most " + std::to_string(std::max<Eigen::Index>(max_rank, 0)) + ")");
  }
  if (!templates.allFinite()) {
    throw DataError("template matrix holds non-finite values");
  }

  const Eigen::VectorXd mean = templates.cast<double>().colwise().mean().transpose();
  const Eigen::MatrixXd centered = templates.cast<double>().rowwise() - mean.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  Eigen::MatrixXd v = svd.matrixV().leftCols(k);

  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    Eigen::Index arg = 0;
    v.col(c).cwiseAbs().maxCoeff(&arg);
    if (v(arg, c) < 0.0) v.col(c) = -v.col(c);
  }

  PCABasis basis;
  basis.components = v.cast<float>();
  basis.mean = mean.cast<float>();
  const double denom = static_cast<double>(rows - 1);
  basis.explained_variance.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    basis.explained_variance.push_back(s[i] * s[i] / denom);
  }
  basis.total_variance = centered.squaredNorm() / denom;
  return basis;
}

std::vector<SweepDim> parse_dims(std::string_view text, int d_model) {
  std::vector<SweepDim> dims;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto token = trim(text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (token.empty()) {
      throw ConfigError("empty entry in dims list '" + std::string(text) + "'");
    }
    SweepDim dim;
    dim.label = token;
    if (to_lower(token) == "max") {
      dim.label = "max";
      dim.dim = d_model;
    } else {
      const auto* first = token.data();
      const auto* last = token.data() + token.size();
      const auto [ptr, ec] = std::from_chars(first, last, dim.dim);
      if (ec != std::errc() || ptr != last) {
        throw ConfigError("dims entry '" + token + "' is neither an integer nor 'max'");
      }
    }
    if (dim.dim < 1 || dim.dim > d_model) {
      throw ConfigError("dim " + dim.label + " outside [1, " + std::to_string(d_model) + "]");
    }
    if (!dims.empty() && dim.dim <= dims.back().dim) {
      throw ConfigError("dims must be strictly ascending");
    }
    dims.push_back(std::move(dim));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return dims;
}

std::vector<SweepRow> sweep_probe_size(const probekit::ProbeDataset& data,
                                       const MatrixF* templates,
                                       const std::vector<SweepDim>& dims,
                                       const probekit::TrainConfig& config,
                                       const SweepOptions& options) {
  const int d_model = data.dim();
  int widest_reduced = 0;
  for (const auto& dim : dims) {
    if (dim.dim < 1 || dim.dim > d_model) {
      throw ConfigError("dim " + dim.label + " outside [1, " + std::to_string(d_model) + "]");
    }
    if (dim.dim < d_model) widest_reduced = std::max(widest_reduced, dim.dim);
  }

  std::optional<PCABasis> basis;
  if (widest_reduced > 0) {
    if (templates == nullptr) {
      throw ConfigError("a template store is required to fit the PCA basis");
    }
    if (templates->cols() != d_model) {
      throw DimensionError("template embeddings have width " + std::to_string(templates->cols()) +
                           ", probe embeddings " + std::to_string(d_model));
    }
    basis = fit_pca(*templates, widest_reduced);
  }

  std::vector<SweepRow> rows(dims.size());
  probekit::parallel_for(static_cast<int>(dims.size()), options.jobs, [&](int i) {
    const auto& dim = dims[static_cast<std::size_t>(i)];
    probekit::EnsembleOptions ensemble;
    ensemble.n_seeds = options.n_seeds;
    ensemble.layer = options.layer;
    ensemble.kind = options.kind;
    SweepRow row;
    row.dim = dim;
    row.identity = dim.dim == d_model;
    if (!row.identity) {
      ensemble.basis = basis->truncated(dim.dim).components;
    }
    row.report = probekit::train_ensemble(data, config, ensemble).report;
    row.parameter_count = static_cast<std::size_t>(dim.dim) + 1;
    rows[static_cast<std::size_t>(i)] = std::move(row);
  });
  return rows;
}

std::vector<SweepRow> sweep_probe_size(const embedstore::EmbeddingStore& store,
                                       const embedstore::EmbeddingStore* template_store,
                                       int layer,
                                       RepresentativeKind kind,
                                       const std::vector<SweepDim>& dims,
                                       const probekit::TrainConfig& config,
                                       int n_seeds,
                                       int jobs) {
  const auto data = probekit::load_dataset(store, layer, kind);
  std::optional<MatrixF> templates;
  if (template_store != nullptr) {
    templates = template_store->read_layer(layer, kind).matrix;
  }
  SweepOptions options;
  options.n_seeds = n_seeds;
  options.jobs = jobs;
  options.layer = layer;
  options.kind = kind;
  return sweep_probe_size(data, templates ? &*templates : nullptr, dims, config, options);
}

}  // namespace cprobe::reduce
