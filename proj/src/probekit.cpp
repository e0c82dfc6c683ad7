#include "cprobe/probekit.hpp"

#include "cprobe/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

namespace cprobe::probekit {
namespace {

using nlohmann::json;

void check_labels(const LabeledMatrix& data, const char* name) {
  if (static_cast<Eigen::Index>(data.y.size()) != data.x.rows()) {
    throw DataError(std::string(name) + " split has " + std::to_string(data.x.rows()) + " rows but " +
                    std::to_string(data.y.size()) + " labels");
  }
  for (const int label : data.y) {
    if (label != 0 && label != 1) {
      throw DataError(std::string(name) + " split holds a label other than 0/1");
    }
  }
  if (!data.x.allFinite()) {
    throw DataError(std::string(name) + " split holds non-finite values");
  }
}

// (x - center) projected onto the basis, one row per example.
MatrixF project(const MatrixF& x, const VectorF& center, const std::optional<MatrixF>& basis) {
  const Eigen::MatrixXd centered = x.cast<double>().rowwise() - center.cast<double>().transpose();
  if (basis) {
    return (centered * basis->cast<double>()).cast<float>();
  }
  return centered.cast<float>();
}

double accuracy_on_projected(const MatrixF& z, const std::vector<int>& y, const VectorF& w, float b) {
  if (z.rows() == 0) return 0.0;
  const VectorF logits = (z * w).array() + b;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const int predicted = sigmoid(logits[i]) > 0.5f ? 1 : 0;
    correct += predicted == y[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(z.rows());
}

void write_floats(std::ofstream& out, const float* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
      out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
}

void read_floats(std::istream& in, float* data, std::size_t count) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(float))) {
    throw IoError("truncated probe file");
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < count; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
      data[i] = std::bit_cast<float>(bits);
    }
  }
}

}  // namespace

float sigmoid(float z) {
  if (z >= 0.0f) {
    return 1.0f / (1.0f + std::exp(-z));
  }
  const float e = std::exp(z);
  return e / (1.0f + e);
}

float score(const Probe& probe, std::span<const float> x) {
  if (static_cast<int>(x.size()) != probe.input_dim()) {
    throw DimensionError("probe expects " + std::to_string(probe.input_dim()) + " inputs, got " +
                         std::to_string(x.size()));
  }
  const auto row = Eigen::Map<const MatrixF>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
  const MatrixF z = project(row, probe.center, probe.basis);
  float logit = probe.bias;
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    logit += probe.weights[j] * z(0, j);
  }
  return sigmoid(logit);
}

bool classify(const Probe& probe, std::span<const float> x) {
  return score(probe, x) > probe.threshold;
}

std::vector<float> score_rows(const Probe& probe, const MatrixF& x) {
  std::vector<float> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out[static_cast<std::size_t>(i)] =
        score(probe, std::span<const float>(x.row(i).data(), static_cast<std::size_t>(x.cols())));
  }
  return out;
}

double accuracy(const Probe& probe, const LabeledMatrix& data) {
  if (data.x.rows() == 0) {
    throw DataError("accuracy of an empty split is undefined");
  }
  const auto scores = score_rows(probe, data.x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    correct += (scores[i] > probe.threshold ? 1 : 0) == data.y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

Probe train_probe(const LabeledMatrix& train,
                  const LabeledMatrix& val,
                  const TrainConfig& config,
                  const std::optional<MatrixF>& basis) {
  if (train.x.rows() == 0) {
    throw DataError("training split is empty");
  }
  check_labels(train, "train");
  check_labels(val, "val");
  if (val.x.rows() > 0 && val.x.cols() != train.x.cols()) {
    throw DimensionError("train and val column counts differ");
  }
  if (basis && basis->rows() != train.x.cols()) {
    throw DimensionError("basis has " + std::to_string(basis->rows()) + " rows, embeddings have " +
                         std::to_string(train.x.cols()) + " columns");
  }
  const auto positives = std::count(train.y.begin(), train.y.end(), 1);
  if (positives == 0 || positives == static_cast<std::ptrdiff_t>(train.y.size())) {
    throw DegenerateDataError("training labels are all one class");
  }
  if (config.batch_size <= 0 || config.max_epochs <= 0) {
    throw ConfigError("batch_size and max_epochs must be positive");
  }

  Probe probe;
  probe.seed = config.seed;
  probe.basis = basis;
  probe.center = train.x.cast<double>().colwise().mean().transpose().cast<float>();

  const MatrixF z_train = project(train.x, probe.center, basis);
  const bool has_val = val.x.rows() > 0;
  const MatrixF z_val = has_val ? project(val.x, probe.center, basis) : MatrixF();
  const MatrixF& z_select = has_val ? z_val : z_train;
  const std::vector<int>& y_select = has_val ? val.y : train.y;

  const Eigen::Index k = z_train.cols();
  const Eigen::Index n = z_train.rows();

  Rng rng(derive_seed(config.seed, 0x50524f4245ULL));
  const float bound = 1.0f / std::sqrt(static_cast<float>(k));
  VectorF w(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    w[j] = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  }
  float b = 0.0f;

  // The zero-weight probe is the baseline snapshot; training must beat it.
  VectorF best_w = VectorF::Zero(k);
  float best_b = 0.0f;
  double best_acc = accuracy_on_projected(z_select, y_select, best_w, best_b);

  VectorF m_w = VectorF::Zero(k);
  VectorF v_w = VectorF::Zero(k);
  float m_b = 0.0f;
  float v_b = 0.0f;
  const float beta1 = config.adam_beta1;
  const float beta2 = config.adam_beta2;
  double beta1_pow = 1.0;
  double beta2_pow = 1.0;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::Index batch_size = std::min<Eigen::Index>(config.batch_size, n);
  MatrixF zb(batch_size, k);
  VectorF yb(batch_size);

  int epochs_without_improvement = 0;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (Eigen::Index start = 0; start < n; start += batch_size) {
      const Eigen::Index rows = std::min(batch_size, n - start);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const auto src = order[static_cast<std::size_t>(start + r)];
        zb.row(r) = z_train.row(src);
        yb[r] = static_cast<float>(train.y[static_cast<std::size_t>(src)]);
      }
      const auto zbatch = zb.topRows(rows);
      VectorF residual = (zbatch * w).array() + b;
      for (Eigen::Index r = 0; r < rows; ++r) {
        residual[r] = sigmoid(residual[r]) - yb[r];
      }
      const float inv_rows = 1.0f / static_cast<float>(rows);
      const VectorF grad_w = (zbatch.transpose() * residual) * inv_rows;
      const float grad_b = residual.sum() * inv_rows;

      beta1_pow *= beta1;
      beta2_pow *= beta2;
      const float correction1 = static_cast<float>(1.0 - beta1_pow);
      const float correction2 = static_cast<float>(1.0 - beta2_pow);
      m_w = beta1 * m_w + (1.0f - beta1) * grad_w;
      v_w = beta2 * v_w + (1.0f - beta2) * grad_w.cwiseProduct(grad_w);
      m_b = beta1 * m_b + (1.0f - beta1) * grad_b;
      v_b = beta2 * v_b + (1.0f - beta2) * grad_b * grad_b;
      w.array() -= config.learning_rate * (m_w.array() / correction1) /
                   ((v_w.array() / correction2).sqrt() + config.adam_epsilon);
      b -= config.learning_rate * (m_b / correction1) / (std::sqrt(v_b / correction2) + config.adam_epsilon);
    }

    const double acc = accuracy_on_projected(z_select, y_select, w, b);
    if (acc > best_acc) {
      best_acc = acc;
      best_w = w;
      best_b = b;
      epochs_without_improvement = 0;
    } else if (++epochs_without_improvement >= config.early_stop_patience) {
      break;
    }
  }

  probe.weights = best_w;
  probe.bias = best_b;
  return probe;
}

EvalReport make_report(std::vector<double> per_seed, std::size_t n_test) {
  EvalReport report;
  report.n_test = n_test;
  report.per_seed_accuracies = std::move(per_seed);
  const auto& accs = report.per_seed_accuracies;
  if (!accs.empty()) {
    report.mean = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
    double ss = 0.0;
    for (const double a : accs) ss += (a - report.mean) * (a - report.mean);
    report.stddev = std::sqrt(ss / static_cast<double>(accs.size()));
  }
  report.accuracy = report.mean;
  return report;
}

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  const int count = std::min(jobs, n);
  workers.reserve(static_cast<std::size_t>(count));
  for (int t = 0; t < count; ++t) {
    workers.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& worker : workers) worker.join();
  if (first_error) std::rethrow_exception(first_error);
}

EnsembleResult train_ensemble(const ProbeDataset& data, const TrainConfig& config, const EnsembleOptions& options) {
  if (options.n_seeds < 1) {
    throw ConfigError("n_seeds must be at least 1");
  }
  if (data.test.x.rows() == 0) {
    throw DataError("test split is empty");
  }
  check_labels(data.test, "test");
  EnsembleResult result;
  result.probes.resize(static_cast<std::size_t>(options.n_seeds));
  std::vector<double> accs(static_cast<std::size_t>(options.n_seeds));
  parallel_for(options.n_seeds, options.jobs, [&](int i) {
    TrainConfig seeded = config;
    seeded.seed = config.seed + static_cast<std::uint64_t>(i);
    Probe probe = train_probe(data.train, data.val, seeded, options.basis);
    probe.layer = options.layer;
    probe.kind = options.kind;
    accs[static_cast<std::size_t>(i)] = accuracy(probe, data.test);
    result.probes[static_cast<std::size_t>(i)] = std::move(probe);
  });
  result.report = make_report(std::move(accs), static_cast<std::size_t>(data.test.x.rows()));
  return result;
}

ProbeDataset load_dataset(const embedstore::EmbeddingStore& store, int layer, RepresentativeKind kind) {
  const auto layer_data = store.read_layer(layer, kind);
  const auto& rows = *layer_data.rows;
  ProbeDataset data;
  std::array<std::vector<Eigen::Index>, 3> idx;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    idx[static_cast<std::size_t>(rows[i].split)].push_back(static_cast<Eigen::Index>(i));
  }
  auto fill = [&](LabeledMatrix& out, const std::vector<Eigen::Index>& which) {
    out.x.resize(static_cast<Eigen::Index>(which.size()), layer_data.matrix.cols());
    out.y.resize(which.size());
    for (std::size_t r = 0; r < which.size(); ++r) {
      out.x.row(static_cast<Eigen::Index>(r)) = layer_data.matrix.row(which[r]);
      out.y[r] = rows[static_cast<std::size_t>(which[r])].label;
    }
  };
  fill(data.train, idx[0]);
  fill(data.val, idx[1]);
  fill(data.test, idx[2]);
  return data;
}

EnsembleResult train_ensemble(const embedstore::EmbeddingStore& store,
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
  return train_ensemble(load_dataset(store, layer, kind), config, options);
}

std::string probe_file_name(int layer, RepresentativeKind kind, std::uint64_t seed) {
  return "probe_L" + std::to_string(layer) + "_" + std::string(to_string(kind)) + "_s" + std::to_string(seed) +
         ".probe";
}

void save_probe(const std::filesystem::path& path, const Probe& probe) {
  json header;
  header["format"] = "cprobe-probe";
  header["version"] = 1;
  header["layer"] = probe.layer;
  header["kind"] = std::string(to_string(probe.kind));
  header["seed"] = probe.seed;
  header["k"] = probe.k();
  header["d_model"] = probe.input_dim();
  header["threshold"] = probe.threshold;
  header["has_basis"] = probe.basis.has_value();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("failed to open " + path.string() + " for writing");
  const auto line = header.dump() + "\n";
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  write_floats(out, &probe.bias, 1);
  write_floats(out, probe.weights.data(), static_cast<std::size_t>(probe.weights.size()));
  write_floats(out, probe.center.data(), static_cast<std::size_t>(probe.center.size()));
  if (probe.basis) {
    write_floats(out, probe.basis->data(), static_cast<std::size_t>(probe.basis->size()));
  }
  if (!out) throw IoError("failed to write " + path.string());
}

Probe load_probe(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("failed to open " + path.string());
  std::string line;
  std::getline(in, line);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw SchemaError("probe header: " + std::string(e.what()));
  }
  if (header.value("format", std::string{}) != "cprobe-probe") {
    throw SchemaError(path.string() + " is not a probe file");
  }
  Probe probe;
  probe.layer = header.at("layer").get<int>();
  probe.kind = parse_kind(header.at("kind").get<std::string>());
  probe.seed = header.at("seed").get<std::uint64_t>();
  probe.threshold = header.at("threshold").get<float>();
  const int k = header.at("k").get<int>();
  const int d = header.at("d_model").get<int>();
  probe.weights.resize(k);
  probe.center.resize(d);
  read_floats(in, &probe.bias, 1);
  read_floats(in, probe.weights.data(), static_cast<std::size_t>(k));
  read_floats(in, probe.center.data(), static_cast<std::size_t>(d));
  if (header.at("has_basis").get<bool>()) {
    MatrixF basis(d, k);
    read_floats(in, basis.data(), static_cast<std::size_t>(basis.size()));
    probe.basis = std::move(basis);
  } else if (k != d) {
    throw SchemaError("probe without basis must have k = d_model");
  }
  return probe;
}

}  // namespace cprobe::probekit
