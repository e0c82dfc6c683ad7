#include "cprobe/controls.hpp"
#include "cprobe/error.hpp"

#include "testkit.hpp"

#include <doctest.h>

#include <algorithm>

using namespace cprobe;
using namespace cprobe::controls;

namespace {

probekit::ProbeDataset planted(double shift = 1.5, int n = 2000, int d = 128, std::uint64_t seed = 1) {
  testkit::PlantedSpec spec;
  spec.n = n;
  spec.d = d;
  spec.shift = shift;
  spec.seed = seed;
  const auto p = testkit::make_planted(spec);
  return testkit::to_dataset(p.x, testkit::make_rows(p.labels, seed));
}

}  // namespace

TEST_CASE("label shuffle permutes train and val and leaves test alone") {
  const auto data = planted(1.5, 500, 8);
  const auto before = split_checksum(data.test);
  const auto shuffled = shuffle_labels(data, 4);
  CHECK(split_checksum(shuffled.test) == before);
  CHECK(split_checksum(data.test) == before);
  for (const auto* pair : {&data.train, &data.val}) {
    const auto& orig = *pair;
    const auto& shuf = pair == &data.train ? shuffled.train : shuffled.val;
    CHECK(shuf.x == orig.x);
    auto a = orig.y, b = shuf.y;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
  CHECK(shuffled.train.y != data.train.y);
  CHECK(shuffle_labels(data, 4).train.y == shuffled.train.y);
}

TEST_CASE("random-label control on the planted store is at chance") {
  const auto data = planted();
  const auto before = split_checksum(data.test);
  const auto r = random_label_control(data, probekit::TrainConfig{}, probekit::EnsembleOptions{});
  CHECK(r.report.mean >= 0.45);
  CHECK(r.report.mean <= 0.55);
  CHECK(split_checksum(data.test) == before);
}

TEST_CASE("gaussian embedding control on the planted store is at chance") {
  const auto data = planted();
  const auto r = gaussian_embedding_control(data, probekit::TrainConfig{}, probekit::EnsembleOptions{});
  CHECK(r.report.mean >= 0.45);
  CHECK(r.report.mean <= 0.55);
}

TEST_CASE("tiny training split completes and reports the true test size") {
  auto data = planted(1.5, 100, 4);
  data.train.x = data.train.x.topRows(2).eval();
  data.train.y = {1, 0};
  data.train.x.row(0).setConstant(1.0f);
  data.train.x.row(1).setConstant(-1.0f);
  probekit::EnsembleOptions opts;
  opts.n_seeds = 2;
  const auto r = random_label_control(data, probekit::TrainConfig{}, opts);
  CHECK(r.report.n_test == data.test.y.size());
}

TEST_CASE("self-control reproduces the ensemble exactly") {
  const auto data = planted(1.5, 600, 16);
  probekit::EnsembleOptions opts;
  opts.n_seeds = 3;
  const auto control = random_embedding_control(data, data, probekit::TrainConfig{}, opts);
  const auto plain = probekit::train_ensemble(data, probekit::TrainConfig{}, opts);
  CHECK(control.report.per_seed_accuracies == plain.report.per_seed_accuracies);
}

TEST_CASE("provided control must align with the splits") {
  const auto data = planted(1.5, 300, 8);
  auto short_control = data;
  short_control.train.x = data.train.x.topRows(10).eval();
  short_control.train.y.resize(10);
  CHECK_THROWS_AS(random_embedding_control(data, short_control, probekit::TrainConfig{}, probekit::EnsembleOptions{}),
                  AlignmentError);
  auto relabeled = data;
  relabeled.train.y[0] = 1 - relabeled.train.y[0];
  CHECK_THROWS_AS(random_embedding_control(data, relabeled, probekit::TrainConfig{}, probekit::EnsembleOptions{}),
                  AlignmentError);
}

TEST_CASE("gaussian surrogate matches per-dimension mean and variance within 5%") {
  MatrixF ref = testkit::gaussian(4000, 6, 2);
  for (int j = 0; j < 6; ++j) {
    ref.col(j) = ref.col(j) * static_cast<float>(1.0 + j) + VectorF::Constant(4000, static_cast<float>(3.0 * j + 2.0));
  }
  Rng rng(5);
  const MatrixF s = gaussian_surrogate(ref, 4000, rng);
  for (int j = 0; j < 6; ++j) {
    const double mr = ref.col(j).cast<double>().mean();
    const double ms = s.col(j).cast<double>().mean();
    const double vr = (ref.col(j).cast<double>().array() - mr).square().mean();
    const double vs = (s.col(j).cast<double>().array() - ms).square().mean();
    CHECK(std::abs(ms - mr) <= 0.05 * std::abs(mr));
    CHECK(std::abs(vs - vr) <= 0.05 * vr);
  }
}

TEST_CASE("embedding mode names") {
  CHECK(parse_embedding_mode("provided") == EmbeddingControlMode::provided);
  CHECK(parse_embedding_mode("gaussian") == EmbeddingControlMode::gaussian);
  CHECK_THROWS_AS(parse_embedding_mode("other"), ConfigError);
}

TEST_CASE("store wrappers") {
  testkit::TempDir dir;
  testkit::PlantedSpec spec;
  spec.n = 2000;
  spec.d = 8;
  spec.shift = 4.0;
  testkit::write_planted_store(dir / "s", spec, 0);
  const auto store = embedstore::EmbeddingStore::open(dir / "s");
  const auto labels = random_label_control(store, 0, RepresentativeKind::nth, probekit::TrainConfig{}, 2);
  CHECK(labels.report.mean < 0.7);
  const auto self = random_embedding_control(store, &store, 0, RepresentativeKind::nth, probekit::TrainConfig{}, 2);
  CHECK(self.report.mean > 0.9);
  const auto gauss = random_embedding_control(store, nullptr, 0, RepresentativeKind::nth, probekit::TrainConfig{}, 2);
  CHECK(gauss.report.mean < 0.7);
}
