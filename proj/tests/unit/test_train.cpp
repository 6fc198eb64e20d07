#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "acflow/checkpoint.hpp"
#include "acflow/error.hpp"
#include "acflow/train.hpp"
#include "oracles.hpp"

using namespace acflow;
using ad::Tensor;

namespace {

data::Dataset normal_rows(std::size_t n, double mu, std::uint64_t seed) {
  Rng rng(seed);
  data::Dataset ds;
  ds.x = Tensor::matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    ds.x[i] = mu + rng.normal();
    ds.present.push_back(BitMask::ones(1));
    ds.train.push_back(i);
  }
  ds.names = {"x"};
  return ds;
}

Architecture location_arch() {
  Architecture a;
  a.dim = 1;
  a.base.kind = BaseSpec::Kind::gaussian;
  a.base.hidden = 2;
  a.base.depth = 1;
  return a;
}

AcflowModel small_model(std::size_t d, std::uint64_t seed) {
  return AcflowModel::create(Architecture::layered(d, 1, 8, 1, 3), seed);
}

train::TrainConfig quick_config() {
  train::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-3;
  cfg.seed = 5;
  return cfg;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("acflow_test_train_" + name);
}

}  // namespace

TEST_CASE("location model converges to the sample mean") {
  const double mu_star = 2.0;
  const auto ds = normal_rows(2000, mu_star, 1);
  double mle = 0.0;
  for (double v : ds.x.values()) mle += v;
  mle /= 2000.0;

  AcflowModel model = AcflowModel::create(location_arch(), 1);
  auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ps.value(i).fill(0.0);
    ps.set_trainable(i, false);
  }
  const auto bias = ps.find("base.gaussian.net.fc1.bias");
  ps.set_trainable(bias, true);

  train::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 200;  // 10 steps per epoch, 200 in total
  cfg.learning_rate = 0.05;
  cfg.mask = masking::MaskDistribution::bernoulli(0.0);
  cfg.lambda = 0.0;
  cfg.standardize = false;
  cfg.patience = 0;
  cfg.seed = 2;
  const auto result = train::train(model, ds, cfg);
  CHECK(result.history.size() == 20);
  const double mu = ps.value(bias)[0];
  CHECK(std::abs(mu - mle) < 0.05);
  CHECK(std::abs(mu - mu_star) < 0.1);
}

TEST_CASE("zero epochs leave the model unchanged") {
  auto ds = data::gen_synthetic(data::SyntheticKind::gaussian_mixture_grid, 200, 1).data;
  AcflowModel model = small_model(2, 3);
  const auto before = model.parameters().snapshot();
  auto cfg = quick_config();
  cfg.epochs = 0;
  const auto result = train::train(model, ds, cfg);
  CHECK(result.history.empty());
  CHECK(model.parameters().snapshot() == before);
}

TEST_CASE("fixed seed gives bit-identical parameters") {
  auto ds = data::gen_synthetic(data::SyntheticKind::two_moons_like, 600, 4).data;
  AcflowModel a = small_model(2, 7);
  AcflowModel b = small_model(2, 7);
  const auto ra = train::train(a, ds, quick_config());
  const auto rb = train::train(b, ds, quick_config());
  CHECK(a.parameters().snapshot() == b.parameters().snapshot());
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) CHECK(ra.history[i].train_nll == rb.history[i].train_nll);

  AcflowModel c = small_model(2, 7);
  auto cfg = quick_config();
  cfg.seed = 6;
  train::train(c, ds, cfg);
  CHECK(c.parameters().snapshot() != a.parameters().snapshot());
}

TEST_CASE("training lowers the validation NLL on a synthetic set") {
  auto ds = data::gen_synthetic(data::SyntheticKind::gaussian_mixture_grid, 2000, 8).data;
  AcflowModel model = small_model(2, 9);
  auto cfg = quick_config();
  cfg.epochs = 8;
  cfg.learning_rate = 5e-3;
  const auto result = train::train(model, ds, cfg);
  REQUIRE(result.history.size() >= 2);
  CHECK(result.best_valid < result.history.front().valid_nll);
  CHECK(std::isfinite(result.best_valid));
}

TEST_CASE("gradient clipping keeps the direction") {
  std::vector<Tensor> g{Tensor::vector({3.0, 0.0}), Tensor::vector({4.0})};
  CHECK(train::clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[0][1] == 0.0);
  CHECK(g[1][0] == doctest::Approx(0.8));

  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    std::vector<Tensor> h{Tensor::vector(oracle::random_vector(rng, 5, 3.0))};
    const auto original = h[0];
    const double norm = train::clip_global_norm(h, 0.5);
    const double scale = std::min(1.0, 0.5 / norm);
    for (std::size_t j = 0; j < 5; ++j) CHECK(h[0][j] == doctest::Approx(original[j] * scale).epsilon(1e-14));
  }
  std::vector<Tensor> small{Tensor::vector({0.1})};
  train::clip_global_norm(small, 0.0);
  CHECK(small[0][0] == 0.1);
}

TEST_CASE("Adam with a small step decreases a quadratic monotonically") {
  ad::ParameterSet ps;
  const auto w = ps.add("w", Tensor::vector({3.0, -2.0, 1.0}));
  const std::vector<double> curvature{1.0, 4.0, 0.5};
  const auto loss = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += 0.5 * curvature[i] * ps.value(w)[i] * ps.value(w)[i];
    return s;
  };
  train::Adam adam;
  const double initial = loss();
  double prev = initial;
  for (int step = 0; step < 300; ++step) {
    std::vector<Tensor> g{Tensor::vector({0, 0, 0})};
    for (std::size_t i = 0; i < 3; ++i) g[0][i] = curvature[i] * ps.value(w)[i];
    adam.step_update(ps, g, 1e-3);
    const double now = loss();
    CHECK(now <= prev);
    prev = now;
  }
  CHECK(prev < 0.9 * initial);
}

TEST_CASE("non-finite parameters end in TrainingError after one retry") {
  auto ds = data::gen_synthetic(data::SyntheticKind::gaussian_mixture_grid, 200, 11).data;
  AcflowModel model = small_model(2, 12);
  model.parameters().value(0)[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train::train(model, ds, quick_config()), TrainingError);
}

TEST_CASE("conditional mode rejects incomplete rows and configs are validated") {
  auto ds = data::gen_synthetic(data::SyntheticKind::gaussian_mixture_grid, 200, 13).data;
  ds.present[ds.train.front()].set(0, false);
  AcflowModel model = small_model(2, 14);
  CHECK_THROWS_AS(train::train(model, ds, quick_config()), std::invalid_argument);
  auto cfg = quick_config();
  cfg.mode = TrainingMode::conditional_missing;
  CHECK_NOTHROW(train::train(model, ds, cfg));
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.batch_size = 1;
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("make_example follows the training mode") {
  Rng rng(15);
  const std::vector<double> x{1, 2, 3, 4};
  const BitMask present{1, 1, 0, 1};
  const auto dist = masking::MaskDistribution::bernoulli(0.5);
  for (int t = 0; t < 100; ++t) {
    auto c = train::make_example(x, present, TrainingMode::conditional, dist, rng);
    CHECK(c.m == BitMask::ones(4));
    auto cm = train::make_example(x, present, TrainingMode::conditional_missing, dist, rng);
    CHECK(cm.m == present);
    CHECK((cm.b & ~present).none());
    auto mg = train::make_example(x, present, TrainingMode::marginal, dist, rng);
    CHECK(mg.b.none());
    CHECK((mg.m & ~present).none());
  }
}

TEST_CASE("history CSV") {
  std::ostringstream out;
  train::write_history_csv(out, {{0, 1.5, 2.25, 0.001}, {1, 1.25, 2.0, 0.0005}});
  CHECK(out.str() == "epoch,train_nll,valid_nll,lr\n0,1.5,2.25,0.001\n1,1.25,2,5e-04\n");
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  AcflowModel model = small_model(3, 16);
  Rng rng(17);
  oracle::perturb(model.parameters(), rng, 0.1);
  model.set_standardizer(Standardizer({1.0, 2.0, 3.0}, {0.5, 1.5, 2.5}));
  model.set_mode(TrainingMode::marginal);
  const CheckpointMeta meta{"epochs=1\n", 4, -1.25, {"a", "b", "c"}};
  const auto path = temp_path("roundtrip.acfw");
  save_checkpoint(model, meta, path);
  const auto loaded = load_checkpoint(path);
  CHECK(loaded.model.parameters().snapshot() == model.parameters().snapshot());
  CHECK(loaded.model.architecture() == model.architecture());
  CHECK(loaded.model.mode() == TrainingMode::marginal);
  CHECK(loaded.model.standardizer().std() == model.standardizer().std());
  CHECK(loaded.meta.config_digest == meta.config_digest);
  CHECK(loaded.meta.epoch == 4);
  CHECK(loaded.meta.best_valid == -1.25);
  CHECK(loaded.meta.names == meta.names);

  for (int t = 0; t < 20; ++t) {
    const auto x = oracle::random_vector(rng, 3);
    const BitMask b = oracle::random_mask(rng, 3, 0.5);
    const auto ctx = ConditioningContext::complete(x, b);
    const auto x_u = masking::index(x, ~b);
    CHECK(loaded.model.cond_log_prob(x_u, ctx) == model.cond_log_prob(x_u, ctx));
  }
  // Serialization is a pure function of the model.
  CHECK(serialize_checkpoint(loaded.model, loaded.meta) == serialize_checkpoint(model, meta));
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints raise LoadError") {
  const AcflowModel model = small_model(2, 18);
  const std::string bytes = serialize_checkpoint(model, {});
  CHECK_NOTHROW(deserialize_checkpoint(bytes));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, cut)), LoadError);
  }
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), LoadError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(deserialize_checkpoint(bad_version), LoadError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), LoadError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.acfw")), LoadError);
}
