#include <doctest.h>

#include <cmath>
#include <numbers>

#include "acflow/error.hpp"
#include "acflow/likelihoods.hpp"
#include "oracles.hpp"

using namespace acflow;
using namespace acflow::likelihoods;
using ad::Tensor;
using transforms::ContextBatch;
using transforms::row_constant;

namespace {

const double half_log_2pi = 0.5 * std::log(2 * std::numbers::pi);

void zero_params(ad::ParameterSet& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps.at(i).name.starts_with(prefix)) ps.value(i).fill(0.0);
  }
}

double oracle_gmm(double z, const std::vector<double>& logits, const std::vector<double>& locs,
                  const std::vector<double>& scales) {
  double top = -INFINITY;
  for (double l : logits) top = std::max(top, l);
  double norm = 0.0;
  for (double l : logits) norm += std::exp(l - top);
  double acc = 0.0;
  for (std::size_t k = 0; k < locs.size(); ++k) {
    const double w = std::exp(logits[k] - top) / norm;
    acc += w * std::exp(oracle::log_normal(z, locs[k], scales[k]));
  }
  return std::log(acc);
}

ConditioningContext context(const std::vector<double>& x, const BitMask& b) {
  return ConditioningContext::complete(x, b);
}

double ar_log_prob(const AutoregressiveGmm& ar, const ad::ParameterSet& ps, const std::vector<double>& z,
                   const ConditioningContext& ctx) {
  ad::Tape tape(ps, false);
  return ar.log_prob(tape, row_constant(z, 1), ContextBatch::single(ctx)).value().item();
}

double base_log_prob(const Likelihood& l, const ad::ParameterSet& ps, const std::vector<double>& z,
                     const ConditioningContext& ctx) {
  ad::Tape tape(ps, false);
  return log_prob(l, tape, row_constant(z, 1), ContextBatch::single(ctx)).value().item();
}

}  // namespace

TEST_CASE("gmm_log_prob examples") {
  CHECK(gmm_log_prob(0.0, {{0.0}, {0.0}, {1.0}}) == doctest::Approx(-0.9189385).epsilon(1e-7));
  CHECK(gmm_log_prob(0.0, {{0.0, 0.0}, {-1.0, 1.0}, {1.0, 1.0}}) ==
        doctest::Approx(-half_log_2pi - 0.5).epsilon(1e-12));
  CHECK_THROWS_AS(gmm_log_prob(0.0, {{0.0}, {0.0}, {0.0}}), DomainError);
  CHECK_THROWS_AS(gmm_log_prob(0.0, {{0.0}, {0.0}, {-1.0}}), DomainError);
  CHECK_THROWS_AS(gmm_log_prob(0.0, {{0.0, 1.0}, {0.0}, {1.0}}), std::invalid_argument);
}

TEST_CASE("gmm density integrates to one") {
  const GmmParams p{{0.3, -1.0, 2.0}, {-2.0, 0.5, 3.0}, {0.4, 1.5, 0.8}};
  const double total = oracle::simpson([&](double z) { return std::exp(gmm_log_prob(z, p)); }, -50, 50, 100000);
  CHECK(std::abs(total - 1.0) < 1e-6);
}

TEST_CASE("batched gmm_log_prob agrees with the scalar form") {
  Rng rng(3);
  const GmmParams p{oracle::random_vector(rng, 4), oracle::random_vector(rng, 4), {0.5, 1.0, 2.0, 0.1}};
  for (double z : {-3.0, 0.0, 0.7, 4.0}) {
    const auto v = gmm_log_prob(ad::constant(Tensor::scalar(z)), ad::constant(Tensor::vector(p.logits)),
                                ad::constant(Tensor::vector(p.locs)), ad::constant(Tensor::vector(p.scales)));
    CHECK(v.value().item() == doctest::Approx(oracle_gmm(z, p.logits, p.locs, p.scales)).epsilon(1e-12));
    CHECK(gmm_log_prob(z, p) == doctest::Approx(oracle_gmm(z, p.logits, p.locs, p.scales)).epsilon(1e-12));
  }
}

TEST_CASE("gmm sample moments match the analytic mean and variance") {
  const GmmParams p{{0.0, 0.5}, {-1.0, 2.0}, {0.5, 1.0}};
  Rng rng(4);
  const int n = 100000;
  std::vector<double> xs(n);
  double mean = 0.0;
  for (double& x : xs) {
    x = gmm_sample(p, rng);
    mean += x;
  }
  mean /= n;
  double var = 0.0, m4 = 0.0;
  for (double x : xs) {
    var += (x - mean) * (x - mean);
    m4 += std::pow(x - mean, 4);
  }
  var /= n - 1;
  m4 /= n;
  const double se_mean = std::sqrt(var / n);
  const double se_var = std::sqrt((m4 - var * var) / n);
  CHECK(std::abs(mean - gmm_mean(p)) < 3 * se_mean);
  CHECK(std::abs(var - gmm_variance(p)) < 3 * se_var);
}

TEST_CASE("autoregressive log-prob with one target equals the hand-computed mixture") {
  Rng rng(5);
  ad::ParameterSet ps;
  const auto ar = AutoregressiveGmm::create(ps, "ar", 3, 6, 2, 3, rng);
  oracle::perturb(ps, rng, 0.3);
  const std::vector<double> x{0.4, 0, -0.9};
  const BitMask b{1, 0, 1};
  const auto ctx = context(x, b);

  std::vector<std::vector<double>> h(2, std::vector<double>(6, 0.0));
  const auto o = oracle::gru_stack_step(ps, "ar.rnn", h, {-1.0}, oracle::features(x, b, BitMask::ones(3)));
  const auto theta = oracle::mlp(ps, "ar.head", o);
  const std::vector<double> logits(theta.begin(), theta.begin() + 3);
  const std::vector<double> locs(theta.begin() + 3, theta.begin() + 6);
  std::vector<double> scales(theta.begin() + 6, theta.end());
  for (double& s : scales) s = oracle::softplus(s) + 1e-6;

  for (double z : {-1.5, 0.2, 2.5}) {
    CHECK(ar_log_prob(ar, ps, {z}, ctx) == doctest::Approx(oracle_gmm(z, logits, locs, scales)).epsilon(1e-12));
  }
  const auto full = context({1, 2, 3}, BitMask::ones(3));
  CHECK(ar_log_prob(ar, ps, {}, full) == 0.0);
}

TEST_CASE("autoregressive log-prob decomposes into per-step conditionals") {
  Rng rng(6);
  ad::ParameterSet ps;
  const auto ar = AutoregressiveGmm::create(ps, "ar", 4, 8, 2, 4, rng);
  oracle::perturb(ps, rng, 0.2);
  const auto ctx = context({0.5, 0, 0, 0}, BitMask{1, 0, 0, 0});
  const std::vector<double> z{0.3, -1.2, 0.8};
  const auto conds = ar.conditionals(ps, z, ctx);
  REQUIRE(conds.size() == 3);
  ad::Tape tape(ps, false);
  const auto steps = ar.step_log_probs(tape, row_constant(z, 1), ContextBatch::single(ctx)).value();
  double total = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = oracle_gmm(z[i], conds[i].logits, conds[i].locs, conds[i].scales);
    CHECK(steps[i] == doctest::Approx(expected).epsilon(1e-12));
    total += expected;
  }
  CHECK(ar_log_prob(ar, ps, z, ctx) == doctest::Approx(total).epsilon(1e-12));

  // The first conditional does not depend on later coordinates.
  const std::vector<double> z2{0.3, 5.0, -5.0};
  const auto other = ar.conditionals(ps, z2, ctx);
  CHECK(other[0].locs == conds[0].locs);
  CHECK(other[1].locs == conds[1].locs);
  CHECK(other[2].locs != conds[2].locs);
}

TEST_CASE("near-zero scale makes sampling deterministic and the mean equal the locations") {
  Rng rng(7);
  ad::ParameterSet ps;
  const auto ar = AutoregressiveGmm::create(ps, "ar", 3, 6, 1, 1, rng);
  zero_params(ps, "ar.head.fc1");
  auto& bias = ps.value(ps.find("ar.head.fc1.bias"));
  bias[1] = 1.75;
  bias[2] = -60.0;
  const auto batch = ContextBatch::single(context({0, 0, 0}, BitMask::zeros(3)));
  ad::Tape tape(ps, false);
  std::vector<Rng> rngs{Rng(1)};
  const Tensor s = ar.sample(tape, batch, rngs);
  for (double v : s.values()) CHECK(std::abs(v - 1.75) < 1e-4);
  const auto m = ar.mean(tape, batch).value();
  for (double v : m.values()) CHECK(v == doctest::Approx(1.75).epsilon(1e-14));

  const auto full = ContextBatch::single(context({1, 2, 3}, BitMask::ones(3)));
  std::vector<Rng> one{Rng(2)};
  CHECK(ar.sample(tape, full, one).size() == 0);
  CHECK(ar.mean(tape, full).value().size() == 0);
}

TEST_CASE("symmetric two-component mixture has mean zero at every step") {
  Rng rng(8);
  ad::ParameterSet ps;
  const auto ar = AutoregressiveGmm::create(ps, "ar", 3, 6, 2, 2, rng);
  zero_params(ps, "ar.head.fc1");
  auto& bias = ps.value(ps.find("ar.head.fc1.bias"));
  bias[2] = 1.3;
  bias[3] = -1.3;
  ad::Tape tape(ps, false);
  const auto m = ar.mean(tape, ContextBatch::single(context({0, 0, 0}, BitMask::zeros(3)))).value();
  for (double v : m.values()) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("autoregressive mean feeds the running conditional mean") {
  Rng rng(9);
  ad::ParameterSet ps;
  const auto ar = AutoregressiveGmm::create(ps, "ar", 3, 5, 1, 3, rng);
  oracle::perturb(ps, rng, 0.3);
  const auto ctx = context({0, 0.6, 0}, BitMask{0, 1, 0});
  ad::Tape tape(ps, false);
  const auto m = ar.mean(tape, ContextBatch::single(ctx)).value();
  // Teacher-forcing the returned means must reproduce them step by step.
  const std::vector<double> zbar(m.values().begin(), m.values().end());
  const auto conds = ar.conditionals(ps, zbar, ctx);
  for (std::size_t i = 0; i < conds.size(); ++i) CHECK(m[i] == doctest::Approx(gmm_mean(conds[i])).epsilon(1e-12));
}

TEST_CASE("property: one-target densities integrate to one for random parameters") {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    ad::ParameterSet ps;
    const Likelihood ar = AutoregressiveGmm::create(ps, "ar", 3, 8, 2, 5, rng);
    const Likelihood g = GaussianLikelihood::create(ps, "g", 3, 8, 2, rng);
    oracle::perturb(ps, rng, 0.2);
    BitMask b = BitMask::ones(3);
    b.set(rng.index(3), false);
    const auto ctx = context(oracle::random_vector(rng, 3), b);
    for (const auto* l : {&ar, &g}) {
      const double total =
          oracle::simpson([&](double z) { return std::exp(base_log_prob(*l, ps, {z}, ctx)); }, -40, 40, 40000);
      CHECK(std::abs(total - 1.0) < 1e-4);
    }
  }
}

TEST_CASE("autoregressive log-prob gradient matches central differences") {
  Rng rng(11);
  ad::ParameterSet ps;
  const auto ar = AutoregressiveGmm::create(ps, "ar", 3, 4, 2, 3, rng);
  oracle::perturb(ps, rng, 0.2);
  const auto batch = ContextBatch::single(context({0, 0.2, 0}, BitMask{0, 1, 0}));
  const std::vector<double> z{0.7, -0.4};
  const auto f = [&](ad::Tape& tape) { return ar.log_prob(tape, row_constant(z, 1), batch); };
  ad::Tape tape(ps, true);
  ad::backward(f(tape));
  const auto grads = tape.gradients();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (std::size_t j = 0; j < ps.value(i).size(); ++j) {
      const double numeric = oracle::fd_param(ps.value(i), j, [&] {
        ad::Tape t(ps, false);
        return f(t).value().item();
      });
      CHECK(oracle::rel_err(grads[i][j], numeric, 1e-6) < 1e-3);
    }
  }
}

TEST_CASE("property: own samples score higher than perturbed samples") {
  Rng rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    ad::ParameterSet ps;
    const Likelihood ar = AutoregressiveGmm::create(ps, "ar", 4, 8, 2, 4, rng);
    oracle::perturb(ps, rng, 0.3);
    const auto ctx = context({0.1, 0, 0, 0}, BitMask{1, 0, 0, 0});
    const std::size_t n = 10000;
    const std::vector<ConditioningContext> ctxs(n, ctx);
    const auto batch = ContextBatch::build(ctxs);
    std::vector<Rng> rngs;
    for (std::size_t r = 0; r < n; ++r) rngs.push_back(rng.fork(r));
    ad::Tape tape(ps, false);
    const Tensor z = sample(ar, tape, batch, rngs);
    Tensor noisy = z;
    for (double& v : noisy.values()) v += 0.5 * rng.normal();
    const double own = ad::mean(log_prob(ar, tape, ad::constant(z), batch)).value().item();
    const double other = ad::mean(log_prob(ar, tape, ad::constant(noisy), batch)).value().item();
    CHECK(own > other);
  }
}

TEST_CASE("gaussian base with a zero network is standard normal") {
  Rng rng(13);
  ad::ParameterSet ps;
  const Likelihood g = GaussianLikelihood::create(ps, "g", 4, 8, 2, rng);
  zero_params(ps, "g");
  const auto ctx = context({0.5, 0, 0, 0}, BitMask{1, 0, 0, 0});
  CHECK(base_log_prob(g, ps, {0, 0, 0}, ctx) == doctest::Approx(-1.5 * std::log(2 * std::numbers::pi)));
  CHECK(base_log_prob(g, ps, {1, 0, 0}, ctx) == doctest::Approx(-1.5 * std::log(2 * std::numbers::pi) - 0.5));
}

TEST_CASE("gaussian mean is the network's location output at the targets") {
  Rng rng(14);
  ad::ParameterSet ps;
  const Likelihood g = GaussianLikelihood::create(ps, "g", 4, 8, 2, rng);
  oracle::perturb(ps, rng, 0.3);
  const std::vector<double> x{0, 1.2, 0, -0.3};
  const BitMask b{0, 1, 0, 1};
  const auto out = oracle::mlp(ps, "g.net", oracle::features(x, b, BitMask::ones(4)));
  ad::Tape tape(ps, false);
  const auto m = mean(g, tape, ContextBatch::single(context(x, b))).value();
  CHECK(m[0] == doctest::Approx(out[0]).epsilon(1e-12));
  CHECK(m[1] == doctest::Approx(out[2]).epsilon(1e-12));
}

TEST_CASE("gaussian samples match the predicted moments") {
  Rng rng(15);
  ad::ParameterSet ps;
  const Likelihood g = GaussianLikelihood::create(ps, "g", 2, 4, 1, rng);
  zero_params(ps, "g");
  auto& bias = ps.value(ps.find("g.net.fc1.bias"));
  bias[0] = 1.0;
  bias[2] = 5.0 * std::atanh(std::log(2.0) / 5.0);
  const std::size_t n = 20000;
  const std::vector<ConditioningContext> ctxs(n, context({0, 0.4}, BitMask{0, 1}));
  std::vector<Rng> rngs;
  for (std::size_t r = 0; r < n; ++r) rngs.push_back(Rng(99).fork(r));
  ad::Tape tape(ps, false);
  const Tensor z = sample(g, tape, ContextBatch::build(ctxs), rngs);
  double mean = 0.0, var = 0.0;
  for (double v : z.values()) mean += v;
  mean /= n;
  for (double v : z.values()) var += (v - mean) * (v - mean);
  var /= n - 1;
  CHECK(std::abs(mean - 1.0) < 3 * 2.0 / std::sqrt(n));
  // Standard error of a normal sample variance is sigma^2 sqrt(2 / (n - 1)).
  CHECK(std::abs(var - 4.0) < 3 * 4.0 * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("sampling requires one generator per row") {
  Rng rng(16);
  ad::ParameterSet ps;
  const Likelihood ar = AutoregressiveGmm::create(ps, "ar", 2, 4, 1, 2, rng);
  ad::Tape tape(ps, false);
  std::vector<Rng> none;
  CHECK_THROWS_AS(sample(ar, tape, ContextBatch::single(context({0, 0}, BitMask::zeros(2))), none), ShapeError);
}
