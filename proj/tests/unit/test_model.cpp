#include <doctest.h>

#include <cmath>
#include <numbers>

#include "acflow/error.hpp"
#include "acflow/model.hpp"
#include "oracles.hpp"

using namespace acflow;
using ad::Tensor;

namespace {

const double half_log_2pi = 0.5 * std::log(2 * std::numbers::pi);

void zero_params(ad::ParameterSet& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps.at(i).name.starts_with(prefix)) ps.value(i).fill(0.0);
  }
}

Architecture gaussian_only(std::size_t d) {
  Architecture a;
  a.dim = d;
  a.base.kind = BaseSpec::Kind::gaussian;
  a.base.hidden = 4;
  a.base.depth = 1;
  return a;
}

LayerSpec linear_spec() {
  LayerSpec s;
  s.kind = LayerSpec::Kind::linear;
  s.hidden = 4;
  s.depth = 1;
  return s;
}

// Standard-normal base, optionally behind one diagonal linear layer.
AcflowModel scaled_model(std::size_t d, double scale, double shift) {
  Architecture a = gaussian_only(d);
  a.layers.push_back(linear_spec());
  AcflowModel model = AcflowModel::create(a, 1);
  auto& ps = model.parameters();
  zero_params(ps, "");
  auto& base = ps.value(ps.find("layer0.linear.base_matrix"));
  for (std::size_t i = 0; i < d; ++i) base[i * d + i] = scale;
  auto& bias = ps.value(ps.find("layer0.linear.net.fc1.bias"));
  for (std::size_t i = 0; i < d; ++i) bias[d * d + i] = shift;
  return model;
}

AcflowModel random_model(std::size_t d, std::uint64_t seed, double noise = 0.1) {
  AcflowModel model = AcflowModel::create(Architecture::layered(d, 2, 12, 1, 4), seed);
  Rng rng(seed + 1000);
  oracle::perturb(model.parameters(), rng, noise);
  return model;
}

Example random_example(Rng& rng, std::size_t d, bool with_missing) {
  const BitMask m = with_missing ? oracle::random_mask(rng, d, 0.8) : BitMask::ones(d);
  const BitMask b = oracle::random_mask(rng, d, 0.5) & m;
  return {oracle::random_vector(rng, d), b, m};
}

}  // namespace

TEST_CASE("empty stack with a standard normal base") {
  AcflowModel model = AcflowModel::create(gaussian_only(1), 1);
  zero_params(model.parameters(), "");
  const auto ctx = ConditioningContext::complete(std::vector<double>{0.0}, BitMask::zeros(1));
  CHECK(model.cond_log_prob(std::vector<double>{0.0}, ctx) == doctest::Approx(-0.9189385).epsilon(1e-7));
}

TEST_CASE("one diagonal scaling by 2 adds ln 2") {
  const AcflowModel model = scaled_model(1, 2.0, 0.0);
  const auto ctx = ConditioningContext::complete(std::vector<double>{0.0}, BitMask::zeros(1));
  CHECK(model.cond_log_prob(std::vector<double>{0.0}, ctx) ==
        doctest::Approx(std::log(2.0) - half_log_2pi).epsilon(1e-14));
}

TEST_CASE("fully observed rows have log-likelihood zero and empty draws") {
  const AcflowModel model = random_model(3, 2);
  const auto ctx = ConditioningContext::complete(std::vector<double>{1, 2, 3}, BitMask::ones(3));
  CHECK(model.cond_log_prob(std::vector<double>{}, ctx) == 0.0);
  Rng rng(1);
  CHECK(model.cond_sample(ctx, 2, rng) == std::vector<std::vector<double>>(2));
  CHECK(model.best_guess(ctx).empty());
}

TEST_CASE("one-target density of a random model integrates to one") {
  for (std::uint64_t seed : {3, 4}) {
    const AcflowModel model = random_model(3, seed);
    const auto ctx = ConditioningContext::complete(std::vector<double>{0.5, 0, -0.3}, BitMask{1, 0, 1});
    const double total = oracle::simpson(
        [&](double v) { return std::exp(model.cond_log_prob_standardized(std::vector<double>{v}, ctx)); }, -40,
        40, 60000);
    CHECK(std::abs(total - 1.0) < 1e-3);
  }
}

TEST_CASE("best guess inverts the flow at the base mean") {
  // Identity stack: best guess is the Gaussian head's location output.
  AcflowModel plain = AcflowModel::create(gaussian_only(2), 1);
  auto& ps = plain.parameters();
  zero_params(ps, "base.gaussian.net.fc1.weight");
  ps.value(ps.find("base.gaussian.net.fc1.bias"))[1] = -0.7;
  const auto ctx = ConditioningContext::complete(std::vector<double>{0.4, 0}, BitMask{1, 0});
  CHECK(plain.best_guess(ctx) == std::vector<double>{-0.7});

  // z = 2x + 1 with z_bar = 3 gives x = 1.
  AcflowModel affine = scaled_model(1, 2.0, 1.0);
  auto& aps = affine.parameters();
  aps.value(aps.find("base.gaussian.net.fc1.bias"))[0] = 3.0;
  const auto c1 = ConditioningContext::complete(std::vector<double>{0}, BitMask::zeros(1));
  CHECK(affine.best_guess(c1)[0] == doctest::Approx(1.0).epsilon(1e-14));

  // lambda only adds the squared error of the best guess.
  const std::vector<double> hit{1.0};
  const std::vector<double> miss{1.5};
  CHECK(affine.loss(hit, c1, 1.0) == doctest::Approx(-affine.cond_log_prob(hit, c1)).epsilon(1e-14));
  CHECK(affine.loss(miss, c1, 0.0) == doctest::Approx(-affine.cond_log_prob(miss, c1)).epsilon(1e-14));
  CHECK(affine.loss(miss, c1, 2.0) == doctest::Approx(-affine.cond_log_prob(miss, c1) + 2.0 * 0.25).epsilon(1e-14));
}

TEST_CASE("constant base and identity stack give constant samples") {
  Architecture a;
  a.dim = 2;
  a.base = {BaseSpec::Kind::autoregressive_gmm, 4, 1, 1, 1};
  AcflowModel model = AcflowModel::create(a, 1);
  auto& ps = model.parameters();
  zero_params(ps, "base.ar_gmm.head.fc1");
  auto& bias = ps.value(ps.find("base.ar_gmm.head.fc1.bias"));
  bias[1] = 0.5;
  bias[2] = -60.0;
  const auto ctx = ConditioningContext::complete(std::vector<double>{0, 0}, BitMask::zeros(2));
  Rng rng(3);
  for (const auto& s : model.cond_sample(ctx, 5, rng)) {
    CHECK(std::abs(s[0] - 0.5) < 1e-4);
    CHECK(std::abs(s[1] - 0.5) < 1e-4);
  }

  // The Gibbs chain of this model is constant after the first sweep.
  const std::vector<BitMask> blocks{BitMask{1, 0}, BitMask{0, 1}};
  Rng grng(4);
  const auto chain = model.gibbs_chain(std::vector<double>{3.0, -3.0}, blocks, 10, grng);
  for (const auto& row : chain) {
    CHECK(std::abs(row[0] - 0.5) < 1e-4);
    CHECK(std::abs(row[1] - 0.5) < 1e-4);
  }
}

TEST_CASE("own samples have finite log-likelihood") {
  const AcflowModel model = random_model(4, 6);
  const auto ctx = ConditioningContext::complete(std::vector<double>{0.2, 0, 0, 0}, BitMask{1, 0, 0, 0});
  Rng rng(5);
  for (const auto& s : model.cond_sample(ctx, 50, rng)) CHECK(std::isfinite(model.cond_log_prob(s, ctx)));
}

TEST_CASE("loss gradient matches central differences for lambda 0 and 1") {
  AcflowModel model = AcflowModel::create(Architecture::layered(3, 1, 4, 1, 2), 7);
  Rng rng(8);
  oracle::perturb(model.parameters(), rng, 0.2);
  auto& ps = model.parameters();
  const auto ctx = ConditioningContext::complete(std::vector<double>{0.3, 0, 0}, BitMask{1, 0, 0});
  const auto batch = transforms::ContextBatch::single(ctx);
  const std::vector<double> x_u{0.4, -0.9};
  for (double lambda : {0.0, 1.0}) {
    const auto f = [&](ad::Tape& tape) {
      return ad::sum(model.terms(tape, transforms::row_constant(x_u, 1), batch, lambda).loss);
    };
    ad::Tape tape(ps, true);
    const double value = f(tape).value().item();
    CHECK(value == doctest::Approx(model.loss(x_u, ctx, lambda)).epsilon(1e-12));
    ad::backward(f(tape));
    const auto grads = tape.gradients();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      for (std::size_t j = 0; j < ps.value(i).size(); ++j) {
        const double numeric = oracle::fd_param(ps.value(i), j, [&] { return model.loss(x_u, ctx, lambda); });
        CHECK(oracle::rel_err(grads[i][j], numeric, 1e-6) < 1e-3);
      }
    }
  }
}

TEST_CASE("joint log-likelihood is the conditional with nothing observed") {
  const AcflowModel model = random_model(3, 9);
  Rng rng(10);
  for (int t = 0; t < 10; ++t) {
    const auto x = oracle::random_vector(rng, 3);
    const auto ctx = ConditioningContext::complete(x, BitMask::zeros(3));
    CHECK(model.joint_log_prob(x) == model.cond_log_prob(x, ctx));
  }
}

TEST_CASE("marginal queries") {
  AcflowModel model = random_model(3, 11);
  const std::vector<double> x{0.1, -0.2, 0.3};
  CHECK(model.marginal_log_prob(x, BitMask::ones(3)) == model.joint_log_prob(x));
  CHECK(model.marginal_log_prob(std::vector<double>{}, BitMask::zeros(3)) == 0.0);
  CHECK(model.marginal_warning().has_value());
  model.set_mode(TrainingMode::marginal);
  CHECK_FALSE(model.marginal_warning().has_value());
  const std::vector<double> sub{0.1, 0.3};
  const auto ctx = ConditioningContext::from_row(std::vector<double>{0.1, 0, 0.3}, BitMask::zeros(3), BitMask{1, 0, 1});
  CHECK(model.marginal_log_prob(sub, BitMask{1, 0, 1}) == model.cond_log_prob(sub, ctx));
}

TEST_CASE("gibbs chain contracts") {
  const AcflowModel model = random_model(3, 12);
  Rng rng(13);
  const std::vector<double> init{0.5, 0.5, 0.5};
  const std::vector<BitMask> overlap{BitMask{1, 1, 0}, BitMask{0, 1, 1}};
  CHECK_THROWS_AS(model.gibbs_chain(init, overlap, 3, rng), std::invalid_argument);
  const std::vector<BitMask> empty_block{BitMask{1, 1, 1}, BitMask{0, 0, 0}};
  CHECK_THROWS_AS(model.gibbs_chain(init, empty_block, 3, rng), std::invalid_argument);

  // A single block covering every dimension draws from the joint each sweep.
  const std::vector<BitMask> all{BitMask::ones(3)};
  Rng a(14);
  const auto chain = model.gibbs_chain(init, all, 4, a);
  Rng b(14);
  for (const auto& row : chain) {
    const auto ctx = ConditioningContext::complete(std::vector<double>(3, 0.0), BitMask::zeros(3));
    CHECK(row == model.cond_sample(ctx, 1, b).front());
  }

  // Positions outside the blocks stay at the initial values.
  const std::vector<BitMask> partial{BitMask{1, 0, 0}, BitMask{0, 1, 0}};
  Rng c(15);
  for (const auto& row : model.gibbs_chain(init, partial, 5, c)) CHECK(row[2] == 0.5);
}

TEST_CASE("property: missing coordinates never influence any output") {
  const AcflowModel model = random_model(5, 16);
  Rng rng(17);
  for (int t = 0; t < 30; ++t) {
    Example ex = random_example(rng, 5, true);
    std::size_t hole = rng.index(5);
    ex.m.set(hole, false);
    ex.b.set(hole, false);
    if (ex.targets().empty()) continue;
    const auto x_u = ex.targets();
    const double lp = model.cond_log_prob(x_u, ex.context());
    const auto bg = model.best_guess(ex.context());
    Rng s1(t);
    const auto draw = model.cond_sample(ex.context(), 2, s1);

    ex.x[hole] = 100.0 * rng.normal();
    CHECK(model.cond_log_prob(x_u, ex.context()) == lp);
    CHECK(model.best_guess(ex.context()) == bg);
    Rng s2(t);
    CHECK(model.cond_sample(ex.context(), 2, s2) == draw);
  }
}

TEST_CASE("the penalty weight never changes the sampler") {
  const AcflowModel model = random_model(4, 18);
  const auto ctx = ConditioningContext::complete(std::vector<double>{0, 0.3, 0, 0}, BitMask{0, 1, 0, 0});
  Rng a(19);
  const auto first = model.cond_sample(ctx, 20, a);
  (void)model.loss(std::vector<double>{0.1, 0.2, 0.3}, ctx, 0.0);
  (void)model.loss(std::vector<double>{0.1, 0.2, 0.3}, ctx, 5.0);
  Rng b(19);
  CHECK(model.cond_sample(ctx, 20, b) == first);
}

TEST_CASE("grouped batch helpers agree with single-example calls") {
  const AcflowModel model = random_model(5, 20);
  Rng rng(21);
  std::vector<Example> rows;
  for (int t = 0; t < 40; ++t) rows.push_back(random_example(rng, 5, t % 2 == 0));
  const auto lp = model.cond_log_prob(rows);
  const auto bg = model.best_guess(rows);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto ctx = rows[i].context();
    CHECK(lp[i] == doctest::Approx(model.cond_log_prob(rows[i].targets(), ctx)).epsilon(1e-12));
    const auto single = model.best_guess(ctx);
    REQUIRE(bg[i].size() == single.size());
    for (std::size_t j = 0; j < single.size(); ++j) CHECK(bg[i][j] == doctest::Approx(single[j]).epsilon(1e-12));
  }
  Rng s1(22), s2(22);
  CHECK(model.sample(rows, s1) == model.sample(rows, s2));

  const auto groups = group_by_target_count(rows, 4);
  std::size_t covered = 0;
  for (const auto& g : groups) {
    CHECK(g.size() <= 4);
    for (std::size_t i : g) CHECK(rows[i].targets().size() == rows[g.front()].targets().size());
    covered += g.size();
  }
  CHECK(covered == rows.size());
}

TEST_CASE("raw-space density is the standardized density with the scale correction") {
  AcflowModel model = random_model(3, 23);
  const std::vector<double> mean{1.0, -2.0, 0.5};
  const std::vector<double> sd{2.0, 0.5, 3.0};
  model.set_standardizer(Standardizer(mean, sd));
  const std::vector<double> x{2.0, -1.0, 0.0};
  const BitMask b{0, 1, 0};
  const auto ctx = ConditioningContext::complete(x, b);
  std::vector<double> z(3);
  for (std::size_t i = 0; i < 3; ++i) z[i] = (x[i] - mean[i]) / sd[i];
  const auto std_ctx = ConditioningContext::complete(z, b);
  const std::vector<double> x_u{x[0], x[2]};
  const std::vector<double> z_u{z[0], z[2]};
  const double raw = model.cond_log_prob(x_u, ctx);
  const double std_units = model.cond_log_prob_standardized(x_u, ctx);
  const auto bg_raw = model.best_guess(ctx);

  // The same flow with an identity standardizer, fed hand-standardized values.
  model.set_standardizer(Standardizer::identity(3));
  const double reference = model.cond_log_prob(z_u, std_ctx);
  CHECK(std_units == doctest::Approx(reference).epsilon(1e-12));
  CHECK(raw == doctest::Approx(reference - std::log(2.0) - std::log(3.0)).epsilon(1e-12));
  const auto bg_id = model.best_guess(std_ctx);
  CHECK(bg_raw[0] == doctest::Approx(bg_id[0] * 2.0 + 1.0).epsilon(1e-12));
  CHECK(bg_raw[1] == doctest::Approx(bg_id[1] * 3.0 + 0.5).epsilon(1e-12));
}
