#include "acflow/likelihoods.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "acflow/error.hpp"

namespace acflow::likelihoods {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

const double half_log_two_pi = 0.5 * std::log(2.0 * std::numbers::pi);

void check_gmm(const GmmParams& p) {
  if (p.logits.size() != p.locs.size() || p.scales.size() != p.locs.size()) {
    throw std::invalid_argument("GmmParams: logits, locs and scales differ in length");
  }
  if (p.locs.empty()) throw std::invalid_argument("GmmParams: no components");
  for (double s : p.scales) {
    if (!(s > 0.0)) throw DomainError("GMM scale must be positive, got " + std::to_string(s));
  }
}

Var empty_columns(std::size_t rows) { return ad::constant(Tensor::matrix(rows, 0)); }
Var zero_column(std::size_t rows) { return ad::constant(Tensor::matrix(rows, 1)); }

Var soft_clamp(const Var& raw, double clamp) { return ad::tanh(raw * (1.0 / clamp)) * clamp; }

}  // namespace

std::vector<double> GmmParams::weights() const {
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double total = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = std::exp(logits[k] - top);
    total += w[k];
  }
  for (double& v : w) v /= total;
  return w;
}

double gmm_log_prob(double z, const GmmParams& p) {
  check_gmm(p);
  const std::size_t k_count = p.components();
  const double top = *std::max_element(p.logits.begin(), p.logits.end());
  double norm = 0.0;
  for (double l : p.logits) norm += std::exp(l - top);
  const double log_norm = top + std::log(norm);

  std::vector<double> terms(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double u = (z - p.locs[k]) / p.scales[k];
    terms[k] = p.logits[k] - log_norm - 0.5 * u * u - std::log(p.scales[k]) - half_log_two_pi;
  }
  const double m = *std::max_element(terms.begin(), terms.end());
  if (std::isinf(m)) return m;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

double gmm_mean(const GmmParams& p) {
  check_gmm(p);
  const auto w = p.weights();
  double m = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) m += w[k] * p.locs[k];
  return m;
}

double gmm_variance(const GmmParams& p) {
  const double mu = gmm_mean(p);
  const auto w = p.weights();
  double v = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double dm = p.locs[k] - mu;
    v += w[k] * (p.scales[k] * p.scales[k] + dm * dm);
  }
  return v;
}

namespace {

std::size_t pick_component(std::span<const double> weights, double u) {
  double acc = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    acc += weights[k];
    if (u < acc) return k;
  }
  return weights.size() - 1;
}

}  // namespace

double gmm_sample(const GmmParams& p, Rng& rng) {
  check_gmm(p);
  const auto w = p.weights();
  const std::size_t k = pick_component(w, rng.uniform());
  return p.locs[k] + p.scales[k] * rng.normal();
}

Var gmm_log_prob(const Var& z, const Var& logits, const Var& locs, const Var& scales) {
  Var u = (z - locs) / scales;
  Var comp = ad::log_softmax_rows(logits) - 0.5 * ad::square(u) - ad::log(scales);
  return ad::logsumexp_rows(comp) - half_log_two_pi;
}

// ---------------------------------------------------------------- gaussian

GaussianLikelihood GaussianLikelihood::create(ad::ParameterSet& params, const std::string& prefix,
                                              std::size_t dim, std::size_t hidden,
                                              std::size_t depth, Rng& rng) {
  GaussianLikelihood g;
  std::vector<std::size_t> sizes{transforms::feature_width(dim)};
  for (std::size_t i = 0; i < depth; ++i) sizes.push_back(hidden);
  sizes.push_back(2 * dim);
  g.net_ = ad::Mlp::create(params, prefix + ".net", sizes, rng, 0.01);
  g.dim_ = dim;
  return g;
}

GaussianLikelihood::Moments GaussianLikelihood::moments(Tape& tape, const ContextBatch& ctx) const {
  Var out = net_(tape, ctx.features);
  Var mu = ad::gather_cols(ad::slice_cols(out, 0, dim_), ctx.target_index);
  Var raw = ad::gather_cols(ad::slice_cols(out, dim_, dim_), ctx.target_index);
  return {mu, soft_clamp(raw, 5.0)};
}

Var GaussianLikelihood::log_prob(Tape& tape, const Var& z, const ContextBatch& ctx) const {
  if (ctx.targets == 0) return zero_column(ctx.rows);
  auto [mu, log_s] = moments(tape, ctx);
  Var u = (z - mu) * ad::exp(-log_s);
  Var per_dim = -0.5 * ad::square(u) - log_s;
  return ad::row_sum(per_dim) - half_log_two_pi * static_cast<double>(ctx.targets);
}

Var GaussianLikelihood::mean(Tape& tape, const ContextBatch& ctx) const {
  if (ctx.targets == 0) return empty_columns(ctx.rows);
  return moments(tape, ctx).mean;
}

Tensor GaussianLikelihood::sample(Tape& tape, const ContextBatch& ctx, std::span<Rng> rngs) const {
  if (rngs.size() != ctx.rows) throw ShapeError("sample: one generator per row required");
  Tensor out = Tensor::matrix(ctx.rows, ctx.targets);
  if (ctx.targets == 0) return out;
  auto [mu, log_s] = moments(tape, ctx);
  for (std::size_t r = 0; r < ctx.rows; ++r) {
    for (std::size_t j = 0; j < ctx.targets; ++j) {
      out(r, j) = mu.value()(r, j) + std::exp(log_s.value()(r, j)) * rngs[r].normal();
    }
  }
  return out;
}

// ---------------------------------------------------------------- autoregressive

AutoregressiveGmm AutoregressiveGmm::create(ad::ParameterSet& params, const std::string& prefix,
                                            std::size_t dim, std::size_t hidden, std::size_t layers,
                                            std::size_t components, Rng& rng) {
  if (components == 0) throw std::invalid_argument("autoregressive GMM needs at least one component");
  AutoregressiveGmm a;
  a.rnn_ = ad::GruStack::create(params, prefix + ".rnn", 1, transforms::feature_width(dim), hidden,
                                layers, rng);
  a.head_ = ad::Mlp::create(params, prefix + ".head", {hidden, hidden, 3 * components}, rng);
  a.components_ = components;
  return a;
}

AutoregressiveGmm::Step AutoregressiveGmm::step(Tape& tape, ad::GruStack::Run& run,
                                                const Var& prev) const {
  Var theta = head_(tape, rnn_.step(run, prev));
  const std::size_t k = components_;
  return {ad::slice_cols(theta, 0, k), ad::slice_cols(theta, k, k),
          ad::softplus(ad::slice_cols(theta, 2 * k, k)) + min_scale};
}

Var AutoregressiveGmm::step_log_probs(Tape& tape, const Var& z, const ContextBatch& ctx) const {
  if (ctx.targets == 0) return empty_columns(ctx.rows);
  auto run = rnn_.start(tape, ctx.features);
  Var prev = ad::constant(Tensor::matrix(ctx.rows, 1, -1.0));
  std::vector<Var> cols;
  for (std::size_t i = 0; i < ctx.targets; ++i) {
    Step s = step(tape, run, prev);
    Var zi = ad::slice_cols(z, i, 1);
    cols.push_back(gmm_log_prob(zi, s.logits, s.locs, s.scales));
    prev = zi;
  }
  return ad::concat_cols(cols);
}

Var AutoregressiveGmm::log_prob(Tape& tape, const Var& z, const ContextBatch& ctx) const {
  if (ctx.targets == 0) return zero_column(ctx.rows);
  return ad::row_sum(step_log_probs(tape, z, ctx));
}

Var AutoregressiveGmm::mean(Tape& tape, const ContextBatch& ctx) const {
  if (ctx.targets == 0) return empty_columns(ctx.rows);
  auto run = rnn_.start(tape, ctx.features);
  Var prev = ad::constant(Tensor::matrix(ctx.rows, 1, -1.0));
  std::vector<Var> cols;
  for (std::size_t i = 0; i < ctx.targets; ++i) {
    Step s = step(tape, run, prev);
    Var zbar = ad::row_sum(ad::softmax_rows(s.logits) * s.locs);
    cols.push_back(zbar);
    prev = zbar;
  }
  return ad::concat_cols(cols);
}

Tensor AutoregressiveGmm::sample(Tape& tape, const ContextBatch& ctx, std::span<Rng> rngs) const {
  if (rngs.size() != ctx.rows) throw ShapeError("sample: one generator per row required");
  Tensor out = Tensor::matrix(ctx.rows, ctx.targets);
  if (ctx.targets == 0) return out;
  auto run = rnn_.start(tape, ctx.features);
  Var prev = ad::constant(Tensor::matrix(ctx.rows, 1, -1.0));
  for (std::size_t i = 0; i < ctx.targets; ++i) {
    Step s = step(tape, run, prev);
    const Tensor weights = ad::softmax_rows(s.logits).value();
    const Tensor& locs = s.locs.value();
    const Tensor& scales = s.scales.value();
    Tensor drawn = Tensor::matrix(ctx.rows, 1);
    for (std::size_t r = 0; r < ctx.rows; ++r) {
      const std::size_t k = pick_component(weights.row(r), rngs[r].uniform());
      drawn[r] = locs(r, k) + scales(r, k) * rngs[r].normal();
      out(r, i) = drawn[r];
    }
    prev = ad::constant(std::move(drawn));
  }
  return out;
}

std::vector<GmmParams> AutoregressiveGmm::conditionals(const ad::ParameterSet& params,
                                                       std::span<const double> z_u,
                                                       const ConditioningContext& ctx) const {
  const ContextBatch batch = ContextBatch::single(ctx);
  if (z_u.size() != batch.targets) throw ShapeError("conditionals: z_u length differs from |u|");
  Tape tape(params, false);
  auto run = rnn_.start(tape, batch.features);
  Var prev = ad::constant(Tensor::matrix(1, 1, -1.0));
  std::vector<GmmParams> out;
  for (std::size_t i = 0; i < batch.targets; ++i) {
    Step s = step(tape, run, prev);
    auto copy = [](const Var& v) {
      const auto vals = v.value().values();
      return std::vector<double>(vals.begin(), vals.end());
    };
    out.push_back({copy(s.logits), copy(s.locs), copy(s.scales)});
    prev = ad::constant(Tensor::matrix(1, 1, z_u[i]));
  }
  return out;
}

// ---------------------------------------------------------------- dispatch

std::string kind_name(const Likelihood& l) {
  return std::holds_alternative<GaussianLikelihood>(l) ? "gaussian" : "autoregressive_gmm";
}

Var log_prob(const Likelihood& l, Tape& tape, const Var& z, const ContextBatch& ctx) {
  if (z.rows() != ctx.rows || z.cols() != ctx.targets) {
    throw ShapeError("log_prob: latent " + ad::shape_string(z.shape()) +
                     " does not match context with |u| = " + std::to_string(ctx.targets));
  }
  return std::visit([&](const auto& b) { return b.log_prob(tape, z, ctx); }, l);
}

Var mean(const Likelihood& l, Tape& tape, const ContextBatch& ctx) {
  return std::visit([&](const auto& b) { return b.mean(tape, ctx); }, l);
}

Tensor sample(const Likelihood& l, Tape& tape, const ContextBatch& ctx, std::span<Rng> rngs) {
  return std::visit([&](const auto& b) { return b.sample(tape, ctx, rngs); }, l);
}

}  // namespace acflow::likelihoods
