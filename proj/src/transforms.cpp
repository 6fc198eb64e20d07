#include "acflow/transforms.hpp"

#include <cmath>
#include <stdexcept>

#include "acflow/error.hpp"

namespace acflow::transforms {

using ad::Tape;
using ad::Tensor;
using ad::Var;

ContextBatch ContextBatch::build(std::span<const ConditioningContext> contexts) {
  if (contexts.empty()) throw std::invalid_argument("ContextBatch: no contexts");
  ContextBatch batch;
  batch.dim = contexts.front().dim();
  batch.rows = contexts.size();
  batch.targets = contexts.front().target_count();
  const std::size_t d = batch.dim;
  batch.observed = Tensor::matrix(batch.rows, d);
  batch.observed_mask = Tensor::matrix(batch.rows, d);
  batch.present_mask = Tensor::matrix(batch.rows, d);
  Tensor features = Tensor::matrix(batch.rows, feature_width(d));
  batch.target_index = {batch.rows, batch.targets, {}};
  batch.target_index.at.reserve(batch.rows * batch.targets);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const ConditioningContext& c = contexts[r];
    c.validate();
    if (c.dim() != d || c.target_count() != batch.targets) {
      throw std::invalid_argument("ContextBatch: contexts differ in dimension or target count");
    }
    const auto phi = masking::zero_impute(c.observed, c.b);
    for (std::size_t i = 0; i < d; ++i) {
      batch.observed(r, i) = phi[i];
      batch.observed_mask(r, i) = c.b[i] ? 1.0 : 0.0;
      batch.present_mask(r, i) = c.m[i] ? 1.0 : 0.0;
      features(r, i) = phi[i];
      features(r, d + i) = batch.observed_mask(r, i);
      features(r, 2 * d + i) = batch.present_mask(r, i);
    }
    for (std::size_t pos : c.targets()) batch.target_index.at.push_back(pos);
  }
  batch.features = ad::constant(std::move(features));
  return batch;
}

Tensor rows_tensor(std::span<const double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw ShapeError("rows_tensor: size mismatch");
  return Tensor(ad::Shape{rows, cols}, std::vector<double>(values.begin(), values.end()));
}

Var row_constant(std::span<const double> values, std::size_t rows) {
  Tensor t = Tensor::matrix(rows, values.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < values.size(); ++c) t(r, c) = values[c];
  }
  return ad::constant(std::move(t));
}

namespace {

void check_input(const Var& x, const ContextBatch& ctx, const char* who) {
  if (x.rows() != ctx.rows || x.cols() != ctx.targets) {
    throw ShapeError(std::string(who) + ": input " + ad::shape_string(x.shape()) +
                     " does not match context with " + std::to_string(ctx.rows) + " rows and |u| = " +
                     std::to_string(ctx.targets));
  }
}

Var zero_logdet(std::size_t rows) { return ad::constant(Tensor::matrix(rows, 1)); }

// clamp * tanh(raw / clamp): bounded log-scale, |value| <= clamp.
Var soft_clamp(const Var& raw, double clamp) { return ad::tanh(raw * (1.0 / clamp)) * clamp; }

}  // namespace

// ---------------------------------------------------------------- affine

AffineCoupling AffineCoupling::create(ad::ParameterSet& params, const std::string& prefix,
                                      std::size_t dim, std::size_t hidden, std::size_t depth,
                                      std::size_t parity, double clamp, Rng& rng) {
  if (depth == 0) throw std::invalid_argument("affine coupling needs at least one hidden layer");
  if (!(clamp > 0.0)) throw std::invalid_argument("affine coupling clamp must be positive");
  AffineCoupling t;
  std::vector<std::size_t> sizes{feature_width(dim)};
  for (std::size_t i = 0; i < depth; ++i) sizes.push_back(hidden);
  t.trunk_ = ad::Mlp::create(params, prefix + ".trunk", sizes, rng);
  t.scale_head_ = ad::Dense::create(params, prefix + ".scale", hidden, dim, rng, 0.01);
  t.shift_head_ = ad::Dense::create(params, prefix + ".shift", hidden, dim, rng, 0.01);
  t.dim_ = dim;
  t.parity_ = parity % 2;
  t.clamp_ = clamp;
  return t;
}

Tensor AffineCoupling::kept_mask(const ContextBatch& ctx) const {
  Tensor mask = Tensor::matrix(1, ctx.targets);
  for (std::size_t j = 0; j < ctx.targets; ++j) mask[j] = (j + parity_) % 2 == 0 ? 1.0 : 0.0;
  return mask;
}

AffineCoupling::ShiftScale AffineCoupling::shift_scale(Tape& tape, const Var& kept,
                                                       const Tensor& kept_mask,
                                                       const ContextBatch& ctx) const {
  const std::size_t d = dim_;
  // x_c: group-A values at their positions plus the observed values.
  Var x_c = ad::scatter_cols(kept, ctx.target_index, d) + ad::constant(ctx.observed);
  // b_c: group-A positions plus the observed mask.
  Tensor b_c = ctx.observed_mask;
  for (std::size_t r = 0; r < ctx.rows; ++r) {
    for (std::size_t j = 0; j < ctx.targets; ++j) {
      if (kept_mask[j] > 0.5) b_c(r, ctx.target_index(r, j)) = 1.0;
    }
  }
  Var input = ad::concat_cols({x_c, ad::constant(std::move(b_c)), ad::constant(ctx.present_mask)});
  Var h = ad::tanh(trunk_(tape, input));
  Tensor transformed = Tensor::matrix(1, ctx.targets);
  for (std::size_t j = 0; j < ctx.targets; ++j) transformed[j] = 1.0 - kept_mask[j];
  Var b_part = ad::constant(std::move(transformed));
  Var log_s = soft_clamp(ad::gather_cols(scale_head_(tape, h), ctx.target_index), clamp_) * b_part;
  Var shift = ad::gather_cols(shift_head_(tape, h), ctx.target_index) * b_part;
  return {log_s, shift};
}

FlowOutput AffineCoupling::forward(Tape& tape, const Var& x, const ContextBatch& ctx) const {
  check_input(x, ctx, "affine_coupling");
  if (ctx.targets <= 1) return {x, zero_logdet(ctx.rows)};
  const Tensor mask = kept_mask(ctx);
  auto [log_s, shift] = shift_scale(tape, x * ad::constant(mask), mask, ctx);
  return {x * ad::exp(log_s) + shift, ad::row_sum(log_s)};
}

Var AffineCoupling::inverse(Tape& tape, const Var& z, const ContextBatch& ctx) const {
  check_input(z, ctx, "affine_coupling");
  if (ctx.targets <= 1) return z;
  const Tensor mask = kept_mask(ctx);
  auto [log_s, shift] = shift_scale(tape, z * ad::constant(mask), mask, ctx);
  return (z - shift) * ad::exp(-log_s);
}

// ---------------------------------------------------------------- linear

ConditionalLinear ConditionalLinear::create(ad::ParameterSet& params, const std::string& prefix,
                                            std::size_t dim, std::size_t hidden, std::size_t depth,
                                            std::size_t rank, Rng& rng) {
  if (rank >= dim) rank = 0;
  ConditionalLinear t;
  const std::size_t matrix_outputs = rank == 0 ? dim * dim : 2 * dim * rank;
  std::vector<std::size_t> sizes{feature_width(dim)};
  for (std::size_t i = 0; i < depth; ++i) sizes.push_back(hidden);
  sizes.push_back(matrix_outputs + dim);
  t.net_ = ad::Mlp::create(params, prefix + ".net", sizes, rng, 0.01);
  t.base_ = params.add(prefix + ".base_matrix", Tensor::identity(dim).reshaped({1, dim * dim}));
  t.dim_ = dim;
  t.rank_ = rank;
  return t;
}

ConditionalLinear::Affine ConditionalLinear::assemble(Tape& tape, const ContextBatch& ctx) const {
  const std::size_t d = dim_;
  Var out = net_(tape, ctx.features);
  const std::size_t matrix_outputs = rank_ == 0 ? d * d : 2 * d * rank_;
  Var w_f;
  if (rank_ == 0) {
    w_f = ad::slice_cols(out, 0, d * d);
  } else {
    Var u = ad::slice_cols(out, 0, d * rank_);
    Var v = ad::slice_cols(out, d * rank_, d * rank_);
    w_f = ad::batched_matmul(u, v, d, rank_, d);
  }
  Var w_full = w_f + tape.param(base_);
  Var t_f = ad::slice_cols(out, matrix_outputs, d);
  return {ad::gather_submatrix(w_full, ctx.target_index, d),
          ad::gather_cols(t_f, ctx.target_index)};
}

FlowOutput ConditionalLinear::forward(Tape& tape, const Var& x, const ContextBatch& ctx) const {
  check_input(x, ctx, "linear");
  if (ctx.targets == 0) return {x, zero_logdet(ctx.rows)};
  auto [w, t] = assemble(tape, ctx);
  Var logdet = ad::batched_logabsdet(w);
  return {ad::batched_matvec(w, x) + t, logdet};
}

Var ConditionalLinear::inverse(Tape& tape, const Var& z, const ContextBatch& ctx) const {
  check_input(z, ctx, "linear");
  if (ctx.targets == 0) return z;
  auto [w, t] = assemble(tape, ctx);
  return ad::batched_solve(w, z - t);
}

// ---------------------------------------------------------------- rnn

RnnCoupling RnnCoupling::create(ad::ParameterSet& params, const std::string& prefix,
                                std::size_t dim, std::size_t hidden, std::size_t layers,
                                double clamp, Rng& rng) {
  if (!(clamp > 0.0)) throw std::invalid_argument("rnn coupling clamp must be positive");
  RnnCoupling t;
  t.rnn_ = ad::GruStack::create(params, prefix + ".rnn", 1, feature_width(dim), hidden, layers, rng);
  t.head_ = ad::Dense::create(params, prefix + ".head", hidden, 2, rng, 0.01);
  t.clamp_ = clamp;
  return t;
}

FlowOutput RnnCoupling::forward(Tape& tape, const Var& x, const ContextBatch& ctx) const {
  check_input(x, ctx, "rnn_coupling");
  if (ctx.targets == 0) return {x, zero_logdet(ctx.rows)};
  auto run = rnn_.start(tape, ctx.features);
  Var prev = ad::constant(Tensor::matrix(ctx.rows, 1, -1.0));
  std::vector<Var> outputs;
  Var logdet;
  for (std::size_t i = 0; i < ctx.targets; ++i) {
    Var raw = head_(tape, rnn_.step(run, prev));
    Var shift = ad::slice_cols(raw, 0, 1);
    Var log_s = soft_clamp(ad::slice_cols(raw, 1, 1), clamp_);
    Var xi = ad::slice_cols(x, i, 1);
    outputs.push_back(xi * ad::exp(log_s) + shift);
    logdet = i == 0 ? log_s : logdet + log_s;
    prev = xi;
  }
  return {ad::concat_cols(outputs), logdet};
}

Var RnnCoupling::inverse(Tape& tape, const Var& z, const ContextBatch& ctx) const {
  check_input(z, ctx, "rnn_coupling");
  if (ctx.targets == 0) return z;
  auto run = rnn_.start(tape, ctx.features);
  Var prev = ad::constant(Tensor::matrix(ctx.rows, 1, -1.0));
  std::vector<Var> outputs;
  for (std::size_t i = 0; i < ctx.targets; ++i) {
    Var raw = head_(tape, rnn_.step(run, prev));
    Var shift = ad::slice_cols(raw, 0, 1);
    Var log_s = soft_clamp(ad::slice_cols(raw, 1, 1), clamp_);
    Var xi = (ad::slice_cols(z, i, 1) - shift) * ad::exp(-log_s);
    outputs.push_back(xi);
    prev = xi;
  }
  return ad::concat_cols(outputs);
}

// ---------------------------------------------------------------- elementwise

LeakyRelu::LeakyRelu(double alpha) : alpha_(alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("leaky_relu alpha must be positive");
}

FlowOutput LeakyRelu::forward(Tape&, const Var& x, const ContextBatch& ctx) const {
  check_input(x, ctx, "leaky_relu");
  Tensor logdet = Tensor::matrix(ctx.rows, 1);
  const double log_alpha = std::log(alpha_);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < ctx.rows; ++r) {
    for (double v : xv.row(r)) {
      if (v < 0.0) logdet[r] += log_alpha;
    }
  }
  return {ad::leaky_relu(x, alpha_), ad::constant(std::move(logdet))};
}

Var LeakyRelu::inverse(Tape&, const Var& z, const ContextBatch& ctx) const {
  check_input(z, ctx, "leaky_relu");
  return ad::leaky_relu(z, 1.0 / alpha_);
}

namespace {

ad::RowIndex reversed_index(const ContextBatch& ctx) {
  ad::RowIndex idx{ctx.rows, ctx.targets, {}};
  idx.at.reserve(ctx.rows * ctx.targets);
  for (std::size_t r = 0; r < ctx.rows; ++r) {
    for (std::size_t j = 0; j < ctx.targets; ++j) idx.at.push_back(ctx.targets - 1 - j);
  }
  return idx;
}

}  // namespace

FlowOutput Reverse::forward(Tape&, const Var& x, const ContextBatch& ctx) const {
  check_input(x, ctx, "reverse");
  return {ad::gather_cols(x, reversed_index(ctx)), zero_logdet(ctx.rows)};
}

Var Reverse::inverse(Tape&, const Var& z, const ContextBatch& ctx) const {
  check_input(z, ctx, "reverse");
  return ad::gather_cols(z, reversed_index(ctx));
}

// ---------------------------------------------------------------- stack

std::string kind_name(const Transform& t) {
  struct Namer {
    std::string operator()(const AffineCoupling&) const { return "affine_coupling"; }
    std::string operator()(const ConditionalLinear&) const { return "linear"; }
    std::string operator()(const RnnCoupling&) const { return "rnn_coupling"; }
    std::string operator()(const LeakyRelu&) const { return "leaky_relu"; }
    std::string operator()(const Reverse&) const { return "reverse"; }
  };
  return std::visit(Namer{}, t);
}

FlowOutput TransformStack::forward(Tape& tape, const Var& x, const ContextBatch& ctx) const {
  check_input(x, ctx, "stack");
  Var value = x;
  Var logdet = zero_logdet(ctx.rows);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      FlowOutput out = std::visit([&](const auto& t) { return t.forward(tape, value, ctx); }, layers_[i]);
      value = out.value;
      logdet = logdet + out.logdet;
    } catch (const NumericalError& e) {
      throw NumericalError(e.detail(), static_cast<int>(i));
    }
  }
  return {value, logdet};
}

Var TransformStack::inverse(Tape& tape, const Var& z, const ContextBatch& ctx) const {
  check_input(z, ctx, "stack");
  Var value = z;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    try {
      value = std::visit([&](const auto& t) { return t.inverse(tape, value, ctx); }, layers_[i]);
    } catch (const NumericalError& e) {
      throw NumericalError(e.detail(), static_cast<int>(i));
    }
  }
  return value;
}

namespace {

template <class T>
TransformResult forward_one(const T& t, const ad::ParameterSet& params,
                            std::span<const double> x_u, const ConditioningContext& ctx) {
  const ContextBatch batch = ContextBatch::single(ctx);
  Tape tape(params, false);
  FlowOutput out = t.forward(tape, ad::constant(rows_tensor(x_u, 1, x_u.size())), batch);
  const auto v = out.value.value().values();
  return {std::vector<double>(v.begin(), v.end()), out.logdet.value().item()};
}

template <class T>
std::vector<double> inverse_one(const T& t, const ad::ParameterSet& params,
                                std::span<const double> z_u, const ConditioningContext& ctx) {
  const ContextBatch batch = ContextBatch::single(ctx);
  Tape tape(params, false);
  Var x = t.inverse(tape, ad::constant(rows_tensor(z_u, 1, z_u.size())), batch);
  const auto v = x.value().values();
  return {v.begin(), v.end()};
}

}  // namespace

TransformResult forward(const Transform& t, const ad::ParameterSet& params,
                        std::span<const double> x_u, const ConditioningContext& ctx) {
  return std::visit([&](const auto& layer) { return forward_one(layer, params, x_u, ctx); }, t);
}

std::vector<double> inverse(const Transform& t, const ad::ParameterSet& params,
                            std::span<const double> z_u, const ConditioningContext& ctx) {
  return std::visit([&](const auto& layer) { return inverse_one(layer, params, z_u, ctx); }, t);
}

TransformResult forward(const TransformStack& stack, const ad::ParameterSet& params,
                        std::span<const double> x_u, const ConditioningContext& ctx) {
  return forward_one(stack, params, x_u, ctx);
}

std::vector<double> inverse(const TransformStack& stack, const ad::ParameterSet& params,
                            std::span<const double> z_u, const ConditioningContext& ctx) {
  return inverse_one(stack, params, z_u, ctx);
}

}  // namespace acflow::transforms
