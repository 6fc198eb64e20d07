#include "acflow/model.hpp"

#include <map>
#include <stdexcept>

#include "acflow/error.hpp"

namespace acflow {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using transforms::ContextBatch;

std::string_view mode_name(TrainingMode mode) {
  switch (mode) {
    case TrainingMode::conditional: return "conditional";
    case TrainingMode::conditional_missing: return "conditional_missing";
    case TrainingMode::marginal: return "marginal";
  }
  return "?";
}

TrainingMode parse_mode(std::string_view text) {
  if (text == "conditional") return TrainingMode::conditional;
  if (text == "conditional_missing") return TrainingMode::conditional_missing;
  if (text == "marginal") return TrainingMode::marginal;
  throw ParseError("unknown training mode '" + std::string(text) + "'");
}

transforms::TransformStack build_stack(const Architecture& arch, ad::ParameterSet& params, Rng& rng) {
  transforms::TransformStack stack;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& s = arch.layers[i];
    const std::string prefix = "layer" + std::to_string(i) + "." + std::string(kind_name(s.kind));
    switch (s.kind) {
      case LayerSpec::Kind::affine_coupling:
        stack.push_back(transforms::AffineCoupling::create(params, prefix, arch.dim, s.hidden, s.depth,
                                                           s.parity, s.clamp, rng));
        break;
      case LayerSpec::Kind::linear:
        stack.push_back(
            transforms::ConditionalLinear::create(params, prefix, arch.dim, s.hidden, s.depth, s.rank, rng));
        break;
      case LayerSpec::Kind::rnn_coupling:
        stack.push_back(
            transforms::RnnCoupling::create(params, prefix, arch.dim, s.hidden, s.layers, s.clamp, rng));
        break;
      case LayerSpec::Kind::leaky_relu:
        stack.push_back(transforms::LeakyRelu(s.alpha));
        break;
      case LayerSpec::Kind::reverse:
        stack.push_back(transforms::Reverse{});
        break;
    }
  }
  return stack;
}

likelihoods::Likelihood build_base(const Architecture& arch, ad::ParameterSet& params, Rng& rng) {
  const BaseSpec& b = arch.base;
  if (b.kind == BaseSpec::Kind::gaussian) {
    return likelihoods::GaussianLikelihood::create(params, "base.gaussian", arch.dim, b.hidden,
                                                   b.depth, rng);
  }
  return likelihoods::AutoregressiveGmm::create(params, "base.ar_gmm", arch.dim, b.hidden, b.layers,
                                                b.components, rng);
}

AcflowModel AcflowModel::create(const Architecture& arch, std::uint64_t seed) {
  if (arch.dim == 0) throw std::invalid_argument("model dimension must be positive");
  AcflowModel model;
  model.arch_ = arch;
  Rng rng(seed);
  model.stack_ = build_stack(arch, model.params_, rng);
  model.base_ = build_base(arch, model.params_, rng);
  model.standardizer_ = Standardizer::identity(arch.dim);
  return model;
}

void AcflowModel::set_standardizer(Standardizer s) {
  if (s.dim() != dim()) {
    throw std::invalid_argument("standardizer has " + std::to_string(s.dim()) +
                                " features, model has " + std::to_string(dim()));
  }
  standardizer_ = std::move(s);
}

// ---------------------------------------------------------------- batched core

Var AcflowModel::log_prob(Tape& tape, const Var& x_u, const ContextBatch& ctx) const {
  transforms::FlowOutput out = stack_.forward(tape, x_u, ctx);
  return out.logdet + likelihoods::log_prob(base_, tape, out.value, ctx);
}

Var AcflowModel::best_guess(Tape& tape, const ContextBatch& ctx) const {
  return stack_.inverse(tape, likelihoods::mean(base_, tape, ctx), ctx);
}

BatchTerms AcflowModel::terms(Tape& tape, const Var& x_u, const ContextBatch& ctx,
                              double lambda) const {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
  Var lp = log_prob(tape, x_u, ctx);
  if (lambda == 0.0 || ctx.targets == 0) return {lp, -lp};
  Var err = ad::row_sum(ad::square(best_guess(tape, ctx) - x_u));
  return {lp, err * lambda - lp};
}

Tensor AcflowModel::sample(Tape& tape, const ContextBatch& ctx, std::span<Rng> rngs) const {
  Tensor z = likelihoods::sample(base_, tape, ctx, rngs);
  if (ctx.targets == 0) return z;
  return stack_.inverse(tape, ad::constant(std::move(z)), ctx).value();
}

// ---------------------------------------------------------------- standardization

ConditioningContext AcflowModel::standardize(const ConditioningContext& ctx) const {
  ctx.validate();
  if (ctx.dim() != dim()) {
    throw ShapeError("context has dimension " + std::to_string(ctx.dim()) + ", model has " +
                     std::to_string(dim()));
  }
  ConditioningContext out = ctx;
  std::size_t c = 0;
  for (std::size_t i = 0; i < ctx.dim(); ++i) {
    if (ctx.b[i]) {
      out.observed[c] = standardizer_.forward(i, ctx.observed[c]);
      ++c;
    }
  }
  return out;
}

std::vector<double> AcflowModel::standardize_targets(std::span<const double> x_u,
                                                     const ConditioningContext& ctx) const {
  const auto u = ctx.targets();
  if (x_u.size() != u.size()) {
    throw ShapeError("x_u has " + std::to_string(x_u.size()) + " values, |u| = " +
                     std::to_string(u.size()));
  }
  std::vector<double> out(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) out[j] = standardizer_.forward(u[j], x_u[j]);
  return out;
}

std::vector<double> AcflowModel::unstandardize_targets(std::span<const double> x_u_std,
                                                       const ConditioningContext& ctx) const {
  const auto u = ctx.targets();
  if (x_u_std.size() != u.size()) throw ShapeError("unstandardize_targets: length differs from |u|");
  std::vector<double> out(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) out[j] = standardizer_.backward(u[j], x_u_std[j]);
  return out;
}

// ---------------------------------------------------------------- single example

namespace {

Var row_var(std::span<const double> v) {
  return ad::constant(transforms::rows_tensor(v, 1, v.size()));
}

std::vector<double> row_values(const Tensor& t, std::size_t r) {
  const auto row = t.row(r);
  return {row.begin(), row.end()};
}

}  // namespace

double AcflowModel::cond_log_prob_standardized(std::span<const double> x_u,
                                               const ConditioningContext& ctx) const {
  const ConditioningContext s = standardize(ctx);
  const auto target = standardize_targets(x_u, ctx);
  if (target.empty()) return 0.0;
  Tape tape(params_, false);
  return log_prob(tape, row_var(target), ContextBatch::single(s)).value().item();
}

double AcflowModel::cond_log_prob(std::span<const double> x_u, const ConditioningContext& ctx) const {
  const double lp = cond_log_prob_standardized(x_u, ctx);
  if (x_u.empty()) return lp;
  return lp - standardizer_.log_scale(ctx.target_mask());
}

std::vector<std::vector<double>> AcflowModel::cond_sample(const ConditioningContext& ctx,
                                                          std::size_t n, Rng& rng) const {
  const ConditioningContext s = standardize(ctx);
  const Rng base(rng.engine()());
  std::vector<std::vector<double>> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += chunk_rows) {
    const std::size_t rows = std::min(chunk_rows, n - start);
    const std::vector<ConditioningContext> contexts(rows, s);
    const ContextBatch batch = ContextBatch::build(contexts);
    std::vector<Rng> rngs;
    rngs.reserve(rows);
    for (std::size_t i = 0; i < rows; ++i) rngs.push_back(base.fork(start + i));
    Tape tape(params_, false);
    const Tensor x = sample(tape, batch, rngs);
    for (std::size_t i = 0; i < rows; ++i) out.push_back(unstandardize_targets(row_values(x, i), ctx));
  }
  return out;
}

std::vector<double> AcflowModel::best_guess(const ConditioningContext& ctx) const {
  const ConditioningContext s = standardize(ctx);
  if (ctx.target_count() == 0) return {};
  Tape tape(params_, false);
  const Var x = best_guess(tape, ContextBatch::single(s));
  return unstandardize_targets(row_values(x.value(), 0), ctx);
}

double AcflowModel::loss(std::span<const double> x_u, const ConditioningContext& ctx,
                         double lambda) const {
  const ConditioningContext s = standardize(ctx);
  const auto target = standardize_targets(x_u, ctx);
  Tape tape(params_, false);
  return terms(tape, row_var(target), ContextBatch::single(s), lambda).loss.value().item();
}

double AcflowModel::joint_log_prob(std::span<const double> x) const {
  const ConditioningContext ctx{{}, BitMask::zeros(dim()), BitMask::ones(dim())};
  return cond_log_prob(x, ctx);
}

double AcflowModel::marginal_log_prob(std::span<const double> x_sub, const BitMask& query) const {
  const ConditioningContext ctx{{}, BitMask::zeros(dim()), query};
  return cond_log_prob(x_sub, ctx);
}

std::optional<std::string> AcflowModel::marginal_warning() const {
  if (mode_ == TrainingMode::marginal) return std::nullopt;
  return "model was trained in " + std::string(mode_name(mode_)) +
         " mode; marginal densities are only meaningful for a marginal-mode model";
}

// ---------------------------------------------------------------- grouped batches

std::vector<std::vector<std::size_t>> group_by_target_count(std::span<const Example> rows,
                                                            std::size_t chunk) {
  std::map<std::size_t, std::vector<std::size_t>> by_count;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    by_count[(rows[i].m & ~rows[i].b).count()].push_back(i);
  }
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [count, idx] : by_count) {
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
      const std::size_t end = std::min(idx.size(), start + chunk);
      groups.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                          idx.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return groups;
}

namespace {

struct Group {
  std::vector<ConditioningContext> raw;
  std::vector<ConditioningContext> standardized;
};

Group contexts_for(const AcflowModel& model, std::span<const Example> rows,
                   const std::vector<std::size_t>& idx) {
  Group g;
  for (std::size_t i : idx) {
    g.raw.push_back(rows[i].context());
    g.standardized.push_back(model.standardize(g.raw.back()));
  }
  return g;
}

}  // namespace

std::vector<double> AcflowModel::cond_log_prob(std::span<const Example> rows) const {
  std::vector<double> out(rows.size(), 0.0);
  for (const auto& idx : group_by_target_count(rows, chunk_rows)) {
    const Group g = contexts_for(*this, rows, idx);
    const ContextBatch batch = ContextBatch::build(g.standardized);
    if (batch.targets == 0) continue;
    Tensor x = Tensor::matrix(idx.size(), batch.targets);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto t = standardize_targets(rows[idx[r]].targets(), g.raw[r]);
      std::copy(t.begin(), t.end(), x.row(r).begin());
    }
    Tape tape(params_, false);
    const Tensor lp = log_prob(tape, ad::constant(std::move(x)), batch).value();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out[idx[r]] = lp[r] - standardizer_.log_scale(g.raw[r].target_mask());
    }
  }
  return out;
}

std::vector<std::vector<double>> AcflowModel::best_guess(std::span<const Example> rows) const {
  std::vector<std::vector<double>> out(rows.size());
  for (const auto& idx : group_by_target_count(rows, chunk_rows)) {
    const Group g = contexts_for(*this, rows, idx);
    const ContextBatch batch = ContextBatch::build(g.standardized);
    if (batch.targets == 0) continue;
    Tape tape(params_, false);
    const Tensor x = best_guess(tape, batch).value();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out[idx[r]] = unstandardize_targets(row_values(x, r), g.raw[r]);
    }
  }
  return out;
}

std::vector<std::vector<double>> AcflowModel::sample(std::span<const Example> rows, Rng& rng) const {
  const Rng base(rng.engine()());
  std::vector<std::vector<double>> out(rows.size());
  for (const auto& idx : group_by_target_count(rows, chunk_rows)) {
    const Group g = contexts_for(*this, rows, idx);
    const ContextBatch batch = ContextBatch::build(g.standardized);
    if (batch.targets == 0) continue;
    std::vector<Rng> rngs;
    rngs.reserve(idx.size());
    for (std::size_t i : idx) rngs.push_back(base.fork(i));
    Tape tape(params_, false);
    const Tensor x = sample(tape, batch, rngs);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out[idx[r]] = unstandardize_targets(row_values(x, r), g.raw[r]);
    }
  }
  return out;
}

std::vector<std::vector<double>> AcflowModel::gibbs_chain(std::span<const double> x_init,
                                                          std::span<const BitMask> blocks,
                                                          std::size_t sweeps, Rng& rng) const {
  if (x_init.size() != dim()) throw ShapeError("gibbs_chain: initial row has wrong length");
  if (blocks.empty()) throw std::invalid_argument("gibbs_chain: no blocks");
  BitMask m = BitMask::zeros(dim());
  for (const BitMask& block : blocks) {
    if (block.size() != dim()) throw std::invalid_argument("gibbs_chain: block length differs from d");
    if (block.none()) throw std::invalid_argument("gibbs_chain: empty block");
    if ((block & m).count() != 0) throw std::invalid_argument("gibbs_chain: blocks overlap");
    m = m | block;
  }
  std::vector<double> x(x_init.begin(), x_init.end());
  std::vector<std::vector<double>> chain;
  chain.reserve(sweeps);
  for (std::size_t s = 0; s < sweeps; ++s) {
    for (const BitMask& block : blocks) {
      const ConditioningContext ctx = ConditioningContext::from_row(x, m & ~block, m);
      const auto draw = cond_sample(ctx, 1, rng).front();
      const auto pos = block.indices();
      for (std::size_t j = 0; j < pos.size(); ++j) x[pos[j]] = draw[j];
    }
    chain.push_back(x);
  }
  return chain;
}

}  // namespace acflow
