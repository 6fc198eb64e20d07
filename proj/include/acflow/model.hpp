#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "acflow/architecture.hpp"
#include "acflow/diffcore/parameters.hpp"
#include "acflow/likelihoods.hpp"
#include "acflow/masking.hpp"
#include "acflow/rng.hpp"
#include "acflow/standardizer.hpp"
#include "acflow/transforms.hpp"

namespace acflow {

enum class TrainingMode { conditional, conditional_missing, marginal };

std::string_view mode_name(TrainingMode mode);
TrainingMode parse_mode(std::string_view text);

// A full-length row with its observed mask b and non-missing mask m.  Values
// at positions with m_i = 0 are never read.
struct Example {
  std::vector<double> x;
  BitMask b;
  BitMask m;

  ConditioningContext context() const { return ConditioningContext::from_row(x, b, m); }
  std::vector<double> targets() const { return masking::split_missing(x, b, m).targets; }
};

// Per-row outputs of one batched pass in standardized space.
struct BatchTerms {
  ad::Var log_prob;  // R x 1
  ad::Var loss;      // R x 1: -log_prob + lambda * |best_guess - x_u|^2
};

// Conditional flow p(x_u | x_o, b, m): a transform stack followed by a
// latent likelihood, applied to standardized features.  Public methods take
// and return raw-space values; log-densities include the -sum log std
// correction for the target dimensions unless noted otherwise.
class AcflowModel {
 public:
  AcflowModel() = default;
  static AcflowModel create(const Architecture& arch, std::uint64_t seed);

  const Architecture& architecture() const noexcept { return arch_; }
  std::size_t dim() const noexcept { return arch_.dim; }
  ad::ParameterSet& parameters() noexcept { return params_; }
  const ad::ParameterSet& parameters() const noexcept { return params_; }
  const transforms::TransformStack& stack() const noexcept { return stack_; }
  const likelihoods::Likelihood& base() const noexcept { return base_; }

  const Standardizer& standardizer() const noexcept { return standardizer_; }
  void set_standardizer(Standardizer s);

  TrainingMode mode() const noexcept { return mode_; }
  void set_mode(TrainingMode mode) noexcept { mode_ = mode; }

  // Standardized-space core shared by training and evaluation.  Every row of
  // ctx must have the same |u|; x_u is R x |u|.
  ad::Var log_prob(ad::Tape& tape, const ad::Var& x_u, const transforms::ContextBatch& ctx) const;
  BatchTerms terms(ad::Tape& tape, const ad::Var& x_u, const transforms::ContextBatch& ctx,
                   double lambda) const;
  ad::Var best_guess(ad::Tape& tape, const transforms::ContextBatch& ctx) const;
  ad::Tensor sample(ad::Tape& tape, const transforms::ContextBatch& ctx, std::span<Rng> rngs) const;

  // Maps raw examples into standardized contexts and targets.
  ConditioningContext standardize(const ConditioningContext& ctx) const;
  std::vector<double> standardize_targets(std::span<const double> x_u,
                                          const ConditioningContext& ctx) const;
  std::vector<double> unstandardize_targets(std::span<const double> x_u_std,
                                            const ConditioningContext& ctx) const;

  // log p(x_u | x_o, b, m) in raw units.  |u| = 0 gives 0.
  double cond_log_prob(std::span<const double> x_u, const ConditioningContext& ctx) const;
  // Density of the standardized targets, from raw inputs (no -sum log std term).
  double cond_log_prob_standardized(std::span<const double> x_u,
                                    const ConditioningContext& ctx) const;
  // n independent draws of x_u.  Consumes one value from rng.
  std::vector<std::vector<double>> cond_sample(const ConditioningContext& ctx, std::size_t n,
                                               Rng& rng) const;
  // q^{-1}(z_bar): the flow inverted at the latent mean.
  std::vector<double> best_guess(const ConditioningContext& ctx) const;
  // Training objective for one example, in standardized units.
  double loss(std::span<const double> x_u, const ConditioningContext& ctx, double lambda) const;

  // log p(x) with b = 0 and m = 1.
  double joint_log_prob(std::span<const double> x) const;
  // log p(x_sub) of the queried dimensions: b = 0, m = query.  Meaningful for
  // a model trained in marginal mode; see marginal_warning().
  double marginal_log_prob(std::span<const double> x_sub, const BitMask& query) const;
  std::optional<std::string> marginal_warning() const;

  // Batched forms over examples with mixed |u|.  Rows are grouped by |u|
  // internally; results follow input order.
  std::vector<double> cond_log_prob(std::span<const Example> rows) const;
  std::vector<std::vector<double>> best_guess(std::span<const Example> rows) const;
  // One draw per example; example i uses stream i of a generator seeded from rng.
  std::vector<std::vector<double>> sample(std::span<const Example> rows, Rng& rng) const;

  // Block Gibbs sampling.  Each sweep resamples every block B in turn from
  // p(x_B | x_{m - B}) and records the full row.  Positions outside the union
  // of blocks are held at x_init.  Throws std::invalid_argument when blocks
  // overlap or are empty.
  std::vector<std::vector<double>> gibbs_chain(std::span<const double> x_init,
                                               std::span<const BitMask> blocks, std::size_t sweeps,
                                               Rng& rng) const;

  // Rows per batched pass in the grouped helpers.
  static constexpr std::size_t chunk_rows = 512;

 private:
  Architecture arch_;
  ad::ParameterSet params_;
  transforms::TransformStack stack_;
  likelihoods::Likelihood base_;
  Standardizer standardizer_;
  TrainingMode mode_ = TrainingMode::conditional;
};

// Builds the layer list and base of an architecture, registering parameters
// in order.  Exposed for tests that assemble stacks directly.
transforms::TransformStack build_stack(const Architecture& arch, ad::ParameterSet& params, Rng& rng);
likelihoods::Likelihood build_base(const Architecture& arch, ad::ParameterSet& params, Rng& rng);

// Groups row indices by a key, keeping first-seen order within each group.
std::vector<std::vector<std::size_t>> group_by_target_count(std::span<const Example> rows,
                                                            std::size_t chunk);

}  // namespace acflow
