#pragma once

#include <span>
#include <string>
#include <variant>
#include <vector>

#include "acflow/diffcore/autodiff.hpp"
#include "acflow/diffcore/layers.hpp"
#include "acflow/diffcore/parameters.hpp"
#include "acflow/rng.hpp"
#include "acflow/transforms.hpp"

namespace acflow::likelihoods {

using transforms::ContextBatch;

// One-dimensional Gaussian mixture.  weights come from softmax(logits).
struct GmmParams {
  std::vector<double> logits;
  std::vector<double> locs;
  std::vector<double> scales;

  std::size_t components() const noexcept { return locs.size(); }
  std::vector<double> weights() const;
};

// log sum_k w_k N(z; mu_k, sigma_k).  Throws DomainError when some sigma_k <= 0
// and std::invalid_argument when the three vectors differ in length.
double gmm_log_prob(double z, const GmmParams& p);
double gmm_mean(const GmmParams& p);
double gmm_variance(const GmmParams& p);
double gmm_sample(const GmmParams& p, Rng& rng);

// Batched version over rows: z (R x 1), logits/locs/scales (R x K) -> R x 1.
ad::Var gmm_log_prob(const ad::Var& z, const ad::Var& logits, const ad::Var& locs,
                     const ad::Var& scales);

constexpr double min_scale = 1e-6;

// Diagonal Gaussian whose per-dimension mean and log-scale come from a
// network over the conditioning features.  A zeroed network gives N(0, I).
class GaussianLikelihood {
 public:
  static GaussianLikelihood create(ad::ParameterSet& params, const std::string& prefix,
                                   std::size_t dim, std::size_t hidden, std::size_t depth, Rng& rng);

  ad::Var log_prob(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;
  ad::Var mean(ad::Tape& tape, const ContextBatch& ctx) const;
  ad::Tensor sample(ad::Tape& tape, const ContextBatch& ctx, std::span<Rng> rngs) const;

  const ad::Mlp& net() const noexcept { return net_; }

 private:
  struct Moments {
    ad::Var mean;       // R x |u|
    ad::Var log_scale;  // R x |u|
  };
  Moments moments(ad::Tape& tape, const ContextBatch& ctx) const;

  ad::Mlp net_;
  std::size_t dim_ = 0;
};

// Autoregressive mixture: a GRU reads (z_u^{i-1}, phi(x_o; b), b, m) with
// z_u^0 = -1, and a head maps its output to K (logit, location, raw scale)
// triples; sigma = softplus(raw) + 1e-6.
class AutoregressiveGmm {
 public:
  static AutoregressiveGmm create(ad::ParameterSet& params, const std::string& prefix,
                                  std::size_t dim, std::size_t hidden, std::size_t layers,
                                  std::size_t components, Rng& rng);

  // Teacher-forced sum over steps of log GMM(z_u^i | theta(o^i)); R x 1.
  ad::Var log_prob(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;
  // Same pass, one column per step (R x |u|).
  ad::Var step_log_probs(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;
  // Greedy mean propagation: each step feeds the previous conditional mean.
  ad::Var mean(ad::Tape& tape, const ContextBatch& ctx) const;
  // Ancestral sampling; row r draws from rngs[r].
  ad::Tensor sample(ad::Tape& tape, const ContextBatch& ctx, std::span<Rng> rngs) const;

  // Mixture parameters of every step for one example, teacher-forced on z_u.
  std::vector<GmmParams> conditionals(const ad::ParameterSet& params, std::span<const double> z_u,
                                      const ConditioningContext& ctx) const;

  std::size_t components() const noexcept { return components_; }
  const ad::GruStack& rnn() const noexcept { return rnn_; }
  const ad::Mlp& head() const noexcept { return head_; }

 private:
  struct Step {
    ad::Var logits;
    ad::Var locs;
    ad::Var scales;
  };
  Step step(ad::Tape& tape, ad::GruStack::Run& run, const ad::Var& prev) const;

  ad::GruStack rnn_;
  ad::Mlp head_;
  std::size_t components_ = 0;
};

using Likelihood = std::variant<GaussianLikelihood, AutoregressiveGmm>;

std::string kind_name(const Likelihood& l);

// Dispatch helpers over the variant.  |u| = 0 yields zero log-probabilities
// and empty means/samples.
ad::Var log_prob(const Likelihood& l, ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx);
ad::Var mean(const Likelihood& l, ad::Tape& tape, const ContextBatch& ctx);
ad::Tensor sample(const Likelihood& l, ad::Tape& tape, const ContextBatch& ctx, std::span<Rng> rngs);

}  // namespace acflow::likelihoods
