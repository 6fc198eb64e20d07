#pragma once

#include <span>
#include <string>
#include <variant>
#include <vector>

#include "acflow/diffcore/autodiff.hpp"
#include "acflow/diffcore/layers.hpp"
#include "acflow/diffcore/parameters.hpp"
#include "acflow/masking.hpp"
#include "acflow/rng.hpp"

namespace acflow::transforms {

// A batch of conditioning contexts that share the target count |u|, in the
// tensor layout every transform and likelihood consumes.
struct ContextBatch {
  std::size_t dim = 0;
  std::size_t rows = 0;
  std::size_t targets = 0;
  ad::Tensor observed;       // R x d, phi(x_o; b)
  ad::Tensor observed_mask;  // R x d, b
  ad::Tensor present_mask;   // R x d, m
  ad::Var features;          // constant R x 3d: [phi(x_o; b), b, m]
  ad::RowIndex target_index; // R x |u|, target positions ascending

  // Throws std::invalid_argument if the contexts disagree on d or |u|.
  static ContextBatch build(std::span<const ConditioningContext> contexts);
  static ContextBatch single(const ConditioningContext& ctx) { return build({&ctx, 1}); }
};

// Width of the conditioning feature vector for dimension d.
constexpr std::size_t feature_width(std::size_t dim) { return 3 * dim; }

// Output of a batched transform: transformed values (R x |u|) and
// log |det J| per row (R x 1).
struct FlowOutput {
  ad::Var value;
  ad::Var logdet;
};

// Single-example result.
struct TransformResult {
  std::vector<double> output;
  double logdet = 0.0;
};

// Conditional affine coupling with an even-odd split over the target
// positions.  Group A (kept) is positions parity, parity+2, ... within u.
class AffineCoupling {
 public:
  static AffineCoupling create(ad::ParameterSet& params, const std::string& prefix,
                               std::size_t dim, std::size_t hidden, std::size_t depth,
                               std::size_t parity, double clamp, Rng& rng);

  FlowOutput forward(ad::Tape& tape, const ad::Var& x, const ContextBatch& ctx) const;
  ad::Var inverse(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;

  std::size_t parity() const noexcept { return parity_; }
  double clamp() const noexcept { return clamp_; }

 private:
  struct ShiftScale {
    ad::Var log_scale;  // zero on group A
    ad::Var shift;      // zero on group A
  };
  ad::Tensor kept_mask(const ContextBatch& ctx) const;
  ShiftScale shift_scale(ad::Tape& tape, const ad::Var& kept, const ad::Tensor& kept_mask,
                         const ContextBatch& ctx) const;

  ad::Mlp trunk_;
  ad::Dense scale_head_;
  ad::Dense shift_head_;
  std::size_t dim_ = 0;
  std::size_t parity_ = 0;
  double clamp_ = 5.0;
};

// z_u = W x_u + t with W = (W_f + base)[u, u] and t = t_f[u], where W_f and
// t_f come from a network over the conditioning features.  rank 0 means W_f
// is produced directly; rank r > 0 means W_f = U V with U (d x r), V (r x d).
class ConditionalLinear {
 public:
  static ConditionalLinear create(ad::ParameterSet& params, const std::string& prefix,
                                  std::size_t dim, std::size_t hidden, std::size_t depth,
                                  std::size_t rank, Rng& rng);

  FlowOutput forward(ad::Tape& tape, const ad::Var& x, const ContextBatch& ctx) const;
  ad::Var inverse(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;

  std::size_t rank() const noexcept { return rank_; }
  ad::ParamId base_matrix() const noexcept { return base_; }

 private:
  struct Affine {
    ad::Var matrix;  // R x |u|^2
    ad::Var shift;   // R x |u|
  };
  Affine assemble(ad::Tape& tape, const ContextBatch& ctx) const;

  ad::Mlp net_;
  ad::ParamId base_;
  std::size_t dim_ = 0;
  std::size_t rank_ = 0;
};

// Sequential coupling: a GRU reads (x_u^{i-1}, phi(x_o; b), b, m) with
// x_u^0 = -1 and h^0 = 0; its output gives shift and log-scale for x_u^i.
class RnnCoupling {
 public:
  static RnnCoupling create(ad::ParameterSet& params, const std::string& prefix, std::size_t dim,
                            std::size_t hidden, std::size_t layers, double clamp, Rng& rng);

  FlowOutput forward(ad::Tape& tape, const ad::Var& x, const ContextBatch& ctx) const;
  ad::Var inverse(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;

  double clamp() const noexcept { return clamp_; }

 private:
  ad::GruStack rnn_;
  ad::Dense head_;  // -> (shift, raw log-scale)
  double clamp_ = 5.0;
};

class LeakyRelu {
 public:
  explicit LeakyRelu(double alpha = 0.01);

  FlowOutput forward(ad::Tape& tape, const ad::Var& x, const ContextBatch& ctx) const;
  ad::Var inverse(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;

  double alpha() const noexcept { return alpha_; }

 private:
  double alpha_;
};

class Reverse {
 public:
  FlowOutput forward(ad::Tape& tape, const ad::Var& x, const ContextBatch& ctx) const;
  ad::Var inverse(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;
};

using Transform = std::variant<AffineCoupling, ConditionalLinear, RnnCoupling, LeakyRelu, Reverse>;

std::string kind_name(const Transform& t);

// Ordered composition.  forward applies layers first to last and sums their
// log-determinants; inverse applies the inverses last to first.
// NumericalError raised inside a layer is re-raised tagged with its index.
class TransformStack {
 public:
  TransformStack() = default;
  explicit TransformStack(std::vector<Transform> layers) : layers_(std::move(layers)) {}

  void push_back(Transform t) { layers_.push_back(std::move(t)); }
  std::size_t size() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }
  const std::vector<Transform>& layers() const noexcept { return layers_; }

  FlowOutput forward(ad::Tape& tape, const ad::Var& x, const ContextBatch& ctx) const;
  ad::Var inverse(ad::Tape& tape, const ad::Var& z, const ContextBatch& ctx) const;

 private:
  std::vector<Transform> layers_;
};

// Single-example wrappers, evaluated without gradient tracking.
TransformResult forward(const Transform& t, const ad::ParameterSet& params,
                        std::span<const double> x_u, const ConditioningContext& ctx);
std::vector<double> inverse(const Transform& t, const ad::ParameterSet& params,
                            std::span<const double> z_u, const ConditioningContext& ctx);
TransformResult forward(const TransformStack& stack, const ad::ParameterSet& params,
                        std::span<const double> x_u, const ConditioningContext& ctx);
std::vector<double> inverse(const TransformStack& stack, const ad::ParameterSet& params,
                            std::span<const double> z_u, const ConditioningContext& ctx);

// Row-vector helpers shared with the likelihood and model code.
ad::Var row_constant(std::span<const double> values, std::size_t rows);
ad::Tensor rows_tensor(std::span<const double> values, std::size_t rows, std::size_t cols);

}  // namespace acflow::transforms
