#pragma once

#include <span>
#include <vector>

#include "acflow/diffcore/tensor.hpp"
#include "acflow/masking.hpp"

namespace acflow {

// Per-feature z-scoring.  Statistics use the population standard deviation
// over the non-missing entries of the rows they are fitted on.
class Standardizer {
 public:
  Standardizer() = default;
  Standardizer(std::vector<double> mean, std::vector<double> std);
  static Standardizer identity(std::size_t dim);

  // Throws std::invalid_argument when a feature has no observed entry or
  // zero spread among the selected rows.
  static Standardizer fit(const ad::Tensor& x, std::span<const BitMask> present,
                          std::span<const std::size_t> rows);

  std::size_t dim() const noexcept { return mean_.size(); }
  const std::vector<double>& mean() const noexcept { return mean_; }
  const std::vector<double>& std() const noexcept { return std_; }

  double forward(std::size_t feature, double v) const { return (v - mean_[feature]) / std_[feature]; }
  double backward(std::size_t feature, double v) const { return v * std_[feature] + mean_[feature]; }

  // Sum of log std over the features flagged in mask.
  double log_scale(const BitMask& mask) const;

 private:
  std::vector<double> mean_;
  std::vector<double> std_;
};

}  // namespace acflow
