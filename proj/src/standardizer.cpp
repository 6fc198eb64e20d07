#include "acflow/standardizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace acflow {

Standardizer::Standardizer(std::vector<double> mean, std::vector<double> std)
    : mean_(std::move(mean)), std_(std::move(std)) {
  if (mean_.size() != std_.size()) throw std::invalid_argument("Standardizer: mean/std lengths differ");
  for (std::size_t f = 0; f < std_.size(); ++f) {
    if (!(std_[f] > 0.0) || !std::isfinite(std_[f]) || !std::isfinite(mean_[f])) {
      throw std::invalid_argument("Standardizer: feature " + std::to_string(f) +
                                  " has non-positive or non-finite statistics");
    }
  }
}

Standardizer Standardizer::identity(std::size_t dim) {
  return Standardizer(std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0));
}

Standardizer Standardizer::fit(const ad::Tensor& x, std::span<const BitMask> present,
                               std::span<const std::size_t> rows) {
  const std::size_t d = x.cols();
  std::vector<double> mean(d, 0.0);
  std::vector<double> std(d, 0.0);
  for (std::size_t f = 0; f < d; ++f) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t r : rows) {
      if (present[r][f]) {
        sum += x(r, f);
        ++n;
      }
    }
    if (n == 0) {
      throw std::invalid_argument("feature " + std::to_string(f) + " has no observed training value");
    }
    mean[f] = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r : rows) {
      if (present[r][f]) ss += (x(r, f) - mean[f]) * (x(r, f) - mean[f]);
    }
    std[f] = std::sqrt(ss / static_cast<double>(n));
    if (!(std[f] > 0.0)) {
      throw std::invalid_argument("feature " + std::to_string(f) +
                                  " has zero standard deviation on the training split");
    }
  }
  return Standardizer(std::move(mean), std::move(std));
}

double Standardizer::log_scale(const BitMask& mask) const {
  double s = 0.0;
  for (std::size_t f = 0; f < mask.size(); ++f) {
    if (mask[f]) s += std::log(std_[f]);
  }
  return s;
}

}  // namespace acflow
