#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "acflow/diffcore/tensor.hpp"
#include "acflow/likelihoods.hpp"
#include "acflow/masking.hpp"
#include "acflow/model.hpp"
#include "acflow/rng.hpp"
#include "acflow/standardizer.hpp"

namespace acflow::data {

using masking::MaskDistribution;

struct Dataset {
  ad::Tensor x;                  // N x d; cells with present = 0 hold 0
  std::vector<BitMask> present;  // per-row non-missing mask m
  std::vector<std::string> names;
  std::vector<std::string> text;  // N x d trimmed source cells when read from CSV, else empty
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;

  std::size_t rows() const noexcept { return present.size(); }
  std::size_t dim() const noexcept { return names.size(); }
  std::span<const double> row(std::size_t i) const { return x.row(i); }
};

struct SplitFractions {
  double valid = 0.1;
  double test = 0.1;
};

// Shuffles row indices with the seed and cuts them into train/valid/test.
void assign_splits(Dataset& ds, SplitFractions fractions, std::uint64_t seed);

// Header row required; empty cells and "NA" are missing.  Throws ParseError
// naming the 1-based line and column of a bad cell, and std::invalid_argument
// for a column with no value at all unless allow_empty_columns is set.
Dataset read_csv(std::istream& in, SplitFractions fractions = {}, std::uint64_t seed = 0,
                 bool allow_empty_columns = false);
Dataset load_csv(const std::filesystem::path& path, SplitFractions fractions = {},
                 std::uint64_t seed = 0, bool allow_empty_columns = false);
// Missing cells are written as NA; values use the shortest round-trip form.
void write_csv(std::ostream& out, const std::vector<std::string>& names, const ad::Tensor& x,
               std::span<const BitMask> present = {});
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& names,
               const ad::Tensor& x, std::span<const BitMask> present = {});
std::vector<std::string> default_names(std::size_t d);

// Standardizer fitted on the training split.
Standardizer fit_standardizer(const Dataset& ds);

// Zeroes each present entry with probability p.  X is left untouched so the
// hidden values remain available as ground truth.  p must lie in [0, 1).
Dataset inject_mcar(const Dataset& ds, double p, std::uint64_t seed);

// ---------------------------------------------------------------- mixtures

// Gaussian mixture with full covariances; the exact-density oracle behind
// every synthetic generator.
class GaussianMixture {
 public:
  struct Component {
    double weight;
    std::vector<double> mean;
    std::vector<double> cov;  // d x d row-major, symmetric positive definite
  };

  GaussianMixture() = default;
  // Weights are normalized.  Throws std::invalid_argument on a covariance
  // that is not positive definite.
  explicit GaussianMixture(std::vector<Component> components);

  std::size_t dim() const noexcept { return dim_; }
  const std::vector<Component>& components() const noexcept { return components_; }

  double log_density(std::span<const double> x) const;
  std::vector<double> sample(Rng& rng) const;
  std::vector<double> mean() const;
  std::vector<double> covariance() const;

  // Distribution of x[keep] (another mixture).
  GaussianMixture marginal(const BitMask& keep) const;
  // Distribution of x[~b] given x[b] = x_o.
  GaussianMixture conditional(const BitMask& b, std::span<const double> x_o) const;
  // A 1-dim mixture as likelihoods::GmmParams.
  likelihoods::GmmParams to_gmm() const;

  // Density of x[u] given x[b] at the target values, in nats.
  double conditional_log_density(std::span<const double> x, const BitMask& b) const;

 private:
  struct Cached {
    std::vector<double> precision;
    double log_norm;  // log weight - 0.5 log det(2 pi Sigma)
  };
  std::vector<Component> components_;
  std::vector<Cached> cache_;
  std::size_t dim_ = 0;
};

enum class SyntheticKind { gaussian_mixture_grid, two_moons_like, checkerboard, eight_gaussians };

SyntheticKind parse_synthetic(std::string_view name);
std::string_view synthetic_name(SyntheticKind kind);

// The closed-form mixture behind each 2-D generator.
GaussianMixture synthetic_density(SyntheticKind kind);

struct SyntheticSet {
  Dataset data;
  GaussianMixture density;
};

SyntheticSet gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed,
                           SplitFractions fractions = {});
// n draws from an arbitrary mixture as a complete dataset.
Dataset sample_dataset(const GaussianMixture& density, std::size_t n, std::uint64_t seed,
                       SplitFractions fractions = {});

// Joint density of a 2-D mixture on an n x n grid over [lo, hi]^2 as CSV
// rows (x, y, density).
void export_grid(std::ostream& out, const GaussianMixture& density, std::size_t n, double lo,
                 double hi);

// ---------------------------------------------------------------- metrics

struct NllReport {
  double mean = 0.0;               // raw units
  double std = 0.0;                // population std across repetitions
  double standardized_mean = 0.0;  // standardized units
  double standardized_std = 0.0;
  std::vector<double> repetitions;  // raw per-repetition averages
};

// For each row in `rows`, draws n_masks observed masks b ~ dist inside the
// row's non-missing mask and averages -log p(x_u | x_o, b, m).  Mask draws
// for repetition k and row i come from stream (k, i) of the seed.
NllReport eval_nll(const AcflowModel& model, const Dataset& ds, std::span<const std::size_t> rows,
                   std::size_t n_masks, const MaskDistribution& dist, std::uint64_t seed);

// The masks eval_nll uses, exposed so other evaluations can reuse them.
BitMask eval_mask(const MaskDistribution& dist, const BitMask& m, std::uint64_t seed,
                  std::size_t repetition, std::size_t row);

// Per-feature RMSE over imputed entries divided by std_f, averaged over the
// features that have at least one imputed entry and positive std.  Features
// with std 0 are skipped and named in `skipped` when it is given.
double eval_nrmse(const ad::Tensor& imputed, const ad::Tensor& truth,
                  std::span<const BitMask> imputed_mask, std::span<const double> std,
                  std::vector<std::size_t>* skipped = nullptr);
// Average of eval_nrmse over several imputation draws.
double eval_nrmse(std::span<const ad::Tensor> draws, const ad::Tensor& truth,
                  std::span<const BitMask> imputed_mask, std::span<const double> std);

}  // namespace acflow::data
