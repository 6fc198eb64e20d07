#include "acflow/data.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "acflow/error.hpp"

namespace acflow::data {

// ---------------------------------------------------------------- splits and CSV

void assign_splits(Dataset& ds, SplitFractions fractions, std::uint64_t seed) {
  if (fractions.valid < 0.0 || fractions.test < 0.0 || fractions.valid + fractions.test >= 1.0) {
    throw std::invalid_argument("split fractions must be non-negative and leave a training split");
  }
  std::vector<std::size_t> order(ds.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const auto n = static_cast<double>(order.size());
  const auto n_valid = static_cast<std::size_t>(std::floor(fractions.valid * n));
  const auto n_test = static_cast<std::size_t>(std::floor(fractions.test * n));
  ds.valid.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_valid));
  ds.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_valid),
                 order.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test));
  ds.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test), order.end());
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.valid.begin(), ds.valid.end());
  std::sort(ds.test.begin(), ds.test.end());
}

namespace {

// Splits one CSV record; handles double-quoted fields with "" escapes.
std::vector<std::string> split_record(const std::string& line, std::size_t line_no) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty() && !was_quoted) {
      quoted = true;
      was_quoted = true;
    } else if (c == ',') {
      cells.push_back(cur);
      cur.clear();
      was_quoted = false;
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw ParseError("line " + std::to_string(line_no) + ": unterminated quote");
  cells.push_back(cur);
  return cells;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t");
  return s.substr(first, last - first + 1);
}

}  // namespace

Dataset read_csv(std::istream& in, SplitFractions fractions, std::uint64_t seed,
                 bool allow_empty_columns) {
  std::string line;
  std::size_t line_no = 0;
  Dataset ds;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) break;
  }
  if (trim(line).empty()) throw ParseError("CSV input has no header row");
  for (const auto& name : split_record(line, line_no)) ds.names.push_back(trim(name));
  const std::size_t d = ds.names.size();

  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_record(line, line_no);
    if (cells.size() != d) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(d) +
                       " columns, found " + std::to_string(cells.size()));
    }
    BitMask present(d);
    for (std::size_t c = 0; c < d; ++c) {
      std::string cell = trim(cells[c]);
      ds.text.push_back(cell);
      if (cell.empty() || cell == "NA") {
        values.push_back(0.0);
        continue;
      }
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw ParseError("line " + std::to_string(line_no) + ", column " + std::to_string(c + 1) +
                         " ('" + ds.names[c] + "'): cannot parse '" + cell + "' as a number");
      }
      values.push_back(v);
      present.set(c, true);
    }
    ds.present.push_back(std::move(present));
  }
  ds.x = ad::Tensor(ad::Shape{ds.present.size(), d}, std::move(values));
  for (std::size_t c = 0; c < d && !allow_empty_columns; ++c) {
    const bool any = std::any_of(ds.present.begin(), ds.present.end(),
                                 [c](const BitMask& m) { return m[c]; });
    if (!any) throw std::invalid_argument("column '" + ds.names[c] + "' has no values");
  }
  assign_splits(ds, fractions, seed);
  return ds;
}

Dataset load_csv(const std::filesystem::path& path, SplitFractions fractions, std::uint64_t seed,
                 bool allow_empty_columns) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return read_csv(in, fractions, seed, allow_empty_columns);
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

void write_csv(std::ostream& out, const std::vector<std::string>& names, const ad::Tensor& x,
               std::span<const BitMask> present) {
  if (names.size() != x.cols()) throw ShapeError("write_csv: header width differs from data");
  for (std::size_t c = 0; c < names.size(); ++c) out << (c ? "," : "") << names[c];
  out << '\n';
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (c) out << ',';
      if (!present.empty() && !present[r][c]) {
        out << "NA";
      } else {
        out << format_double(x(r, c));
      }
    }
    out << '\n';
  }
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& names,
               const ad::Tensor& x, std::span<const BitMask> present) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  write_csv(out, names, x, present);
}

std::vector<std::string> default_names(std::size_t d) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < d; ++i) names.push_back("x" + std::to_string(i + 1));
  return names;
}

Standardizer fit_standardizer(const Dataset& ds) {
  return Standardizer::fit(ds.x, ds.present, ds.train);
}

Dataset inject_mcar(const Dataset& ds, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("MCAR rate must lie in [0, 1)");
  Dataset out = ds;
  const Rng base(seed);
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    Rng rng = base.fork(r);
    for (std::size_t c = 0; c < ds.dim(); ++c) {
      const bool drop = rng.bernoulli(p);
      if (drop) out.present[r].set(c, false);
    }
  }
  return out;
}

// ---------------------------------------------------------------- mixtures

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat to_mat(std::span<const double> v, std::size_t d) {
  Mat m(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) m(i, j) = v[i * d + j];
  }
  return m;
}

std::vector<double> from_mat(const Mat& m) {
  std::vector<double> v(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[i * m.cols() + j] = m(i, j);
  }
  return v;
}

Vec to_vec(std::span<const double> v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

double log_sum_exp(const std::vector<double>& terms) {
  const double m = *std::max_element(terms.begin(), terms.end());
  if (std::isinf(m)) return m;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

const double log_two_pi = std::log(2.0 * std::numbers::pi);

}  // namespace

GaussianMixture::GaussianMixture(std::vector<Component> components)
    : components_(std::move(components)) {
  if (components_.empty()) throw std::invalid_argument("GaussianMixture: no components");
  dim_ = components_.front().mean.size();
  double total = 0.0;
  for (const auto& c : components_) {
    if (c.mean.size() != dim_ || c.cov.size() != dim_ * dim_) {
      throw std::invalid_argument("GaussianMixture: component shapes disagree");
    }
    if (!(c.weight > 0.0)) throw std::invalid_argument("GaussianMixture: weights must be positive");
    total += c.weight;
  }
  for (auto& c : components_) {
    c.weight /= total;
    const Mat cov = to_mat(c.cov, dim_);
    Eigen::LLT<Mat> llt(cov);
    if (llt.info() != Eigen::Success) {
      throw std::invalid_argument("GaussianMixture: covariance not positive definite");
    }
    const Mat L = llt.matrixL();
    double logdet = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) logdet += 2.0 * std::log(L(i, i));
    const Mat precision = llt.solve(Mat::Identity(dim_, dim_));
    cache_.push_back({from_mat(precision),
                      std::log(c.weight) - 0.5 * (static_cast<double>(dim_) * log_two_pi + logdet)});
  }
}

double GaussianMixture::log_density(std::span<const double> x) const {
  if (x.size() != dim_) throw ShapeError("GaussianMixture: point has wrong dimension");
  if (dim_ == 0) return 0.0;
  std::vector<double> terms;
  terms.reserve(components_.size());
  for (std::size_t k = 0; k < components_.size(); ++k) {
    const Vec diff = to_vec(x) - to_vec(components_[k].mean);
    const Mat precision = to_mat(cache_[k].precision, dim_);
    terms.push_back(cache_[k].log_norm - 0.5 * diff.dot(precision * diff));
  }
  return log_sum_exp(terms);
}

std::vector<double> GaussianMixture::sample(Rng& rng) const {
  const double u = rng.uniform();
  std::size_t k = components_.size() - 1;
  double acc = 0.0;
  for (std::size_t i = 0; i < components_.size(); ++i) {
    acc += components_[i].weight;
    if (u < acc) {
      k = i;
      break;
    }
  }
  Vec eps(dim_);
  for (std::size_t i = 0; i < dim_; ++i) eps[i] = rng.normal();
  const Mat L = Eigen::LLT<Mat>(to_mat(components_[k].cov, dim_)).matrixL();
  const Vec x = to_vec(components_[k].mean) + L * eps;
  return {x.data(), x.data() + x.size()};
}

std::vector<double> GaussianMixture::mean() const {
  Vec m = Vec::Zero(dim_);
  for (const auto& c : components_) m += c.weight * to_vec(c.mean);
  return {m.data(), m.data() + m.size()};
}

std::vector<double> GaussianMixture::covariance() const {
  const Vec mu = to_vec(mean());
  Mat cov = Mat::Zero(dim_, dim_);
  for (const auto& c : components_) {
    const Vec dm = to_vec(c.mean) - mu;
    cov += c.weight * (to_mat(c.cov, dim_) + dm * dm.transpose());
  }
  return from_mat(cov);
}

GaussianMixture GaussianMixture::marginal(const BitMask& keep) const {
  if (keep.size() != dim_) throw ShapeError("marginal: mask length differs from dimension");
  const auto idx = keep.indices();
  std::vector<Component> out;
  for (const auto& c : components_) {
    Component m{c.weight, {}, {}};
    for (std::size_t i : idx) {
      m.mean.push_back(c.mean[i]);
      for (std::size_t j : idx) m.cov.push_back(c.cov[i * dim_ + j]);
    }
    out.push_back(std::move(m));
  }
  return GaussianMixture(std::move(out));
}

GaussianMixture GaussianMixture::conditional(const BitMask& b, std::span<const double> x_o) const {
  if (b.size() != dim_ || x_o.size() != b.count()) {
    throw ShapeError("conditional: observed values do not match the mask");
  }
  if (b.none()) return *this;
  const auto o = b.indices();
  const auto u = (~b).indices();
  const Vec xo = to_vec(x_o);
  std::vector<Component> out;
  std::vector<double> log_w;
  for (const auto& c : components_) {
    const Mat cov = to_mat(c.cov, dim_);
    const Vec mu = to_vec(c.mean);
    Mat s_oo(o.size(), o.size()), s_uo(u.size(), o.size()), s_uu(u.size(), u.size());
    Vec mu_o(o.size()), mu_u(u.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
      mu_o[i] = mu[o[i]];
      for (std::size_t j = 0; j < o.size(); ++j) s_oo(i, j) = cov(o[i], o[j]);
    }
    for (std::size_t i = 0; i < u.size(); ++i) {
      mu_u[i] = mu[u[i]];
      for (std::size_t j = 0; j < o.size(); ++j) s_uo(i, j) = cov(u[i], o[j]);
      for (std::size_t j = 0; j < u.size(); ++j) s_uu(i, j) = cov(u[i], u[j]);
    }
    Eigen::LLT<Mat> llt(s_oo);
    const Vec diff = xo - mu_o;
    const Vec alpha = llt.solve(diff);
    const Mat L = llt.matrixL();
    double logdet = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) logdet += 2.0 * std::log(L(i, i));
    log_w.push_back(std::log(c.weight) -
                    0.5 * (static_cast<double>(o.size()) * log_two_pi + logdet + diff.dot(alpha)));
    const Vec m = mu_u + s_uo * alpha;
    const Mat s = s_uu - s_uo * llt.solve(s_uo.transpose());
    out.push_back({0.0, {m.data(), m.data() + m.size()}, from_mat(0.5 * (s + s.transpose()))});
  }
  const double norm = log_sum_exp(log_w);
  // Components whose posterior weight underflows are dropped.
  std::vector<Component> kept;
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double w = std::exp(log_w[k] - norm);
    if (w > 0.0) {
      out[k].weight = w;
      kept.push_back(std::move(out[k]));
    }
  }
  return GaussianMixture(std::move(kept));
}

likelihoods::GmmParams GaussianMixture::to_gmm() const {
  if (dim_ != 1) throw ShapeError("to_gmm: mixture is not one-dimensional");
  likelihoods::GmmParams p;
  for (const auto& c : components_) {
    p.logits.push_back(std::log(c.weight));
    p.locs.push_back(c.mean[0]);
    p.scales.push_back(std::sqrt(c.cov[0]));
  }
  return p;
}

double GaussianMixture::conditional_log_density(std::span<const double> x, const BitMask& b) const {
  if (x.size() != dim_) throw ShapeError("conditional_log_density: point has wrong dimension");
  if (b.all()) return 0.0;
  const auto split = masking::split_missing(x, b, BitMask::ones(dim_));
  return conditional(b, split.observed).log_density(split.targets);
}

// ---------------------------------------------------------------- synthetic

SyntheticKind parse_synthetic(std::string_view name) {
  if (name == "gaussian_mixture_grid") return SyntheticKind::gaussian_mixture_grid;
  if (name == "two_moons_like") return SyntheticKind::two_moons_like;
  if (name == "checkerboard") return SyntheticKind::checkerboard;
  if (name == "eight_gaussians") return SyntheticKind::eight_gaussians;
  throw ParseError("unknown synthetic dataset '" + std::string(name) + "'");
}

std::string_view synthetic_name(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::gaussian_mixture_grid: return "gaussian_mixture_grid";
    case SyntheticKind::two_moons_like: return "two_moons_like";
    case SyntheticKind::checkerboard: return "checkerboard";
    case SyntheticKind::eight_gaussians: return "eight_gaussians";
  }
  return "?";
}

namespace {

GaussianMixture::Component isotropic(double w, double x, double y, double s) {
  return {w, {x, y}, {s * s, 0.0, 0.0, s * s}};
}

GaussianMixture::Component correlated(double w, double x, double y, double s, double rho) {
  return {w, {x, y}, {s * s, rho * s * s, rho * s * s, s * s}};
}

}  // namespace

GaussianMixture synthetic_density(SyntheticKind kind) {
  std::vector<GaussianMixture::Component> comps;
  switch (kind) {
    case SyntheticKind::gaussian_mixture_grid:
      comps = {correlated(0.35, -2.0, -2.0, 0.6, 0.3), correlated(0.15, -2.0, 2.0, 0.6, -0.3),
               correlated(0.20, 2.0, -2.0, 0.6, -0.3), correlated(0.30, 2.0, 2.0, 0.6, 0.3)};
      break;
    case SyntheticKind::eight_gaussians:
      for (int k = 0; k < 8; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 8.0;
        comps.push_back(isotropic(1.0, 2.0 * std::cos(a), 2.0 * std::sin(a), 0.25));
      }
      break;
    case SyntheticKind::two_moons_like:
      for (int k = 0; k < 16; ++k) {
        const double a = std::numbers::pi * k / 15.0;
        comps.push_back(isotropic(1.0, std::cos(a) - 0.5, std::sin(a) - 0.25, 0.12));
        comps.push_back(isotropic(1.0, 0.5 - std::cos(a), 0.25 - std::sin(a), 0.12));
      }
      break;
    case SyntheticKind::checkerboard:
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
          if ((i + j) % 2 != 0) continue;
          const double cx = -1.5 + i;
          const double cy = -1.5 + j;
          for (double dx : {-0.25, 0.25}) {
            for (double dy : {-0.25, 0.25}) comps.push_back(isotropic(1.0, cx + dx, cy + dy, 0.18));
          }
        }
      }
      break;
  }
  return GaussianMixture(std::move(comps));
}

Dataset sample_dataset(const GaussianMixture& density, std::size_t n, std::uint64_t seed,
                       SplitFractions fractions) {
  Dataset ds;
  const std::size_t d = density.dim();
  ds.names = default_names(d);
  ds.x = ad::Tensor::matrix(n, d);
  ds.present.assign(n, BitMask::ones(d));
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = density.sample(rng);
    std::copy(v.begin(), v.end(), ds.x.row(i).begin());
  }
  assign_splits(ds, fractions, rng.fork(1).engine()());
  return ds;
}

SyntheticSet gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed,
                           SplitFractions fractions) {
  GaussianMixture density = synthetic_density(kind);
  Dataset ds = sample_dataset(density, n, seed, fractions);
  return {std::move(ds), std::move(density)};
}

void export_grid(std::ostream& out, const GaussianMixture& density, std::size_t n, double lo,
                 double hi) {
  if (density.dim() != 2) throw ShapeError("export_grid: density is not two-dimensional");
  if (n < 2 || !(hi > lo)) throw std::invalid_argument("export_grid: bad grid");
  out << "x,y,density\n";
  const double step = (hi - lo) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p[2] = {lo + step * static_cast<double>(i), lo + step * static_cast<double>(j)};
      out << format_double(p[0]) << ',' << format_double(p[1]) << ','
          << format_double(std::exp(density.log_density(p))) << '\n';
    }
  }
}

// ---------------------------------------------------------------- metrics

BitMask eval_mask(const MaskDistribution& dist, const BitMask& m, std::uint64_t seed,
                  std::size_t repetition, std::size_t row) {
  Rng rng = Rng(seed).fork(repetition).fork(row);
  return masking::sample_mask(dist, m, rng);
}

NllReport eval_nll(const AcflowModel& model, const Dataset& ds, std::span<const std::size_t> rows,
                   std::size_t n_masks, const MaskDistribution& dist, std::uint64_t seed) {
  if (n_masks == 0) throw std::invalid_argument("eval_nll: n_masks must be positive");
  NllReport report;
  std::vector<double> standardized;
  for (std::size_t k = 0; k < n_masks; ++k) {
    std::vector<Example> examples;
    examples.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t r = rows[i];
      const auto xr = ds.row(r);
      examples.push_back({{xr.begin(), xr.end()}, eval_mask(dist, ds.present[r], seed, k, i),
                          ds.present[r]});
    }
    const auto lp = model.cond_log_prob(examples);
    // Rows with nothing to predict carry no information and are skipped.
    double raw = 0.0;
    double std_units = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const BitMask u = examples[i].m & ~examples[i].b;
      if (u.none()) continue;
      raw -= lp[i];
      std_units -= lp[i] + model.standardizer().log_scale(u);
      ++used;
    }
    if (used == 0) throw std::invalid_argument("eval_nll: no row has a target dimension");
    report.repetitions.push_back(raw / static_cast<double>(used));
    standardized.push_back(std_units / static_cast<double>(used));
  }
  auto mean_std = [](const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::pair{mean, std::sqrt(ss / static_cast<double>(v.size()))};
  };
  std::tie(report.mean, report.std) = mean_std(report.repetitions);
  std::tie(report.standardized_mean, report.standardized_std) = mean_std(standardized);
  if (n_masks == 1) {
    report.std = 0.0;
    report.standardized_std = 0.0;
  }
  return report;
}

double eval_nrmse(const ad::Tensor& imputed, const ad::Tensor& truth,
                  std::span<const BitMask> imputed_mask, std::span<const double> std,
                  std::vector<std::size_t>* skipped) {
  if (!imputed.same_shape(truth) || imputed_mask.size() != truth.rows() || std.size() != truth.cols()) {
    throw ShapeError("eval_nrmse: imputations, truth, masks and stds disagree in shape");
  }
  double total = 0.0;
  std::size_t features = 0;
  for (std::size_t f = 0; f < truth.cols(); ++f) {
    double ss = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < truth.rows(); ++r) {
      if (!imputed_mask[r][f]) continue;
      const double e = imputed(r, f) - truth(r, f);
      ss += e * e;
      ++n;
    }
    if (n == 0) continue;
    if (!(std[f] > 0.0)) {
      if (skipped) skipped->push_back(f);
      continue;
    }
    total += std::sqrt(ss / static_cast<double>(n)) / std[f];
    ++features;
  }
  if (features == 0) throw std::invalid_argument("eval_nrmse: no imputed entries");
  return total / static_cast<double>(features);
}

double eval_nrmse(std::span<const ad::Tensor> draws, const ad::Tensor& truth,
                  std::span<const BitMask> imputed_mask, std::span<const double> std) {
  if (draws.empty()) throw std::invalid_argument("eval_nrmse: no imputation draws");
  double total = 0.0;
  for (const auto& d : draws) total += eval_nrmse(d, truth, imputed_mask, std);
  return total / static_cast<double>(draws.size());
}

}  // namespace acflow::data
