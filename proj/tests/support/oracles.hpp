#pragma once

// Reference computations for the tests.  Everything here is written with
// plain loops so that it shares no code path with the library it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "acflow/diffcore/parameters.hpp"
#include "acflow/masking.hpp"
#include "acflow/rng.hpp"

namespace oracle {

using acflow::BitMask;
using acflow::Rng;

inline double rel_err(double a, double b, double floor = 1e-7) {
  const double diff = std::abs(a - b);
  if (diff <= floor) return 0.0;
  return diff / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// log |det A| of an n x n row-major matrix by Gaussian elimination with
// partial pivoting.
inline double log_abs_det(std::vector<double> a, std::size_t n) {
  double out = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(a[i * n + k]) > std::abs(a[p * n + k])) p = i;
    }
    if (a[p * n + k] == 0.0) return -INFINITY;
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[p * n + j]);
    }
    out += std::log(std::abs(a[k * n + k]));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = a[i * n + k] / a[k * n + k];
      for (std::size_t j = k; j < n; ++j) a[i * n + j] -= f * a[k * n + j];
    }
  }
  return out;
}

using VecFn = std::function<std::vector<double>(const std::vector<double>&)>;

// Central-difference Jacobian (row-major, rows = outputs).
inline std::vector<double> fd_jacobian(const VecFn& f, const std::vector<double>& x, double h = 1e-5) {
  const std::size_t n = x.size();
  std::vector<double> jac;
  std::size_t m = 0;
  std::vector<std::vector<double>> cols;
  for (std::size_t j = 0; j < n; ++j) {
    auto a = x;
    auto c = x;
    a[j] += h;
    c[j] -= h;
    const auto fa = f(a);
    const auto fc = f(c);
    m = fa.size();
    std::vector<double> col(m);
    for (std::size_t i = 0; i < m; ++i) col[i] = (fa[i] - fc[i]) / (2 * h);
    cols.push_back(col);
  }
  jac.assign(m * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) jac[i * n + j] = cols[j][i];
  }
  return jac;
}

// Central difference of a scalar function of one parameter entry.
inline double fd_param(acflow::ad::Tensor& t, std::size_t j, const std::function<double()>& f,
                       double h = 1e-5) {
  const double keep = t[j];
  t[j] = keep + h;
  const double a = f();
  t[j] = keep - h;
  const double c = f();
  t[j] = keep;
  return (a - c) / (2 * h);
}

// Composite Simpson rule on [lo, hi] with an even number of intervals.
inline double simpson(const std::function<double(double)>& f, double lo, double hi, std::size_t n) {
  if (n % 2) ++n;
  const double h = (hi - lo) / static_cast<double>(n);
  double s = f(lo) + f(hi);
  for (std::size_t i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(lo + h * static_cast<double>(i));
  return s * h / 3.0;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// One GRU step, gates laid out (reset, update, candidate) along the 3H columns:
//   r = s(x Wr + bir + h Ur + bhr), u = s(x Wu + biu + h Uu + bhu)
//   n = tanh(x Wn + bin + r * (h Un + bhn)), h' = (1 - u) n + u h
inline std::vector<double> gru_step(const acflow::ad::Tensor& w_in, const acflow::ad::Tensor& w_h,
                                    const acflow::ad::Tensor& b_in, const acflow::ad::Tensor& b_h,
                                    const std::vector<double>& x, const std::vector<double>& h) {
  const std::size_t hidden = h.size();
  std::vector<double> gi(3 * hidden), gh(3 * hidden);
  for (std::size_t c = 0; c < 3 * hidden; ++c) {
    double a = b_in[c];
    for (std::size_t i = 0; i < x.size(); ++i) a += x[i] * w_in(i, c);
    double b = b_h[c];
    for (std::size_t i = 0; i < hidden; ++i) b += h[i] * w_h(i, c);
    gi[c] = a;
    gh[c] = b;
  }
  std::vector<double> out(hidden);
  for (std::size_t k = 0; k < hidden; ++k) {
    const double r = sigmoid(gi[k] + gh[k]);
    const double u = sigmoid(gi[hidden + k] + gh[hidden + k]);
    const double n = std::tanh(gi[2 * hidden + k] + r * gh[2 * hidden + k]);
    out[k] = (1.0 - u) * n + u * h[k];
  }
  return out;
}

// Dense layer x W + b.
inline std::vector<double> dense(const acflow::ad::Tensor& w, const acflow::ad::Tensor& b,
                                 const std::vector<double>& x) {
  std::vector<double> out(w.cols());
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double a = b[c];
    for (std::size_t i = 0; i < x.size(); ++i) a += x[i] * w(i, c);
    out[c] = a;
  }
  return out;
}

inline const acflow::ad::Tensor& param(const acflow::ad::ParameterSet& ps, const std::string& name) {
  return ps.value(ps.find(name));
}

// MLP "<prefix>.fc0", "<prefix>.fc1", ... with tanh between layers.
inline std::vector<double> mlp(const acflow::ad::ParameterSet& ps, const std::string& prefix,
                               std::vector<double> x) {
  for (std::size_t l = 0;; ++l) {
    const std::string name = prefix + ".fc" + std::to_string(l);
    if (!ps.contains(name + ".weight")) break;
    if (l > 0) {
      for (double& v : x) v = std::tanh(v);
    }
    x = dense(param(ps, name + ".weight"), param(ps, name + ".bias"), x);
  }
  return x;
}

// Conditioning features [phi(x_o; b), b, m] of a full-length row.
inline std::vector<double> features(const std::vector<double>& x, const BitMask& b, const BitMask& m) {
  const std::size_t d = x.size();
  std::vector<double> f(3 * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    if (b[i]) f[i] = x[i];
    f[d + i] = b[i] ? 1.0 : 0.0;
    f[2 * d + i] = m[i] ? 1.0 : 0.0;
  }
  return f;
}

// Multi-layer GRU "<prefix>.gru<l>" stepped once from states h with layer-0
// input concat(step, context).
inline std::vector<double> gru_stack_step(const acflow::ad::ParameterSet& ps, const std::string& prefix,
                                          std::vector<std::vector<double>>& h,
                                          const std::vector<double>& step,
                                          const std::vector<double>& context) {
  std::vector<double> in = step;
  in.insert(in.end(), context.begin(), context.end());
  for (std::size_t l = 0; l < h.size(); ++l) {
    const std::string g = prefix + ".gru" + std::to_string(l);
    h[l] = gru_step(param(ps, g + ".w_input"), param(ps, g + ".w_hidden"), param(ps, g + ".b_input"),
                    param(ps, g + ".b_hidden"), in, h[l]);
    in = h[l];
  }
  return in;
}

inline double log_normal(double z, double mu, double sigma) {
  const double u = (z - mu) / sigma;
  return -0.5 * u * u - std::log(sigma) - 0.5 * std::log(2 * std::numbers::pi);
}

inline double softplus(double v) { return v > 30 ? v : std::log1p(std::exp(v)); }

inline BitMask random_mask(Rng& rng, std::size_t d, double p_one) {
  BitMask b(d);
  for (std::size_t i = 0; i < d; ++i) b.set(i, rng.bernoulli(p_one));
  return b;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline void perturb(acflow::ad::ParameterSet& ps, Rng& rng, double sigma) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (double& v : ps.value(i).values()) v += sigma * rng.normal();
  }
}

}  // namespace oracle
