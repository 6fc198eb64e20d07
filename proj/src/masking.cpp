#include "acflow/masking.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

#include "acflow/error.hpp"

namespace acflow {

BitMask::BitMask(std::initializer_list<int> bits) {
  bits_.reserve(bits.size());
  for (int b : bits) {
    if (b != 0 && b != 1) throw std::invalid_argument("BitMask entries must be 0 or 1");
    bits_.push_back(static_cast<std::uint8_t>(b));
  }
}

BitMask BitMask::parse(std::string_view text) {
  BitMask out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '0' && text[i] != '1') {
      throw ParseError("bit mask '" + std::string(text) + "' contains '" + text[i] + "'");
    }
    out.set(i, text[i] == '1');
  }
  return out;
}

std::size_t BitMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

BitMask BitMask::operator~() const {
  BitMask out(size());
  for (std::size_t i = 0; i < size(); ++i) out.bits_[i] = bits_[i] ? 0 : 1;
  return out;
}

BitMask BitMask::operator&(const BitMask& other) const {
  if (other.size() != size()) throw std::invalid_argument("BitMask size mismatch in &");
  BitMask out(size());
  for (std::size_t i = 0; i < size(); ++i) out.bits_[i] = bits_[i] & other.bits_[i];
  return out;
}

BitMask BitMask::operator|(const BitMask& other) const {
  if (other.size() != size()) throw std::invalid_argument("BitMask size mismatch in |");
  BitMask out(size());
  for (std::size_t i = 0; i < size(); ++i) out.bits_[i] = bits_[i] | other.bits_[i];
  return out;
}

std::vector<std::size_t> BitMask::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (bits_[i]) out.push_back(i);
  }
  return out;
}

std::string BitMask::to_string() const {
  std::string s(size(), '0');
  for (std::size_t i = 0; i < size(); ++i) s[i] = bits_[i] ? '1' : '0';
  return s;
}

ConditioningContext ConditioningContext::from_row(std::span<const double> x, const BitMask& b,
                                                  const BitMask& m) {
  if (x.size() != b.size() || b.size() != m.size()) {
    throw std::invalid_argument("ConditioningContext: row, b and m lengths differ");
  }
  ConditioningContext ctx{masking::index(x, b), b, m};
  ctx.validate();
  return ctx;
}

void ConditioningContext::validate() const {
  if (b.size() != m.size()) throw std::invalid_argument("ConditioningContext: b and m lengths differ");
  if (observed.size() != b.count()) {
    throw std::invalid_argument("ConditioningContext: " + std::to_string(observed.size()) +
                                " observed values for " + std::to_string(b.count()) +
                                " observed dimensions");
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] && !m[i]) {
      throw std::invalid_argument("ConditioningContext: dimension " + std::to_string(i) +
                                  " is observed but marked missing");
    }
  }
}

namespace masking {

std::vector<double> index(std::span<const double> v, const BitMask& mask) {
  if (v.size() != mask.size()) {
    throw std::invalid_argument("index: vector length " + std::to_string(v.size()) +
                                " vs mask length " + std::to_string(mask.size()));
  }
  std::vector<double> out;
  out.reserve(mask.count());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i]) out.push_back(v[i]);
  }
  return out;
}

ad::Tensor index(const ad::Tensor& m, const BitMask& rows, const BitMask& cols) {
  if (m.rank() != 2 || m.rows() != rows.size() || m.cols() != cols.size()) {
    throw std::invalid_argument("index: matrix " + ad::shape_string(m.shape()) +
                                " does not match masks of length " + std::to_string(rows.size()) +
                                " x " + std::to_string(cols.size()));
  }
  const auto ri = rows.indices();
  const auto ci = cols.indices();
  ad::Tensor out = ad::Tensor::matrix(ri.size(), ci.size());
  for (std::size_t i = 0; i < ri.size(); ++i) {
    for (std::size_t j = 0; j < ci.size(); ++j) out(i, j) = m(ri[i], ci[j]);
  }
  return out;
}

std::vector<double> zero_impute(std::span<const double> x_part, const BitMask& b) {
  if (x_part.size() != b.count()) {
    throw std::invalid_argument("zero_impute: " + std::to_string(x_part.size()) +
                                " values for a mask with " + std::to_string(b.count()) + " ones");
  }
  std::vector<double> w(b.size(), 0.0);
  std::size_t c = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i]) w[i] = x_part[c++];
  }
  return w;
}

CouplingContext compose_coupling_context(std::span<const double> x_uA, const BitMask& b_u,
                                         std::span<const double> x_o, const BitMask& b) {
  const BitMask unobserved = ~b;
  if (b_u.size() != unobserved.count()) {
    throw std::invalid_argument("compose_coupling_context: b_u has length " +
                                std::to_string(b_u.size()) + " but |u| = " +
                                std::to_string(unobserved.count()));
  }
  const auto inner = zero_impute(x_uA, b_u);
  const auto a_part = zero_impute(inner, unobserved);
  const auto o_part = zero_impute(x_o, b);

  std::vector<double> b_u_values(b_u.size());
  for (std::size_t i = 0; i < b_u.size(); ++i) b_u_values[i] = b_u[i] ? 1.0 : 0.0;
  const auto b_u_full = zero_impute(b_u_values, unobserved);

  CouplingContext out{std::vector<double>(b.size()), BitMask(b.size())};
  for (std::size_t i = 0; i < b.size(); ++i) {
    out.values[i] = a_part[i] + o_part[i];
    out.mask.set(i, b_u_full[i] + (b[i] ? 1.0 : 0.0) > 0.5);
  }
  return out;
}

MaskDistribution MaskDistribution::bernoulli(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("bernoulli mask probability outside [0,1]");
  MaskDistribution d;
  d.kind = Kind::bernoulli;
  d.p = p;
  return d;
}

MaskDistribution MaskDistribution::fixed(BitMask mask) {
  MaskDistribution d;
  d.kind = Kind::fixed;
  d.fixed_mask = std::move(mask);
  return d;
}

MaskDistribution MaskDistribution::block(std::size_t begin, std::size_t end) {
  if (begin > end) throw std::invalid_argument("block mask with begin > end");
  MaskDistribution d;
  d.kind = Kind::block;
  d.begin = begin;
  d.end = end;
  return d;
}

namespace {

std::size_t parse_size(std::string_view s, std::string_view whole) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ParseError("bad integer in mask distribution '" + std::string(whole) + "'");
  }
  return v;
}

}  // namespace

MaskDistribution MaskDistribution::parse(std::string_view text) {
  const auto colon = text.find(':');
  const std::string_view head = text.substr(0, colon);
  const std::string_view rest = colon == std::string_view::npos ? "" : text.substr(colon + 1);
  if (head == "bernoulli") {
    if (rest.empty()) return bernoulli(0.5);
    try {
      std::size_t used = 0;
      const double p = std::stod(std::string(rest), &used);
      if (used != rest.size()) throw ParseError("");
      return bernoulli(p);
    } catch (const std::exception&) {
      throw ParseError("bad probability in mask distribution '" + std::string(text) + "'");
    }
  }
  if (head == "drop_one" || head == "drop_one_uniform") {
    if (!rest.empty()) throw ParseError("drop_one takes no arguments");
    return drop_one_uniform();
  }
  if (head == "fixed") return fixed(BitMask::parse(rest));
  if (head == "block") {
    const auto c2 = rest.find(':');
    if (c2 == std::string_view::npos) throw ParseError("block mask needs block:<begin>:<end>");
    return block(parse_size(rest.substr(0, c2), text), parse_size(rest.substr(c2 + 1), text));
  }
  throw ParseError("unknown mask distribution '" + std::string(text) + "'");
}

std::string MaskDistribution::to_string() const {
  switch (kind) {
    case Kind::bernoulli: {
      char buf[64];
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, p);
      return "bernoulli:" + std::string(buf, ptr);
    }
    case Kind::drop_one_uniform:
      return "drop_one";
    case Kind::fixed:
      return "fixed:" + fixed_mask.to_string();
    case Kind::block:
      return "block:" + std::to_string(begin) + ":" + std::to_string(end);
  }
  return {};
}

BitMask sample_mask(const MaskDistribution& dist, const BitMask& m, Rng& rng) {
  const std::size_t d = m.size();
  BitMask b(d);
  switch (dist.kind) {
    case MaskDistribution::Kind::bernoulli:
      for (std::size_t i = 0; i < d; ++i) {
        // Draw for every dimension so the stream does not depend on m.
        const bool observed = rng.bernoulli(dist.p);
        b.set(i, observed && m[i]);
      }
      break;
    case MaskDistribution::Kind::drop_one_uniform: {
      b = m;
      const auto present = m.indices();
      if (!present.empty()) b.set(present[rng.index(present.size())], false);
      break;
    }
    case MaskDistribution::Kind::fixed:
      if (dist.fixed_mask.size() != d) {
        throw std::invalid_argument("fixed mask length " + std::to_string(dist.fixed_mask.size()) +
                                    " vs data dimension " + std::to_string(d));
      }
      b = dist.fixed_mask & m;
      break;
    case MaskDistribution::Kind::block:
      b = m;
      for (std::size_t i = dist.begin; i < std::min(dist.end, d); ++i) b.set(i, false);
      break;
  }
  return b;
}

SplitVector split_missing(std::span<const double> x, const BitMask& b, const BitMask& m) {
  if (x.size() != b.size() || b.size() != m.size()) {
    throw std::invalid_argument("split_missing: length mismatch");
  }
  SplitVector out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (b[i] && !m[i]) {
      throw std::invalid_argument("split_missing: dimension " + std::to_string(i) +
                                  " observed but missing");
    }
    if (b[i]) {
      out.observed.push_back(x[i]);
    } else if (m[i]) {
      out.targets.push_back(x[i]);
    }
  }
  return out;
}

}  // namespace masking
}  // namespace acflow
