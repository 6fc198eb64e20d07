#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "acflow/diffcore/tensor.hpp"
#include "acflow/rng.hpp"

namespace acflow {

// Length-d binary vector.  Serves as the observed mask b, the non-missing
// mask m and the coupling split b_u.  One byte per bit.
class BitMask {
 public:
  BitMask() = default;
  explicit BitMask(std::size_t size, bool value = false) : bits_(size, value ? 1 : 0) {}
  BitMask(std::initializer_list<int> bits);
  // "1010" -> {1,0,1,0}; throws ParseError on any other character.
  static BitMask parse(std::string_view text);
  static BitMask ones(std::size_t size) { return BitMask(size, true); }
  static BitMask zeros(std::size_t size) { return BitMask(size, false); }

  std::size_t size() const noexcept { return bits_.size(); }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }
  std::size_t count() const noexcept;
  bool all() const noexcept { return count() == size(); }
  bool none() const noexcept { return count() == 0; }

  BitMask operator~() const;
  BitMask operator&(const BitMask& other) const;
  BitMask operator|(const BitMask& other) const;
  friend bool operator==(const BitMask&, const BitMask&) = default;

  // Positions holding 1, ascending.
  std::vector<std::size_t> indices() const;
  std::span<const std::uint8_t> bytes() const noexcept { return bits_; }
  std::string to_string() const;

 private:
  std::vector<std::uint8_t> bits_;
};

// Values of the positions where mask = 1, in position order.
struct MaskedVector {
  std::vector<double> values;
  BitMask mask;

  std::size_t full_dim() const noexcept { return mask.size(); }
};

// Conditioning information for one example: observed values x_o = x[b], the
// observed mask b and the non-missing mask m.  Targets are u = m * (1 - b).
struct ConditioningContext {
  std::vector<double> observed;
  BitMask b;
  BitMask m;

  // Picks x[b] out of a full-length row.  Throws if b is not inside m.
  static ConditioningContext from_row(std::span<const double> x, const BitMask& b,
                                      const BitMask& m);
  static ConditioningContext complete(std::span<const double> x, const BitMask& b) {
    return from_row(x, b, BitMask::ones(b.size()));
  }

  std::size_t dim() const noexcept { return b.size(); }
  BitMask target_mask() const { return m & ~b; }
  std::vector<std::size_t> targets() const { return target_mask().indices(); }
  std::size_t target_count() const { return target_mask().count(); }
  // Throws std::invalid_argument on size mismatch or b outside m.
  void validate() const;
};

namespace masking {

// v[mask]
std::vector<double> index(std::span<const double> v, const BitMask& mask);
// m[rows, cols]: rows first, then columns.
ad::Tensor index(const ad::Tensor& m, const BitMask& rows, const BitMask& cols);

// Zero-imputing embedding: w_i = x_part[c_i] if b_i = 1 else 0, with c_i the
// running count of ones in b.
std::vector<double> zero_impute(std::span<const double> x_part, const BitMask& b);
inline std::vector<double> zero_impute(const MaskedVector& x) { return zero_impute(x.values, x.mask); }

struct CouplingContext {
  std::vector<double> values;  // x_c
  BitMask mask;                // b_c
};

// x_c = phi(phi(x_uA; b_u); 1 - b) + phi(x_o; b),  b_c = phi(b_u; 1 - b) + b.
CouplingContext compose_coupling_context(std::span<const double> x_uA, const BitMask& b_u,
                                         std::span<const double> x_o, const BitMask& b);

struct MaskDistribution {
  enum class Kind { bernoulli, drop_one_uniform, fixed, block };

  Kind kind = Kind::bernoulli;
  double p = 0.5;            // bernoulli: probability a dimension is observed
  BitMask fixed_mask;        // fixed
  std::size_t begin = 0;     // block: [begin, end) unobserved, rest observed
  std::size_t end = 0;

  static MaskDistribution bernoulli(double p);
  static MaskDistribution drop_one_uniform() {
    MaskDistribution d;
    d.kind = Kind::drop_one_uniform;
    return d;
  }
  static MaskDistribution fixed(BitMask mask);
  static MaskDistribution block(std::size_t begin, std::size_t end);

  // Textual form used on the command line and in checkpoints:
  // "bernoulli:0.5", "drop_one", "fixed:1010", "block:2:5".
  static MaskDistribution parse(std::string_view text);
  std::string to_string() const;
};

// Draws an observed mask b.  Dimensions with m_i = 0 are never observed.
BitMask sample_mask(const MaskDistribution& dist, const BitMask& m, Rng& rng);

struct SplitVector {
  std::vector<double> observed;  // x[b]
  std::vector<double> targets;   // x[m * (1 - b)]
};

// Throws std::invalid_argument when some b_i = 1 has m_i = 0.
SplitVector split_missing(std::span<const double> x, const BitMask& b, const BitMask& m);

}  // namespace masking
}  // namespace acflow
