#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace acflow {

struct LayerSpec {
  enum class Kind { affine_coupling, linear, rnn_coupling, leaky_relu, reverse };

  Kind kind = Kind::linear;
  std::size_t hidden = 256;  // MLP width or GRU units
  std::size_t depth = 2;     // hidden MLP layers (affine, linear)
  std::size_t layers = 2;    // GRU layers (rnn_coupling)
  std::size_t rank = 0;      // linear: 0 = full W_f, r > 0 = U V factors
  std::size_t parity = 0;    // affine: which alternate positions are kept
  double alpha = 0.01;       // leaky_relu slope
  double clamp = 5.0;        // coupling log-scale bound

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct BaseSpec {
  enum class Kind { gaussian, autoregressive_gmm };

  Kind kind = Kind::autoregressive_gmm;
  std::size_t hidden = 256;
  std::size_t depth = 2;   // gaussian: hidden MLP layers
  std::size_t layers = 2;  // autoregressive_gmm: GRU layers
  std::size_t components = 40;

  friend bool operator==(const BaseSpec&, const BaseSpec&) = default;
};

// Text form, one item per line ('#' starts a comment):
//   dim 6
//   layer linear hidden=256 depth=2 rank=0
//   layer leaky_relu alpha=0.01
//   layer rnn_coupling hidden=256 layers=2 clamp=5
//   layer reverse
//   layer affine_coupling hidden=256 depth=2 parity=0 clamp=5
//   base autoregressive_gmm hidden=256 layers=2 components=40
//   base gaussian hidden=256 depth=2
struct Architecture {
  std::size_t dim = 0;
  std::vector<LayerSpec> layers;
  BaseSpec base;

  // Throws ParseError with the offending line number.
  static Architecture parse(std::string_view text);
  std::string to_string() const;

  // `blocks` conditional layers of linear -> leaky_relu -> rnn_coupling with
  // a reverse between consecutive blocks.
  static Architecture layered(std::size_t dim, std::size_t blocks, std::size_t hidden,
                              std::size_t base_layers, std::size_t components,
                              double alpha = preset_alpha);
  // 4 blocks, autoregressive GMM base with a 2-layer GRU, 40 components.
  static Architecture synthetic(std::size_t dim) { return layered(dim, 4, 256, 2, 40); }
  // 6 blocks, autoregressive GMM base with a 4-layer GRU, 40 components.
  static Architecture tabular(std::size_t dim) { return layered(dim, 6, 256, 4, 40); }

  // Leaky-ReLU slope used by the presets.
  static constexpr double preset_alpha = 0.5;
  // "synthetic" or "tabular"; throws ParseError otherwise.
  static Architecture preset(std::string_view name, std::size_t dim);

  // Sets every width-like field (layer hidden sizes and base hidden size).
  void set_hidden(std::size_t hidden);

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

std::string_view kind_name(LayerSpec::Kind kind);
std::string_view kind_name(BaseSpec::Kind kind);

}  // namespace acflow
