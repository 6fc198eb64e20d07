#pragma once

#include <string>
#include <vector>

#include "acflow/diffcore/autodiff.hpp"
#include "acflow/diffcore/parameters.hpp"
#include "acflow/rng.hpp"

namespace acflow::ad {

// Fully connected layer y = x W + b.
struct Dense {
  ParamId weight;
  ParamId bias;
  std::size_t in = 0;
  std::size_t out = 0;

  // LeCun-normal weights scaled by init_scale, zero bias.
  static Dense create(ParameterSet& params, const std::string& prefix, std::size_t in,
                      std::size_t out, Rng& rng, double init_scale = 1.0);

  Var operator()(Tape& tape, const Var& x) const;
};

// Dense layers with tanh between them (none after the last).
struct Mlp {
  std::vector<Dense> layers;

  // sizes = {input, hidden..., output}; the output layer's initial weights
  // are multiplied by output_scale.
  static Mlp create(ParameterSet& params, const std::string& prefix,
                    const std::vector<std::size_t>& sizes, Rng& rng, double output_scale = 1.0);

  std::size_t in_dim() const { return layers.front().in; }
  std::size_t out_dim() const { return layers.back().out; }
  Var operator()(Tape& tape, const Var& x) const;
};

struct GruWeights {
  Var w_input;   // in x 3H
  Var w_hidden;  // H x 3H
  Var b_input;   // 1 x 3H
  Var b_hidden;  // 1 x 3H
};

// One GRU update h_t from (x_t, h_prev).
Var gru_cell(const Var& x, const Var& h_prev, const GruWeights& w);

struct GruLayer {
  ParamId w_input;
  ParamId w_hidden;
  ParamId b_input;
  ParamId b_hidden;
  std::size_t input = 0;
  std::size_t hidden = 0;

  GruWeights bind(Tape& tape) const;
};

// Multi-layer GRU over sequences whose layer-0 input is the concatenation of
// a per-step part (width step_dim) and a per-sequence context that stays
// constant across steps.  The context projection is computed once per
// sequence.
class GruStack {
 public:
  GruStack() = default;
  static GruStack create(ParameterSet& params, const std::string& prefix, std::size_t step_dim,
                         std::size_t context_dim, std::size_t hidden, std::size_t layers, Rng& rng);

  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t depth() const noexcept { return layers_.size(); }
  std::size_t step_dim() const noexcept { return step_dim_; }
  const std::vector<GruLayer>& layers() const noexcept { return layers_; }

  // Per-pass state: bound weights, context projection and hidden states.
  struct Run {
    std::vector<GruWeights> weights;
    Var step_weight;  // rows [0, step_dim) of layer-0 W_ih
    Var context_projection;
    std::vector<Var> state;
  };

  Run start(Tape& tape, const Var& context) const;
  // Advances every layer one step; returns the top layer's output.
  Var step(Run& run, const Var& step_input) const;

 private:
  std::vector<GruLayer> layers_;
  std::size_t step_dim_ = 0;
  std::size_t context_dim_ = 0;
  std::size_t hidden_ = 0;
};

}  // namespace acflow::ad
