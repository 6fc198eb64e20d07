#include "acflow/diffcore/layers.hpp"

#include <algorithm>
#include <cmath>

#include "acflow/error.hpp"

namespace acflow::ad {

Dense Dense::create(ParameterSet& params, const std::string& prefix, std::size_t in,
                    std::size_t out, Rng& rng, double init_scale) {
  Tensor w = Tensor::matrix(in, out);
  const double sigma = init_scale / std::sqrt(static_cast<double>(std::max<std::size_t>(in, 1)));
  for (double& v : w.values()) v = sigma * rng.normal();
  Dense d;
  d.weight = params.add(prefix + ".weight", std::move(w));
  d.bias = params.add(prefix + ".bias", Tensor::matrix(1, out));
  d.in = in;
  d.out = out;
  return d;
}

Var Dense::operator()(Tape& tape, const Var& x) const {
  return linear(x, tape.param(weight), tape.param(bias));
}

Mlp Mlp::create(ParameterSet& params, const std::string& prefix,
                const std::vector<std::size_t>& sizes, Rng& rng, double output_scale) {
  if (sizes.size() < 2) throw ShapeError("Mlp needs at least input and output sizes");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const bool last = i + 2 == sizes.size();
    mlp.layers.push_back(Dense::create(params, prefix + ".fc" + std::to_string(i), sizes[i],
                                       sizes[i + 1], rng, last ? output_scale : 1.0));
  }
  return mlp;
}

Var Mlp::operator()(Tape& tape, const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](tape, h);
    if (i + 1 < layers.size()) h = tanh(h);
  }
  return h;
}

Var gru_cell(const Var& x, const Var& h_prev, const GruWeights& w) {
  if (x.rows() != h_prev.rows()) {
    throw ShapeError("gru_cell: batch size " + std::to_string(x.rows()) + " vs hidden state " +
                     std::to_string(h_prev.rows()));
  }
  return gru_step(linear(x, w.w_input, w.b_input), h_prev, w.w_hidden, w.b_hidden);
}

GruWeights GruLayer::bind(Tape& tape) const {
  return {tape.param(w_input), tape.param(w_hidden), tape.param(b_input), tape.param(b_hidden)};
}

GruStack GruStack::create(ParameterSet& params, const std::string& prefix, std::size_t step_dim,
                          std::size_t context_dim, std::size_t hidden, std::size_t layers,
                          Rng& rng) {
  if (layers == 0 || hidden == 0) throw ShapeError("GruStack needs at least one layer and unit");
  GruStack stack;
  stack.step_dim_ = step_dim;
  stack.context_dim_ = context_dim;
  stack.hidden_ = hidden;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  auto uniform = [&](std::size_t r, std::size_t c) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.values()) v = bound * (2.0 * rng.uniform() - 1.0);
    return t;
  };
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = l == 0 ? step_dim + context_dim : hidden;
    const std::string p = prefix + ".gru" + std::to_string(l);
    GruLayer layer;
    layer.input = in;
    layer.hidden = hidden;
    layer.w_input = params.add(p + ".w_input", uniform(in, 3 * hidden));
    layer.w_hidden = params.add(p + ".w_hidden", uniform(hidden, 3 * hidden));
    layer.b_input = params.add(p + ".b_input", uniform(1, 3 * hidden));
    layer.b_hidden = params.add(p + ".b_hidden", uniform(1, 3 * hidden));
    stack.layers_.push_back(layer);
  }
  return stack;
}

GruStack::Run GruStack::start(Tape& tape, const Var& context) const {
  if (context.cols() != context_dim_) {
    throw ShapeError("GruStack: context width " + std::to_string(context.cols()) + ", expected " +
                     std::to_string(context_dim_));
  }
  Run run;
  for (const auto& layer : layers_) run.weights.push_back(layer.bind(tape));
  const Var& w0 = run.weights.front().w_input;
  run.step_weight = slice_rows(w0, 0, step_dim_);
  run.context_projection =
      linear(context, slice_rows(w0, step_dim_, context_dim_), run.weights.front().b_input);
  run.state.assign(layers_.size(), constant(Tensor::matrix(context.rows(), hidden_)));
  return run;
}

Var GruStack::step(Run& run, const Var& step_input) const {
  Var projected = add(matmul(step_input, run.step_weight), run.context_projection);
  Var h = gru_step(projected, run.state[0], run.weights[0].w_hidden, run.weights[0].b_hidden);
  run.state[0] = h;
  for (std::size_t l = 1; l < layers_.size(); ++l) {
    h = gru_cell(h, run.state[l], run.weights[l]);
    run.state[l] = h;
  }
  return h;
}

}  // namespace acflow::ad
