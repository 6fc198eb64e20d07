#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "acflow/diffcore/autodiff.hpp"

namespace acflow::ad {

struct ParamId {
  std::size_t index = 0;
  friend bool operator==(ParamId, ParamId) = default;
};

struct Parameter {
  std::string name;
  std::shared_ptr<Tensor> value;
  bool trainable = true;
};

// Named model parameters.  Copies are deep: a copied set never aliases the
// original's storage.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  // Throws std::invalid_argument on a duplicate name.
  ParamId add(std::string name, Tensor init, bool trainable = true);

  std::size_t size() const noexcept { return params_.size(); }
  const Parameter& operator[](ParamId id) const { return params_[id.index]; }
  const Parameter& at(std::size_t i) const { return params_[i]; }
  Tensor& value(ParamId id) { return *params_[id.index].value; }
  const Tensor& value(ParamId id) const { return *params_[id.index].value; }
  Tensor& value(std::size_t i) { return *params_[i].value; }
  const Tensor& value(std::size_t i) const { return *params_[i].value; }
  void set_trainable(ParamId id, bool trainable) { params_[id.index].trainable = trainable; }
  void set_trainable(std::size_t i, bool trainable) { params_[i].trainable = trainable; }

  bool contains(const std::string& name) const { return by_name_.contains(name); }
  ParamId find(const std::string& name) const;

  std::size_t scalar_count() const;
  // Values in registration order, for snapshots and bitwise comparisons.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// Binds parameters to graph leaves for one forward pass.  Each tape owns its
// own leaves, so independent tapes over one ParameterSet never share
// gradient buffers.
class Tape {
 public:
  Tape(const ParameterSet& params, bool track_gradients)
      : params_(&params), track_(track_gradients), leaves_(params.size()) {}

  Var param(ParamId id);
  bool tracking() const noexcept { return track_; }

  // Gradients after backward(); zeros for parameters the pass never touched.
  std::vector<Tensor> gradients() const;

 private:
  const ParameterSet* params_;
  bool track_;
  std::vector<Var> leaves_;
};

}  // namespace acflow::ad
