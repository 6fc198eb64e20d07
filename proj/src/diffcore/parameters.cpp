#include "acflow/diffcore/parameters.hpp"

#include <stdexcept>

namespace acflow::ad {

ParameterSet::ParameterSet(const ParameterSet& other) : by_name_(other.by_name_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) {
    params_.push_back({p.name, std::make_shared<Tensor>(*p.value), p.trainable});
  }
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet copy(other);
    *this = std::move(copy);
  }
  return *this;
}

ParamId ParameterSet::add(std::string name, Tensor init, bool trainable) {
  if (by_name_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  by_name_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::make_shared<Tensor>(std::move(init)), trainable});
  return ParamId{params_.size() - 1};
}

ParamId ParameterSet::find(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
  return ParamId{it->second};
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value->size();
  return n;
}

std::vector<Tensor> ParameterSet::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(*p.value);
  return out;
}

void ParameterSet::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!values[i].same_shape(*params_[i].value)) {
      throw std::invalid_argument("restore: shape mismatch for " + params_[i].name);
    }
    *params_[i].value = values[i];
  }
}

Var Tape::param(ParamId id) {
  Var& slot = leaves_.at(id.index);
  if (!slot.defined()) {
    const Parameter& p = (*params_)[id];
    slot = leaf(p.value, track_ && p.trainable);
  }
  return slot;
}

std::vector<Tensor> Tape::gradients() const {
  std::vector<Tensor> out;
  out.reserve(leaves_.size());
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    if (leaves_[i].defined()) {
      out.push_back(leaves_[i].grad());
    } else {
      out.emplace_back(params_->value(i).shape(), 0.0);
    }
  }
  return out;
}

}  // namespace acflow::ad
