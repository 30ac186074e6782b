#include "restune/parameters.hpp"

#include <algorithm>

#include "restune/errors.hpp"

namespace restune {

Tensor ParameterStore::add(const std::string& name, Shape shape, bool trainable, const Init& init) {
  if (params_.count(name) != 0) throw ConflictError("parameter '" + name + "' registered twice");
  Parameter p{name, shape, trainable, Tensor()};
  if (materialize_) {
    p.value = Tensor::zeros(shape, trainable);
    if (init) init(p.value.mutable_data());
  }
  auto [it, inserted] = params_.emplace(name, std::move(p));
  return it->second.value;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterStore::set_trainable(const std::string& name, bool trainable) {
  Parameter& p = at(name);
  p.trainable = trainable;
  if (p.value.defined()) {
    p.value.set_requires_grad(trainable);
    if (!trainable) p.value.drop_grad();
  }
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(&p);
  return out;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& [name, p] : params_) out.push_back(&p);
  return out;
}

std::vector<Parameter*> ParameterStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& [name, p] : params_) {
    if (p.trainable) out.push_back(&p);
  }
  return out;
}

ParameterStore::Init zeros_init() {
  return [](std::span<double> v) { std::fill(v.begin(), v.end(), 0.0); };
}

ParameterStore::Init ones_init() {
  return [](std::span<double> v) { std::fill(v.begin(), v.end(), 1.0); };
}

}  // namespace restune
