#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "restune/tensor.hpp"

namespace restune {

// A named weight plus the flag deciding whether optimizers may touch it.
struct Parameter {
  std::string name;
  Shape shape;
  bool trainable = false;
  // Undefined when the owning store is layout-only.
  Tensor value;
};

// Owns every parameter of a model, keyed and iterated by name. A layout-only
// store records names, shapes and flags without allocating, which is how
// parameter accounting runs on full-size configurations.
class ParameterStore {
 public:
  using Init = std::function<void(std::span<double>)>;

  explicit ParameterStore(bool materialize = true) : materialize_(materialize) {}

  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  bool materialized() const noexcept { return materialize_; }

  // Registers a parameter; `init` fills the freshly zeroed buffer (may be
  // empty for zero init). Duplicate names are rejected.
  Tensor add(const std::string& name, Shape shape, bool trainable, const Init& init = {});

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Parameter& at(const std::string& name) const;
  Parameter& at(const std::string& name);

  void set_trainable(const std::string& name, bool trainable);

  // Name-ordered views.
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> all();
  std::vector<Parameter*> trainable();

  std::size_t size() const noexcept { return params_.size(); }

 private:
  bool materialize_;
  std::map<std::string, Parameter> params_;
};

ParameterStore::Init zeros_init();
ParameterStore::Init ones_init();

}  // namespace restune
