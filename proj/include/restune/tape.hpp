#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "restune/tensor.hpp"

namespace restune {

// Define-by-run gradient tape. Ops append a node while a tape is active on
// the calling thread (see TapeScope) and at least one input requires grad.
// A tape is single use: backward() may run once.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and replays recorded nodes in reverse.
  // Grad buffers of leaf tensors accumulate; call zero_grad beforehand.
  void backward(Tensor loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  bool consumed() const noexcept { return consumed_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Installs a tape as the current thread's recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording on this thread (finite differences, evaluation).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

// Adds `values` into t's grad buffer if t requires grad.
void accumulate_grad(const Tensor& t, std::span<const double> values);

// When enabled, every op output is checked for non-finite values and a
// NumericError is raised. On by default in builds without NDEBUG.
void set_debug_checks(bool enabled) noexcept;
bool debug_checks_enabled() noexcept;

// Deliberately wrong backward rules, used as negative controls for the
// gradient checker.
enum class BackwardFault { None, LinearWeightScale };
void set_backward_fault(BackwardFault fault) noexcept;
BackwardFault backward_fault() noexcept;

}  // namespace restune
