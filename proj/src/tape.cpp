#include "restune/tape.hpp"

#include <atomic>

#include "restune/errors.hpp"

namespace restune {

namespace {

thread_local Tape* current_tape = nullptr;

#ifdef NDEBUG
std::atomic<bool> debug_checks{false};
#else
std::atomic<bool> debug_checks{true};
#endif

std::atomic<BackwardFault> fault{BackwardFault::None};

}  // namespace

Tape* active_tape() noexcept { return current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(current_tape) { current_tape = nullptr; }
NoGradScope::~NoGradScope() { current_tape = previous_; }

void set_debug_checks(bool enabled) noexcept { debug_checks.store(enabled); }
bool debug_checks_enabled() noexcept { return debug_checks.load(); }

void set_backward_fault(BackwardFault f) noexcept { fault.store(f); }
BackwardFault backward_fault() noexcept { return fault.load(); }

void accumulate_grad(const Tensor& t, std::span<const double> values) {
  if (!t.requires_grad()) return;
  Tensor handle = t;
  auto g = handle.mutable_grad();
  if (g.size() != values.size()) throw ContractError("gradient size mismatch for " + shape_str(t.shape()));
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
  if (consumed_) throw ContractError("cannot record onto a tape after backward()");
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(Tensor loss) {
  if (consumed_) throw ContractError("backward() already ran on this tape; record a new forward pass");
  if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor that requires grad");
  consumed_ = true;

  // Intermediate outputs start from zero so that stale buffers never leak in.
  for (auto& node : nodes_) node.output.zero_grad();
  loss.mutable_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

}  // namespace restune
