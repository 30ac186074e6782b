#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "restune/data.hpp"
#include "restune/model.hpp"
#include "restune/parameters.hpp"
#include "restune/tensor.hpp"

namespace restune {

enum class OptimizerKind { SgdMomentum, AdamW };
enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adamw
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::Cosine;
  double label_smoothing = 0.0;
  std::size_t loader_threads = 1;

  void validate() const;
};

// Learning rate for step `step` (0-based) of `total_steps`.
double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

struct OptimizerState {
  struct Moments {
    std::vector<double> first;   // momentum buffer / adam m
    std::vector<double> second;  // adam v
  };
  std::map<std::string, Moments> moments;
  std::size_t step = 0;
};

// One update of every parameter in `params` from its grad buffer. Frozen
// parameters are rejected; a trainable parameter without grad is a contract
// error.
void optimizer_step(std::span<Parameter* const> params, OptimizerState& state, const TrainConfig& cfg, double lr);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double elapsed_seconds = 0.0;
};

// Structured record: {"epoch", "split", "loss", "accuracy", "elapsed_seconds"}.
std::string metrics_json_line(const EpochMetrics& m);

using MetricsSink = std::function<void(const EpochMetrics&)>;

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t count = 0;
};

// Eval-mode pass over the whole dataset, no tape.
EvalResult evaluate(const ModelGraph& model, const Dataset& data, std::size_t batch_size = 64);

// Seed-determined batch order, assembled by `workers` threads into an
// ordered queue. The sequence of batches does not depend on `workers`.
class BatchStream {
 public:
  struct Batch {
    Tensor images;
    std::vector<std::uint32_t> labels;
  };

  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::size_t epoch,
              std::size_t workers);
  ~BatchStream();
  BatchStream(const BatchStream&) = delete;
  BatchStream& operator=(const BatchStream&) = delete;

  std::size_t size() const { return count_; }
  // Blocks until batch `i` is ready. Batches must be taken in order.
  Batch take(std::size_t i);

 private:
  struct Shared;
  std::size_t count_ = 0;
  std::unique_ptr<Shared> shared_;
};

struct TrainOptions {
  const Dataset* val = nullptr;
  MetricsSink sink;
  // Snapshot frozen parameters and verify them bit-for-bit after every epoch.
  bool verify_frozen = true;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t steps = 0;
};

// Trains every trainable parameter of `model` on `data`. Each epoch ends with
// an eval-mode pass over the training set (split "train") and, if given, the
// validation set (split "val").
TrainResult train(ModelGraph& model, const Dataset& data, const TrainConfig& cfg, const TrainOptions& options = {});

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t max_scalars = 10000;
  // Adds N(0, 0.05) to every trainable tensor first, so zero-initialised
  // output projections do not mask upstream gradients.
  bool randomize = true;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t numel = 0;
  double rel_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double eps = 0.0;
  double tol = 0.0;
  bool passed = false;
};

// Compares backward() against central differences for every trainable tensor
// of `model`, on the cross-entropy loss of (images, labels).
GradCheckReport grad_check(ModelGraph& model, const Tensor& images, std::span<const std::uint32_t> labels,
                           const GradCheckOptions& options = {});

// Builds `cfg`, attaches `specs` and checks on a seeded two-image batch.
GradCheckReport grad_check(const BackboneConfig& cfg, const std::vector<AttachSpec>& specs,
                           const GradCheckOptions& options = {});

// name -> copy of values, for every parameter not flagged trainable.
std::map<std::string, std::vector<double>> snapshot_frozen(const ModelGraph& model);
// Names of frozen parameters whose bytes differ from the snapshot.
std::vector<std::string> frozen_changes(const ModelGraph& model,
                                        const std::map<std::string, std::vector<double>>& snapshot);

}  // namespace restune
