#include "restune/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <thread>

#include <nlohmann/json.hpp>

#include "restune/errors.hpp"
#include "restune/finite_diff.hpp"
#include "restune/ops.hpp"
#include "restune/rng.hpp"
#include "restune/tape.hpp"

namespace restune {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must lie in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("train betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("train.label_smoothing must lie in [0, 1)");
  if (loader_threads == 0) throw ConfigError("train.loader_threads must be >= 1");
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (cfg.schedule == LrSchedule::Constant || total_steps == 0) return cfg.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void optimizer_step(std::span<Parameter* const> params, OptimizerState& state, const TrainConfig& cfg, double lr) {
  for (const Parameter* p : params) {
    if (!p->trainable) throw ContractError("optimizer_step: parameter '" + p->name + "' is frozen");
    if (!p->value.has_grad()) throw ContractError("optimizer_step: trainable parameter '" + p->name + "' has no grad");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  for (Parameter* p : params) {
    auto w = p->value.mutable_data();
    const auto g = p->value.grad();
    auto& mom = state.moments[p->name];
    if (mom.first.size() != w.size()) mom.first.assign(w.size(), 0.0);
    switch (cfg.optimizer) {
      case OptimizerKind::SgdMomentum:
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double grad = g[i] + cfg.weight_decay * w[i];
          mom.first[i] = cfg.momentum * mom.first[i] + grad;
          w[i] -= lr * mom.first[i];
        }
        break;
      case OptimizerKind::AdamW: {
        if (mom.second.size() != w.size()) mom.second.assign(w.size(), 0.0);
        const double c1 = 1.0 - std::pow(cfg.beta1, t);
        const double c2 = 1.0 - std::pow(cfg.beta2, t);
        for (std::size_t i = 0; i < w.size(); ++i) {
          mom.first[i] = cfg.beta1 * mom.first[i] + (1.0 - cfg.beta1) * g[i];
          mom.second[i] = cfg.beta2 * mom.second[i] + (1.0 - cfg.beta2) * g[i] * g[i];
          const double m_hat = mom.first[i] / c1;
          const double v_hat = mom.second[i] / c2;
          w[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * w[i]);
        }
        break;
      }
    }
  }
}

std::string metrics_json_line(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["split"] = m.split;
  j["loss"] = m.loss;
  j["accuracy"] = m.accuracy;
  j["elapsed_seconds"] = m.elapsed_seconds;
  return j.dump();
}

EvalResult evaluate(const ModelGraph& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw EmptyDatasetError("evaluate: dataset is empty");
  if (data.num_classes != model.config.num_classes) {
    throw ConfigError("evaluate: dataset has " + std::to_string(data.num_classes) + " classes, model has " +
                      std::to_string(model.config.num_classes));
  }
  NoGradScope no_grad;
  EvalResult result;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = data.labels_at(idx);
    Tensor logits = forward(model, data.images(idx), kEval);
    loss_sum += cross_entropy(logits, labels).item() * static_cast<double>(idx.size());
    const std::size_t k = logits.dim(1);
    const auto values = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = values.subspan(b * k, k);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == labels[b]) ++correct;
    }
  }
  result.count = data.size();
  result.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  result.loss = loss_sum / static_cast<double>(data.size());
  return result;
}

// --- BatchStream -------------------------------------------------------------

struct BatchStream::Shared {
  const Dataset& data;
  std::vector<std::size_t> order;
  std::size_t batch_size;
  std::size_t count;
  std::size_t capacity;

  std::mutex mu;
  std::condition_variable cv;
  std::vector<std::optional<Batch>> slots;
  std::vector<std::exception_ptr> errors;
  std::size_t next = 0;      // next batch index a worker will claim
  std::size_t consumed = 0;  // batches handed to the consumer
  bool stop = false;
  std::vector<std::jthread> workers;

  Shared(const Dataset& d, std::size_t bs) : data(d), batch_size(bs) {}

  Batch build(std::size_t i) const {
    const std::size_t start = i * batch_size;
    const std::size_t len = std::min(batch_size, order.size() - start);
    std::span<const std::size_t> idx(order.data() + start, len);
    return Batch{data.images(idx), data.labels_at(idx)};
  }

  void run() {
    for (;;) {
      std::size_t i;
      {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return stop || next >= count || next < consumed + capacity; });
        if (stop || next >= count) return;
        i = next++;
      }
      std::optional<Batch> batch;
      std::exception_ptr err;
      try {
        batch = build(i);
      } catch (...) {
        err = std::current_exception();
      }
      {
        std::lock_guard lock(mu);
        slots[i] = std::move(batch);
        errors[i] = err;
      }
      cv.notify_all();
    }
  }
};

BatchStream::BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::size_t epoch,
                         std::size_t workers)
    : shared_(std::make_unique<Shared>(data, batch_size)) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  auto& s = *shared_;
  s.order.resize(data.size());
  std::iota(s.order.begin(), s.order.end(), 0);
  Rng rng = make_rng({seed, 0x65706f6368ULL, epoch});
  std::shuffle(s.order.begin(), s.order.end(), rng);
  count_ = (data.size() + batch_size - 1) / batch_size;
  s.count = count_;
  s.capacity = 2 * std::max<std::size_t>(workers, 1);
  s.slots.resize(count_);
  s.errors.resize(count_);
  for (std::size_t w = 0; w < std::max<std::size_t>(workers, 1); ++w) s.workers.emplace_back([&s] { s.run(); });
}

BatchStream::~BatchStream() {
  {
    std::lock_guard lock(shared_->mu);
    shared_->stop = true;
  }
  shared_->cv.notify_all();
  shared_->workers.clear();
}

BatchStream::Batch BatchStream::take(std::size_t i) {
  auto& s = *shared_;
  std::unique_lock lock(s.mu);
  if (i != s.consumed) throw ContractError("BatchStream batches must be taken in order");
  s.cv.wait(lock, [&] { return s.slots[i].has_value() || s.errors[i]; });
  if (s.errors[i]) std::rethrow_exception(s.errors[i]);
  Batch out = std::move(*s.slots[i]);
  s.slots[i].reset();
  ++s.consumed;
  lock.unlock();
  s.cv.notify_all();
  return out;
}

// --- Training ----------------------------------------------------------------

std::map<std::string, std::vector<double>> snapshot_frozen(const ModelGraph& model) {
  std::map<std::string, std::vector<double>> snap;
  for (const Parameter* p : model.params.all()) {
    if (p->trainable || !p->value.defined()) continue;
    snap.emplace(p->name, std::vector<double>(p->value.data().begin(), p->value.data().end()));
  }
  return snap;
}

std::vector<std::string> frozen_changes(const ModelGraph& model,
                                        const std::map<std::string, std::vector<double>>& snapshot) {
  std::vector<std::string> changed;
  for (const auto& [name, values] : snapshot) {
    const auto now = model.params.at(name).value.data();
    if (now.size() != values.size() || std::memcmp(now.data(), values.data(), values.size() * sizeof(double)) != 0) {
      changed.push_back(name);
    }
  }
  return changed;
}

TrainResult train(ModelGraph& model, const Dataset& data, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (data.size() == 0) throw EmptyDatasetError("train: dataset is empty");
  if (data.num_classes != model.config.num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(data.num_classes) + " classes, model has " +
                      std::to_string(model.config.num_classes));
  }
  const auto params = trainable_parameters(model);
  const auto frozen = options.verify_frozen ? snapshot_frozen(model) : std::map<std::string, std::vector<double>>{};

  TrainResult result;
  OptimizerState state;
  Rng dropout_rng = make_rng({cfg.seed, 0x64726f70ULL});
  const ForwardContext ctx{true, &dropout_rng};
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = per_epoch * cfg.epochs;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  auto emit = [&](std::size_t epoch, const char* split, const EvalResult& r) {
    EpochMetrics m{epoch, split, r.loss, r.accuracy, elapsed()};
    result.history.push_back(m);
    if (options.sink) options.sink(m);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    BatchStream stream(data, cfg.batch_size, cfg.seed, epoch, cfg.loader_threads);
    for (std::size_t b = 0; b < stream.size(); ++b) {
      BatchStream::Batch batch = stream.take(b);
      for (Parameter* p : params) p->value.zero_grad();
      Tape tape;
      {
        TapeScope scope(tape);
        Tensor logits = forward(model, batch.images, ctx);
        Tensor loss = cross_entropy(logits, batch.labels, cfg.label_smoothing);
        if (!params.empty()) tape.backward(loss);
      }
      if (!params.empty()) optimizer_step(params, state, cfg, scheduled_lr(cfg, result.steps, total_steps));
      ++result.steps;
    }
    if (options.verify_frozen) {
      const auto changed = frozen_changes(model, frozen);
      if (!changed.empty()) throw ContractError("train: frozen parameter '" + changed.front() + "' was modified");
    }
    emit(epoch + 1, "train", evaluate(model, data));
    if (options.val != nullptr && options.val->size() > 0) emit(epoch + 1, "val", evaluate(model, *options.val));
  }
  for (Parameter* p : params) p->value.drop_grad();
  return result;
}

// --- Gradient check ----------------------------------------------------------

GradCheckReport grad_check(ModelGraph& model, const Tensor& images, std::span<const std::uint32_t> labels,
                           const GradCheckOptions& options) {
  auto params = trainable_parameters(model);
  std::size_t scalars = 0;
  for (const Parameter* p : params) scalars += p->value.numel();
  if (scalars > options.max_scalars) {
    throw ContractError("grad_check: " + std::to_string(scalars) + " trainable scalars exceed the limit of " +
                        std::to_string(options.max_scalars));
  }
  if (options.randomize) {
    Rng rng = make_rng({options.seed, 0x6772616443ULL});
    std::normal_distribution<double> noise(0.0, 0.05);
    for (Parameter* p : params) {
      for (double& v : p->value.mutable_data()) v += noise(rng);
    }
  }

  auto loss_value = [&]() {
    const double v = cross_entropy(forward(model, images, kEval), labels).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
    return v;
  };

  for (Parameter* p : params) p->value.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = cross_entropy(forward(model, images, kEval), labels);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite");
    tape.backward(loss);
  }

  GradCheckReport report;
  report.eps = options.eps;
  report.tol = options.tol;
  report.passed = true;
  for (Parameter* p : params) {
    Tensor analytic = Tensor::from(p->shape, std::vector<double>(p->value.grad().begin(), p->value.grad().end()));
    Tensor numeric = finite_diff_grad_inplace(loss_value, p->value, options.eps);
    GradCheckEntry e{p->name, p->value.numel(), relative_error(analytic, numeric), false};
    e.passed = e.rel_error < options.tol;
    report.passed = report.passed && e.passed;
    report.entries.push_back(e);
  }
  for (Parameter* p : params) p->value.drop_grad();
  return report;
}

GradCheckReport grad_check(const BackboneConfig& cfg, const std::vector<AttachSpec>& specs,
                           const GradCheckOptions& options) {
  ModelGraph model = build_backbone(cfg);
  attach(model, specs);
  Rng rng = make_rng({options.seed, 0x696d67ULL});
  const std::size_t batch = 2;
  Tensor images = Tensor::zeros({batch, cfg.in_channels, cfg.image_size, cfg.image_size});
  fill_uniform(images.mutable_data(), 0.0, 1.0, rng);
  std::vector<std::uint32_t> labels{0, static_cast<std::uint32_t>(1 % cfg.num_classes)};
  return grad_check(model, images, labels, options);
}

}  // namespace restune
