#include "restune/experiments.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>

#include "restune/errors.hpp"

namespace restune {

double pretrain_backbone(ModelGraph& model, const PretrainConfig& pretrain, const DatasetSpec& data) {
  DatasetSpec source = data;
  source.source = "synthetic";
  source.variant = pretrain.variant;
  source.size = pretrain.size;
  const Dataset task = synth_dataset(source);

  std::map<std::string, std::vector<double>> head;
  for (const Parameter* p : model.params.all()) {
    if (!is_head_parameter(p->name)) continue;
    head.emplace(p->name, std::vector<double>(p->value.data().begin(), p->value.data().end()));
  }
  unfreeze_backbone(model);
  TrainOptions options;
  options.verify_frozen = false;
  const TrainResult result = train(model, task, pretrain.train, options);
  freeze_all(model);
  for (const auto& [name, values] : head) {
    auto dst = model.params.at(name).value.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
  return result.history.back().accuracy;
}

ModelGraph prepare_backbone(const BackboneConfig& cfg, const std::optional<PretrainConfig>& pretrain,
                            const DatasetSpec& data) {
  ModelGraph model = build_backbone(cfg);
  if (pretrain) pretrain_backbone(model, *pretrain, data);
  return model;
}

std::size_t thread_budget() {
  if (const char* env = std::getenv("RES_TUNER_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1) {
      throw ConfigError("RES_TUNER_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

MatrixCell run_cell(const ModelGraph& base, const Tensor& probe, const Tensor& base_logits, const DatasetSplits& data,
                    const TrainConfig& cfg, std::vector<AttachSpec> specs) {
  MatrixCell cell;
  ModelGraph model = clone_model(base);
  attach(model, specs);
  cell.specs = std::move(specs);
  cell.zero_init_identity = bit_equal(forward(model, probe), base_logits);
  cell.trainable_params = count_trainable_params(model, {.include_head = true, .include_bias = true}).total;
  const auto frozen = snapshot_frozen(model);
  const TrainResult result = train(model, data.train, cfg);
  cell.frozen_intact = frozen_changes(model, frozen).empty();
  cell.train_accuracy = result.history.back().accuracy;
  if (data.val.size() > 0) cell.val_accuracy = evaluate(model, data.val).accuracy;
  return cell;
}

template <typename Job>
void run_parallel(std::size_t jobs, std::size_t threads, const Job& job) {
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs);
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < std::min(threads, jobs); ++t) pool.emplace_back(worker);
    worker();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

AttachMatrix run_attach_matrix(const ModelGraph& base, const DatasetSplits& data, const MatrixOptions& options) {
  if (data.train.size() == 0) throw EmptyDatasetError("attach matrix: training split is empty");
  auto spec_for = [&](TunerKind kind) {
    const auto it = options.tuner_specs.find(kind);
    TunerSpec spec = it == options.tuner_specs.end() ? TunerSpec{} : it->second;
    spec.kind = kind;
    return spec;
  };
  const std::size_t depth = base.config.depth;

  struct Job {
    bool dual;
    std::size_t row, col;
    std::vector<AttachSpec> specs;
  };
  std::vector<Job> jobs;
  for (std::size_t k = 0; k < kMatrixKinds.size(); ++k) {
    for (std::size_t o = 0; o < kMatrixOps.size(); ++o) {
      jobs.push_back({false, k, o, uniform_specs(depth, kMatrixOps[o], spec_for(kMatrixKinds[k]))});
    }
  }
  for (std::size_t a = 0; a < kMatrixKinds.size(); ++a) {
    for (std::size_t b = 0; b < kMatrixKinds.size(); ++b) {
      auto specs = uniform_specs(depth, AttachPoint::MHA, spec_for(kMatrixKinds[a]));
      auto ffn = uniform_specs(depth, AttachPoint::FFN, spec_for(kMatrixKinds[b]));
      specs.insert(specs.end(), ffn.begin(), ffn.end());
      jobs.push_back({true, a, b, std::move(specs)});
    }
  }

  const Dataset& probe_set = data.val.size() > 0 ? data.val : data.train;
  std::vector<std::size_t> probe_idx(std::min<std::size_t>(probe_set.size(), 16));
  for (std::size_t i = 0; i < probe_idx.size(); ++i) probe_idx[i] = i;
  const Tensor probe = probe_set.images(probe_idx);
  const Tensor base_logits = forward(base, probe);

  AttachMatrix out;
  out.single.assign(kMatrixKinds.size(), std::vector<MatrixCell>(kMatrixOps.size()));
  out.dual.assign(kMatrixKinds.size(), std::vector<MatrixCell>(kMatrixKinds.size()));
  run_parallel(jobs.size(), options.threads, [&](std::size_t i) {
    const Job& job = jobs[i];
    MatrixCell cell = run_cell(base, probe, base_logits, data, options.train, job.specs);
    (job.dual ? out.dual : out.single)[job.row][job.col] = std::move(cell);
  });
  return out;
}

TransferResult run_transfer(const TransferOptions& options) {
  TransferResult result;
  ModelGraph base = build_backbone(options.backbone);
  result.source_accuracy = pretrain_backbone(base, options.pretrain, options.target);
  const DatasetSplits target = load_dataset(options.target);
  if (target.val.size() == 0) throw EmptyDatasetError("transfer: target validation split is empty");

  ModelGraph probe = clone_model(base);
  train(probe, target.train, options.tune);
  result.probe_accuracy = evaluate(probe, target.val).accuracy;

  ModelGraph tuned = clone_model(base);
  attach(tuned, uniform_specs(options.backbone.depth, options.op, options.tuner));
  train(tuned, target.train, options.tune);
  result.tuned_accuracy = evaluate(tuned, target.val).accuracy;
  return result;
}

}  // namespace restune
