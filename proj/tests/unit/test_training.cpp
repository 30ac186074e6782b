#include <gtest/gtest.h>

#include <cmath>

#include "restune/errors.hpp"
#include "restune/experiments.hpp"
#include "restune/finite_diff.hpp"
#include "restune/ops.hpp"
#include "restune/tape.hpp"
#include "restune/training.hpp"
#include "test_support.hpp"

#include <nlohmann/json.hpp>

using namespace restune;
using restune::testing::random_tensor;
using restune::testing::values;

namespace {

BackboneConfig toy() {
  BackboneConfig cfg;
  cfg.dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.num_classes = 4;
  cfg.seed = 3;
  return cfg;
}

DatasetSpec plain_spec(std::size_t size = 64, std::uint64_t seed = 1) {
  DatasetSpec s;
  s.size = size;
  s.seed = seed;
  return s;
}

TunerSpec res_attn(std::size_t r = 2, std::size_t h = 2) {
  TunerSpec s;
  s.kind = TunerKind::ResAttn;
  s.rank = r;
  s.heads = h;
  return s;
}

Parameter make_param(double value, double grad) {
  Parameter p{"w", {1}, true, Tensor::from({1}, {value}, true)};
  p.value.zero_grad();
  p.value.mutable_grad()[0] = grad;
  return p;
}

std::vector<std::string> history_lines(const TrainResult& r) {
  std::vector<std::string> out;
  for (EpochMetrics m : r.history) {
    m.elapsed_seconds = 0;
    out.push_back(metrics_json_line(m));
  }
  return out;
}

}  // namespace

TEST(CrossEntropyTest, UniformLogitsGiveLogK) {
  const std::vector<std::uint32_t> labels{2};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({1, 4}), labels).item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropyTest, HugeTargetLogitGivesZero) {
  const std::vector<std::uint32_t> labels{1, 0};
  const double loss = cross_entropy(Tensor::from({2, 3}, {0, 800, 0, 900, 0, 0}), labels).item();
  EXPECT_NEAR(loss, 0.0, 1e-12);
}

TEST(CrossEntropyTest, GradientMatchesFiniteDifferencesWithAndWithoutSmoothing) {
  Rng rng = make_rng({90});
  const std::vector<std::uint32_t> labels{0, 3, 1};
  for (double smoothing : {0.0, 0.1}) {
    Tensor x = random_tensor({3, 4}, rng, -2, 2);
    x.set_requires_grad(true);
    x.zero_grad();
    Tape tape;
    {
      TapeScope scope(tape);
      tape.backward(cross_entropy(x, labels, smoothing));
    }
    const Tensor analytic = Tensor::from({3, 4}, {x.grad().begin(), x.grad().end()});
    const Tensor numeric =
        finite_diff_grad([&](const Tensor& t) { return cross_entropy(t, labels, smoothing).item(); }, x.detach());
    EXPECT_LT(relative_error(analytic, numeric), 1e-7);
  }
}

TEST(CrossEntropyTest, RejectsOutOfRangeLabel) {
  const std::vector<std::uint32_t> labels{4};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 4}), labels), ContractError);
}

TEST(OptimizerTest, PlainSgdStep) {
  Parameter p = make_param(1.0, 0.5);
  std::vector<Parameter*> ps{&p};
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::SgdMomentum;
  cfg.momentum = 0.0;
  OptimizerState state;
  optimizer_step(ps, state, cfg, 0.1);
  EXPECT_DOUBLE_EQ(p.value.data()[0], 0.95);
}

TEST(OptimizerTest, FirstAdamWStepMovesByLearningRate) {
  Parameter p = make_param(1.0, 0.3);
  std::vector<Parameter*> ps{&p};
  TrainConfig cfg;
  OptimizerState state;
  optimizer_step(ps, state, cfg, 0.01);
  // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(1.0 - p.value.data()[0], 0.01, 1e-9);
  EXPECT_EQ(state.step, 1u);
}

TEST(OptimizerTest, AdamWWeightDecayIsDecoupled) {
  Parameter p = make_param(2.0, 0.0);
  std::vector<Parameter*> ps{&p};
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  OptimizerState state;
  optimizer_step(ps, state, cfg, 0.5);
  EXPECT_DOUBLE_EQ(p.value.data()[0], 2.0 * (1.0 - 0.5 * 0.1));
}

TEST(OptimizerTest, MissingGradAndFrozenParameterAreRejected) {
  Parameter p{"w", {1}, true, Tensor::from({1}, {1.0}, true)};
  std::vector<Parameter*> ps{&p};
  OptimizerState state;
  EXPECT_THROW(optimizer_step(ps, state, TrainConfig{}, 0.1), ContractError);
  Parameter frozen = make_param(1.0, 1.0);
  frozen.trainable = false;
  std::vector<Parameter*> fs{&frozen};
  EXPECT_THROW(optimizer_step(fs, state, TrainConfig{}, 0.1), ContractError);
}

TEST(ScheduleTest, CosineStartsAtLrAndDecays) {
  TrainConfig cfg;
  cfg.lr = 0.2;
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 0, 10), 0.2);
  EXPECT_NEAR(scheduled_lr(cfg, 5, 10), 0.1, 1e-15);
  cfg.schedule = LrSchedule::Constant;
  EXPECT_EQ(scheduled_lr(cfg, 7, 10), 0.2);
}

TEST(TrainTest, ZeroLearningRateKeepsEveryParameter) {
  ModelGraph m = build_backbone(toy());
  attach(m, uniform_specs(2, AttachPoint::MHA, res_attn()));
  const ModelGraph before = clone_model(m);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 2;
  train(m, load_dataset(plain_spec()).train, cfg);
  for (const Parameter* p : m.params.all()) EXPECT_TRUE(bit_equal(p->value, before.params.at(p->name).value));
}

TEST(TrainTest, SeparableTaskReachesHighAccuracyWithinTwoHundredSteps) {
  DatasetSpec spec = plain_spec(256, 2);
  spec.train_fraction = 1.0;
  spec.val_fraction = 0.0;
  ModelGraph m = build_backbone(toy());
  PretrainConfig pre;
  pre.variant = SyntheticVariant::Plain;
  pre.size = 256;
  pre.train.epochs = 20;
  pre.train.lr = 0.01;
  pretrain_backbone(m, pre, spec);
  // A head alone separates the classes on these features.
  ModelGraph probe = clone_model(m);
  TrainConfig cfg;
  cfg.lr = 0.03;
  cfg.epochs = 12;  // 16 batches per epoch: 192 steps
  const Dataset data = load_dataset(spec).train;
  const TrainResult head_only = train(probe, data, cfg);
  ASSERT_GE(head_only.history.back().accuracy, 0.95);

  attach(m, uniform_specs(2, AttachPoint::MHA, res_attn()));
  const TrainResult r = train(m, data, cfg);
  EXPECT_LE(r.steps, 200u);
  EXPECT_GE(r.history.back().accuracy, 0.95);
}

TEST(TrainTest, FrozenBuffersUnchangedAndHistoryShape) {
  ModelGraph m = build_backbone(toy());
  attach(m, uniform_specs(2, AttachPoint::FFN, res_attn()));
  const auto snapshot = snapshot_frozen(m);
  const DatasetSplits d = load_dataset(plain_spec());
  TrainConfig cfg;
  cfg.epochs = 3;
  std::vector<EpochMetrics> sunk;
  TrainOptions opts;
  opts.val = &d.val;
  opts.sink = [&](const EpochMetrics& e) { sunk.push_back(e); };
  const TrainResult r = train(m, d.train, cfg, opts);
  EXPECT_TRUE(frozen_changes(m, snapshot).empty());
  ASSERT_EQ(r.history.size(), 6u);
  EXPECT_EQ(sunk.size(), 6u);
  EXPECT_EQ(r.history[0].split, "train");
  EXPECT_EQ(r.history[1].split, "val");
  EXPECT_EQ(r.history[5].epoch, 3u);
  EXPECT_EQ(r.steps, 3u * ((d.train.size() + 15) / 16));
}

TEST(TrainTest, ConvexHeadOnlyLossDoesNotIncrease) {
  ModelGraph m = build_backbone(toy());
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::SgdMomentum;
  cfg.momentum = 0.0;
  cfg.lr = 0.05;
  cfg.schedule = LrSchedule::Constant;
  cfg.epochs = 6;
  cfg.batch_size = 1000;  // full batch
  const TrainResult r = train(m, load_dataset(plain_spec()).train, cfg);
  for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_LE(r.history[i].loss, r.history[i - 1].loss + 1e-12);
}

TEST(TrainTest, ClassMismatchAndEmptyDataAreRejected) {
  ModelGraph m = build_backbone(toy());
  DatasetSpec spec = plain_spec();
  spec.num_classes = 3;
  const Dataset three = load_dataset(spec).train;
  EXPECT_THROW(train(m, three, TrainConfig{}), ConfigError);
  EXPECT_THROW(evaluate(m, three), ConfigError);
  Dataset empty = three;
  empty.num_classes = 4;
  empty.labels.clear();
  empty.pixels.clear();
  EXPECT_THROW(evaluate(m, empty), EmptyDatasetError);
  EXPECT_THROW(train(m, empty, TrainConfig{}), EmptyDatasetError);
}

TEST(TrainTest, RunsAreBitIdenticalAcrossRepeatsAndLoaderThreadCounts) {
  const DatasetSplits d = load_dataset(plain_spec());
  auto run = [&](std::size_t threads) {
    ModelGraph m = build_backbone(toy());
    attach(m, uniform_specs(2, AttachPoint::MHA, res_attn()));
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.loader_threads = threads;
    TrainOptions opts;
    opts.val = &d.val;
    const TrainResult r = train(m, d.train, cfg, opts);
    return std::make_pair(history_lines(r), values(m.params.at("tuners.0.mha.res_attn.o.weight").value));
  };
  const auto a = run(1);
  EXPECT_EQ(a, run(1));
  EXPECT_EQ(a, run(3));
}

TEST(BatchStreamTest, SequenceIndependentOfWorkerCount) {
  const Dataset data = load_dataset(plain_spec(50)).train;
  auto collect = [&](std::size_t workers) {
    BatchStream s(data, 8, 4, 1, workers);
    std::vector<std::uint32_t> labels;
    std::vector<double> pixels;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto b = s.take(i);
      labels.insert(labels.end(), b.labels.begin(), b.labels.end());
      const auto v = values(b.images);
      pixels.insert(pixels.end(), v.begin(), v.end());
    }
    return std::make_pair(labels, pixels);
  };
  const auto one = collect(1);
  EXPECT_EQ(one.first.size(), data.size());
  EXPECT_EQ(one, collect(4));
  BatchStream other_epoch(data, 8, 4, 2, 1);
  EXPECT_NE(one.first, [&] {
    std::vector<std::uint32_t> l;
    for (std::size_t i = 0; i < other_epoch.size(); ++i) {
      const auto b = other_epoch.take(i);
      l.insert(l.end(), b.labels.begin(), b.labels.end());
    }
    return l;
  }());
}

TEST(BatchStreamTest, OutOfOrderTakeIsRejected) {
  const Dataset data = load_dataset(plain_spec(50)).train;
  BatchStream s(data, 8, 4, 1, 2);
  EXPECT_THROW(s.take(1), ContractError);
}

TEST(MetricsTest, JsonLineHasTheFiveFields) {
  const std::string line = metrics_json_line({3, "val", 0.5, 0.75, 1.25});
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("epoch"), 3);
  EXPECT_EQ(j.at("split"), "val");
  EXPECT_EQ(j.at("loss"), 0.5);
  EXPECT_EQ(j.at("accuracy"), 0.75);
  EXPECT_EQ(j.at("elapsed_seconds"), 1.25);
  EXPECT_EQ(line.find('\n'), std::string::npos);
}

TEST(EvaluateTest, SingleCorrectItemDuplicationAndRepeat) {
  ModelGraph m = build_backbone(toy());
  const Dataset data = load_dataset(plain_spec()).train;
  const std::vector<std::size_t> first{0};
  Dataset one = data.subset(first);
  const Tensor logits = forward(m, one.images(first));
  std::size_t best = 0;
  for (std::size_t k = 1; k < 4; ++k) {
    if (logits.at({0, k}) > logits.at({0, best})) best = k;
  }
  one.labels[0] = static_cast<std::uint32_t>(best);
  EXPECT_EQ(evaluate(m, one).accuracy, 1.0);

  const EvalResult a = evaluate(m, data);
  Dataset twice = data;
  twice.append(data);
  EXPECT_EQ(evaluate(m, twice).accuracy, a.accuracy);
  EXPECT_EQ(evaluate(m, twice).count, 2 * a.count);
  const EvalResult b = evaluate(m, data);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.loss, b.loss);
}

TEST(GradCheckTest, HeadOnlyPassesAtTightTolerance) {
  GradCheckOptions opts;
  opts.tol = 1e-7;
  const GradCheckReport r = grad_check(toy(), {}, opts);
  ASSERT_EQ(r.entries.size(), 2u);
  EXPECT_TRUE(r.passed);
}

TEST(GradCheckTest, ResAttnOnTwoBlocksPasses) {
  const GradCheckReport r = grad_check(toy(), uniform_specs(2, AttachPoint::MHA, res_attn()));
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.entries.size(), 2u + 2u * 3u);
  for (const auto& e : r.entries) EXPECT_LT(e.rel_error, 1e-4) << e.name;
}

TEST(GradCheckTest, CorruptedBackwardIsReported) {
  set_backward_fault(BackwardFault::LinearWeightScale);
  GradCheckReport r;
  try {
    r = grad_check(toy(), uniform_specs(2, AttachPoint::MHA, res_attn()));
  } catch (...) {
    set_backward_fault(BackwardFault::None);
    throw;
  }
  set_backward_fault(BackwardFault::None);
  EXPECT_FALSE(r.passed);
}

TEST(GradCheckTest, TooManyScalarsIsAContractError) {
  GradCheckOptions opts;
  opts.max_scalars = 10;
  EXPECT_THROW(grad_check(toy(), {}, opts), ContractError);
}
