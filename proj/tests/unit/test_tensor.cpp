#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "restune/errors.hpp"
#include "restune/finite_diff.hpp"
#include "restune/ops.hpp"
#include "restune/tape.hpp"
#include "test_support.hpp"

using namespace restune;
using restune::testing::random_tensor;
using restune::testing::values;

namespace {

// Reverse-mode gradient of scalar f at x.
Tensor autodiff_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0) {
  Tensor x = x0.detach();
  x.set_requires_grad(true);
  x.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(f(x));
  }
  return Tensor::from(x.shape(), {x.grad().begin(), x.grad().end()});
}

double fd_rel_error(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  const Tensor analytic = autodiff_grad(f, x);
  const Tensor numeric = finite_diff_grad([&](const Tensor& t) { return f(t).item(); }, x, 1e-5);
  return relative_error(analytic, numeric);
}

}  // namespace

TEST(TensorTest, RejectsZeroDimensionsAndWrongValueCounts) {
  EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_EQ(Tensor::zeros({2, 3}).numel(), 6u);
}

TEST(TensorTest, CopiesShareStorageAndCloneDoesNot) {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = a;
  Tensor c = a.clone();
  b.mutable_data()[0] = 5;
  EXPECT_EQ(a.data()[0], 5);
  EXPECT_EQ(c.data()[0], 1);
}

TEST(MatmulTest, IdentityLeavesOperandUnchanged) {
  Tensor y = matmul(Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(values(y), (std::vector<double>{3, 4, 5, 6}));
}

TEST(MatmulTest, RowTimesColumn) {
  Tensor y = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y.item(), 11.0);
}

TEST(MatmulTest, GradientOfSumMatchesFiniteDifferences) {
  Rng rng = make_rng({1});
  const Tensor a = random_tensor({4, 5}, rng);
  const Tensor b = random_tensor({5, 3}, rng);
  EXPECT_LT(fd_rel_error([&](const Tensor& x) { return sum(matmul(x, b)); }, a), 1e-7);
  EXPECT_LT(fd_rel_error([&](const Tensor& x) { return sum(matmul(a, x)); }, b), 1e-7);
}

TEST(MatmulTest, BatchedWithSharedRightOperand) {
  Rng rng = make_rng({2});
  const Tensor a = random_tensor({2, 3, 4}, rng);
  const Tensor w = random_tensor({4, 2}, rng);
  const Tensor y = matmul(a, w);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 2}));
  for (std::size_t b = 0; b < 2; ++b) {
    const Tensor ab = select(a, 0, b);
    EXPECT_TRUE(bit_equal(select(y, 0, b), matmul(ab, w)));
  }
  EXPECT_LT(fd_rel_error([&](const Tensor& x) { return sum(mul(matmul(x, w), matmul(x, w))); }, a), 1e-7);
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 5]"), std::string::npos) << msg;
  }
}

TEST(SoftmaxTest, ZerosGiveUniform) {
  const Tensor y = softmax_lastdim(Tensor::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.25);
}

TEST(SoftmaxTest, LargeLogitDoesNotOverflow) {
  const Tensor y = softmax_lastdim(Tensor::from({2}, {1000, 0}));
  EXPECT_NEAR(y.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
}

TEST(SoftmaxTest, RowsSumToOneAndJacobianMatchesFiniteDifferences) {
  Rng rng = make_rng({4});
  const Tensor x = random_tensor({3, 7}, rng, -3, 3);
  const Tensor y = softmax_lastdim(x);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      const double v = y.at({r, c});
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  // Every Jacobian row, via a random projection of the output per row.
  for (std::size_t probe = 0; probe < 7; ++probe) {
    Tensor w = Tensor::zeros({3, 7});
    for (std::size_t r = 0; r < 3; ++r) w.mutable_data()[r * 7 + probe] = 1.0;
    EXPECT_LT(fd_rel_error([&](const Tensor& t) { return sum(mul(softmax_lastdim(t), w)); }, x), 1e-6);
  }
}

TEST(SoftmaxTest, NanInputRaisesWithDebugChecks) {
  const bool before = debug_checks_enabled();
  set_debug_checks(true);
  EXPECT_THROW(softmax_lastdim(Tensor::from({2}, {std::numeric_limits<double>::quiet_NaN(), 0.0})), NumericError);
  set_debug_checks(before);
}

TEST(LinearTest, IdentityWeight) {
  const Tensor y = linear(Tensor::from({2}, {1, 2}), Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2}, {0, 0}));
  EXPECT_EQ(values(y), (std::vector<double>{1, 2}));
}

TEST(LinearTest, HandComputed) {
  const Tensor y = linear(Tensor::from({2}, {1, 1}), Tensor::from({2, 1}, {2, 3}), Tensor::from({1}, {1}));
  EXPECT_EQ(values(y), (std::vector<double>{6}));
}

TEST(LinearTest, ZeroWeightGivesBias) {
  Rng rng = make_rng({5});
  const Tensor y = linear(random_tensor({3, 4}, rng), Tensor::zeros({4, 2}), Tensor::from({2}, {0.5, 0.5}));
  for (double v : y.data()) EXPECT_EQ(v, 0.5);
}

TEST(LinearTest, TrailingDimMismatchRaises) {
  EXPECT_THROW(linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DimensionError);
}

TEST(LinearTest, GradientsToInputWeightAndBias) {
  Rng rng = make_rng({6});
  const Tensor x = random_tensor({2, 3, 4}, rng);
  const Tensor w = random_tensor({4, 5}, rng);
  const Tensor b = random_tensor({5}, rng);
  auto loss = [](const Tensor& y) { return sum(mul(y, y)); };
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return loss(linear(t, w, b)); }, x), 1e-7);
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return loss(linear(x, t, b)); }, w), 1e-7);
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return loss(linear(x, w, t)); }, b), 1e-7);
}

TEST(ReshapeTest, FollowsRowMajorLaw) {
  std::vector<double> v(12);
  for (std::size_t i = 0; i < 12; ++i) v[i] = static_cast<double>(i) * 1.5;
  const Tensor y = reshape(Tensor::from({2, 6}, v), {2, 3, 2});
  EXPECT_EQ(y.at({1, 2, 1}), v[11]);
  EXPECT_THROW(reshape(Tensor::from({2, 6}, v), {5, 2}), DimensionError);
}

TEST(PermuteTest, TransposeAndRoundTrip) {
  Rng rng = make_rng({7});
  const Tensor x = random_tensor({2, 3}, rng);
  const Tensor t = permute(x, {1, 0});
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(t.at({j, i}), x.at({i, j}));
  }
  const Tensor z = random_tensor({2, 3, 4, 5}, rng);
  const Tensor back = permute(permute(z, {2, 0, 3, 1}), {1, 3, 0, 2});
  EXPECT_TRUE(bit_equal(back, z));
  EXPECT_THROW(permute(x, {0, 0}), DimensionError);
  EXPECT_THROW(permute(x, {0}), DimensionError);
}

TEST(PermuteTest, PreservesMultisetAndPassesGradients) {
  Rng rng = make_rng({8});
  const Tensor x = random_tensor({2, 3, 4}, rng);
  auto a = values(x);
  auto b = values(transpose_last2(x));
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
  const Tensor w = random_tensor({4, 3, 2}, rng);
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return sum(mul(permute(t, {2, 1, 0}), w)); }, x), 1e-7);
}

TEST(BackwardTest, SumGivesOnes) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  x.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
}

TEST(BackwardTest, SquareGivesTwoX) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  x.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(BackwardTest, UnusedParameterKeepsZeroGrad) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor unused = Tensor::from({2}, {3, 4}, true);
  x.zero_grad();
  unused.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  EXPECT_EQ(std::vector<double>(unused.grad().begin(), unused.grad().end()), (std::vector<double>{0, 0}));
}

TEST(BackwardTest, NonScalarLossIsRejected) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  TapeScope scope(tape);
  EXPECT_THROW(tape.backward(mul(x, x)), ContractError);
}

TEST(BackwardTest, SecondBackwardOnSameTapeIsRejected) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  x.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(mul(x, x));
  tape.backward(loss);
  const auto first = std::vector<double>(x.grad().begin(), x.grad().end());
  EXPECT_THROW(tape.backward(loss), ContractError);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), first);
}

TEST(BackwardTest, NoRecordingOutsideTapeOrUnderNoGrad) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  {
    NoGradScope no_grad;
    sum(x);
  }
  EXPECT_EQ(tape.size(), 0u);
  sum(x);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(ElementwiseTest, GradientsMatchFiniteDifferences) {
  Rng rng = make_rng({9});
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor y = random_tensor({3, 4}, rng);
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return sum(mul(add(t, y), sub(t, y))); }, x), 1e-6);
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return mean(mul(scale(t, 3.0), t)); }, x), 1e-6);
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return sum(mul(gelu(t), y)); }, x), 1e-6);
  const Tensor c = random_tensor({1, 4}, rng);
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return sum(mul(expand(t, {3, 4}), y)); }, c), 1e-6);
  EXPECT_LT(fd_rel_error([&](const Tensor& t) { return sum(mul(concat({t, y}, 1), concat({y, t}, 1))); }, x), 1e-6);
}

TEST(DropoutTest, IdentityInEvalOrAtZeroAndInvertedScalingInTraining) {
  Rng rng = make_rng({10});
  const Tensor x = random_tensor({4, 50}, rng);
  EXPECT_TRUE(dropout(x, 0.5, false, &rng).same_storage(x));
  EXPECT_TRUE(dropout(x, 0.0, true, &rng).same_storage(x));
  const Tensor y = dropout(x, 0.5, true, &rng);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (y.data()[i] == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(y.data()[i], 2.0 * x.data()[i]);
    }
  }
  EXPECT_GT(zeros, 50u);
  EXPECT_LT(zeros, 150u);
}

TEST(FiniteDiffTest, SumGivesOnes) {
  Rng rng = make_rng({11});
  const Tensor x = random_tensor({5}, rng);
  const Tensor g = finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiffTest, SquareAtThree) {
  const Tensor g = finite_diff_grad([](const Tensor& t) { return t.item() * t.item(); }, Tensor::scalar(3.0), 1e-5);
  EXPECT_NEAR(g.item(), 6.0, 1e-9);
}

TEST(FiniteDiffTest, NonFiniteEvaluationRaises) {
  EXPECT_THROW(finite_diff_grad([](const Tensor& t) { return std::log(t.item() - 1.0); }, Tensor::scalar(1.0)),
               NumericError);
}

TEST(FiniteDiffTest, InplaceVariantRestoresValuesExactly) {
  Rng rng = make_rng({12});
  Tensor x = random_tensor({6}, rng);
  const auto before = values(x);
  const Tensor g = finite_diff_grad_inplace([&] { return sum(mul(x, x)).item(); }, x);
  EXPECT_EQ(values(x), before);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(g.data()[i], 2 * before[i], 1e-8);
}

TEST(FiniteDiffTest, DoesNotReadAutodiffState) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  x.mutable_grad()[0] = 1e9;
  const Tensor g = finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x);
  EXPECT_NEAR(g.data()[0], 1.0, 1e-9);
}
