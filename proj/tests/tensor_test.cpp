#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "chartrans/errors.hpp"
#include "chartrans/gradcheck.hpp"
#include "chartrans/ops.hpp"

namespace chartrans {
namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return T::from(std::move(shape), std::move(v));
}

void expect_values(const T& t, const std::vector<double>& expected, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.data()[i], expected[i], tol) << i;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = T::from({2, 2}, {1, 0, 0, 1});
  auto m = T::from({2, 2}, {3, 4, 5, 6});
  expect_values(matmul(eye, m), {3, 4, 5, 6});
}

TEST(Matmul, RowTimesColumn) {
  auto out = matmul(T::from({1, 2}, {1, 2}), T::from({2, 1}, {3, 4}));
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(out.item(), 11.0);
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng).detach_copy(true);
  auto b = random_tensor({4, 2}, rng);
  backward(sum(matmul(a, b)));
  // d/da sum(a b) = ones[3x2] * b^T: every row equals the row sums of b
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_NEAR(a.grad()[i * 4 + k], b.data()[k * 2] + b.data()[k * 2 + 1], 1e-12);
    }
  }
  EXPECT_LT(finite_diff_check([&](const T& x) { return sum(matmul(x, b)); }, a), 1e-6);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(T::zeros({2, 3}), T::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("vs [2x3]"), std::string::npos);
  }
}

TEST(Softmax, ClosedFormExamples) {
  expect_values(softmax_lastdim(T::from({3}, {0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  expect_values(softmax_lastdim(T::from({2}, {1000, 1000})), {0.5, 0.5});
  expect_values(softmax_lastdim(T::from({2}, {0, std::log(3.0)})), {0.25, 0.75});
}

TEST(Softmax, SlicesSumToOne) {
  std::mt19937_64 rng(7);
  for (int seed = 0; seed < 20; ++seed) {
    auto y = softmax_lastdim(random_tensor({5, 7}, rng, 10.0));
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(y.data()[r * 7 + c], 0.0);
        s += y.data()[r * 7 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(MaskedSoftmax, SingleUnmaskedKeyGetsAllWeight) {
  std::vector<std::uint8_t> pad = {1, 1, 0, 1};
  auto y = masked_softmax(T::from({1, 1, 4}, {3, -2, 0.5, 9}), {pad, 1, false});
  expect_values(y, {0, 0, 1, 0});
}

TEST(MaskedSoftmax, CausalRowsOnlySeeThePast) {
  auto y = masked_softmax(T::zeros({1, 3, 3}), {{}, 1, true});
  expect_values(y, {1, 0, 0, 0.5, 0.5, 0, 1.0 / 3, 1.0 / 3, 1.0 / 3});
}

TEST(LayerNorm, ConstantSliceCollapsesToBias) {
  auto y = layer_norm(T::from({3}, {5, 5, 5}), T::full({3}, 1.0), T::zeros({3}));
  expect_values(y, {0, 0, 0});
}

TEST(LayerNorm, UsesPopulationVariance) {
  auto y = layer_norm(T::from({2}, {1, 3}), T::full({2}, 1.0), T::zeros({2}), 0.0);
  expect_values(y, {-1, 1});
}

TEST(LayerNorm, OutputMeanIsZero) {
  std::mt19937_64 rng(3);
  auto y = layer_norm(random_tensor({4, 16}, rng, 5.0), T::full({16}, 1.0), T::zeros({16}));
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0;
    for (std::size_t c = 0; c < 16; ++c) mean += y.data()[r * 16 + c];
    EXPECT_LT(std::abs(mean / 16), 1e-9);
  }
}

TEST(LayerNorm, RejectsMismatchedGain) {
  EXPECT_THROW(layer_norm(T::zeros({2, 3}), T::zeros({2}), T::zeros({3})), ShapeError);
}

TEST(Conv1d, WidthOneIdentityFilter) {
  auto x = T::from({4, 1}, {1, -2, 3, 4});
  expect_values(conv1d_same(x, T::from({1, 1, 1}, {1}), 1), {1, -2, 3, 4});
}

TEST(Conv1d, WidthThreeZeroPadded) {
  auto y = conv1d_same(T::from({3, 1}, {1, 2, 3}), T::from({3, 1, 1}, {1, 1, 1}), 3);
  expect_values(y, {3, 6, 5});
}

TEST(Conv1d, EvenWidthPadsRight) {
  // width 2: y[l] = x[l] * w0 + x[l+1] * w1, zero beyond the end
  auto y = conv1d_same(T::from({4, 1}, {1, 2, 3, 4}), T::from({2, 1, 1}, {1, 10}), 2);
  EXPECT_EQ(y.shape(), (Shape{4, 1}));
  expect_values(y, {21, 32, 43, 4});
}

TEST(Conv1d, OutputLengthEqualsInputForAllWidths) {
  std::mt19937_64 rng(5);
  for (std::size_t w = 1; w <= 8; ++w) {
    for (std::size_t len : {1, 2, 7, 13}) {
      auto y = conv1d_same(random_tensor({2, len, 3}, rng), random_tensor({w, 3, 4}, rng), w);
      EXPECT_EQ(y.shape(), (Shape{2, len, 4}));
    }
  }
}

TEST(Conv1d, WidthOutOfRange) {
  EXPECT_THROW(conv1d_same(T::zeros({3, 1}), T::zeros({9, 1, 1}), 9), DataError);
  EXPECT_THROW(conv1d_same(T::zeros({3, 1}), T::zeros({1, 1, 1}), 0), DataError);
}

TEST(Conv1d, BatchRowsDoNotLeak) {
  // second row is zero; its outputs must be zero even though row one is not
  auto x = T::from({2, 2, 1}, {1, 1, 0, 0});
  auto y = conv1d_same(x, T::from({3, 1, 1}, {1, 1, 1}), 3);
  expect_values(y, {2, 2, 0, 0});
}

TEST(MaxPool, RejectsIndivisibleLength) {
  EXPECT_THROW(maxpool1d(T::from({6, 1}, {1, 5, 2, 9, 3, 0}), 5), ShapeError);
}

TEST(MaxPool, WindowMaximum) {
  expect_values(maxpool1d(T::from({5, 1}, {1, 5, 2, 9, 3}), 5), {9});
}

TEST(MaxPool, FactorFiveReduction) {
  EXPECT_EQ(maxpool1d(T::zeros({450, 2}), 5).shape(), (Shape{90, 2}));
}

TEST(MaxPool, StrideOneIsIdentity) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 20; ++i) {
    auto x = random_tensor({3, 6, 2}, rng);
    auto y = maxpool1d(x, 1);
    EXPECT_EQ(y.shape(), x.shape());
    expect_values(y, std::vector<double>(x.data().begin(), x.data().end()), 0.0);
  }
}

TEST(MaxPool, TieGradientGoesToFirstMaximum) {
  auto x = T::from({4, 1}, {2, 2, 1, 2}, true);
  backward(sum(maxpool1d(x, 4)));
  expect_values(T::from({4}, std::vector<double>(x.grad().begin(), x.grad().end())),
                {1, 0, 0, 0});
}

TEST(Activation, Examples) {
  expect_values(activation(T::from({3}, {-1, 0, 2}), Activation::kRelu), {0, 0, 2});
  EXPECT_DOUBLE_EQ(activation(T::scalar(0.0), Activation::kSigmoid).item(), 0.5);
  EXPECT_NEAR(activation(T::scalar(std::log(3.0)), Activation::kSigmoid).item(), 0.75, 1e-15);
}

TEST(Activation, ReluGradientAtZeroIsZero) {
  auto x = T::from({3}, {-1, 0, 2}, true);
  backward(sum(activation(x, Activation::kRelu)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(Embedding, RepeatedIdGathersSameRow) {
  auto table = T::from({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<std::int32_t> ids = {0, 0};
  expect_values(embedding_lookup(table, std::span<const std::int32_t>(ids), {2}), {1, 2, 1, 2});
}

TEST(Embedding, GradientScatterAdds) {
  auto table = T::zeros({3, 2}, true);
  std::vector<std::int32_t> ids = {2, 2};
  backward(sum(embedding_lookup(table, std::span<const std::int32_t>(ids), {2})));
  std::vector<double> g(table.grad().begin(), table.grad().end());
  EXPECT_EQ(g, (std::vector<double>{0, 0, 0, 0, 2, 2}));
}

TEST(Embedding, OutOfRangeIdNamesTheId) {
  auto table = T::zeros({3, 2});
  std::vector<std::int32_t> ids = {3};
  try {
    embedding_lookup(table, std::span<const std::int32_t>(ids), {1});
    FAIL();
  } catch (const VocabError& e) {
    EXPECT_NE(std::string(e.what()).find("id 3"), std::string::npos);
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = T::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  auto x = T::from({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto x = T::from({2}, {1, 2}, true);
  auto loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  backward(loss);
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  auto x = T::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(affine(x, 2.0, 0.0)), ShapeError);
}

TEST(Backward, SharedTensorSumsBothPaths) {
  std::mt19937_64 rng(17);
  for (int seed = 0; seed < 20; ++seed) {
    auto x = random_tensor({2, 3}, rng);
    auto w = random_tensor({3, 3}, rng);
    // x feeds the product and the residual path
    auto f = [&](const T& in) {
      return sum(activation(add(matmul(in, w), in), Activation::kTanh));
    };
    EXPECT_LT(finite_diff_check(f, x), 1e-6);
  }
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = T::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, LinearFunctionIsExact) {
  std::mt19937_64 rng(19);
  auto w = random_tensor({4, 3}, rng);
  auto x = random_tensor({2, 4}, rng);
  EXPECT_LT(finite_diff_check([&](const T& in) { return matmul(in, w); }, x), 1e-9);
}

TEST(GradCheck, SoftmaxOnRandomVector) {
  std::mt19937_64 rng(23);
  EXPECT_LT(finite_diff_check([](const T& in) { return softmax_lastdim(in); },
                              random_tensor({4}, rng)),
            1e-6);
}

// relu(x) * k with a backward that scales by `grad_factor` instead of k.
T relu_scaled(const T& x, double k, double grad_factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0 ? k * x.data()[i] : 0.0;
  return make_result<double>(x.shape(), std::move(out), {x},
                             [x, grad_factor](const detail::Node<double>& self) {
                               auto g = x.grad_sink();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 if (x.data()[i] > 0) g[i] += grad_factor * self.grad[i];
                               }
                             });
}

TEST(GradCheck, KinkWithinStepUsesCleanSide) {
  // 0.3e-5 is inside the default step of 1e-5: the central difference mixes
  // both slopes, the left one-sided difference is clean.
  auto x = T::from({2}, {0.3e-5, 0.5});
  const auto r = finite_diff_report([&] { return relu_scaled(x, 2.0, 2.0); }, {x});
  EXPECT_EQ(r.coordinates, 2u);
  EXPECT_EQ(r.one_sided, 1u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, SmoothFunctionNeedsNoRecheck) {
  std::mt19937_64 rng(29);
  auto x = random_tensor({6}, rng);
  const auto r = finite_diff_report([&] { return activation(x, Activation::kTanh); }, {x});
  EXPECT_EQ(r.one_sided, 0u);
  EXPECT_LT(r.max_rel_error, kOneSidedRecheck);
}

TEST(GradCheck, WrongGradientFailsWithOrWithoutKink) {
  auto near = T::from({1}, {0.3e-5});
  EXPECT_GT(finite_diff_check([&] { return relu_scaled(near, 2.0, 1.5); }, {near}), 0.1);
  auto far = T::from({1}, {0.5});
  EXPECT_GT(finite_diff_check([&] { return relu_scaled(far, 2.0, 1.5); }, {far}), 0.1);
}

// Every differentiable op against central differences on randomized small
// shapes, 20 seeds each.
class OpGradient : public ::testing::TestWithParam<int> {
 protected:
  std::mt19937_64 rng{std::uint64_t(GetParam()) * 7919 + 1};
};

TEST_P(OpGradient, Matmul) {
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  EXPECT_LT(finite_diff_check([&] { return matmul(a, b); }, {a, b}), 1e-6);
}

TEST_P(OpGradient, BatchedMatmul) {
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 4, 2}, rng);
  auto bt = random_tensor({2, 5, 4}, rng);
  EXPECT_LT(finite_diff_check([&] { return bmm(a, b); }, {a, b}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return bmm(a, bt, true); }, {a, bt}), 1e-6);
}

TEST_P(OpGradient, Linear) {
  auto x = random_tensor({2, 3, 4}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto b = random_tensor({5}, rng);
  EXPECT_LT(finite_diff_check([&] { return linear(x, w, b); }, {x, w, b}), 1e-6);
}

TEST_P(OpGradient, ElementwiseArithmetic) {
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto row = random_tensor({4}, rng);
  EXPECT_LT(finite_diff_check([&] { return add(a, row); }, {a, row}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return sub(a, b); }, {a, b}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return mul(a, b); }, {a, b}), 1e-6);
  EXPECT_LT(finite_diff_check([&] { return affine(a, 2.5, -1.0); }, {a}), 1e-6);
}

TEST_P(OpGradient, Activations) {
  auto x = random_tensor({3, 5}, rng);
  for (auto kind : {Activation::kRelu, Activation::kSigmoid, Activation::kTanh}) {
    EXPECT_LT(finite_diff_check([&](const T& in) { return activation(in, kind); }, x), 1e-6);
  }
}

TEST_P(OpGradient, Softmax) {
  auto x = random_tensor({3, 5}, rng, 2.0);
  EXPECT_LT(finite_diff_check([](const T& in) { return softmax_lastdim(in); }, x), 1e-6);
}

TEST_P(OpGradient, MaskedSoftmax) {
  auto x = random_tensor({4, 3, 3}, rng, 2.0);
  std::vector<std::uint8_t> pad = {0, 0, 1, 0, 1, 0};
  EXPECT_LT(finite_diff_check([&](const T& in) { return masked_softmax(in, {pad, 2, true}); }, x),
            1e-6);
}

TEST_P(OpGradient, LayerNorm) {
  auto x = random_tensor({3, 6}, rng);
  auto g = random_tensor({6}, rng);
  auto b = random_tensor({6}, rng);
  EXPECT_LT(finite_diff_check([&] { return layer_norm(x, g, b); }, {x, g, b}), 1e-6);
}

TEST_P(OpGradient, Conv1d) {
  for (std::size_t w = 1; w <= 8; ++w) {
    auto x = random_tensor({2, 5, 3}, rng);
    auto f = random_tensor({w, 3, 2}, rng);
    EXPECT_LT(finite_diff_check([&] { return conv1d_same(x, f, w); }, {x, f}), 1e-6) << w;
  }
}

TEST_P(OpGradient, MaxPool) {
  auto x = random_tensor({2, 6, 3}, rng);
  EXPECT_LT(finite_diff_check([](const T& in) { return maxpool1d(in, 3); }, x), 1e-6);
}

TEST_P(OpGradient, Embedding) {
  auto table = random_tensor({5, 3}, rng);
  std::vector<std::int32_t> ids = {4, 0, 4, 2};
  EXPECT_LT(finite_diff_check(
                [&](const T& t) {
                  return embedding_lookup(t, std::span<const std::int32_t>(ids), {2, 2});
                },
                table),
            1e-6);
}

TEST_P(OpGradient, ShapeOps) {
  auto a = random_tensor({2, 3, 2}, rng);
  auto b = random_tensor({2, 3, 4}, rng);
  std::vector<T> parts = {a, b};
  EXPECT_LT(finite_diff_check([&] { return concat_lastdim<double>(parts); }, {a, b}), 1e-6);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  EXPECT_LT(finite_diff_check([](const T& in) { return swap_middle_axes(in); }, x), 1e-6);
  EXPECT_LT(finite_diff_check([](const T& in) { return reshape(in, {6, 4}); }, x), 1e-6);
  std::vector<double> factors = {1, 0, 2, -1, 0.5, 3};
  EXPECT_LT(finite_diff_check(
                [&](const T& in) { return scale_rows(in, std::span<const double>(factors)); },
                random_tensor({2, 3, 4}, rng)),
            1e-6);
}

TEST_P(OpGradient, Dropout) {
  auto x = random_tensor({4, 4}, rng);
  EXPECT_LT(finite_diff_check([](const T& in) { return dropout(in, 0.3, 99); }, x), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 20));

TEST(Dropout, ZeroRateIsIdentity) {
  auto x = T::from({3}, {1, 2, 3});
  auto y = dropout(x, 0.0, 1);
  EXPECT_EQ(y.node(), x.node());
}

}  // namespace
}  // namespace chartrans
