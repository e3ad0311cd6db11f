#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "iprls/grad_check.hpp"
#include "iprls/ops.hpp"
#include "iprls/tape.hpp"
#include "iprls/tensor.hpp"
#include "test_util.hpp"

using namespace iprls;
using iprls::test::naive_matmul;

namespace {

using D = double;

/// Weighted sum with fixed random coefficients so every output matters.
Var probe_loss(Tape<D>& t, Var y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ops::weighted_sum(t, y, Tensor<D>::randn(t.value(y).shape(), rng));
}

}  // namespace

TEST(Tensor, RejectsZeroDimensions) {
  EXPECT_THROW(Tensor<float>(Shape{0, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, MatrixFactoryAndAccess) {
  const auto m = Tensor<float>::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m.at(1, 2), 6.0f);
  EXPECT_THROW(Tensor<float>::matrix({{1, 2}, {3}}), ShapeError);
  EXPECT_THROW(m.item(), ShapeError);
  EXPECT_EQ(Tensor<float>::scalar(2.5f).item(), 2.5f);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const auto a = Tensor<D>::matrix({{1, 2}, {3, 4}});
  const auto eye = Tensor<D>::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(ops::matmul(a, eye), a);
}

TEST(Matmul, HandArithmetic) {
  const auto r = ops::matmul(Tensor<D>::matrix({{1, 2}}), Tensor<D>::matrix({{3}, {4}}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r.item(), 11.0);
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(ops::matmul(Tensor<D>(Shape{2, 3}), Tensor<D>(Shape{2, 3})), ShapeError);
  EXPECT_THROW(ops::matmul_nt(Tensor<D>(Shape{2, 3}), Tensor<D>(Shape{2, 4})), ShapeError);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(3);
  const auto a = Tensor<D>::randn(Shape{7, 5}, rng);
  const auto b = Tensor<D>::randn(Shape{5, 9}, rng);
  EXPECT_LT(test::max_abs_diff(ops::matmul(a, b), naive_matmul(a, b)), 1e-12);
  const auto c = Tensor<D>::randn(Shape{9, 5}, rng);
  EXPECT_LT(test::max_abs_diff(ops::matmul_nt(a, c), naive_matmul(a, test::transpose(c))), 1e-12);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto a = Tensor<D>::randn(Shape{3, 4}, rng);
  const auto b = Tensor<D>::randn(Shape{4, 2}, rng);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var x) { return probe_loss(t, ops::matmul(t, x, t.constant(b))); }, a), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var x) { return probe_loss(t, ops::matmul(t, t.constant(a), x)); }, b), 1e-3);
}

TEST(Matmul, FloatGradientUsableAtDefaultStep) {
  std::mt19937_64 rng(6);
  const auto a = Tensor<float>::randn(Shape{3, 4}, rng);
  const auto b = Tensor<float>::randn(Shape{4, 2}, rng);
  const ScalarFn<float> f = [&](Tape<float>& t, Var x) { return ops::sum(t, ops::matmul(t, x, t.constant(b))); };
  EXPECT_LT(grad_check<float>(f, a), 1e-2);
}

TEST(Softmax, SymmetricPair) {
  const auto s = ops::softmax(Tensor<D>::vector({0, 0}), 0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, LogTwoCase) {
  const auto s = ops::softmax(Tensor<D>::vector({std::log(2.0), 0}), 0);
  EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, SingleElementIsOne) { EXPECT_EQ(ops::softmax(Tensor<D>::vector({-17.0}), 0).item(), 1.0); }

TEST(Softmax, LargeInputsStayFinite) {
  const auto s = ops::softmax(Tensor<float>::vector({1000.f, 1000.f, -1000.f}), 0);
  EXPECT_FLOAT_EQ(s[0], 0.5f);
  EXPECT_FLOAT_EQ(s[2], 0.0f);
}

TEST(Softmax, NaNInputThrows) {
  EXPECT_THROW(ops::softmax(Tensor<D>::vector({0.0, std::numeric_limits<D>::quiet_NaN()}), 0), std::domain_error);
}

TEST(Softmax, RowsSumToOneAlongEitherAxis) {
  std::mt19937_64 rng(8);
  const auto x = Tensor<D>::randn(Shape{4, 6}, rng, 3.0);
  for (std::size_t axis : {0u, 1u}) {
    const auto s = ops::softmax(x, axis);
    const std::size_t outer = axis == 1 ? 4 : 6, inner = axis == 1 ? 6 : 4;
    for (std::size_t o = 0; o < outer; ++o) {
      double sum = 0.0;
      for (std::size_t i = 0; i < inner; ++i) sum += axis == 1 ? s.at(o, i) : s.at(i, o);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  const auto x = Tensor<D>::randn(Shape{3, 5}, rng);
  EXPECT_LT(grad_check<D>([](Tape<D>& t, Var v) { return probe_loss(t, ops::softmax(t, v, 1)); }, x), 1e-3);
  EXPECT_LT(grad_check<D>([](Tape<D>& t, Var v) { return probe_loss(t, ops::softmax(t, v, 0)); }, x), 1e-3);
}

TEST(LayerNorm, TwoElementCaseWithZeroEps) {
  Tape<D> t;
  Var y = ops::layer_norm(t, t.constant(Tensor<D>::matrix({{1, 3}})), t.constant(Tensor<D>::vector({1, 1})),
                          t.constant(Tensor<D>::vector({0, 0})), 0.0);
  EXPECT_DOUBLE_EQ(t.value(y)[0], -1.0);
  EXPECT_DOUBLE_EQ(t.value(y)[1], 1.0);
}

TEST(LayerNorm, ConstantRowGivesBias) {
  Tape<D> t;
  Var y = ops::layer_norm(t, t.constant(Tensor<D>::matrix({{4, 4}})), t.constant(Tensor<D>::vector({2, 3})),
                          t.constant(Tensor<D>::vector({0.5, -0.25})));
  EXPECT_DOUBLE_EQ(t.value(y)[0], 0.5);
  EXPECT_DOUBLE_EQ(t.value(y)[1], -0.25);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  const auto x = Tensor<D>::randn(Shape{2, 4}, rng);
  const auto g = Tensor<D>::randn(Shape{4}, rng);
  const auto b = Tensor<D>::randn(Shape{4}, rng);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) {
              return probe_loss(t, ops::layer_norm(t, v, t.constant(g), t.constant(b)));
            }, x), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) {
              return probe_loss(t, ops::layer_norm(t, t.constant(x), v, t.constant(b)));
            }, g), 1e-3);
}

TEST(LayerNorm, BadGainLengthThrows) {
  Tape<D> t;
  EXPECT_THROW(ops::layer_norm(t, t.constant(Tensor<D>(Shape{2, 3})), t.constant(Tensor<D>(Shape{2})),
                               t.constant(Tensor<D>(Shape{3}))),
               ShapeError);
}

TEST(Backward, SquareAtThreeGivesSix) {
  Tape<D> t;
  Var x = t.leaf(Tensor<D>::scalar(3.0));
  t.backward(ops::sum(t, ops::square(t, x)));
  EXPECT_DOUBLE_EQ(t.grad(x).item(), 6.0);
}

TEST(Backward, SumOfProductMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto a = Tensor<D>::randn(Shape{3, 3}, rng);
  const auto b = Tensor<D>::randn(Shape{3, 3}, rng);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var x) { return ops::sum(t, ops::matmul(t, x, t.constant(b))); }, a), 1e-6);
}

TEST(Backward, NonParticipatingTensorHasZeroGradient) {
  Tape<D> t;
  Var x = t.leaf(Tensor<D>::vector({1, 2}));
  Var unused = t.leaf(Tensor<D>::vector({5, 6, 7}));
  t.backward(ops::sum(t, x));
  EXPECT_EQ(t.grad(unused), Tensor<D>(Shape{3}));
  EXPECT_FALSE(t.has_grad(unused));
}

TEST(Backward, NonScalarLossThrows) {
  Tape<D> t;
  Var x = t.leaf(Tensor<D>::vector({1, 2}));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Backward, SecondSweepThrows) {
  Tape<D> t;
  Var x = t.leaf(Tensor<D>::scalar(1.0));
  Var l = ops::sum(t, x);
  t.backward(l);
  EXPECT_THROW(t.backward(l), std::logic_error);
}

TEST(Backward, ReusedNodeAccumulates) {
  Tape<D> t;
  Var x = t.leaf(Tensor<D>::scalar(2.0));
  t.backward(ops::sum(t, ops::mul(t, x, x)));
  EXPECT_DOUBLE_EQ(t.grad(x).item(), 4.0);
}

TEST(GradCheck, SquareIsExactToRoundoff) {
  EXPECT_LT(grad_check<D>([](Tape<D>& t, Var x) { return ops::sum(t, ops::square(t, x)); }, Tensor<D>::scalar(3.0)),
            1e-6);
}

TEST(GradCheck, DetectsWrongGradient) {
  // exp recorded with a deliberately wrong backward.
  const ScalarFn<D> f = [](Tape<D>& t, Var x) {
    Tensor<D> y = t.value(x);
    for (auto& v : y.data()) v = std::exp(v);
    Var out = t.record(std::move(y), {x}, [x](Tape<D>& tt, std::size_t self) {
      tt.grad_buffer(x)[0] += 2.0 * tt.grad_of(self)[0];
    });
    return ops::sum(t, out);
  };
  EXPECT_GT(grad_check<D>(f, Tensor<D>::scalar(0.3)), 0.1);
}

TEST(ElementwiseOps, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  auto x = Tensor<D>::randn(Shape{3, 4}, rng);
  const auto other = Tensor<D>::randn(Shape{3, 4}, rng);
  const auto row = Tensor<D>::randn(Shape{4}, rng);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) { return probe_loss(t, ops::gelu(t, v)); }, x), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) { return probe_loss(t, ops::exp(t, v)); }, x), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) { return probe_loss(t, ops::mul(t, v, t.constant(other))); }, x), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) { return probe_loss(t, ops::add_row(t, t.constant(x), v)); }, row), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) { return probe_loss(t, ops::sub(t, t.constant(other), v)); }, x), 1e-3);
  Tensor<D> pos = x;
  for (auto& v : pos.data()) v = std::abs(v) + 0.5;
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) { return probe_loss(t, ops::log(t, v)); }, pos), 1e-3);
  Tensor<D> away = x;
  for (auto& v : away.data()) v = v >= 0 ? v + 0.1 : v - 0.1;
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) { return probe_loss(t, ops::relu(t, v)); }, away), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var v) { return probe_loss(t, ops::abs(t, v)); }, away), 1e-3);
}

TEST(Gelu, MatchesErfDefinition) {
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    EXPECT_NEAR(ops::gelu_value(x), 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  Tape<D> t;
  Var l = ops::cross_entropy(t, t.constant(Tensor<D>(Shape{3, 4})), {0, 1, 3});
  EXPECT_NEAR(t.value(l).item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, GradientAndLabelChecks) {
  std::mt19937_64 rng(13);
  const auto z = Tensor<D>::randn(Shape{4, 3}, rng);
  EXPECT_LT(grad_check<D>([](Tape<D>& t, Var v) { return ops::cross_entropy(t, v, {0, 2, 1, 1}); }, z), 1e-3);
  Tape<D> t;
  EXPECT_THROW(ops::cross_entropy(t, t.constant(z), {0, 1, 2, 3}), std::out_of_range);
  EXPECT_THROW(ops::cross_entropy(t, t.constant(z), {0, 1}), ShapeError);
}

TEST(Attention, SegmentsDoNotInteract) {
  std::mt19937_64 rng(14);
  const auto q = Tensor<D>::randn(Shape{5, 4}, rng);
  const auto k = Tensor<D>::randn(Shape{5, 4}, rng);
  auto v = Tensor<D>::randn(Shape{5, 4}, rng);
  Tape<D> t1;
  const Tensor<D> before =
      t1.value(ops::attention(t1, t1.constant(q), t1.constant(k), t1.constant(v), 2, {{0, 3}, {3, 2}}, 0.5));
  for (std::size_t j = 0; j < 4; ++j) v.at(4, j) += 10.0;
  Tape<D> t2;
  const Tensor<D> after =
      t2.value(ops::attention(t2, t2.constant(q), t2.constant(k), t2.constant(v), 2, {{0, 3}, {3, 2}}, 0.5));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(before.at(r, j), after.at(r, j));
  }
  EXPECT_NE(before.at(3, 0), after.at(3, 0));
}

TEST(Attention, RejectsBadSegmentation) {
  Tape<D> t;
  Var x = t.constant(Tensor<D>(Shape{4, 2}));
  EXPECT_THROW(ops::attention(t, x, x, x, 1, {{0, 3}}, 1.0), ShapeError);
  EXPECT_THROW(ops::attention(t, x, x, x, 1, {{0, 2}, {3, 1}}, 1.0), ShapeError);
  EXPECT_THROW(ops::attention(t, x, x, x, 3, {{0, 4}}, 1.0), ShapeError);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  const auto q = Tensor<D>::randn(Shape{5, 4}, rng);
  const auto k = Tensor<D>::randn(Shape{5, 4}, rng);
  const auto v = Tensor<D>::randn(Shape{5, 4}, rng);
  const std::vector<ops::Segment> segs{{0, 2}, {2, 3}};
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var x) {
              return probe_loss(t, ops::attention(t, x, t.constant(k), t.constant(v), 2, segs, 0.5));
            }, q), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var x) {
              return probe_loss(t, ops::attention(t, t.constant(q), x, t.constant(v), 2, segs, 0.5));
            }, k), 1e-3);
  EXPECT_LT(grad_check<D>([&](Tape<D>& t, Var x) {
              return probe_loss(t, ops::attention(t, t.constant(q), t.constant(k), x, 2, segs, 0.5));
            }, v), 1e-3);
}

TEST(GatherRows, PicksRowsAndScattersGradient) {
  const auto x = Tensor<D>::matrix({{1, 2}, {3, 4}, {5, 6}});
  Tape<D> t;
  Var in = t.leaf(x);
  Var g = ops::gather_rows(t, in, {2, 0, 2});
  EXPECT_EQ(t.value(g), Tensor<D>::matrix({{5, 6}, {1, 2}, {5, 6}}));
  t.backward(ops::sum(t, g));
  EXPECT_EQ(t.grad(in), Tensor<D>::matrix({{1, 1}, {0, 0}, {2, 2}}));
}
