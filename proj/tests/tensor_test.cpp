#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "avqf/grad_check.hpp"
#include "avqf/ops.hpp"
#include "avqf/tensor.hpp"

using namespace avqf;

using Tf = Tensor<float>;
using Td = Tensor<double>;

namespace {

Td random_tensor(const Shape& shape, RngState& rng, bool requires_grad = true) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(-1.0, 1.0);
  return Td::from_data(shape, std::move(d), requires_grad);
}

// Independent triple-loop product used as the matmul oracle.
std::vector<double> matmul_reference(const std::vector<double>& a, const std::vector<double>& b,
                                     size_t m, size_t k, size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

}  // namespace

TEST(SeededInit, SameSeedIsBitIdentical) {
  RngState r1(42), r2(42);
  Tf a = seeded_init<float>({2, 3}, InitScheme::kUniformScaled, r1);
  Tf b = seeded_init<float>({2, 3}, InitScheme::kUniformScaled, r2);
  ASSERT_EQ(a.data().size(), b.data().size());
  EXPECT_EQ(0, std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)));
}

TEST(SeededInit, DifferentSeedDiffers) {
  RngState r1(42), r2(43);
  Tf a = seeded_init<float>({2, 3}, InitScheme::kUniformScaled, r1);
  Tf b = seeded_init<float>({2, 3}, InitScheme::kUniformScaled, r2);
  bool any_diff = false;
  for (size_t i = 0; i < a.numel(); ++i) any_diff |= (a.data()[i] != b.data()[i]);
  EXPECT_TRUE(any_diff);
}

TEST(SeededInit, BoundsFollowFanInFanOut) {
  RngState r(7);
  Tf a = seeded_init<float>({8, 16}, InitScheme::kUniformScaled, r);
  const float bound = std::sqrt(6.0f / (8 + 16));
  for (float v : a.data()) {
    EXPECT_LE(std::abs(v), bound);
  }
}

TEST(SeededInit, ZeroExtentRejected) {
  RngState r(1);
  EXPECT_THROW(seeded_init<float>({0}, InitScheme::kZeros, r), ShapeError);
  EXPECT_THROW(seeded_init<float>({2, 0, 3}, InitScheme::kUniformScaled, r), ShapeError);
}

TEST(SeededInit, ZerosAndOnes) {
  RngState r(1);
  Tf z = seeded_init<float>({3}, InitScheme::kZeros, r);
  Tf o = seeded_init<float>({3}, InitScheme::kOnes, r);
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
  for (float v : o.data()) EXPECT_EQ(v, 1.0f);
}

TEST(Matmul, Identity) {
  Tf eye = Tf::from_data({2, 2}, {1, 0, 0, 1});
  Tf m = Tf::from_data({2, 2}, {1, 2, 3, 4});
  Tf out = matmul(eye, m);
  EXPECT_EQ(out.data(), m.data());
}

TEST(Matmul, KnownProduct) {
  Tf a = Tf::from_data({2, 2}, {1, 2, 3, 4});
  Tf b = Tf::from_data({2, 2}, {5, 6, 7, 8});
  Tf c = matmul(a, b);
  std::vector<float> expect = {19, 22, 43, 50};
  EXPECT_EQ(c.data(), expect);
}

TEST(Matmul, MatchesReferenceOracle) {
  RngState rng(11);
  Td a = random_tensor({5, 4}, rng, false);
  Td b = random_tensor({4, 3}, rng, false);
  Td c = matmul(a, b);
  auto expect = matmul_reference(a.data(), b.data(), 5, 4, 3);
  for (size_t i = 0; i < c.numel(); ++i) EXPECT_NEAR(c.data()[i], expect[i], 1e-12);
}

TEST(Matmul, InnerExtentMismatch) {
  Tf a = Tf::zeros({2, 3});
  Tf b = Tf::zeros({2, 3});
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Softmax, UniformInput) {
  Tf x = Tf::from_data({3}, {0, 0, 0});
  Tf y = softmax(x, 0);
  for (float v : y.data()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-6f);
}

TEST(Softmax, LargeValuesStayFinite) {
  Tf x = Tf::from_data({2}, {1000, 0});
  Tf y = softmax(x, 0);
  EXPECT_TRUE(std::isfinite(y.data()[0]));
  EXPECT_TRUE(std::isfinite(y.data()[1]));
  EXPECT_NEAR(y.data()[0], 1.0f, 1e-6f);
}

TEST(Softmax, RowsSumToOne) {
  RngState rng(3);
  std::vector<float> d(20);
  for (auto& v : d) v = static_cast<float>(rng.uniform(-5, 5));
  Tf x = Tf::from_data({4, 5}, std::move(d));
  Tf y = softmax(x, 1);
  for (size_t i = 0; i < 4; ++i) {
    float s = 0;
    for (size_t j = 0; j < 5; ++j) {
      EXPECT_GE(y.at(i, j), 0.0f);
      s += y.at(i, j);
    }
    EXPECT_NEAR(s, 1.0f, 1e-6f);
  }
}

TEST(Softmax, AxisOutOfRange) {
  Tf x = Tf::zeros({2, 2});
  EXPECT_THROW(softmax(x, 2), ShapeError);
}

TEST(LayerNorm, ConstantRowGoesToZero) {
  Tf x = Tf::full({1, 4}, 3.5f);
  Tf g = Tf::ones({4});
  Tf b = Tf::zeros({4});
  Tf y = layer_norm(x, g, b, 1e-5f);
  for (float v : y.data()) EXPECT_NEAR(v, 0.0f, 1e-6f);
}

TEST(LayerNorm, AlreadyStandardRowPassesThrough) {
  Tf x = Tf::from_data({1, 2}, {1, -1});
  Tf y = layer_norm(x, Tf::ones({2}), Tf::zeros({2}), 1e-5f);
  EXPECT_NEAR(y.data()[0], 1.0f, 1e-4f);
  EXPECT_NEAR(y.data()[1], -1.0f, 1e-4f);
}

TEST(LayerNorm, OutputRowIsStandardized) {
  RngState rng(9);
  std::vector<float> d(16);
  for (auto& v : d) v = static_cast<float>(rng.uniform(-2, 2));
  Tf x = Tf::from_data({1, 16}, std::move(d));
  Tf y = layer_norm(x, Tf::ones({16}), Tf::zeros({16}), 1e-5f);
  float mu = 0;
  for (float v : y.data()) mu += v;
  mu /= 16;
  float var = 0;
  for (float v : y.data()) var += (v - mu) * (v - mu);
  var /= 16;
  EXPECT_NEAR(mu, 0.0f, 1e-4f);
  EXPECT_NEAR(var, 1.0f, 1e-3f);
}

TEST(LayerNorm, ShapeMismatchRejected) {
  Tf x = Tf::zeros({2, 4});
  EXPECT_THROW(layer_norm(x, Tf::ones({3}), Tf::zeros({4}), 1e-5f), ShapeError);
  EXPECT_THROW(layer_norm(x, Tf::ones({4}), Tf::zeros({4}), 0.0f), ValueError);
}

TEST(Backward, SumOfSquares) {
  Td x = Td::from_data({2}, {1, 2}, true);
  Td loss = sum(mul(x, x));
  x.zero_grad();
  backward(loss);
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, FrozenLeafStaysUntouched) {
  Td x = Td::from_data({2}, {1, 2}, true);
  Td frozen = Td::from_data({2}, {3, 4}, false);
  Td loss = sum(mul(x, frozen));
  x.zero_grad();
  backward(loss);
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarRejected) {
  Td x = Td::from_data({2}, {1, 2}, true);
  Td y = mul(x, x);
  EXPECT_THROW(backward(y), ShapeError);
}

TEST(Backward, AccumulationIsAdditive) {
  Td x = Td::from_data({1}, {3}, true);
  x.zero_grad();
  {
    Td loss = mul(x, x);
    backward(loss);
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  {
    Td loss = mul(x, x);
    backward(loss);
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Backward, EntirelyFrozenGraphRecordsNothing) {
  Td a = Td::from_data({2, 2}, {1, 2, 3, 4}, false);
  Td b = Td::from_data({2, 2}, {5, 6, 7, 8}, false);
  Td c = matmul(a, b);
  EXPECT_FALSE(c.requires_grad());
  EXPECT_TRUE(c.node()->parents.empty());
}

TEST(GradCheck, PolynomialAgainstAnalytic) {
  Td x = Td::from_data({2}, {1, 2}, true);
  auto f = [&] { return sum(mul(x, x)); };
  const double err = grad_check<double>(f, x, 1e-5);
  EXPECT_LE(err, 1e-6);
  // grad_check itself is validated here: the analytic gradient of sum(x^2)
  // is 2x, which backward must have produced for the error to be tiny.
  EXPECT_NEAR(x.grad()[0], 2.0, 1e-12);
  EXPECT_NEAR(x.grad()[1], 4.0, 1e-12);
}

TEST(GradCheck, InvalidStepRejected) {
  Td x = Td::from_data({1}, {1}, true);
  auto f = [&] { return sum(x); };
  EXPECT_THROW(grad_check<double>(f, x, 0.0), ValueError);
}

TEST(GradCheck, NonScalarFunctionRejected) {
  Td x = Td::from_data({2}, {1, 2}, true);
  auto f = [&] { return mul(x, x); };
  EXPECT_THROW(grad_check<double>(f, x, 1e-5), ShapeError);
}

// Every primitive's backward is held to 1e-6 relative against central
// differences in double on random inputs in [-1, 1].

TEST(PrimitiveGrad, Add) {
  RngState rng(21);
  Td a = random_tensor({3, 4}, rng);
  Td b = random_tensor({3, 4}, rng);
  auto f = [&] { return sum(mul(add(a, b), add(a, b))); };
  EXPECT_LE(grad_check<double>(f, {a, b}, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, AddBias) {
  RngState rng(22);
  Td x = random_tensor({3, 4}, rng);
  Td b = random_tensor({4}, rng);
  auto f = [&] { return sum(mul(add_bias(x, b), add_bias(x, b))); };
  EXPECT_LE(grad_check<double>(f, {x, b}, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, Scale) {
  RngState rng(23);
  Td x = random_tensor({5}, rng);
  auto f = [&] { return sum(mul(scale(x, 2.5), x)); };
  EXPECT_LE(grad_check<double>(f, x, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, Matmul) {
  RngState rng(24);
  Td a = random_tensor({3, 4}, rng);
  Td b = random_tensor({4, 2}, rng);
  auto f = [&] { return sum(mul(matmul(a, b), matmul(a, b))); };
  EXPECT_LE(grad_check<double>(f, {a, b}, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, Transpose) {
  RngState rng(25);
  Td a = random_tensor({3, 4}, rng);
  Td w = random_tensor({3, 4}, rng, false);
  auto f = [&] { return sum(mul(transpose(a), transpose(w))); };
  EXPECT_LE(grad_check<double>(f, a, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, Reshape) {
  RngState rng(26);
  Td a = random_tensor({2, 6}, rng);
  auto f = [&] { return mean(mul(reshape(a, {3, 4}), reshape(a, {3, 4}))); };
  EXPECT_LE(grad_check<double>(f, a, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, ConcatAndSlice) {
  RngState rng(27);
  Td a = random_tensor({2, 3}, rng);
  Td b = random_tensor({4, 3}, rng);
  auto f = [&] {
    Td c = concat<double>({a, b}, 0);
    Td s = slice(c, 0, 1, 4);
    return sum(mul(s, s));
  };
  EXPECT_LE(grad_check<double>(f, {a, b}, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, ConcatLastAxis) {
  RngState rng(28);
  Td a = random_tensor({3, 2}, rng);
  Td b = random_tensor({3, 5}, rng);
  auto f = [&] {
    Td c = concat<double>({a, b}, 1);
    Td s = slice(c, 1, 1, 5);
    return mean(mul(s, s));
  };
  EXPECT_LE(grad_check<double>(f, {a, b}, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, Gelu) {
  RngState rng(29);
  Td x = random_tensor({8}, rng);
  auto f = [&] { return sum(mul(gelu(x), gelu(x))); };
  EXPECT_LE(grad_check<double>(f, x, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, Softmax) {
  RngState rng(30);
  Td x = random_tensor({3, 5}, rng);
  Td w = random_tensor({3, 5}, rng, false);
  auto f = [&] { return sum(mul(softmax(x, 1), w)); };
  EXPECT_LE(grad_check<double>(f, x, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, SoftmaxAxis0) {
  RngState rng(31);
  Td x = random_tensor({4, 3}, rng);
  Td w = random_tensor({4, 3}, rng, false);
  auto f = [&] { return sum(mul(softmax(x, 0), w)); };
  EXPECT_LE(grad_check<double>(f, x, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, LayerNorm) {
  RngState rng(32);
  Td x = random_tensor({4, 6}, rng);
  Td g = random_tensor({6}, rng);
  Td b = random_tensor({6}, rng);
  Td w = random_tensor({4, 6}, rng, false);
  auto f = [&] { return sum(mul(layer_norm(x, g, b, 1e-5), w)); };
  EXPECT_LE(grad_check<double>(f, {x, g, b}, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, MeanAndSum) {
  RngState rng(33);
  Td x = random_tensor({7}, rng);
  auto f = [&] { return add(mean(mul(x, x)), sum(mul(x, x))); };
  EXPECT_LE(grad_check<double>(f, x, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, Embedding) {
  RngState rng(34);
  Td table = random_tensor({6, 4}, rng);
  std::vector<int> ids = {0, 3, 3, 5};
  auto f = [&] {
    Td e = embedding(table, ids);
    return sum(mul(e, e));
  };
  EXPECT_LE(grad_check<double>(f, table, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, CrossEntropyMasked) {
  RngState rng(35);
  Td logits = random_tensor({4, 6}, rng);
  std::vector<int> targets = {2, -1, 5, 0};
  std::vector<uint8_t> mask = {1, 0, 1, 1};
  auto f = [&] { return cross_entropy_masked(logits, targets, mask); };
  EXPECT_LE(grad_check<double>(f, logits, 1e-5), 1e-6);
}

TEST(PrimitiveGrad, AddPosition) {
  RngState rng(36);
  Td x = random_tensor({3, 2, 4}, rng);
  Td table = random_tensor({5, 4}, rng);
  auto f = [&] {
    Td y = add_position(x, table);
    return sum(mul(y, y));
  };
  EXPECT_LE(grad_check<double>(f, {x, table}, 1e-5), 1e-6);
}

// Composed graph: matmul -> softmax -> cross-entropy, checked end to end.
TEST(PrimitiveGrad, ComposedClassifierGraph) {
  RngState rng(37);
  Td x = random_tensor({3, 5}, rng, false);
  Td w = random_tensor({5, 4}, rng);
  Td b = random_tensor({4}, rng);
  std::vector<int> targets = {1, 3, 0};
  std::vector<uint8_t> mask = {1, 1, 1};
  auto f = [&] { return cross_entropy_masked(add_bias(matmul(x, w), b), targets, mask); };
  EXPECT_LE(grad_check<double>(f, {w, b}, 1e-5), 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Td logits = Td::zeros({3, 7});
  std::vector<int> targets = {0, 3, 6};
  std::vector<uint8_t> mask = {1, 1, 1};
  Td loss = cross_entropy_masked(logits, targets, mask);
  EXPECT_NEAR(loss.item(), std::log(7.0), 1e-4);
}

TEST(CrossEntropy, EmptyMaskRejected) {
  Td logits = Td::zeros({2, 4});
  std::vector<int> targets = {0, 1};
  std::vector<uint8_t> mask = {0, 0};
  EXPECT_THROW(cross_entropy_masked(logits, targets, mask), DegenerateLossError);
}

TEST(AddPosition, CapacityError) {
  Td x = Td::zeros({6, 2, 4});
  Td table = Td::zeros({5, 4});
  EXPECT_THROW(add_position(x, table), CapacityError);
}

TEST(AddPosition, ZeroTableIsIdentity) {
  RngState rng(38);
  Td x = random_tensor({3, 2, 4}, rng, false);
  Td table = Td::zeros({5, 4});
  Td y = add_position(x, table);
  EXPECT_EQ(x.data(), y.data());
}

TEST(Determinism, SeededPipelineIsBitIdentical) {
  auto run = [] {
    RngState rng(123);
    Tf a = seeded_init<float>({6, 6}, InitScheme::kUniformScaled, rng);
    Tf b = seeded_init<float>({6, 6}, InitScheme::kUniformScaled, rng);
    Tf c = softmax(matmul(a, b), 1);
    return c;
  };
  Tf c1 = run(), c2 = run();
  EXPECT_EQ(0, std::memcmp(c1.data().data(), c2.data().data(), c1.numel() * sizeof(float)));
}

TEST(Tensor, InvariantsAndAccessors) {
  Tf t = Tf::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.at(1, 2), 6.0f);
  EXPECT_THROW(Tf::from_data({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tf::zeros({0, 2}), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
}
