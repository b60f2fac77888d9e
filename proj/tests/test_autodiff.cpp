#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace transpdt;
using namespace transpdt::testing;

namespace {

// Scalar-loop reference product.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Matmul, IdentityAndZero) {
  std::mt19937_64 rng(1);
  Tape t(false);
  const Tensor b = random_tensor({2, 3}, rng);
  EXPECT_EQ(ops::matmul(t.constant(Tensor::identity(2)), t.constant(b)).value(), b);
  EXPECT_EQ(ops::matmul(t.constant(Tensor({2, 2})), t.constant(b)).value(), Tensor({2, 3}));
}

TEST(Matmul, HandExampleMatchesScalarLoop) {
  Tape t(false);
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}}), b = Tensor::matrix({{5, 6}, {7, 8}});
  const Tensor c = ops::matmul(t.constant(a), t.constant(b)).value();
  EXPECT_EQ(c, Tensor::matrix({{19, 22}, {43, 50}}));
  EXPECT_EQ(c, naive_matmul(a, b));
}

TEST(Matmul, RandomShapesMatchScalarLoop) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    Tape t(false);
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    EXPECT_LT(max_abs_diff(ops::matmul(t.constant(a), t.constant(b)).value(), naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
  Tape t(false);
  EXPECT_THROW(ops::matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), DimensionError);
}

TEST(MaskedSoftmax, SingleElement) {
  Tape t(false);
  EXPECT_DOUBLE_EQ(ops::masked_softmax(t.constant(Tensor::row({5.0})), {true}).value()[0], 1.0);
}

TEST(MaskedSoftmax, SymmetricInputIsUniform) {
  Tape t(false);
  const auto p = ops::masked_softmax(t.constant(Tensor::row({0.7, 0.7, 0.7})), {true, true, true}).value();
  for (double x : p.data()) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
}

TEST(MaskedSoftmax, MaskForcesOutput) {
  Tape t(false);
  const auto p = ops::masked_softmax(t.constant(Tensor::row({1.0, 2.0})), {false, true}).value();
  EXPECT_EQ(p[0], 0.0);
  EXPECT_EQ(p[1], 1.0);
}

TEST(MaskedSoftmax, AllMaskedIsDegenerate) {
  Tape t(false);
  EXPECT_THROW(ops::masked_softmax(t.constant(Tensor::row({1.0, 2.0})), {false, false}), DegenerateInputError);
}

TEST(MaskedSoftmax, SumsToOneIncludingExtremes) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> len(1, 12);
  std::bernoulli_distribution keep(0.6);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = len(rng);
    const double range = trial % 2 ? 1e6 : 10.0;
    Tensor x = random_tensor({1, n}, rng, -range, range);
    Mask m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = keep(rng);
    m[trial % n] = true;
    Tape t(false);
    const auto p = ops::masked_softmax(t.constant(x), m).value();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!m[i]) EXPECT_EQ(p[i], 0.0);
      else EXPECT_GE(p[i], 0.0);
      s += p[i];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Backward, SumGivesOnes) {
  ParameterStore store;
  store.add("p", Tensor::matrix({{1, -2, 3}}));
  GradientSet g(store);
  Tape t(true);
  t.backward(ops::sum(t.param(store, "p")), g);
  EXPECT_EQ(g[0], Tensor::matrix({{1, 1, 1}}));
}

TEST(Backward, DotWithSelfGivesTwiceValue) {
  ParameterStore store;
  store.add("p", Tensor::matrix({{1.5, -2, 0.25}}));
  GradientSet g(store);
  Tape t(true);
  Var p = t.param(store, "p");
  t.backward(ops::dot(p, p), g);
  EXPECT_EQ(g[0], Tensor::matrix({{3, -4, 0.5}}));
}

TEST(Backward, NonScalarLossIsContractError) {
  ParameterStore store;
  store.add("p", Tensor({1, 2}));
  GradientSet g(store);
  Tape t(true);
  EXPECT_THROW(t.backward(t.param(store, "p"), g), ContractError);
}

TEST(Backward, LossGradientOfItselfIsOne) {
  ParameterStore store;
  store.add("p", Tensor::matrix({{2.0}}));
  GradientSet g(store);
  Tape t(true);
  Var loss = ops::sum(t.param(store, "p"));
  t.backward(loss, g);
  EXPECT_EQ(t.grad(loss.id)[0], 1.0);
}

TEST(Forward, NonFiniteValueIsNumericError) {
  Tape t(false);
  EXPECT_THROW(ops::log_floor(t.constant(Tensor::row({0.0})), 0.0), NumericError);
}

TEST(GradCheck, ThreeLayerNet) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    ParameterStore store;
    store.add("w1", random_tensor({4, 6}, rng));
    store.add("b1", random_tensor({1, 6}, rng));
    store.add("w2", random_tensor({6, 5}, rng));
    store.add("b2", random_tensor({1, 5}, rng));
    store.add("w3", random_tensor({5, 1}, rng));
    const Tensor x = random_tensor({3, 4}, rng);
    auto r = check_gradients(store, [&](Tape& t) {
      using namespace ops;
      Var h = tanh(affine(t.constant(x), t.param(store, "w1"), t.param(store, "b1")));
      h = sigmoid(affine(h, t.param(store, "w2"), t.param(store, "b2")));
      return sum(square(matmul(h, t.param(store, "w3"))));
    });
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
    EXPECT_EQ(r.kinks, 0u);
  }
}

TEST(GradCheck, EveryOpOnRandomShapes) {
  for (const auto& [name, worst] : per_op_gradient_errors(100)) EXPECT_LT(worst, 1e-4) << name;
}

TEST(Dropout, EvalModeIsIdentity) {
  std::mt19937_64 rng(4);
  Tape t(false);
  const Tensor x = random_tensor({3, 4}, rng);
  EXPECT_EQ(ops::dropout(t.constant(x), 0.5, false, rng).value(), x);
}

TEST(Dropout, TrainModeKeepsExpectation) {
  std::mt19937_64 rng(5);
  Tape t(false);
  Tensor x({1, 20000});
  x.fill(1.0);
  const auto y = ops::dropout(t.constant(x), 0.25, true, rng).value();
  double s = 0.0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    s += v;
  }
  EXPECT_NEAR(s / 20000.0, 1.0, 0.03);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  ParameterStore store;
  store.add("p", Tensor::matrix({{1.0, -2.0}}));
  AdamState st(store);
  GradientSet g(store);
  adam_step(store, g, st, 0.1);
  EXPECT_EQ(store[0].value, Tensor::matrix({{1.0, -2.0}}));
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstSign) {
  // Step 1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
  for (double g0 : {0.3, -4.0, 1e-3}) {
    ParameterStore store;
    store.add("p", Tensor::matrix({{0.5}}));
    AdamState st(store);
    GradientSet g(store);
    g[0][0] = g0;
    const double lr = 0.01;
    adam_step(store, g, st, lr);
    const double expected = 0.5 - lr * g0 / (std::abs(g0) + 1e-8);
    EXPECT_NEAR(store[0].value[0], expected, 1e-15);
  }
}

TEST(Adam, ZeroLearningRateChangesNothing) {
  std::mt19937_64 rng(6);
  ParameterStore store;
  store.add("p", random_tensor({3, 3}, rng));
  const Tensor before = store[0].value;
  AdamState st(store);
  GradientSet g(store);
  g[0] = random_tensor({3, 3}, rng);
  adam_step(store, g, st, 0.0);
  EXPECT_EQ(store[0].value, before);
}

TEST(Adam, NanGradientNamesParameter) {
  ParameterStore store;
  store.add("layer.weight", Tensor({1, 2}));
  AdamState st(store);
  GradientSet g(store);
  g[0][1] = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(store, g, st, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
  EXPECT_EQ(store[0].value, Tensor({1, 2}));
}

TEST(Adam, StepCounterIncreasesStrictly) {
  ParameterStore store;
  store.add("p", Tensor({1}));
  AdamState st(store);
  GradientSet g(store);
  for (std::size_t k = 1; k <= 5; ++k) {
    adam_step(store, g, st, 0.1);
    EXPECT_EQ(st.step, k);
  }
}

TEST(Adam, IdenticalRunsAreBitwiseIdentical) {
  auto run = [] {
    std::mt19937_64 rng(7);
    ParameterStore store;
    store.add("w", random_tensor({4, 3}, rng));
    const Tensor x = random_tensor({5, 4}, rng);
    AdamState st(store);
    for (int k = 0; k < 20; ++k) {
      GradientSet g(store);
      Tape t(true);
      std::mt19937_64 drop(static_cast<std::uint64_t>(k));
      t.backward(ops::sum(ops::square(ops::dropout(ops::matmul(t.constant(x), t.param(store, "w")), 0.2, true, drop))), g);
      adam_step(store, g, st, 0.05);
    }
    return store[0].value;
  };
  const Tensor a = run(), b = run();
  EXPECT_EQ(a.data(), b.data());
}

TEST(Clip, GlobalNormIsCapped) {
  ParameterStore store;
  store.add("a", Tensor({1, 2}));
  store.add("b", Tensor({1, 1}));
  GradientSet g(store);
  g[0][0] = 3.0;
  g[0][1] = 4.0;
  g[1][0] = 12.0;
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 5.0), 13.0);
  EXPECT_NEAR(g.global_norm(), 5.0, 1e-12);
  EXPECT_NEAR(g[1][0], 12.0 * 5.0 / 13.0, 1e-12);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  std::mt19937_64 rng(8);
  ParameterStore a;
  a.add("x", random_tensor({2, 3}, rng));
  a.add("y.z", random_tensor({4}, rng));
  std::stringstream ss;
  write_tensors(ss, to_named(a));
  ParameterStore b;
  b.add("x", Tensor({2, 3}));
  b.add("y.z", Tensor({4}));
  assign_from(b, read_tensors(ss));
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].value.data(), b[k].value.data());
}

TEST(Checkpoint, ShapeAuditRejectsMismatch) {
  ParameterStore a;
  a.add("x", Tensor({2, 3}));
  std::stringstream ss;
  write_tensors(ss, to_named(a));
  ParameterStore b;
  b.add("x", Tensor({3, 2}));
  EXPECT_THROW(assign_from(b, read_tensors(ss)), ValidationError);
}

TEST(Checkpoint, RejectsForeignBytes) {
  std::stringstream ss("not a checkpoint at all");
  EXPECT_THROW(read_tensors(ss), Error);
}
