#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace mthd;
using namespace mthd::nn;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t({r, c});
  for (auto& v : t.values()) v = rng.uniform(-1, 1);
  return t;
}

Tensor random_vector(Rng& rng, std::size_t n) {
  Tensor t({n});
  for (auto& v : t.values()) v = rng.uniform(-2, 2);
  return t;
}

}  // namespace

TEST(Tensor, ShapeMismatchOnConstruction) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({0, 3}), DimensionError);
}

TEST(Matmul, IdentityAndZero) {
  Graph g(false);
  Var id = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var m = g.constant(Tensor::matrix({{5, 6}, {7, 8}}));
  EXPECT_EQ(matmul(id, m).value(), Tensor::matrix({{5, 6}, {7, 8}}));

  Var a = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var z = g.constant(Tensor::matrix({{0}, {0}}));
  EXPECT_EQ(matmul(a, z).value(), Tensor::matrix({{0}, {0}}));
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g(false);
    Tensor a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2);
    const Tensor c = matmul(g.constant(a), g.constant(b)).value();
    const auto want = oracle::naive_matmul(oracle::to_mat(a), oracle::to_mat(b));
    ASSERT_EQ(c.shape(), (Shape{3, 2}));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(c.at(i, j), want[i][j], 1e-12);
  }
}

TEST(Matmul, InnerDimensionMismatch) {
  Graph g(false);
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({2, 3}));
  EXPECT_THROW(matmul(a, b), DimensionError);
  EXPECT_THROW(matvec(a, g.constant(Tensor({2}))), DimensionError);
}

TEST(Matmul, TransposedVariantAndVectorForms) {
  Rng rng(5);
  Graph g(false);
  Tensor a = random_matrix(rng, 3, 4), b = random_matrix(rng, 2, 4), x = random_vector(rng, 4),
         y = random_vector(rng, 3);
  const auto bt = oracle::to_mat(b);
  oracle::Mat btt(4, oracle::Vec(2));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) btt[j][i] = bt[i][j];
  const auto want = oracle::naive_matmul(oracle::to_mat(a), btt);
  const Tensor got = matmul_bt(g.constant(a), g.constant(b)).value();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(got.at(i, j), want[i][j], 1e-12);

  const auto mv = oracle::mv(oracle::to_mat(a), oracle::to_vec(x));
  const Tensor got_mv = matvec(g.constant(a), g.constant(x)).value();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(got_mv[i], mv[i], 1e-12);

  const Tensor got_vm = vecmat(g.constant(y), g.constant(a)).value();
  for (int j = 0; j < 4; ++j) {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += y[i] * a.at(i, j);
    EXPECT_NEAR(got_vm[j], s, 1e-12);
  }
}

TEST(Softmax, SymmetricCase) {
  Graph g(false);
  const Tensor p = softmax(g.constant(Tensor::vector({0, 0}))).value();
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(11);
  for (double c : {-50.0, -1.0, 0.5, 700.0}) {
    Graph g(false);
    Tensor v = random_vector(rng, 6);
    Tensor shifted = v;
    for (auto& x : shifted.values()) x += c;
    const Tensor a = softmax(g.constant(v)).value(), b = softmax(g.constant(shifted)).value();
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Softmax, MatchesDirectEvaluation) {
  Graph g(false);
  const Tensor p = softmax(g.constant(Tensor::vector({1, 2, 3}))).value();
  const auto want = oracle::naive_softmax({1, 2, 3});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], want[i], 1e-12);
}

TEST(Softmax, EmptyInputIsADimensionError) {
  EXPECT_THROW(Tensor::vector({}), DimensionError);
  Graph g(false);
  EXPECT_THROW(softmax(g.constant(Tensor({2, 2}))), DimensionError);
}

TEST(Softmax, SumsToOneUnderFuzz) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g(false);
    Tensor v({1 + rng.below(12)});
    for (auto& x : v.values()) x = rng.uniform(-300, 300);
    double total = 0;
    for (double p : softmax(g.constant(v)).value().values()) {
      EXPECT_GE(p, 0.0);
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(CrossEntropy, UniformLogits) {
  Graph g(false);
  EXPECT_NEAR(cross_entropy(g.constant(Tensor::vector({0.3, 0.3, 0.3, 0.3})), 2).value().item(), std::log(4.0),
              1e-12);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  Graph g(false);
  const double loss = cross_entropy(g.constant(Tensor::vector({-1e3, 1e3, -1e3})), 1).value().item();
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-12);
}

TEST(CrossEntropy, MatchesDirectEvaluation) {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Graph g(false);
    Tensor logits = random_vector(rng, 5);
    const std::size_t target = rng.below(5);
    const auto p = oracle::naive_softmax(oracle::to_vec(logits));
    EXPECT_NEAR(cross_entropy(g.constant(logits), target).value().item(), -std::log(p[target]), 1e-10);
  }
}

TEST(CrossEntropy, TargetOutOfRange) {
  Graph g(false);
  EXPECT_THROW(cross_entropy(g.constant(Tensor::vector({1, 2})), 2), IndexError);
}

TEST(Backward, LinearCase) {
  ParameterSet params;
  params.add("w", Tensor::vector({0.5, -1, 2}));
  Graph g;
  const Tensor x = Tensor::vector({3, 4, 5});
  Var loss = dot(g.param(params[0]), g.constant(x));
  g.backward(loss, params);
  EXPECT_EQ(params[0].gradient, x);
}

TEST(Backward, UnreachableParameterStaysZero) {
  ParameterSet params;
  params.add("used", Tensor::vector({1, 2}));
  params.add("unused", Tensor::vector({3, 4}));
  Graph g;
  Var loss = sum(mul(g.param(params[0]), g.param(params[0])));
  g.constant(Tensor::vector({9, 9}));
  g.backward(loss, params);
  EXPECT_EQ(params[0].gradient, Tensor::vector({2, 4}));
  EXPECT_EQ(params[1].gradient, Tensor::vector({0, 0}));
}

TEST(Backward, RequiresScalarLossAndRunsOnce) {
  ParameterSet params;
  params.add("w", Tensor::vector({1, 2}));
  Graph g;
  Var v = g.param(params[0]);
  EXPECT_THROW(g.backward(v, params), ContractError);
  Var loss = sum(v);
  g.backward(loss, params);
  EXPECT_THROW(g.backward(loss, params), ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  // f(w) = sum(tanh(w) * tanh(w)) has derivative 2 tanh(w) (1 - tanh(w)^2)
  ParameterSet params;
  params.add("w", Tensor::vector({0.3, -0.7}));
  Graph g;
  Var t = tanh(g.param(params[0]));
  g.backward(sum(mul(t, t)), params);
  for (int i = 0; i < 2; ++i) {
    const double th = std::tanh(params[0].value[i]);
    EXPECT_NEAR(params[0].gradient[i], 2 * th * (1 - th * th), 1e-14);
  }
}

TEST(Backward, EveryOpMatchesFiniteDifferences) {
  // One loss touching every differentiable op, checked against central
  // differences on each input scalar.
  ParameterSet params;
  Rng rng(23);
  params.add("a", random_matrix(rng, 3, 4));
  params.add("b", random_matrix(rng, 4, 2));
  params.add("c", random_matrix(rng, 2, 4));
  params.add("x", random_vector(rng, 4));
  params.add("y", random_vector(rng, 3));
  params.add("table", random_matrix(rng, 5, 3));
  auto loss_of = [&](Graph& g) {
    Var a = g.param(params[0]), b = g.param(params[1]), c = g.param(params[2]);
    Var x = g.param(params[3]), y = g.param(params[4]), table = g.param(params[5]);
    Var ab = matmul(a, b);                         // 3×2
    Var act = matmul_bt(a, c);                     // 3×2
    Var rows = add_to_rows(sub(ab, act), lookup(matmul_bt(g.constant(Tensor({1, 4}, 0.5)), c), 0));
    Var mixed = mean_rows(tanh(rows));                // 2
    Var v1 = matvec(a, x);                            // 3
    Var v2 = vecmat(y, a);                            // 4
    Var s = sigmoid(add(v1, lookup(table, 2), y));    // 3
    Var joined = concat({mixed, s, one_minus(scale(v2, 0.3))});
    Var stacked = stack_rows({lookup(table, 1), lookup(table, 4)});
    Var logits = concat({joined, mean_rows(stacked)});
    Var ce = cross_entropy(logits, 3);
    Var extra = dot(softmax(v2), log_softmax(x));
    return add(ce, extra, sum(mul(stacked, stacked)));
  };
  {
    Graph g;
    g.backward(loss_of(g), params);
  }
  auto value = [&] {
    Graph g(false);
    return loss_of(g).value().item();
  };
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i], h = 1e-6;
      p.value[i] = keep + h;
      const double up = value();
      p.value[i] = keep - h;
      const double down = value();
      p.value[i] = keep;
      EXPECT_NEAR(p.gradient[i], (up - down) / (2 * h), 1e-7) << p.id << "[" << i << "]";
    }
  }
}

TEST(Backward, ToySeq2SeqMatchesFiniteDifferences) {
  ModelParams p = fixture::toy_params(6, 6, 8, 8, 4);
  Rng rng(99);
  const TokenIds src = fixture::random_ids(rng, 6, 4), tgt = fixture::random_ids(rng, 6, 3);
  const auto check = oracle::finite_difference_check(p, src, tgt);
  EXPECT_EQ(check.checked, p.set.scalar_count());
  EXPECT_LT(check.worst_rel, 1e-4) << check.worst_id;
}

TEST(Backward, Deterministic) {
  ModelParams a = fixture::toy_params(6, 6, 5, 5, 8), b = fixture::toy_params(6, 6, 5, 5, 8);
  const TokenIds src{kBos, 4, 5, 4, kEos}, tgt{kBos, 5, 5, kEos};
  accumulate_gradients(a, src, tgt);
  accumulate_gradients(b, src, tgt);
  for (std::size_t i = 0; i < a.set.size(); ++i) EXPECT_EQ(a.set[i].gradient, b.set[i].gradient);
}

TEST(Sgd, ArithmeticByDefinition) {
  ParameterSet params;
  params.add("w", Tensor::vector({1.0}));
  params[0].gradient[0] = 0.5;
  sgd_step(params, 0.1);
  EXPECT_DOUBLE_EQ(params[0].value[0], 0.95);
  EXPECT_EQ(params[0].gradient[0], 0.0);
}

TEST(Sgd, RejectsNonPositiveRate) {
  ParameterSet params;
  params.add("w", Tensor::vector({1.0}));
  EXPECT_THROW(sgd_step(params, 0.0), ConfigError);
  EXPECT_THROW(sgd_step(params, -1.0), ConfigError);
  params[0].gradient[0] = 1.0;
  sgd_step(params, 1e-12);
  EXPECT_NEAR(params[0].value[0], 1.0, 1e-9);
}

TEST(Sgd, ConvergesOnQuadratic) {
  // w ← w − 0.1·2(w − 3) shrinks the error by 0.8 per step. The first
  // gradient (−6) is clipped to norm 5, so step one only reaches w = 0.5.
  ParameterSet params;
  params.add("w", Tensor::vector({0.0}));
  for (int i = 0; i < 100; ++i) {
    Graph g;
    Var d = sub(g.param(params[0]), g.constant(Tensor::vector({3.0})));
    g.backward(sum(mul(d, d)), params);
    sgd_step(params, 0.1);
  }
  EXPECT_LT(std::abs(params[0].value[0] - 3.0), 1e-6);
  EXPECT_NEAR(std::abs(params[0].value[0] - 3.0), 2.5 * std::pow(0.8, 99), 1e-15);
}

TEST(Sgd, ClipsGlobalNorm) {
  ParameterSet params;
  params.add("a", Tensor::vector({0, 0}));
  params.add("b", Tensor::vector({0}));
  params[0].gradient[0] = 30;
  params[0].gradient[1] = 0;
  params[1].gradient[0] = 40;  // norm 50
  sgd_step(params, SgdOptions{1.0, 5.0});
  EXPECT_NEAR(params[0].value[0], -3.0, 1e-12);
  EXPECT_NEAR(params[1].value[0], -4.0, 1e-12);
}

TEST(Rng, DeterministicAndOpenInterval) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const double x = a.uniform();
    EXPECT_EQ(x, b.uniform());
    differs |= x != c.uniform();
    EXPECT_GT(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
  EXPECT_TRUE(differs);
}

TEST(CrossEntropy, NonFiniteLogitsAreNotMaskedAsZero) {
  Graph g(false);
  EXPECT_TRUE(std::isnan(cross_entropy(g.constant(Tensor::vector({NAN, 0.0})), 1).value().item()));
}
