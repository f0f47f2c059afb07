#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "reclab/errors.hpp"
#include "reclab/gradcheck.hpp"
#include "reclab/graph.hpp"
#include "reclab/kernels.hpp"
#include "reclab/rng.hpp"

using namespace reclab;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = Real(rng.normal() * scale);
  return t;
}

Tensor random_distribution(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += (t.at(r, c) = Real(rng.uniform() + 0.05));
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) /= s;
  }
  return t;
}

constexpr Real kGradTol = 1e-4;

}  // namespace

TEST(Tensor, RejectsMismatchedStorage) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<Real>(5)), DimensionError);
  EXPECT_THROW(Tensor(Shape{0, 3}), DimensionError);
}

TEST(Kernels, MatmulIdentity) {
  Rng rng(1);
  Graph g;
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1;
  const Tensor a = random_tensor(rng, {3, 3});
  const Var out = g.matmul(g.constant(eye), g.constant(a));
  EXPECT_TRUE(bitwise_equal(g.value(out), a));
}

TEST(Kernels, SoftmaxSymmetric) {
  Graph g;
  const Var s = g.softmax(g.constant(Tensor::vector({0, 0})));
  EXPECT_DOUBLE_EQ(g.value(s)[0], 0.5);
  EXPECT_DOUBLE_EQ(g.value(s)[1], 0.5);
}

TEST(Kernels, LayerNormOfOneTwoThree) {
  // (x - 2) / sqrt(2/3)
  const Real expected = 1.2247448713915890;
  Graph g;
  const Var y = g.layer_norm(g.constant(Tensor::vector({1, 2, 3})), g.constant(Tensor::vector({1, 1, 1})),
                             g.constant(Tensor::vector({0, 0, 0})), 0);
  EXPECT_NEAR(g.value(y)[0], -expected, 1e-12);
  EXPECT_NEAR(g.value(y)[1], 0, 1e-12);
  EXPECT_NEAR(g.value(y)[2], expected, 1e-12);
}

TEST(Kernels, LayerNormRejectsNegativeEps) {
  Graph g;
  const Var x = g.constant(Tensor::vector({1, 2}));
  const Var one = g.constant(Tensor::vector({1, 1}));
  EXPECT_THROW(g.layer_norm(x, one, one, -1), InputError);
}

TEST(Kernels, DimensionErrorNamesBothShapes) {
  Graph g;
  const Var a = g.constant(Tensor(Shape{2, 3}));
  const Var b = g.constant(Tensor(Shape{2, 3}));
  try {
    g.matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3] x [2, 3]"), std::string::npos) << msg;
  }
}

TEST(Kernels, SoftmaxStableAtLargeMagnitude) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const Var s = g.softmax(g.constant(random_tensor(rng, {4, 9}, 1e6)));
    const Tensor& p = g.value(s);
    ASSERT_TRUE(p.all_finite());
    for (std::size_t r = 0; r < 4; ++r) {
      Real sum = 0;
      for (std::size_t c = 0; c < 9; ++c) {
        EXPECT_GE(p.at(r, c), 0);
        sum += p.at(r, c);
      }
      EXPECT_NEAR(sum, 1, 1e-12);
    }
  }
}

TEST(Kernels, SoftmaxAlongLeadingAxis) {
  Rng rng(8);
  Graph g;
  const Var s = g.softmax(g.constant(random_tensor(rng, {3, 5})), 0);
  const Tensor& p = g.value(s);
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_NEAR(p.at(0, c) + p.at(1, c) + p.at(2, c), 1, 1e-12);
  }
}

TEST(Kernels, CheckFiniteNamesNode) {
  Graph g(GraphOptions{.check_finite = true});
  const Var x = g.constant(Tensor::vector({1e308, 1e308}));
  try {
    g.scale(x, 10);
    FAIL();
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("node 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("scale"), std::string::npos) << msg;
  }
}

TEST(Losses, KlOfIdenticalIsZero) {
  Rng rng(3);
  const Tensor p = random_distribution(rng, 3, 5);
  Tensor logp = p;
  for (auto& v : logp.values()) v = std::log(v);
  Graph g;
  EXPECT_NEAR(g.value(g.kl_divergence(p, g.constant(logp))).item(), 0, 1e-15);
}

TEST(Losses, MseOfIdenticalIsZero) {
  Rng rng(4);
  Graph g;
  const Var a = g.constant(random_tensor(rng, {4, 6}));
  EXPECT_EQ(g.value(g.mse(a, a)).item(), 0);
}

TEST(Losses, CrossEntropyOfUniformLogits) {
  Graph g;
  const Var l = g.cross_entropy(g.constant(Tensor::matrix(1, 2, {0, 0})), {0});
  EXPECT_NEAR(g.value(l).item(), std::log(2.0), 1e-15);
}

TEST(Losses, KlRejectsUnnormalizedTeacher) {
  Graph g;
  const Var q = g.constant(Tensor::matrix(1, 2, {std::log(0.5), std::log(0.5)}));
  EXPECT_THROW(g.kl_divergence(Tensor::matrix(1, 2, {0.6, 0.6}), q), InputError);
  EXPECT_THROW(g.kl_divergence(Tensor::matrix(1, 2, {1.5, -0.5}), q), InputError);
}

TEST(Losses, KlHandlesZeroTeacherMass) {
  Graph g;
  const Var q = g.log_softmax(g.constant(Tensor::matrix(1, 3, {0, 1, 2})));
  const Real kl = g.value(g.kl_divergence(Tensor::matrix(1, 3, {0, 1, 0}), q)).item();
  EXPECT_TRUE(std::isfinite(kl));
  EXPECT_GT(kl, 0);
}

TEST(Losses, KlNonNegativeOnRandomPairs) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Tensor p = random_distribution(rng, 2, 6);
    const Tensor q = random_distribution(rng, 2, 6);
    Tensor logq = q;
    for (auto& v : logq.values()) v = std::log(v);
    Graph g;
    EXPECT_GT(g.value(g.kl_divergence(p, g.constant(logq))).item(), 0) << "seed " << seed;
  }
}

TEST(Backward, SquareAtThree) {
  Graph g;
  const Var x = g.leaf(Tensor::scalar(3));
  const Gradients grads = g.backward(g.mul(x, x));
  EXPECT_EQ(grads.at(x).item(), 6);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Rng rng(5);
  Graph g;
  const Var x = g.leaf(random_tensor(rng, {1, 7}));
  const Gradients grads = g.backward(g.sum(g.softmax(x)));
  for (Real v : grads.at(x).values()) EXPECT_NEAR(v, 0, 1e-15);
}

TEST(Backward, NonScalarRootIsUsageError) {
  Graph g;
  const Var x = g.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(g.scale(x, 2)), UsageError);
}

TEST(Backward, FrozenLeafPassesGradientThrough) {
  Graph g;
  const Var w = g.leaf(Tensor::matrix(1, 1, {2}));
  const Var frozen = g.constant(Tensor::matrix(1, 1, {5}));
  const Var h = g.matmul(w, frozen);
  const Gradients grads = g.backward(g.sum(h));
  EXPECT_FALSE(grads.has(frozen));
  EXPECT_EQ(grads.at(w).item(), 5);
}

TEST(Backward, EveryReachableNodeHasGradientOfItsShape) {
  Rng rng(6);
  Graph g;
  const Var x = g.leaf(random_tensor(rng, {3, 4}));
  const Var w = g.leaf(random_tensor(rng, {4, 2}));
  const Var root = g.mean(g.gelu(g.matmul(x, w)));
  const Gradients grads = g.backward(root);
  for (std::int32_t id = 0; id <= root.id; ++id) {
    ASSERT_TRUE(grads.has(Var{id}));
    EXPECT_EQ(grads.at(Var{id}).shape(), g.value(Var{id}).shape());
  }
}

TEST(Backward, DeterministicBitwise) {
  auto run = [] {
    Rng rng(11);
    Graph g;
    const Var x = g.leaf(random_tensor(rng, {8, 16}));
    const Var w = g.leaf(random_tensor(rng, {16, 16}));
    const Var h = g.attention(g.matmul(x, w), x, x, 2, 4, 4);
    return g.backward(g.mean(g.mul(h, h))).at(w);
  };
  EXPECT_TRUE(bitwise_equal(run(), run()));
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  Rng rng(12);
  const std::vector<Tensor> params = {random_tensor(rng, {5, 8}, 0.5), Tensor(Shape{8}),
                                      random_tensor(rng, {8, 3}, 0.5), Tensor(Shape{3})};
  const Tensor x = random_tensor(rng, {6, 5});
  auto f = [&](Graph& g, std::span<const Var> p) {
    const Var h = g.gelu(g.add_row(g.matmul(g.constant(x), p[0]), p[1]));
    return g.cross_entropy(g.add_row(g.matmul(h, p[2]), p[3]), {0, 1, 2, 0, 1, 2});
  };
  EXPECT_LT(finite_diff_check(f, params, 1e-5), kGradTol);
}

TEST(FiniteDiff, HalfSquaredNormIsExact) {
  Rng rng(13);
  auto f = [](Graph& g, std::span<const Var> p) { return g.scale(g.sum(g.mul(p[0], p[0])), 0.5); };
  EXPECT_LT(finite_diff_check(f, {random_tensor(rng, {10})}, 1e-5), 1e-8);
}

TEST(FiniteDiff, OneLayerCrossEntropyStableAcrossSteps) {
  Rng rng(14);
  const Tensor x = random_tensor(rng, {1, 6});
  auto f = [&](Graph& g, std::span<const Var> p) { return g.cross_entropy(g.matmul(g.constant(x), p[0]), {2}); };
  const std::vector<Tensor> w = {random_tensor(rng, {6, 4}, 0.3)};
  EXPECT_LT(finite_diff_check(f, w, 1e-5), kGradTol);
  EXPECT_LT(finite_diff_check(f, w, 1e-4), kGradTol);
}

TEST(FiniteDiff, ConstantFunctionIsZero) {
  auto f = [](Graph& g, std::span<const Var>) { return g.constant(Tensor::scalar(4)); };
  EXPECT_EQ(finite_diff_check(f, {Tensor::vector({1, 2, 3})}, 1e-5), 0);
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  auto f = [](Graph& g, std::span<const Var> p) { return g.sum(p[0]); };
  EXPECT_THROW(finite_diff_check(f, {Tensor::vector({1})}, 0), InputError);
}

// Every differentiable op over ten random instances. The random projection
// r turns any output into a scalar with a non-trivial gradient.
class KernelGradients : public ::testing::TestWithParam<std::uint64_t> {};

namespace {

Var project(Graph& g, Var out, Rng& rng) {
  const Tensor r = random_tensor(rng, g.value(out).shape());
  return g.sum(g.mul(out, g.constant(r)));
}

void expect_gradcheck(const char* name, std::uint64_t seed, std::vector<Tensor> params,
                      const std::function<Var(Graph&, std::span<const Var>)>& op) {
  auto f = [&](Graph& g, std::span<const Var> p) {
    Rng proj(seed * 7919 + 1);
    return project(g, op(g, p), proj);
  };
  EXPECT_LT(finite_diff_check(f, std::move(params), 1e-5), kGradTol) << name << " seed " << seed;
}

}  // namespace

TEST_P(KernelGradients, AllOpsMatchFiniteDifferences) {
  const std::uint64_t seed = GetParam();
  Rng rng(seed);
  const Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4, 5});
  const Tensor c = random_tensor(rng, {3, 4});
  const Tensor bt = random_tensor(rng, {5, 4});
  const Tensor row = random_tensor(rng, {4});

  expect_gradcheck("matmul", seed, {a, b}, [](Graph& g, auto p) { return g.matmul(p[0], p[1]); });
  expect_gradcheck("matmul_nt", seed, {a, bt}, [](Graph& g, auto p) { return g.matmul_nt(p[0], p[1]); });
  expect_gradcheck("add", seed, {a, c}, [](Graph& g, auto p) { return g.add(p[0], p[1]); });
  expect_gradcheck("sub", seed, {a, c}, [](Graph& g, auto p) { return g.sub(p[0], p[1]); });
  expect_gradcheck("mul", seed, {a, c}, [](Graph& g, auto p) { return g.mul(p[0], p[1]); });
  expect_gradcheck("scale", seed, {a}, [](Graph& g, auto p) { return g.scale(p[0], -1.7); });
  expect_gradcheck("weighted_sum", seed, {a, c}, [](Graph& g, auto p) { return g.weighted_sum(p[0], 0.3, p[1], 0.7); });
  expect_gradcheck("add_row", seed, {a, row}, [](Graph& g, auto p) { return g.add_row(p[0], p[1]); });
  expect_gradcheck("gelu", seed, {a}, [](Graph& g, auto p) { return g.gelu(p[0]); });
  expect_gradcheck("layer_norm", seed, {a, row, random_tensor(rng, {4})},
                   [](Graph& g, auto p) { return g.layer_norm(p[0], p[1], p[2]); });
  expect_gradcheck("softmax", seed, {a}, [](Graph& g, auto p) { return g.softmax(p[0]); });
  expect_gradcheck("softmax_axis0", seed, {a}, [](Graph& g, auto p) { return g.softmax(p[0], 0); });
  expect_gradcheck("log_softmax", seed, {a}, [](Graph& g, auto p) { return g.log_softmax(p[0]); });
  expect_gradcheck("embedding", seed, {b}, [](Graph& g, auto p) { return g.embedding(p[0], {3, 0, 3, 1}); });
  expect_gradcheck("gather_rows", seed, {b}, [](Graph& g, auto p) { return g.gather_rows(p[0], {2, 2, 0}); });
  expect_gradcheck("select_columns", seed, {a}, [](Graph& g, auto p) { return g.select_columns(p[0], {3, 1}); });
  expect_gradcheck("row_normalize", seed, {a}, [](Graph& g, auto p) { return g.row_normalize(p[0]); });
  expect_gradcheck("reshape", seed, {a}, [](Graph& g, auto p) { return g.reshape(p[0], {2, 6}); });
  expect_gradcheck("slice", seed, {a}, [](Graph& g, auto p) { return g.slice(p[0], 3, {2, 3}); });
  expect_gradcheck("mean", seed, {a}, [](Graph& g, auto p) { return g.mean(p[0]); });
  expect_gradcheck("dropout", seed, {a}, [seed](Graph& g, auto p) { return g.dropout(p[0], 0.3, seed); });

  const Tensor q = random_tensor(rng, {8, 8});
  const Tensor k = random_tensor(rng, {8, 8});
  const Tensor v = random_tensor(rng, {8, 8});
  expect_gradcheck("attention", seed, {q, k, v},
                   [](Graph& g, auto p) { return g.attention(p[0], p[1], p[2], 2, 4, 2); });

  expect_gradcheck("cross_entropy", seed, {a},
                   [](Graph& g, auto p) { return g.cross_entropy(p[0], {0, 3, 2}); });
  const Tensor teacher = random_distribution(rng, 3, 4);
  expect_gradcheck("kl_divergence", seed, {a},
                   [&](Graph& g, auto p) { return g.kl_divergence(teacher, g.log_softmax(p[0])); });
  expect_gradcheck("mse", seed, {a, c}, [](Graph& g, auto p) { return g.mse(p[0], p[1]); });
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, KernelGradients, ::testing::Range<std::uint64_t>(0, 10));

// Parallel kernels must agree with the serial reference.
class KernelEquivalence : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(KernelEquivalence, ParallelMatchesSerial) {
  Rng rng(GetParam());
  const std::size_t m = 1 + rng.below(70), k = 1 + rng.below(70), n = 1 + rng.below(70);
  auto vec = [&](std::size_t len) {
    std::vector<Real> v(len);
    for (auto& x : v) x = Real(rng.normal());
    return v;
  };
  auto close = [](const std::vector<Real>& x, const std::vector<Real>& y) {
    Real worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::fabs(x[i] - y[i]));
    return worst;
  };
  const auto a = vec(m * k), b = vec(k * n), bt = vec(n * k), at = vec(k * m);
  std::vector<Real> c1 = vec(m * n), c2 = c1;
  kernels::matmul(a, b, c1, m, k, n, true);
  kernels::serial::matmul(a, b, c2, m, k, n, true);
  EXPECT_LT(close(c1, c2), 1e-12);
  kernels::matmul_nt(a, bt, c1, m, k, n);
  kernels::serial::matmul_nt(a, bt, c2, m, k, n);
  EXPECT_LT(close(c1, c2), 1e-12);
  kernels::matmul_tn(at, b, c1, m, k, n);
  kernels::serial::matmul_tn(at, b, c2, m, k, n);
  EXPECT_LT(close(c1, c2), 1e-12);

  const auto x = vec(m * n), dy = vec(m * n), gain = vec(n), bias = vec(n);
  std::vector<Real> y1(m * n), y2(m * n), mu1(m), mu2(m), rs1(m), rs2(m);
  kernels::softmax(x, y1, m, n, 1);
  kernels::serial::softmax(x, y2, m, n, 1);
  EXPECT_LT(close(y1, y2), 1e-14);
  std::vector<Real> dx1(m * n), dx2(m * n);
  kernels::softmax_backward(y1, dy, dx1, m, n, 1);
  kernels::serial::softmax_backward(y2, dy, dx2, m, n, 1);
  EXPECT_LT(close(dx1, dx2), 1e-14);

  kernels::layer_norm(x, gain, bias, y1, mu1, rs1, m, n, 1e-5);
  kernels::serial::layer_norm(x, gain, bias, y2, mu2, rs2, m, n, 1e-5);
  EXPECT_LT(close(y1, y2), 1e-12);
  std::vector<Real> dg1(n), dg2(n), db1(n), db2(n);
  kernels::layer_norm_backward(x, gain, mu1, rs1, dy, dx1, dg1, db1, m, n);
  kernels::serial::layer_norm_backward(x, gain, mu2, rs2, dy, dx2, dg2, db2, m, n);
  EXPECT_LT(close(dx1, dx2), 1e-11);
  EXPECT_LT(close(dg1, dg2), 1e-11);
  EXPECT_LT(close(db1, db2), 1e-11);

  kernels::gelu(x, y1);
  kernels::serial::gelu(x, y2);
  EXPECT_LT(close(y1, y2), 1e-14);
  kernels::gelu_backward(x, dy, dx1);
  kernels::serial::gelu_backward(x, dy, dx2);
  EXPECT_LT(close(dx1, dx2), 1e-14);

  const std::size_t n_seq = 1 + rng.below(3), len = 1 + rng.below(9), heads = 1 + rng.below(4);
  const std::size_t d = heads * (1 + rng.below(6));
  const auto q = vec(n_seq * len * d), kk = vec(n_seq * len * d), v = vec(n_seq * len * d), dout = vec(n_seq * len * d);
  std::vector<Real> o1(q.size()), o2(q.size()), p1(n_seq * heads * len * len), p2(p1.size());
  kernels::attention(q, kk, v, o1, p1, n_seq, len, heads, d);
  kernels::serial::attention(q, kk, v, o2, p2, n_seq, len, heads, d);
  EXPECT_LT(close(o1, o2), 1e-12);
  EXPECT_LT(close(p1, p2), 1e-12);
  std::vector<Real> dq1(q.size()), dq2(q.size()), dk1(q.size()), dk2(q.size()), dv1(q.size()), dv2(q.size());
  kernels::attention_backward(q, kk, v, p1, dout, dq1, dk1, dv1, n_seq, len, heads, d);
  kernels::serial::attention_backward(q, kk, v, p2, dout, dq2, dk2, dv2, n_seq, len, heads, d);
  EXPECT_LT(close(dq1, dq2), 1e-11);
  EXPECT_LT(close(dk1, dk2), 1e-11);
  EXPECT_LT(close(dv1, dv2), 1e-11);
}

INSTANTIATE_TEST_SUITE_P(RandomSizes, KernelEquivalence, ::testing::Range<std::uint64_t>(0, 12));
