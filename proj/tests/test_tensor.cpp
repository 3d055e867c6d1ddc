#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "acf/tensor.hpp"
#include "test_util.hpp"

using namespace acf;
using testutil::random_tensor;

namespace {

std::vector<double> schoolbook(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += a.at(i, l) * b.at(l, j);
      c[i * n + j] = s;
    }
  return c;
}

// Compares the tape gradient of a scalar function against central differences.
void check_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                double tol = 1e-4) {
  Tape tape;
  Tensor x = tape.watch(x0);
  Tensor y = f(x);
  Tensor g = backward(y)[x];
  auto num = testutil::numeric_grad(
      [&](const Tensor& xv) {
        NoGradGuard guard;
        return f(xv).item();
      },
      x0);
  for (std::size_t i = 0; i < num.size(); ++i) {
    const double a = g.values()[i], n = num[i];
    EXPECT_LE(std::abs(a - n), tol * std::max(1.0, std::abs(n))) << "component " << i;
  }
}

}  // namespace

TEST(Tensor, ConstructionChecksShape) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), DimensionError);
  EXPECT_THROW(Tensor({0}, {}), DimensionError);
  EXPECT_THROW(Tensor({1, 1, 1, 1}, {1.0}), DimensionError);
  Tensor t = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(t.shape(), (Shape{2, 2}));
  EXPECT_DOUBLE_EQ(t.at(1, 0), 3.0);
}

TEST(Tensor, MatmulIdentityAndHandCase) {
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor id = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(matmul(id, a).to_vector(), a.to_vector());
  Tensor r = matmul(a, Tensor::matrix({{1}, {1}}));
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_EQ(r.to_vector(), (std::vector<double>{3, 7}));
  EXPECT_THROW(matmul(a, Tensor::matrix({{1, 2, 3}})), DimensionError);
}

TEST(Tensor, MatmulMatchesSchoolbook) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor a = random_tensor({4, 4}, rng), b = random_tensor({4, 4}, rng);
    EXPECT_LE(testutil::max_abs_diff(matmul(a, b).values(), schoolbook(a, b)), 1e-13);
    Tensor c = random_tensor({3, 5}, rng), d = random_tensor({5, 2}, rng);
    EXPECT_LE(testutil::max_abs_diff(matmul(c, d).values(), schoolbook(c, d)), 1e-13);
    EXPECT_LE(testutil::max_abs_diff(matmul_nt(c, transpose(d)).values(), schoolbook(c, d)),
              1e-13);
  }
}

TEST(Tensor, SoftmaxRows) {
  Tensor u = softmax_rows(Tensor::zeros({3, 3}));
  for (double v : u.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  Tensor p = softmax_rows(Tensor::matrix({{std::log(1.0), std::log(2.0), std::log(3.0)}}));
  EXPECT_NEAR(p.at(0, 0), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(p.at(0, 1), 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(p.at(0, 2), 3.0 / 6.0, 1e-15);
  // exp(-1000) underflows to 0 in double; the high-precision value is 1 - 2e^{-1000}.
  Tensor big = softmax_rows(Tensor::matrix({{1000.0, 0.0, 0.0}}));
  EXPECT_EQ(big.at(0, 0), 1.0);
  EXPECT_EQ(big.at(0, 1), 0.0);
  for (double v : big.values()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(softmax_rows(Tensor::matrix({{NAN, 0.0}})), DomainError);

  std::mt19937_64 rng(2);
  Tensor r = softmax_rows(random_tensor({5, 7}, rng, -30, 30));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GE(r.at(i, j), 0.0);
      s += r.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, RowSqL2) {
  EXPECT_EQ(row_sq_l2(Tensor::zeros({2, 3})).to_vector(), (std::vector<double>{0, 0}));
  EXPECT_EQ(row_sq_l2(Tensor::matrix({{3, 4}})).to_vector(), (std::vector<double>{25}));
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({5, 3}, rng);
  Tensor sq = mul(a, a);
  Tensor r = row_sq_l2(a);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(r.at(i), sq.at(i, 0) + sq.at(i, 1) + sq.at(i, 2), 1e-14);
  }
}

TEST(Tensor, BackwardTrivialCases) {
  Tape tape;
  Tensor x = tape.watch(Tensor::scalar(2.5));
  EXPECT_DOUBLE_EQ(backward(x)[x].item(), 1.0);

  Tape tape2;
  Tensor v = tape2.watch(Tensor::vector({1, 2, 3}));
  Tensor g = backward(sum(mul(v, v)))[v];
  EXPECT_EQ(g.to_vector(), (std::vector<double>{2, 4, 6}));

  Tensor nonscalar = mul(v, v);
  EXPECT_THROW(backward(nonscalar), ContractError);
}

TEST(Tensor, BackwardTwoLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w2 = random_tensor({5, 2}, rng);
  Tensor b = random_tensor({5}, rng);
  auto net = [&](const Tensor& w1) {
    Tensor h = sigmoid(add_bias(matmul_nt(x, w1), b));
    return mean(mul(matmul(h, w2), matmul(h, w2)));
  };
  Tensor w1 = random_tensor({5, 4}, rng);
  Tape tape;
  Tensor w1t = tape.watch(w1);
  Tensor g = backward(net(w1t))[w1t];
  auto num = testutil::numeric_grad(
      [&](const Tensor& w) {
        NoGradGuard guard;
        return net(w).item();
      },
      w1);
  for (std::size_t i = 0; i < num.size(); ++i) {
    EXPECT_LE(std::abs(g.values()[i] - num[i]), 1e-5 * std::max(1.0, std::abs(num[i])));
  }
}

TEST(Tensor, EveryOpGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor w = random_tensor({3, 4}, rng);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
  auto weighted = [&](const Tensor& y) {
    // Generic scalar readout with distinct weights per entry.
    std::vector<double> c(y.numel());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::sin(1.0 + static_cast<double>(i));
    return sum(mul(y, Tensor(y.shape(), c)));
  };
  const Tensor x = random_tensor({3, 4}, rng);
  check_grad([&](const Tensor& t) { return weighted(add(t, a)); }, x);
  check_grad([&](const Tensor& t) { return weighted(sub(a, t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(mul(t, t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(scale(t, -1.7)); }, x);
  check_grad([&](const Tensor& t) { return weighted(add_scalar(t, 0.3)); }, x);
  check_grad([&](const Tensor& t) { return weighted(neg(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(exp(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(log(t)); }, pos);
  check_grad([&](const Tensor& t) { return weighted(reciprocal(t)); }, pos);
  check_grad([&](const Tensor& t) { return weighted(sigmoid(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(elu(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(relu(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(clamp_min(t, 0.1)); }, x);
  check_grad([&](const Tensor& t) { return weighted(sum_last(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(sum_leading(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(bcast_last(sum_last(t), {3, 4})); }, x);
  check_grad([&](const Tensor& t) { return weighted(matmul_nt(t, w)); }, x);
  check_grad([&](const Tensor& t) { return weighted(matmul(t, transpose(w))); }, x);
  check_grad([&](const Tensor& t) { return weighted(softmax_rows(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(row_sq_l2(t)); }, x);
  check_grad([&](const Tensor& t) { return weighted(pairwise_sum(sum_last(t))); }, x);
  check_grad([&](const Tensor& t) { return weighted(concat_last(t, mul(t, t))); }, x);
  check_grad([&](const Tensor& t) { return weighted(slice_last(t, 1, 2)); }, x);
  check_grad([&](const Tensor& t) { return weighted(pad_last(t, 2, 7)); }, x);
  check_grad([&](const Tensor& t) { return weighted(reshape(exp(t), {2, 6})); }, x);
  check_grad([&](const Tensor& t) { return weighted(mul_scalar(t, sum(t))); }, x);
  check_grad(
      [&](const Tensor& t) {
        Tensor t3 = reshape(t, {1, 3, 4});
        return weighted(bmm(t3, transpose(t3)));
      },
      x);
  check_grad([&](const Tensor& t) { return weighted(add_bias(t, sum_leading(t))); }, x);
}

TEST(Tensor, VjpTrivialCases) {
  std::mt19937_64 rng(6);
  Tensor v = random_tensor({1, 3}, rng);
  Tape tape;
  Tensor z = tape.watch(random_tensor({1, 3}, rng));
  Tensor id = scale(z, 1.0);
  EXPECT_EQ(vjp(v, id, z).to_vector(), v.to_vector());

  Tensor w = random_tensor({3, 3}, rng);
  Tensor lin = matmul_nt(z, w);  // row form of W z
  Tensor got = vjp(v, lin, z);
  Tensor expect = matmul(v, w);  // (W^T v)^T
  EXPECT_LE(testutil::max_abs_diff(got.values(), expect.values()), 1e-14);
  EXPECT_THROW(vjp(Tensor::zeros({1, 4}), lin, z), DimensionError);
}

TEST(Tensor, VjpBasisReconstructsFiniteDifferenceJacobian) {
  std::mt19937_64 rng(7);
  const std::size_t d = 6;
  Tensor w1 = random_tensor({8, d}, rng, -1, 1), w2 = random_tensor({d, 8}, rng, -1, 1);
  auto mlp = [&](const Tensor& z) { return matmul_nt(elu(matmul_nt(z, w1)), w2); };
  Tensor z0 = random_tensor({1, d}, rng);
  Tape tape;
  Tensor z = tape.watch(z0);
  Tensor out = mlp(z);
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> e(d, 0.0);
    e[i] = 1.0;
    Tensor row = vjp(Tensor({1, d}, e), out, z);
    for (std::size_t j = 0; j < d; ++j) {
      NoGradGuard guard;
      const double h = 1e-5;
      const double fd = (mlp(testutil::with_value(z0, j, z0.at(0, j) + h)).at(0, i) -
                         mlp(testutil::with_value(z0, j, z0.at(0, j) - h)).at(0, i)) /
                        (2 * h);
      EXPECT_LE(std::abs(row.at(0, j) - fd), 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
  // Random v agrees with v^T J built from the rows.
  Tensor v = random_tensor({1, d}, rng);
  Tensor got = vjp(v, out, z);
  std::vector<double> expect(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> e(d, 0.0);
    e[i] = 1.0;
    Tensor row = vjp(Tensor({1, d}, e), out, z);
    for (std::size_t j = 0; j < d; ++j) expect[j] += v.at(0, i) * row.at(0, j);
  }
  EXPECT_LE(testutil::max_abs_diff(got.values(), expect), 1e-12);
}

TEST(Tensor, SecondOrderThroughCreateGraph) {
  // d/dx of (v^T J(x) v) for g(x) = x^3 elementwise: J = diag(3x^2), so the
  // quantity is sum 3 x_i^2 v_i^2 with gradient 6 x_i v_i^2.
  Tape tape;
  Tensor x = tape.watch(Tensor::matrix({{0.5, -1.0, 2.0}}));
  Tensor v = Tensor::matrix({{1.0, 2.0, -1.0}});
  Tensor g = mul(mul(x, x), x);
  Tensor w = vjp(v, g, x, true);
  ASSERT_TRUE(w.tracked());
  Tensor q = sum(mul(w, v));
  Tensor grad = backward(q)[x];
  EXPECT_NEAR(grad.at(0, 0), 6 * 0.5 * 1, 1e-12);
  EXPECT_NEAR(grad.at(0, 1), 6 * -1.0 * 4, 1e-12);
  EXPECT_NEAR(grad.at(0, 2), 6 * 2.0 * 1, 1e-12);
}

TEST(Tensor, ReplayIsBitIdentical) {
  std::mt19937_64 rng(8);
  Tensor x0 = random_tensor({4, 3}, rng), w = random_tensor({3, 3}, rng);
  auto run = [&] {
    Tape tape;
    Tensor x = tape.watch(x0);
    Tensor y = sum(softmax_rows(matmul(x, w)));
    Tensor sq = mean(mul(x, x));
    Tensor out = add(y, sq);
    return std::make_pair(out.to_vector(), backward(out)[x].to_vector());
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Tensor, NoGradGuardStopsRecording) {
  Tape tape;
  Tensor x = tape.watch(Tensor::vector({1, 2}));
  {
    NoGradGuard guard;
    EXPECT_FALSE(mul(x, x).tracked());
  }
  EXPECT_TRUE(mul(x, x).tracked());
}

TEST(Tensor, UnrelatedLeafGetsZeroGradient) {
  Tape tape;
  Tensor x = tape.watch(Tensor::vector({1, 2}));
  Tensor y = tape.watch(Tensor::vector({3, 4}));
  Tensor g = backward(sum(x))[y];
  EXPECT_EQ(g.to_vector(), (std::vector<double>{0, 0}));
}

TEST(Tensor, InverseAndLogAbsDet) {
  std::mt19937_64 rng(91);
  Tensor a = testutil::random_tensor({3, 4, 4}, rng);
  Tensor inv = inverse(a);
  Tensor prod = bmm(a, inv);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(prod.at(b, i, j), i == j ? 1.0 : 0.0, 1e-12);

  // 2x2 closed form.
  Tensor m({1, 2, 2}, {3.0, 1.0, -2.0, 0.5});
  EXPECT_NEAR(logabsdet(m).item(), std::log(3.5), 1e-15);

  auto f = [](const Tensor& x) { return sum(mul(logabsdet(x), Tensor({3}, {1.0, -2.0, 0.5}))).item(); };
  Tape tape;
  Tensor w = tape.watch(a);
  auto grads = backward(sum(mul(logabsdet(w), Tensor({3}, {1.0, -2.0, 0.5}))));
  auto num = testutil::numeric_grad(f, a);
  EXPECT_LE(testutil::max_abs_diff(grads[w].values(), num), 1e-7);

  auto h = [](const Tensor& x) { return sum(mul(inverse(x), x)).item(); };
  Tape tape2;
  Tensor w2 = tape2.watch(a);
  auto g2 = backward(sum(mul(inverse(w2), w2)));
  EXPECT_LE(testutil::max_abs_diff(g2[w2].values(), testutil::numeric_grad(h, a)), 1e-6);

  EXPECT_THROW(logabsdet(Tensor::zeros({1, 2, 2})), DomainError);
  EXPECT_THROW(inverse(Tensor::zeros({2, 3})), DimensionError);
}
