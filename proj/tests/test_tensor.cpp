#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracle.hpp"
#include "pargan/tensor.hpp"

using namespace pargan;
using T64 = Tensor<double>;

using oracle::fd_check;
using oracle::probe;
using oracle::rnd;
using Builder = oracle::Builder;

TEST(Conv2d, AllOnesSum) {
  auto y = conv2d(T64::ones({1, 1, 3, 3}), T64::ones({1, 1, 3, 3}), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST(Conv2d, SamePaddingShape) {
  auto y = conv2d(T64::ones({1, 1, 4, 4}), T64::ones({1, 1, 3, 3}), 1, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
}

TEST(Conv2d, OutputExtentFormula) {
  for (int h : {5, 8, 9, 16}) {
    for (int k : {1, 3, 4}) {
      for (int s : {1, 2, 3}) {
        for (int p : {0, 1, 2}) {
          if (h + 2 * p < k) continue;
          auto y = conv2d(T64::ones({1, 2, h, h + 1}), T64::ones({3, 2, k, k}), s, p);
          EXPECT_EQ(y.dim(2), (h + 2 * p - k) / s + 1);
          EXPECT_EQ(y.dim(3), (h + 1 + 2 * p - k) / s + 1);
        }
      }
    }
  }
}

TEST(Conv2d, ShapeErrorsNameAxes) {
  try {
    conv2d(T64::ones({1, 2, 4, 4}), T64::ones({1, 3, 3, 3}), 1, 0);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos);
  }
  EXPECT_THROW(conv2d(T64::ones({1, 1, 2, 2}), T64::ones({1, 1, 3, 3}), 1, 0), DimensionError);
  EXPECT_THROW(conv2d(T64::ones({1, 1, 4, 4}), T64::ones({1, 1, 3, 3}), 0, 0), ParameterError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  for (std::int64_t stride : {1, 2}) {
    const double err = fd_check({rnd({2, 3, 8, 8}, 1), rnd({4, 3, 3, 3}, 2)},
                                [stride](const std::vector<T64>& v) {
                                  return probe(conv2d(v[0], v[1], stride, 1), 3);
                                });
    EXPECT_LT(err, 1e-4) << "stride " << stride;
  }
}

TEST(Conv2d, AdjointsMatchFiniteDifferences) {
  const Shape in{2, 3, 7, 7};
  const double e1 = fd_check({rnd({2, 4, 4, 4}, 4), rnd({4, 3, 3, 3}, 5)},
                             [&](const std::vector<T64>& v) {
                               return probe(conv2d_input_grad(v[0], v[1], in, 2, 1), 6);
                             });
  const double e2 = fd_check({rnd(in, 7), rnd({2, 4, 4, 4}, 8)}, [&](const std::vector<T64>& v) {
    return probe(conv2d_weight_grad(v[0], v[1], Shape{4, 3, 3, 3}, 2, 1), 9);
  });
  EXPECT_LT(e1, 1e-4);
  EXPECT_LT(e2, 1e-4);
}

TEST(ResizeNearest, ReplicatesBlocks) {
  T64 x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = resize_nearest(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  EXPECT_EQ(y.values(), want);
  EXPECT_EQ(resize_nearest(x, 1).values(), x.values());
  EXPECT_THROW(resize_nearest(x, 0), ParameterError);
}

TEST(ResizeNearest, BackwardSumsBlocks) {
  T64 x({1, 1, 2, 2}, {1, 2, 3, 4});
  x.set_requires_grad();
  Tape<double> tape;
  backward(sum(resize_nearest(x, 2)));
  EXPECT_EQ(x.grad()->values(), std::vector<double>(4, 4.0));
}

TEST(ResizeNearest, GradientMassConserved) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = rnd({1, 2, 3, 5}, seed).set_requires_grad();
    auto g = rnd({1, 2, 9, 15}, seed + 100);
    Tape<double> tape;
    backward(sum(mul(resize_nearest(x, 3), g)));
    double in = 0, out = 0;
    for (auto v : x.grad()->data()) in += v;
    for (auto v : g.data()) out += v;
    EXPECT_NEAR(in, out, 1e-12);
  }
}

TEST(InstanceNorm, ConstantChannelIsZero) {
  auto y = instance_norm(T64::full({1, 2, 4, 4}, 3.5), T64::ones({2}), T64::zeros({2}), 1e-5);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNorm, StandardizedInputPassesThrough) {
  T64 x({1, 1, 2, 2}, {1, -1, 1, -1});
  auto y = instance_norm(x, T64::ones({1}), T64::zeros({1}), 1e-5);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(InstanceNorm, RandomInputStatistics) {
  auto x = rnd({2, 3, 9, 7}, 11, 4.0);
  auto y = instance_norm(x, T64::ones({3}), T64::zeros({3}), 1e-5);
  const std::int64_t hw = 63;
  for (std::int64_t p = 0; p < 6; ++p) {
    double mu = 0, var = 0;
    for (std::int64_t i = 0; i < hw; ++i) mu += y[p * hw + i];
    mu /= hw;
    for (std::int64_t i = 0; i < hw; ++i) var += (y[p * hw + i] - mu) * (y[p * hw + i] - mu);
    var /= hw;
    EXPECT_LT(std::abs(mu), 1e-6);
    EXPECT_LT(std::abs(var - 1), 1e-3);
  }
}

TEST(InstanceNorm, RejectsNonPositiveEps) {
  EXPECT_THROW(instance_norm(T64::ones({1, 1, 2, 2}), T64::ones({1}), T64::zeros({1}), 0.0),
               ParameterError);
}

TEST(Elementwise, L1Examples) {
  auto x = rnd({3, 4}, 1);
  EXPECT_EQ(l1(x, x).item(), 0.0);
  EXPECT_EQ(l1(T64({2}, {0, 0}), T64({2}, {1, 3})).item(), 2.0);
}

TEST(Elementwise, TanhGradientAtZero) {
  auto x = T64::zeros({1}).set_requires_grad();
  Tape<double> tape;
  backward(sum(tanh(x)));
  EXPECT_EQ(x.grad()->item(), 1.0);
}

TEST(Elementwise, IncompatibleShapes) {
  EXPECT_THROW(add(T64::ones({2, 3}), T64::ones({3, 2})), DimensionError);
  EXPECT_THROW(mul(T64::ones({2}), T64::ones({3})), DimensionError);
  EXPECT_NO_THROW(add(T64::ones({2, 3}), T64::scalar(2.0)));
}

// Every differentiable op against central differences on five seeds.
TEST(Elementwise, AllOpsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& c : oracle::op_cases()) {
      EXPECT_LT(fd_check(oracle::op_inputs(c, seed), c.f), 1e-3) << c.name << " seed " << seed;
    }
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = rnd({3, 5}, 2).set_requires_grad();
  Tape<double> tape;
  backward(sum(x));
  EXPECT_EQ(x.grad()->values(), std::vector<double>(15, 1.0));
}

TEST(Backward, MeanOfSquares) {
  auto x = T64({2}, {1, 2}).set_requires_grad();
  Tape<double> tape;
  backward(mean(square(x)));
  EXPECT_EQ(x.grad()->values(), (std::vector<double>{1, 2}));
}

TEST(Backward, CompositeNetwork) {
  const double err = fd_check(
      {rnd({1, 2, 6, 6}, 3), rnd({3, 2, 3, 3}, 4), T64::ones({3}), T64::zeros({3})},
      [](const std::vector<T64>& v) {
        return mean(mul(relu(instance_norm(conv2d(v[0], v[1], 1, 1), v[2], v[3], 1e-5)),
                        rnd({1, 3, 6, 6}, 5)));
      });
  EXPECT_LT(err, 1e-3);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = rnd({3}, 2).set_requires_grad();
  Tape<double> tape;
  EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Backward, DetachedLossCountsWarning) {
  const auto before = detached_backward_warnings();
  Tape<double> tape;
  backward(sum(rnd({3}, 2)));
  EXPECT_EQ(detached_backward_warnings(), before + 1);
}

TEST(Backward, Deterministic) {
  auto run = [] {
    auto x = rnd({2, 3, 8, 8}, 9).set_requires_grad();
    auto w = rnd({4, 3, 3, 3}, 10).set_requires_grad();
    Tape<double> tape;
    backward(probe(tanh(conv2d(x, w, 2, 1)), 3));
    return std::make_pair(x.grad()->values(), w.grad()->values());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradOfOutput, LinearCritic) {
  auto x = rnd({1, 2, 3, 3}, 1).set_requires_grad();
  Tape<double> tape;
  auto g = grad_of_output_wrt_input(sum(scale(x, 2.0)), x);
  for (auto v : g.data()) EXPECT_EQ(v, 2.0);
  const double n = 18;
  const double penalty = square(add_scalar(norm2(g), -1.0)).item();
  EXPECT_NEAR(penalty, std::pow(2 * std::sqrt(n) - 1, 2), 1e-9);
}

TEST(GradOfOutput, SumCriticClosedForm) {
  auto x = rnd({1, 3, 4, 4}, 1).set_requires_grad();
  Tape<double> tape;
  auto g = grad_of_output_wrt_input(sum(x), x);
  const double n = 48;
  EXPECT_NEAR(norm2(g).item(), std::sqrt(n), 1e-12);
  EXPECT_NEAR(square(add_scalar(norm2(g), -1.0)).item(), std::pow(std::sqrt(n) - 1, 2), 1e-9);
}

TEST(GradOfOutput, ConstantCritic) {
  auto x = rnd({1, 1, 2, 2}, 1).set_requires_grad();
  Tape<double> tape;
  auto c = T64::scalar(3.0);
  auto g = grad_of_output_wrt_input(c, x);
  for (auto v : g.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(square(add_scalar(norm2(g), -1.0)).item(), 1.0);
}

TEST(GradOfOutput, InputNotOnTape) {
  auto x = rnd({3}, 1);
  Tape<double> tape;
  EXPECT_THROW(grad_of_output_wrt_input(sum(x), x), ContractError);
}

// d/dw of (||d critic / dx|| - 1)^2 for a small conv critic, through the
// double-backward path, against central differences in w.
TEST(GradOfOutput, PenaltyGradientMatchesFiniteDifferences) {
  auto x = rnd({1, 2, 8, 8}, 21);
  auto w1 = rnd({3, 2, 4, 4}, 22, 0.3);
  auto w2 = rnd({1, 3, 3, 3}, 23, 0.3);
  auto b1 = rnd({3}, 24, 0.1);
  auto critic = [&](const T64& in) {
    auto h = leaky_relu(add_bias(conv2d(in, w1, 2, 1), b1), 0.2);
    return mean(tanh(conv2d(h, w2, 1, 1)));
  };
  auto penalty = [&] {
    auto xi = x.detach().set_requires_grad();
    auto g = grad_of_output_wrt_input(critic(xi), xi);
    return square(add_scalar(norm2(g), -1.0));
  };
  for (auto* p : {&w1, &w2, &b1}) p->set_requires_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    backward(penalty());
    for (auto* p : {&w1, &w2, &b1}) {
      analytic.push_back(oracle::to_vec(*p->grad()));
      p->zero_grad();
    }
  }
  int i = 0;
  for (auto* p : {&w1, &w2, &b1}) {
    auto numeric = oracle::central_diff(*p, [&] {
      Tape<double> tape;
      return penalty().item();
    });
    EXPECT_LT(oracle::rel_error(analytic[i++], numeric), 1e-3);
  }
}

TEST(GradOfOutput, InstanceNormRefusesDoubleBackward) {
  auto x = rnd({1, 1, 4, 4}, 1).set_requires_grad();
  auto gain = T64::ones({1}).set_requires_grad();
  Tape<double> tape;
  auto y = probe(instance_norm(x, gain, T64::zeros({1}), 1e-5), 2);
  EXPECT_THROW(grad_of_output_wrt_input(y, x), ContractError);
}

TEST(CheckFinite, FlagsNaN) {
  T64 x({2}, {1.0, std::nan("")});
  EXPECT_THROW(check_finite(x), NonFiniteError);
  EXPECT_NO_THROW(check_finite(T64::ones({2})));
}
