#include <gtest/gtest.h>

#include <cmath>

#include "voxdiff/gradcheck.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/tensor.hpp"

using namespace voxdiff;

namespace {

Tensor random_param(const Shape& shape, Rng& rng, const char* name, double lo = -1.0,
                    double hi = 1.0) {
  std::vector<real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<real>(rng.uniform(lo, hi));
  return Tensor::param(shape, std::move(v), name);
}

// Fixed random linear functional (deterministic in `seed`, so repeated
// evaluations inside finite differencing see the same function) turning any
// output into a scalar; exercises the full Jacobian.
Tensor contract(const Tensor& out, uint64_t seed) {
  Rng rng(seed);
  std::vector<real> w(out.numel());
  for (auto& x : w) x = static_cast<real>(rng.uniform(-1.0, 1.0));
  return reduce_sum(mul(out, Tensor::constant(out.shape(), std::move(w))));
}

constexpr int kTrials = 100;
constexpr double kTol = 1e-4;

}  // namespace

// ---------------------------------------------------------------------------
// Named examples.
// ---------------------------------------------------------------------------

TEST(Autodiff, SoftmaxOfZerosIsUniform) {
  Tensor x = Tensor::constant({3}, {0, 0, 0});
  Tensor y = softmax_lastaxis(x);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.value()[i], 1.0 / 3.0);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_param({5, 7}, rng, "x", -30.0, 30.0);
    Tensor y = softmax_lastaxis(x);
    for (int r = 0; r < 5; ++r) {
      double s = 0.0;
      for (int k = 0; k < 7; ++k) s += y.value()[r * 7 + k];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Autodiff, StopGradientBlocksBranch) {
  // d/dx [ sg(x) * x ] at x = 2 is 2, not 4.
  Tensor x = Tensor::param({1}, {2.0}, "x");
  Tensor y = reduce_sum(mul(stop_gradient(x), x));
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Autodiff, MatmulIdentity) {
  Tensor eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(eye, a);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.value()[i], a.value()[i]);
}

TEST(Autodiff, BackwardSumIsOnes) {
  Tensor x = Tensor::param({3}, {5.0, -2.0, 0.5}, "x");
  backward(reduce_sum(x));
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 1.0);
}

TEST(Autodiff, BackwardMatchesFiniteDifferencesOnQuadratic) {
  // loss = ||W x||^2
  Rng rng(3);
  Tensor w = random_param({4, 4}, rng, "w");
  Tensor x = random_param({4, 1}, rng, "x");
  const auto f = [](const std::vector<Tensor>& in) {
    Tensor y = matmul(in[0], in[1]);
    return reduce_sum(mul(y, y));
  };
  EXPECT_LE(grad_check(f, {w, x}, 1e-4), 1e-4);
}

TEST(Autodiff, BackwardTwiceDoublesLeafGrads) {
  Tensor x = Tensor::param({2, 2}, {1, 2, 3, 4}, "x");
  Tensor loss = reduce_sum(mul(x, x));
  backward(loss);
  const auto once = x.grad();
  backward(loss);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * once[i]);
}

TEST(Autodiff, BackwardRejectsNonScalar) {
  Tensor x = Tensor::param({2}, {1, 2}, "x");
  EXPECT_THROW(backward(mul(x, x)), UsageError);
}

TEST(Autodiff, BackwardDeterministicBitwise) {
  Rng rng(11);
  Tensor w = random_param({8, 8}, rng, "w");
  Tensor x = random_param({8, 8}, rng, "x");
  const auto run = [&] {
    w.zero_grad();
    x.zero_grad();
    Tensor y = softmax_lastaxis(matmul(w, x));
    backward(reduce_sum(mul(y, y)));
    return std::make_pair(w.grad(), x.grad());
  };
  const auto [gw1, gx1] = run();
  const auto [gw2, gx2] = run();
  EXPECT_EQ(gw1, gw2);
  EXPECT_EQ(gx1, gx2);
}

TEST(GradCheck, SquareAtThree) {
  const auto f = [](const Tensor& x) { return reduce_sum(mul(x, x)); };
  Tensor x = Tensor::param({1}, {3.0}, "x");
  EXPECT_LE(grad_check(f, x, 1e-4), 1e-8);
  x.zero_grad();
  backward(f(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(GradCheck, SoftmaxComposedWithMatmul) {
  Rng rng(23);
  Tensor w = random_param({4, 4}, rng, "w");
  Tensor x = random_param({4, 4}, rng, "x");
  const auto f = [](const std::vector<Tensor>& in) {
    return contract(softmax_lastaxis(matmul(in[0], in[1])), 99);
  };
  EXPECT_LE(grad_check(f, {w, x}, 1e-4), 1e-4);
}

TEST(GradCheck, LinearIsNearlyExact) {
  Rng rng(31);
  Tensor x = random_param({6}, rng, "x");
  std::vector<real> cw(6);
  for (auto& v : cw) v = static_cast<real>(rng.uniform(-1.0, 1.0));
  Tensor c = Tensor::constant({6}, std::move(cw));
  const auto f = [&c](const std::vector<Tensor>& in) { return reduce_sum(mul(in[0], c)); };
  EXPECT_LE(grad_check(f, {x}, 1e-4), 1e-10);
}

TEST(GradCheck, RejectsNonFinite) {
  Tensor x = Tensor::param({1}, {-1.0}, "x");
  const auto f = [](const std::vector<Tensor>& in) { return log_op(in[0]); };
  EXPECT_THROW(grad_check(f, {x}), UsageError);
}

// ---------------------------------------------------------------------------
// Property suite: every primitive passes randomized gradient checks.
// ---------------------------------------------------------------------------

TEST(GradProperty, ElementwiseBinaryOps) {
  Rng rng(101);
  for (int trial = 0; trial < kTrials; ++trial) {
    Tensor a = random_param({3, 4}, rng, "a");
    Tensor b = random_param({3, 4}, rng, "b", 0.5, 2.0);  // keep div well-conditioned
    const uint64_t cs = trial;
    const auto checked = [&](auto op) {
      return grad_check(
          [&](const std::vector<Tensor>& in) { return contract(op(in[0], in[1]), cs); }, {a, b});
    };
    EXPECT_LE(checked([](const Tensor& x, const Tensor& y) { return add(x, y); }), kTol);
    EXPECT_LE(checked([](const Tensor& x, const Tensor& y) { return sub(x, y); }), kTol);
    EXPECT_LE(checked([](const Tensor& x, const Tensor& y) { return mul(x, y); }), kTol);
    EXPECT_LE(checked([](const Tensor& x, const Tensor& y) { return div(x, y); }), kTol);
  }
}

TEST(GradProperty, ScalarAndUnaryOps) {
  Rng rng(102);
  for (int trial = 0; trial < kTrials; ++trial) {
    Tensor a = random_param({2, 5}, rng, "a", 0.2, 1.8);  // positive domain for log
    const uint64_t cs = trial;
    const auto checked = [&](auto op) {
      return grad_check([&](const std::vector<Tensor>& in) { return contract(op(in[0]), cs); },
                        {a});
    };
    EXPECT_LE(checked([](const Tensor& x) { return scale(x, real(1.7)); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return add_scalar(x, real(-0.3)); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return neg(x); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return log_op(x); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return exp_op(x); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return sigmoid(x); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return quick_gelu(x); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return clamp_min(x, real(-5.0)); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return softmax_lastaxis(x); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return log_softmax_lastaxis(x); }), kTol);
    EXPECT_LE(checked([](const Tensor& x) { return layer_norm_lastaxis(x); }), kTol);
  }
}

TEST(GradProperty, FusedAffineOps) {
  Rng rng(107);
  for (int trial = 0; trial < kTrials; ++trial) {
    Tensor x = random_param({3, 4}, rng, "x");
    Tensor w = random_param({4, 2}, rng, "w");
    Tensor b = random_param({2}, rng, "b");
    const uint64_t cs = trial;
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(linear_op(in[0], in[1], in[2]), cs);
                  },
                  {x, w, b}),
              kTol);
    Tensor feats = random_param({2, 3, 4}, rng, "feats");
    Tensor gain = random_param({2, 4}, rng, "gain");
    Tensor shift = random_param({2, 4}, rng, "shift");
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(modulate_rows(in[0], in[1], in[2]), cs);
                  },
                  {feats, gain, shift}),
              kTol);
  }
}

TEST(GradProperty, MatrixProducts) {
  Rng rng(103);
  for (int trial = 0; trial < kTrials; ++trial) {
    Tensor a = random_param({3, 4}, rng, "a");
    Tensor b = random_param({4, 2}, rng, "b");
    const uint64_t cs = trial;
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(matmul(in[0], in[1]), cs);
                  },
                  {a, b}),
              kTol);
    Tensor ba = random_param({2, 3, 4}, rng, "ba");
    Tensor bb = random_param({2, 4, 3}, rng, "bb");
    EXPECT_LE(
        grad_check(
            [&](const std::vector<Tensor>& in) { return contract(bmm(in[0], in[1]), cs); },
            {ba, bb}),
        kTol);
  }
}

TEST(GradProperty, ShapeOps) {
  Rng rng(104);
  for (int trial = 0; trial < kTrials; ++trial) {
    Tensor a = random_param({2, 3, 4}, rng, "a");
    Tensor b = random_param({2, 1, 4}, rng, "b");
    const uint64_t cs = trial;
    const auto checked1 = [&](auto op) {
      return grad_check([&](const std::vector<Tensor>& in) { return contract(op(in[0]), cs); },
                        {a});
    };
    EXPECT_LE(checked1([](const Tensor& x) { return reshape(x, {6, 4}); }), kTol);
    EXPECT_LE(checked1([](const Tensor& x) { return permute(x, {2, 0, 1}); }), kTol);
    EXPECT_LE(checked1([](const Tensor& x) { return slice(x, 1, 1, 2); }), kTol);
    EXPECT_LE(checked1([](const Tensor& x) { return sum_lastaxis(x); }), kTol);
    EXPECT_LE(checked1([](const Tensor& x) { return reduce_mean(x); }), kTol);
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(broadcast_to(in[0], {2, 3, 4}), cs);
                  },
                  {b}),
              kTol);
    Tensor c = random_param({2, 2, 4}, rng, "c");
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(concat({in[0], in[1]}, 1), cs);
                  },
                  {a, c}),
              kTol);
  }
}

TEST(GradProperty, SpatialResampling) {
  Rng rng(105);
  const Dims3 grid{4, 2, 2};
  const Dims3 coarse{2, 1, 1};
  for (int trial = 0; trial < kTrials; ++trial) {
    Tensor fine = random_param({2, 16, 3}, rng, "fine");
    Tensor low = random_param({2, 2, 3}, rng, "low");
    const uint64_t cs = trial;
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(mean_pool3d(in[0], grid, 2), cs);
                  },
                  {fine}),
              kTol);
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(upsample3d_nearest(in[0], coarse, 2), cs);
                  },
                  {low}),
              kTol);
  }
}

TEST(GradProperty, IndexedOps) {
  Rng rng(106);
  const std::vector<int> ids{0, 2, 2, 1};  // duplicate rows accumulate
  const std::vector<int> gids{1, 0, 3, 2};
  for (int trial = 0; trial < kTrials; ++trial) {
    Tensor table = random_param({3, 5}, rng, "table");
    Tensor x = random_param({4, 4}, rng, "x");
    const uint64_t cs = trial;
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(embedding_lookup(in[0], ids), cs);
                  },
                  {table}),
              kTol);
    EXPECT_LE(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return contract(gather_lastaxis(in[0], gids), cs);
                  },
                  {x}),
              kTol);
  }
}

TEST(Autodiff, MeanPoolValues) {
  // (1,8,1) over a 2x2x2 grid pools to the mean of all eight positions.
  std::vector<real> v{1, 2, 3, 4, 5, 6, 7, 8};
  Tensor x = Tensor::constant({1, 8, 1}, std::move(v));
  Tensor y = mean_pool3d(x, {2, 2, 2}, 2);
  ASSERT_EQ(y.numel(), 1);
  EXPECT_DOUBLE_EQ(y.value()[0], 4.5);
  Tensor up = upsample3d_nearest(y, {1, 1, 1}, 2);
  for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(up.value()[i], 4.5);
}

TEST(Autodiff, ShapeMismatchRejected) {
  Tensor a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::constant({2}, {1, 2});
  EXPECT_THROW(add(a, b), UsageError);
  EXPECT_THROW(matmul(a, reshape(b, {1, 2})), UsageError);
}

TEST(Autodiff, NoGradScopeBuildsNoTape) {
  Tensor x = Tensor::param({2}, {1, 2}, "x");
  NoGradScope ng;
  Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}
