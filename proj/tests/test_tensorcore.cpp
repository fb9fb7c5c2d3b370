#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "op_gradcases.hpp"
#include "visatronic/optim.hpp"
#include "visatronic/tensor.hpp"

using namespace visatronic;
using namespace visatronic::tc;
using gradcheck::project;
using gradcheck::random_tensor;

namespace {

constexpr double kTol = 1e-6;

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kContract;
}

}  // namespace

TEST(Ops, MatmulByIdentity) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng, 1.0, false);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 5)] = 1.0;
  EXPECT_EQ(matmul(a, Tensor<double>::from_data({4, 4}, eye)).data(), a.data());
}

TEST(Ops, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(2);
  auto a = random_tensor({5, 7}, rng, 1.0, false), b = random_tensor({7, 3}, rng, 1.0, false);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 7; ++k) acc += a.data()[i * 7 + k] * b.data()[k * 3 + j];
      EXPECT_NEAR(c.data()[i * 3 + j], acc, 1e-12);
    }
  }
}

TEST(Ops, MatmulIsBitReproducibleAcrossAllocations) {
  // Fresh buffers land at varied addresses; results must not depend on it.
  std::mt19937_64 rng(2);
  const auto a0 = random_tensor({7, 13}, rng, 1.0, false), b0 = random_tensor({13, 5}, rng, 1.0, false);
  const auto ref = matmul(a0, b0).data();
  std::vector<std::vector<char>> padding;
  for (std::size_t pad = 1; pad < 64; ++pad) {
    padding.emplace_back(pad * 8);
    const auto a = Tensor<double>::from_data(a0.shape(), a0.data());
    const auto b = Tensor<double>::from_data(b0.shape(), b0.data());
    EXPECT_EQ(matmul(a, b).data(), ref);
  }
}

TEST(Ops, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(3);
  const auto y = softmax(random_tensor({6, 9}, rng, 5.0, false));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) s += y.data()[r * 9 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Ops, ShapeMismatchIsShapeError) {
  auto a = Tensor<double>::zeros({2, 3}), b = Tensor<double>::zeros({2, 2});
  EXPECT_EQ(kind_of([&] { add(a, b); }), ErrorKind::kShape);
  EXPECT_EQ(kind_of([&] { matmul(a, a); }), ErrorKind::kShape);
  EXPECT_EQ(kind_of([&] { concat<double>({a, Tensor<double>::zeros({2})}); }), ErrorKind::kShape);
  EXPECT_EQ(kind_of([&] { reshape(a, {4}); }), ErrorKind::kShape);
}

TEST(Ops, CheckedModeRaisesOnNan) {
  set_checked_mode(true);
  auto a = Tensor<double>::from_data({2}, {1.0, std::nan("")});
  EXPECT_EQ(kind_of([&] { scale(a, 2.0); }), ErrorKind::kNumeric);
  set_checked_mode(false);
  EXPECT_TRUE(std::isnan(scale(a, 2.0).data()[1]));
}

TEST(Ops, ConcatAndSliceAreInverse) {
  std::mt19937_64 rng(4);
  auto a = random_tensor({2, 3}, rng, 1.0, false), b = random_tensor({2, 5}, rng, 1.0, false);
  const auto c = concat<double>({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 8}));
  EXPECT_EQ(slice(c, 1, 0, 3).data(), a.data());
  EXPECT_EQ(slice(c, 1, 3, 5).data(), b.data());
}

TEST(Backward, SumGivesOnes) {
  auto w = Tensor<double>::from_data({4}, {1, -2, 3, 0.5}, true);
  backward(sum(w));
  EXPECT_EQ(w.grad(), std::vector<double>(4, 1.0));
}

TEST(Backward, SquareGivesTwiceW) {
  auto w = Tensor<double>::from_data({3}, {1, -2, 3}, true);
  backward(sum(mul(w, w)));
  EXPECT_EQ(w.grad(), (std::vector<double>{2, -4, 6}));
}

TEST(Backward, NonScalarLossIsContractError) {
  auto w = Tensor<double>::from_data({3}, {1, 2, 3}, true);
  EXPECT_EQ(kind_of([&] { backward(w); }), ErrorKind::kContract);
}

TEST(Backward, UnreachableParameterGetsZeroGrad) {
  auto w = Tensor<double>::from_data({2}, {1, 2}, true);
  auto u = Tensor<double>::from_data({2}, {3, 4}, true);
  backward(sum(w));
  EXPECT_EQ(u.grad(), std::vector<double>(2, 0.0));
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  auto w = Tensor<double>::from_data({2}, {1, 2}, true);
  const auto h = scale(w, 3.0);
  backward(sum(add(h, h)));
  EXPECT_EQ(w.grad(), std::vector<double>(2, 6.0));
}

TEST(Backward, IsLinearInTheLoss) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 2}, rng);
  auto l1 = [&] { return project(gelu(matmul(x, w)), 1); };
  auto l2 = [&] { return project(softmax(matmul(x, w)), 2); };
  auto grads = [&](auto f) {
    x.zero_grad();
    w.zero_grad();
    backward(f());
    return w.grad();
  };
  const auto g1 = grads(l1), g2 = grads(l2);
  const auto g = grads([&] { return add(scale(l1(), 2.0), scale(l2(), -0.5)); });
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 2.0 * g1[i] - 0.5 * g2[i], 1e-12);
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one per differentiable op.

class OpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  for (auto& c : gradcheck::op_cases()) {
    if (c.name != GetParam()) continue;
    const auto rep = gradcheck::check(c.loss, c.params);
    EXPECT_LT(rep.max_rel_error, kTol) << "worst at " << rep.worst;
    EXPECT_GT(rep.checked, 0u);
    return;
  }
  FAIL() << "no case named " << GetParam();
}

INSTANTIATE_TEST_SUITE_P(EveryOp, OpGradient, ::testing::ValuesIn([] {
                           std::vector<std::string> names;
                           for (const auto& c : gradcheck::op_cases()) names.push_back(c.name);
                           return names;
                         }()),
                         [](const auto& info) { return info.param; });

// ---------------------------------------------------------------------------
// Optimizer

TEST(AdamW, ZeroGradsWithoutDecayLeaveParamsUnchanged) {
  auto w = Tensor<double>::from_data({3}, {1, -2, 3}, true);
  std::vector<Tensor<double>> params{w};
  AdamWState<double> st;
  adamw_step(params, st, 1e-2);
  EXPECT_EQ(w.data(), (std::vector<double>{1, -2, 3}));
}

TEST(AdamW, SingleScalarStepMatchesHandComputation) {
  auto w = Tensor<double>::from_data({1}, {0.5}, true);
  w.mutable_grad()[0] = 0.2;
  std::vector<Tensor<double>> params{w};
  AdamWState<double> st;
  st.options = {0.9, 0.95, 1e-8, 0.1};
  const double lr = 1e-3;
  adamw_step(params, st, lr);
  const double m = 0.1 * 0.2, v = 0.05 * 0.04;
  const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.95);
  const double expect = 0.5 * (1 - lr * 0.1) - lr * mhat / (std::sqrt(vhat) + 1e-8);
  EXPECT_NEAR(w.data()[0], expect, 1e-15);
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, DecoupledDecayShrinksWithZeroGrads) {
  auto w = Tensor<double>::from_data({2}, {2.0, -3.0}, true);
  std::vector<Tensor<double>> params{w};
  AdamWState<double> st;
  st.options.weight_decay = 0.5;
  adamw_step(params, st, 0.1);
  EXPECT_LT(std::abs(w.data()[0]), 2.0);
  EXPECT_LT(std::abs(w.data()[1]), 3.0);
  EXPECT_DOUBLE_EQ(w.data()[0], 2.0 * 0.95);
}

TEST(AdamW, DecayMaskSkipsParams) {
  auto a = Tensor<double>::from_data({1}, {1.0}, true), b = Tensor<double>::from_data({1}, {1.0}, true);
  std::vector<Tensor<double>> params{a, b};
  AdamWState<double> st;
  st.options.weight_decay = 0.5;
  adamw_step(params, st, 0.1, {true, false});
  EXPECT_LT(a.data()[0], 1.0);
  EXPECT_EQ(b.data()[0], 1.0);
}

TEST(AdamW, IsDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(6);
    auto w = random_tensor({4, 3}, rng);
    auto x = random_tensor({5, 4}, rng, 1.0, false);
    std::vector<Tensor<double>> params{w};
    AdamWState<double> st;
    for (int k = 0; k < 5; ++k) {
      w.zero_grad();
      backward(project(gelu(matmul(x, w))));
      adamw_step(params, st, 1e-2);
    }
    return w.data();
  };
  EXPECT_EQ(run(), run());
}

TEST(ClipGradNorm, HalvesWhenNormIsTwo) {
  auto w = Tensor<double>::from_data({2}, {0, 0}, true);
  w.mutable_grad() = {1.2, 1.6};
  std::vector<Tensor<double>> params{w};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 2.0);
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.6);
  EXPECT_DOUBLE_EQ(w.grad()[1], 0.8);
}

TEST(ClipGradNorm, LeavesSmallNormsAlone) {
  auto w = Tensor<double>::from_data({2}, {0, 0}, true);
  w.mutable_grad() = {0.3, 0.4};
  std::vector<Tensor<double>> params{w};
  clip_grad_norm(params, 1.0);
  EXPECT_EQ(w.grad(), (std::vector<double>{0.3, 0.4}));
}

TEST(ClipGradNorm, RandomGradsEndBelowMax) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<Tensor<double>> params;
    for (int k = 0; k < 3; ++k) {
      auto p = Tensor<double>::zeros({7}, true);
      for (double& g : p.mutable_grad()) g = n(rng);
      params.push_back(p);
    }
    clip_grad_norm(params, 1.0);
    EXPECT_LE(global_grad_norm(params), 1.0 + 1e-6);
  }
}

TEST(LrSchedule, Endpoints) {
  EXPECT_EQ(lr_schedule(0, 4e-4, 5000, 100000), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(5000, 4e-4, 5000, 100000), 4e-4);
  EXPECT_NEAR(lr_schedule(100000, 4e-4, 5000, 100000), 0.0, 1e-9);
  EXPECT_DOUBLE_EQ(lr_schedule(2500, 4e-4, 5000, 100000), 2e-4);
  EXPECT_NEAR(lr_schedule(52500, 4e-4, 5000, 100000), 2e-4, 1e-12);
}
