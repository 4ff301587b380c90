#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "adn/error.hpp"
#include "adn/parallel.hpp"
#include "adn/tensor.hpp"
#include "test_support.hpp"

namespace adn {
namespace {

using test::random_tensor;

Tensor iota(Shape shape, float start = 1.0f) {
  Tensor t(std::move(shape));
  float v = start;
  for (float& x : t.values()) x = v++;
  return t;
}

TEST(Tensor, ShapeAndLengthMustAgree) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), Error);
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.extent(2), 4u);
}

TEST(DilationRate, EffectiveExtent) {
  EXPECT_EQ(DilationRate{1}.effective_extent(3), 5u);
  EXPECT_EQ(DilationRate{0}.effective_extent(7), 7u);
  EXPECT_EQ(DilationRate{3}.effective_extent(2), 5u);
  // Rate r read on a grid of spacing f gives spacing f * (r + 1).
  EXPECT_EQ(DilationRate{1}.on_grid(4).rate, 7u);
  EXPECT_EQ(DilationRate{0}.on_grid(2).rate, 1u);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({1, 6, 7}, rng);
  Tensor k({1, 1, 1, 1}, 1.0f);
  const float bias[] = {0.0f};
  EXPECT_EQ(conv2d(x, k, bias, 1, {}), x);
}

TEST(Conv2d, DilatedOnesKernelSkipsInsertedZeros) {
  Tensor x({1, 5, 5}, 1.0f);
  Tensor k({1, 1, 3, 3}, 1.0f);
  const float bias[] = {0.0f};
  Tensor y = conv2d(x, k, bias, 1, DilationRate{1});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y(0, 0, 0), 9.0f);
}

TEST(Conv2d, RateTwoMatchesZeroStuffedKernel) {
  std::mt19937_64 rng(42);
  Tensor x = random_tensor({1, 8, 8}, rng);
  Tensor k = random_tensor({2, 1, 3, 3}, rng);
  std::vector<float> bias = test::random_vector(2, rng);
  Tensor dilated = conv2d(x, k, bias, 1, DilationRate{2});
  Tensor stuffed = test::zero_stuff(k, 2);
  ASSERT_EQ(stuffed.shape(), (Shape{2, 1, 7, 7}));
  Tensor plain = conv2d(x, stuffed, bias, 1, {});
  ASSERT_EQ(dilated.shape(), (Shape{2, 2, 2}));
  ASSERT_EQ(plain.shape(), dilated.shape());
  EXPECT_LE(test::max_abs_diff(dilated.values(), plain.values()), 1e-5);
}

TEST(Conv2d, MatchesDoublePrecisionReference) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    auto pick = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const std::size_t cin = pick(1, 3), cout = pick(1, 4), k = pick(1, 4), rate = pick(0, 2),
                      stride = pick(1, 3);
    const std::size_t eff = k + (k - 1) * rate;
    Tensor x = random_tensor({cin, eff + pick(0, 9), eff + pick(0, 9)}, rng);
    Tensor w = random_tensor({cout, cin, k, k}, rng);
    auto b = test::random_vector(cout, rng);
    Tensor y = conv2d(x, w, b, stride, DilationRate{rate});
    auto ref = test::reference_conv2d(x, w, b, stride, rate);
    ASSERT_EQ(y.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.values()[i], ref[i], 1e-5);
  }
}

TEST(Conv2d, DilationEquivalenceProperty) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    auto pick = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const std::size_t k = pick(1, 4), rate = pick(0, 3), cin = pick(1, 3);
    const std::size_t eff = k + (k - 1) * rate;
    Tensor x = random_tensor({cin, eff + pick(0, 6), eff + pick(0, 6)}, rng);
    Tensor w = random_tensor({pick(1, 3), cin, k, k}, rng);
    auto b = test::random_vector(w.extent(0), rng);
    Tensor dilated = conv2d(x, w, b, 1, DilationRate{rate});
    Tensor plain = conv2d(x, test::zero_stuff(w, rate), b, 1, {});
    ASSERT_EQ(dilated.shape(), plain.shape());
    EXPECT_LE(test::max_abs_diff(dilated.values(), plain.values()), 1e-5);
  }
}

TEST(Conv2d, OutputShapeFollowsClosedForm) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto pick = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const std::size_t kh = pick(1, 4), kw = pick(1, 4), rate = pick(0, 3), stride = pick(1, 4);
    const std::size_t eh = kh + (kh - 1) * rate, ew = kw + (kw - 1) * rate;
    const std::size_t h = eh + pick(0, 12), w = ew + pick(0, 12);
    Tensor y = conv2d(Tensor({1, h, w}, 0.5f), Tensor({1, 1, kh, kw}, 1.0f), std::vector<float>{0.f},
                      stride, DilationRate{rate});
    EXPECT_EQ(y.extent(1), (h - eh) / stride + 1);
    EXPECT_EQ(y.extent(2), (w - ew) / stride + 1);
    Tensor p = maxpool2d(Tensor({2, h, w}, 0.5f), std::min(kh, kw), stride, DilationRate{rate});
    const std::size_t ep = std::min(kh, kw) + (std::min(kh, kw) - 1) * rate;
    EXPECT_EQ(p.extent(1), (h - ep) / stride + 1);
    EXPECT_EQ(p.extent(2), (w - ep) / stride + 1);
  }
}

TEST(Conv2d, BitIdenticalAcrossRunsAndThreadCounts) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({3, 40, 37}, rng);
  Tensor w = random_tensor({5, 3, 3, 3}, rng);
  auto b = test::random_vector(5, rng);
  const std::size_t saved = thread_count();
  set_thread_count(1);
  Tensor one = conv2d(x, w, b, 1, DilationRate{2});
  Tensor again = conv2d(x, w, b, 1, DilationRate{2});
  set_thread_count(4);
  Tensor four = conv2d(x, w, b, 1, DilationRate{2});
  Tensor pooled4 = maxpool2d(x, 3, 1, DilationRate{1});
  set_thread_count(1);
  Tensor pooled1 = maxpool2d(x, 3, 1, DilationRate{1});
  set_thread_count(saved);
  EXPECT_EQ(one, again);
  EXPECT_EQ(one, four);
  EXPECT_EQ(pooled1, pooled4);
}

TEST(Conv2d, LinearInTheKernel) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({2, 12, 12}, rng);
    Tensor k1 = random_tensor({3, 2, 3, 3}, rng), k2 = random_tensor({3, 2, 3, 3}, rng);
    const float a = 0.7f, b = -1.3f;
    Tensor mix(k1.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix.values()[i] = a * k1.values()[i] + b * k2.values()[i];
    const std::vector<float> zero(3, 0.0f);
    Tensor lhs = conv2d(x, mix, zero, 1, DilationRate{1});
    Tensor y1 = conv2d(x, k1, zero, 1, DilationRate{1}), y2 = conv2d(x, k2, zero, 1, DilationRate{1});
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      const double rhs = a * y1.values()[i] + b * y2.values()[i];
      EXPECT_LE(std::fabs(lhs.values()[i] - rhs), 1e-4 * std::max(1.0, std::fabs(rhs)));
    }
  }
}

TEST(Conv2d, RejectsBadShapes) {
  const std::vector<float> b1{0.0f};
  EXPECT_THROW(conv2d(Tensor({2, 5, 5}), Tensor({1, 1, 3, 3}), b1, 1, {}), Error);
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 3, 3}), b1, 1, DilationRate{1}), Error);
  EXPECT_THROW(conv2d(Tensor({1, 0, 4}), Tensor({1, 1, 1, 1}), b1, 1, {}), Error);
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 1, 1}), std::vector<float>{}, 1, {}), Error);
  try {
    conv2d(Tensor({2, 5, 5}), Tensor({1, 1, 3, 3}), b1, 1, {});
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
}

TEST(MaxPool2d, Examples) {
  Tensor x({1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(maxpool2d(x, 2, 2, {}), Tensor({1, 1, 1}, std::vector<float>{4}));
  EXPECT_EQ(maxpool2d(x, 2, 1, {}), Tensor({1, 1, 1}, std::vector<float>{4}));
  // Rate 1 samples (0,0), (0,2), (2,0), (2,2) = {1, 3, 7, 9}.
  EXPECT_EQ(maxpool2d(iota({1, 3, 3}), 2, 1, DilationRate{1}), Tensor({1, 1, 1}, std::vector<float>{9}));
  Tensor masked = iota({1, 3, 3});
  masked(0, 2, 2) = -1.0f;  // sampled max becomes 7
  EXPECT_EQ(maxpool2d(masked, 2, 1, DilationRate{1})(0, 0, 0), 7.0f);
  masked(0, 1, 1) = 100.0f;  // not sampled under rate 1
  EXPECT_EQ(maxpool2d(masked, 2, 1, DilationRate{1})(0, 0, 0), 7.0f);
}

TEST(MaxPool2d, RejectsOversizedWindow) {
  EXPECT_THROW(maxpool2d(Tensor({1, 3, 3}), 2, 1, DilationRate{2}), Error);
}

TEST(Relu, Examples) {
  EXPECT_EQ(relu(Tensor({3}, std::vector<float>{-1, 0, 2})), Tensor({3}, std::vector<float>{0, 0, 2}));
  EXPECT_EQ(relu(Tensor({2, 2, 2})), Tensor({2, 2, 2}));
  Tensor pos({1, 2, 2}, std::vector<float>{0.5f, 1, 2, 3});
  EXPECT_EQ(relu(pos), pos);
}

TEST(Softmax, Examples) {
  for (float logit : {0.0f, -3.5f, 17.0f, 1000.0f}) {
    Tensor y = softmax_channels(Tensor({2, 1, 1}, std::vector<float>{logit, logit}));
    EXPECT_EQ(y(0, 0, 0), 0.5f);
    EXPECT_EQ(y(1, 0, 0), 0.5f);
  }
  EXPECT_THROW(softmax_channels(Tensor({1, 2, 2})), Error);
}

TEST(Softmax, NormalizesEveryLocation) {
  std::mt19937_64 rng(9);
  Tensor y = softmax_channels(random_tensor({3, 4, 5}, rng, -50.0f, 50.0f));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(y(0, r, c) + y(1, r, c) + y(2, r, c), 1.0, 1e-6);
}

TEST(Kernels, FiniteInFiniteOut) {
  std::mt19937_64 rng(13);
  const float big = std::numeric_limits<float>::max() / 1e6f;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({2, 9, 9}, rng, -1e3f, 1e3f);
    Tensor w = random_tensor({2, 2, 3, 3}, rng);
    std::vector<float> b{0.1f, -0.2f};
    for (const Tensor& y : {conv2d(x, w, b, 1, DilationRate{1}), maxpool2d(x, 2, 2, {}), relu(x),
                            softmax_channels(Tensor({2, 1, 1}, std::vector<float>{big, -big}))}) {
      for (float v : y.values()) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

}  // namespace
}  // namespace adn
