#include <gtest/gtest.h>

#include "stitchviz/metrics.hpp"
#include "test_support.hpp"

using namespace stitchviz;
using namespace stitchviz::metrics;
namespace t = stitchviz::testing;

namespace {

torch::Tensor rnd(std::vector<int64_t> shape, uint64_t seed) {
  auto g = make_generator(seed);
  return torch::randn(shape, g, torch::kFloat32);
}

}  // namespace

TEST(Cosine, SelfAndAntipodal) {
  auto a = rnd({4, 3, 3}, 1);
  EXPECT_NEAR(cosine_similarity_pixelwise(a, a), 1.0, 1e-6);
  EXPECT_NEAR(cosine_similarity_pixelwise(a, -a), -1.0, 1e-6);
}

TEST(Cosine, MatchesLoopOracle) {
  for (uint64_t s = 0; s < 50; ++s) {
    auto a = rnd({4, 3, 3}, 2 * s), b = rnd({4, 3, 3}, 2 * s + 1);
    EXPECT_NEAR(cosine_similarity_pixelwise(a, b), t::loop_cosine(a, b), 1e-6);
  }
}

TEST(Cosine, PerPixelScaleInvariance) {
  auto a = rnd({5, 4, 4}, 3);
  for (double c : {0.001, 0.5, 3.0, 1000.0}) EXPECT_NEAR(cosine_similarity_pixelwise(a, a * c), 1.0, 1e-6);
}

TEST(Cosine, EpsilonGuardsZeroPixels) {
  auto z = torch::zeros({3, 2, 2});
  EXPECT_EQ(cosine_similarity_pixelwise(z, z), 0.0);
}

TEST(Cosine, ShapeMismatchThrows) { EXPECT_THROW(cosine_similarity_pixelwise(rnd({3, 2, 2}, 0), rnd({3, 2, 3}, 0)), ShapeError); }

TEST(L1, ZeroAndConstantShift) {
  auto a = rnd({3, 4, 5}, 4);
  EXPECT_EQ(l1_mean(a, a), 0.0);
  EXPECT_NEAR(l1_mean(a, a + 0.25), 0.25, 1e-7);
  EXPECT_NEAR(l1_mean(a, a - 1.5), 1.5, 1e-6);
}

TEST(L1, MatchesLoopOracle) {
  for (uint64_t s = 0; s < 50; ++s) {
    auto a = rnd({3, 5, 2}, 100 + s), b = rnd({3, 5, 2}, 200 + s);
    EXPECT_NEAR(l1_mean(a, b), t::loop_l1(a, b), 1e-7);
  }
}

TEST(Gram, OnesAndDisjointSupports) {
  auto g = gram_matrix(torch::ones({1, 2, 2}));
  EXPECT_EQ(g.sizes(), (std::vector<int64_t>{1, 1}));
  EXPECT_EQ(g.item<double>(), 4.0);
  auto a = torch::zeros({2, 2, 2});
  a[0][0][0] = 1.0f;
  a[0][0][1] = 2.0f;
  a[1][1][1] = 3.0f;
  auto ga = gram_matrix(a);
  EXPECT_EQ(ga[0][1].item<double>(), 0.0);
  EXPECT_EQ(ga[1][0].item<double>(), 0.0);
  EXPECT_EQ(ga[0][0].item<double>(), 5.0);
  EXPECT_EQ(ga[1][1].item<double>(), 9.0);
}

TEST(Gram, MatchesLoopOracleSymmetricPsd) {
  for (uint64_t s = 0; s < 20; ++s) {
    auto a = rnd({3, 4, 4}, 300 + s);
    auto g = gram_matrix(a);
    auto ref = t::loop_gram(a);
    for (int p = 0; p < 3; ++p) {
      for (int q = 0; q < 3; ++q) {
        const double v = g[p][q].item<double>();
        EXPECT_NEAR(v, ref[p][q], 1e-5 * std::max(1.0, std::abs(ref[p][q])));
        EXPECT_EQ(v, g[q][p].item<double>());
      }
    }
    EXPECT_GE(torch::linalg_eigvalsh(g, "L").min().item<double>(), -1e-9);
  }
}

TEST(GramCosine, SelfAndSpatialPermutation) {
  for (uint64_t s = 0; s < 20; ++s) {
    auto a = rnd({4, 5, 3}, 400 + s);
    EXPECT_NEAR(gram_cosine(a, a), 1.0, 1e-6);
    EXPECT_NEAR(gram_cosine(a, t::permute_pixels(a, s)), 1.0, 1e-6);
  }
}

TEST(GramCosine, ChannelPermutationInvariance) {
  for (uint64_t s = 0; s < 20; ++s) {
    auto a = rnd({5, 3, 3}, 500 + s), b = rnd({5, 3, 3}, 600 + s);
    auto g = make_generator(s);
    auto perm = torch::randperm(5, g, torch::kLong);
    EXPECT_NEAR(gram_cosine(a.index_select(0, perm), b.index_select(0, perm)), gram_cosine(a, b), 1e-6);
  }
}

TEST(GramCosine, MatchesFlattenOracleAndAllowsDifferentSizes) {
  for (uint64_t s = 0; s < 30; ++s) {
    auto a = rnd({3, 4, 4}, 700 + s), b = rnd({3, 2, 5}, 800 + s);
    EXPECT_NEAR(gram_cosine(a, b), t::loop_gram_cosine(a, b), 1e-6);
  }
  EXPECT_THROW(gram_cosine(rnd({3, 2, 2}, 0), rnd({4, 2, 2}, 0)), ShapeError);
}

TEST(MetricNames, RoundTrip) {
  for (auto m : all_metrics()) EXPECT_EQ(metric_from_string(to_string(m)), m);
  EXPECT_THROW(metric_from_string("ssim"), NotFoundError);
  EXPECT_TRUE(higher_is_better(Metric::cosine));
  EXPECT_FALSE(higher_is_better(Metric::l1));
}
