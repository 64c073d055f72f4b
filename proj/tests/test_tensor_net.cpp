#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cnnflow/gradcheck.hpp"
#include "cnnflow/tensor_net.hpp"

using namespace cnnflow;

namespace {

// Straightforward per-layer evaluation of one patch; no im2col, no batching.
std::vector<double> naive_forward(const NetworkParams<double>& p, const std::vector<double>& patch) {
  int side = p.receptive_field, ch = p.in_channels;
  std::vector<double> a = patch;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& l = p.layers[li];
    if (l.kind == LayerKind::tanh) {
      for (auto& v : a) v = std::tanh(v);
    } else if (l.kind == LayerKind::maxpool) {
      const int so = side / l.kernel;
      std::vector<double> o(static_cast<std::size_t>(ch) * so * so);
      for (int c = 0; c < ch; ++c)
        for (int y = 0; y < so; ++y)
          for (int x = 0; x < so; ++x) {
            double m = -INFINITY;
            for (int dy = 0; dy < l.kernel; ++dy)
              for (int dx = 0; dx < l.kernel; ++dx)
                m = std::max(m, a[(c * side + y * l.kernel + dy) * side + x * l.kernel + dx]);
            o[(c * so + y) * so + x] = m;
          }
      a = o;
      side = so;
    } else {
      const int k = l.kernel, so = side - k + 1;
      std::vector<double> o(static_cast<std::size_t>(l.out_channels) * so * so);
      for (int oc = 0; oc < l.out_channels; ++oc)
        for (int y = 0; y < so; ++y)
          for (int x = 0; x < so; ++x) {
            double s = p.biases[li][oc];
            for (int ic = 0; ic < ch; ++ic)
              for (int dy = 0; dy < k; ++dy)
                for (int dx = 0; dx < k; ++dx)
                  s += p.weights[li][((oc * ch + ic) * k + dy) * k + dx] * a[(ic * side + y + dy) * side + x + dx];
            o[(oc * so + y) * so + x] = s;
          }
      a = o;
      side = so;
      ch = l.out_channels;
    }
  }
  EXPECT_EQ(side, 1);
  return a;
}

NetworkParams<double> random_params(const std::vector<LayerSpec>& arch, std::uint64_t seed) {
  auto p = init_params<double>(arch, seed);
  Rng rng(seed + 99);
  for (auto& b : p.biases)
    for (auto& v : b) v = 0.2 * normal01(rng);
  return p;
}

Image random_image(int w, int h, std::uint64_t seed) {
  Image img(w, h);
  Rng rng(seed);
  for (auto& v : img.data) v = static_cast<float>(normal01(rng));
  return img;
}

}  // namespace

TEST(Architecture, DeskAndFullReceptiveFields) {
  EXPECT_EQ(check_architecture(desk_architecture()).receptive_field, 32);
  EXPECT_EQ(check_architecture(desk_architecture()).feature_dim, 64);
  EXPECT_EQ(check_architecture(full_architecture()).receptive_field, 56);
  EXPECT_EQ(check_architecture(full_architecture()).feature_dim, 256);
  EXPECT_EQ(check_architecture(tiny_architecture()).receptive_field, 10);
}

TEST(Architecture, RejectsBadStacks) {
  EXPECT_THROW(check_architecture(std::vector<LayerSpec>{}), ShapeError);
  EXPECT_THROW(parse_architecture("conv3x4,tanh,pool2,conv3x6"), ShapeError);  // no final tanh
  EXPECT_THROW(parse_architecture("conv3x4,banana,tanh"), FormatError);
  std::vector<LayerSpec> bad{conv_layer(3, 1, 4), pool_layer(2, 4), tanh_layer(4)};
  bad[1].stride = 1;
  EXPECT_THROW(check_architecture(bad), ShapeError);
  std::vector<LayerSpec> mism{conv_layer(3, 1, 4), tanh_layer(5)};
  EXPECT_THROW(check_architecture(mism), ShapeError);
}

TEST(Forward, ZeroEverythingGivesZero) {
  auto p = NetworkParams<double>::zeros(desk_architecture());
  std::vector<double> patch(p.patch_size(), 0.0);
  for (double v : forward<double>(p, patch)) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdenticalPatchesIdenticalFeatures) {
  auto p = init_params<float>(desk_architecture(), 3);
  Rng rng(1);
  std::vector<float> patch(p.patch_size());
  for (auto& v : patch) v = static_cast<float>(normal01(rng));
  const auto a = forward<float>(p, patch), b = forward<float>(p, patch);
  EXPECT_EQ(a, b);
  EXPECT_EQ(l2_distance<float>(a, b), 0.0);
}

TEST(Forward, MatchesNaiveOracle) {
  for (auto arch : {desk_architecture(), tiny_architecture()}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const auto p = random_params(arch, seed);
      Rng rng(seed * 7);
      std::vector<double> patch(p.patch_size());
      for (auto& v : patch) v = normal01(rng);
      const auto got = forward<double>(p, patch);
      const auto want = naive_forward(p, patch);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
  }
}

TEST(Forward, BatchEqualsSingle) {
  const auto p = init_params<float>(desk_architecture(), 5);
  Rng rng(2);
  const int n = 5;
  std::vector<float> patches(p.patch_size() * n);
  for (auto& v : patches) v = static_cast<float>(normal01(rng));
  const auto cache = forward_batch<float>(p, patches, n);
  for (int i = 0; i < n; ++i) {
    const auto single = forward<float>(p, std::span<const float>(patches).subspan(i * p.patch_size(), p.patch_size()));
    const auto f = cache.feature(i);
    for (std::size_t c = 0; c < f.size(); ++c) EXPECT_NEAR(f[c], single[c], 1e-6);
  }
}

TEST(ForwardDense, MatchesPerPatchOn64x64) {
  auto pd = random_params(desk_architecture(), 11);
  const auto pf = pd.cast<float>();
  const Image img = random_image(64, 64, 4);
  const FeatureMap fm = forward_dense(pf, img);
  const int rf = pf.receptive_field, lo = rf / 2;
  double worst = 0.0;
  std::vector<double> patch(pd.patch_size());
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (!fm.interior(x, y)) continue;
      for (int dy = 0; dy < rf; ++dy)
        for (int dx = 0; dx < rf; ++dx) patch[dy * rf + dx] = img.at(x - lo + dx, y - lo + dy);
      const auto ref = forward<double>(pd, patch);
      const auto got = fm.at(x, y);
      for (int c = 0; c < fm.dim; ++c) worst = std::max(worst, std::abs(got[c] - ref[c]));
    }
  EXPECT_LE(worst, 1e-5);
}

TEST(ForwardDense, ConstantImageConstantFeatures) {
  const auto p = init_params<float>(desk_architecture(), 2);
  const FeatureMap fm = forward_dense(p, Image(48, 40, 0.37f));
  const auto ref = fm.at(fm.border(), fm.border());
  for (int y = 0; y < fm.height; ++y)
    for (int x = 0; x < fm.width; ++x) {
      if (!fm.interior(x, y)) continue;
      const auto f = fm.at(x, y);
      for (int c = 0; c < fm.dim; ++c) EXPECT_NEAR(f[c], ref[c], 1e-6);
    }
}

TEST(ForwardDense, ExactReceptiveFieldImage) {
  const auto p = init_params<float>(desk_architecture(), 8);
  const Image img = random_image(32, 32, 9);
  const FeatureMap fm = forward_dense(p, img);
  int interior = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) interior += fm.interior(x, y);
  EXPECT_EQ(interior, 1);
  const auto f = forward<float>(p, img.data);
  const auto g = fm.at(16, 16);
  for (int c = 0; c < fm.dim; ++c) EXPECT_NEAR(g[c], f[c], 1e-5);
}

TEST(ForwardDense, RejectsSmallImage) {
  const auto p = init_params<float>(desk_architecture(), 8);
  EXPECT_THROW(forward_dense(p, Image(31, 40)), ShapeError);
}

TEST(Backward, ZeroUpstreamZeroGradient) {
  const auto p = random_params(tiny_architecture(), 1);
  std::vector<double> patches(p.patch_size() * 2, 0.3);
  const auto cache = forward_batch<double>(p, patches, 2);
  std::vector<double> up(2 * p.feature_dim, 0.0);
  const auto g = backward<double>(p, cache, up);
  g.for_each([](const double& v) { EXPECT_EQ(v, 0.0); });
}

TEST(Backward, SymmetricPositiveBelowThresholdIsZero) {
  const auto p = random_params(desk_architecture(), 2);
  Rng rng(3);
  std::vector<double> patches(p.patch_size() * 2);
  for (std::size_t i = 0; i < p.patch_size(); ++i) patches[i] = patches[p.patch_size() + i] = normal01(rng);
  const auto cache = forward_batch<double>(p, patches, 2);
  // Batch columns may take different GEMM kernel paths, so equal patches agree
  // to rounding rather than bitwise.
  const double d = l2_distance<double>(cache.feature(0), cache.feature(1));
  EXPECT_LT(d, 1e-12);
  LossConfig lc;
  PairSample s;
  s.d = d;
  const auto lv = thresholded_loss(s, lc);
  EXPECT_EQ(lv.grad, 0.0);
  const auto gd = l2_distance_grad<double>(cache.feature(0), cache.feature(1), d);
  std::vector<double> up(2 * p.feature_dim);
  for (int c = 0; c < p.feature_dim; ++c) {
    up[c] = lv.grad * gd[c];
    up[p.feature_dim + c] = -lv.grad * gd[c];
  }
  backward<double>(p, cache, up).for_each([](const double& v) { EXPECT_EQ(v, 0.0); });
}

TEST(Backward, FiniteDifferencesAllLossKinds) {
  for (auto kind : {LossKind::hinge, LossKind::thresholded, LossKind::gap, LossKind::hinge_hard_mined}) {
    const auto s = gradcheck_loss(tiny_architecture(), kind, 20, 42);
    EXPECT_TRUE(s.pass()) << to_string(kind) << " max rel error " << s.max_rel_error;
  }
}

TEST(Backward, FiniteDifferencesDeskSampled) {
  GradcheckOptions opt;
  opt.max_params = 25;
  const auto s = gradcheck_loss(desk_architecture(), LossKind::hinge, 2, 5, opt);
  EXPECT_TRUE(s.pass()) << s.max_rel_error;
}

TEST(Gradcheck, RelativeErrorFloor) {
  EXPECT_NEAR(gradcheck_rel_error(1.0, 1.1, 1e-4), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(gradcheck_rel_error(1e-9, 2e-9, 1e-4), 1e-9 / 1e-4);
}

TEST(Sgd, ScheduleEndpointsAndMidpoint) {
  LrSchedule s{0.004, 0.0004, 501};
  EXPECT_NEAR(s.rate(0), 0.004, 1e-15);
  EXPECT_NEAR(s.rate(500), 0.0004, 1e-15);
  EXPECT_NEAR(s.rate(250), std::sqrt(0.004 * 0.0004), 1e-15);
  EXPECT_NEAR(s.rate(250), 1.2649e-3, 1e-7);
  for (std::size_t b = 1; b < 501; ++b) EXPECT_LT(s.rate(b), s.rate(b - 1));
}

TEST(Sgd, ZeroGradientLeavesParams) {
  auto p = init_params<float>(desk_architecture(), 1);
  const auto before = p;
  auto g = NetworkParams<float>::zeros(p.layers);
  sgd_step(p, g, 0, LrSchedule{0.004, 0.0004, 10});
  EXPECT_TRUE(p == before);
}

TEST(Sgd, StepIsLrTimesGradient) {
  auto p = init_params<double>(tiny_architecture(), 1);
  const auto before = p;
  auto g = NetworkParams<double>::zeros(p.layers);
  g.for_each([](double& v) { v = 1.0; });
  LrSchedule s{0.004, 0.0004, 3};
  sgd_step(p, g, 1, s);
  for (std::size_t i = 0; i < p.weights.size(); ++i)
    for (std::size_t j = 0; j < p.weights[i].size(); ++j)
      EXPECT_NEAR(p.weights[i][j], before.weights[i][j] - s.rate(1), 1e-15);
}

TEST(Sgd, RejectsNonFiniteGradient) {
  auto p = init_params<float>(tiny_architecture(), 1);
  auto g = NetworkParams<float>::zeros(p.layers);
  g.weights[0][0] = NAN;
  EXPECT_THROW(sgd_step(p, g, 0, LrSchedule{}), NumericError);
}

TEST(Init, SeedDeterminism) {
  const auto a = init_params<float>(desk_architecture(), 17), b = init_params<float>(desk_architecture(), 17);
  const auto c = init_params<float>(desk_architecture(), 18);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
}

TEST(Init, WeightStdMatchesFanIn) {
  // Pool weights over seeds until every conv layer has >= 10k draws.
  const auto arch = desk_architecture();
  std::vector<double> sum(arch.size()), sq(arch.size());
  std::vector<std::size_t> n(arch.size());
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const auto p = init_params<double>(arch, seed);
    for (std::size_t i = 0; i < arch.size(); ++i)
      for (double w : p.weights[i]) {
        sum[i] += w;
        sq[i] += w * w;
        ++n[i];
      }
    bool done = true;
    for (std::size_t i = 0; i < arch.size(); ++i) done = done && (arch[i].kind != LayerKind::conv || n[i] >= 10000);
    if (done) break;
  }
  for (std::size_t i = 0; i < arch.size(); ++i) {
    if (arch[i].kind != LayerKind::conv) continue;
    ASSERT_GE(n[i], 10000u);
    const double mean = sum[i] / n[i];
    const double sd = std::sqrt(sq[i] / n[i] - mean * mean);
    const double want = 1.0 / std::sqrt(double(arch[i].in_channels) * arch[i].kernel * arch[i].kernel);
    EXPECT_NEAR(sd / want, 1.0, 0.2) << "layer " << i;
  }
}

TEST(Params, CheckFiniteAndCast) {
  auto p = init_params<double>(tiny_architecture(), 4);
  EXPECT_EQ(p.parameter_count(), 387u);
  EXPECT_NO_THROW(p.check_finite("p"));
  p.biases[0][1] = INFINITY;
  EXPECT_THROW(p.check_finite("p"), NumericError);
  const auto f = init_params<double>(tiny_architecture(), 4).cast<float>();
  EXPECT_EQ(f.parameter_count(), 387u);
}
