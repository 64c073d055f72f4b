#pragma once

// Central finite-difference check of network + loss gradients in double
// precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/loss.hpp"
#include "cnnflow/tensor_net.hpp"

namespace cnnflow {

// 10x10 input, 387 parameters: small enough to check every parameter.
inline std::vector<LayerSpec> tiny_architecture() {
  return parse_architecture("conv3x4,tanh,pool2,conv3x6,tanh,conv2x5,tanh");
}

struct GradcheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  double floor = 1e-4;  // denominator floor: below it the error is absolute
  double kink_margin = 1e-3;  // resample cases this close to a loss kink
  std::size_t max_params = 0;  // 0 = check all, else a random subset per case
};

struct GradcheckCase {
  LossKind kind = LossKind::hinge;
  std::size_t index = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double loss = 0.0;
  bool pass = true;
};

struct GradcheckSummary {
  LossKind kind = LossKind::hinge;
  std::size_t cases = 0;
  std::size_t failed = 0;
  std::size_t skipped = 0;  // resampled for sitting on a kink or tie
  double max_rel_error = 0.0;
  bool pass() const noexcept { return failed == 0 && cases > 0; }
};

inline double gradcheck_rel_error(double analytic, double numeric, double floor) {
  const double den = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / den;
}

namespace detail {

struct GcLoss {
  double loss = 0.0;
  double margin = 0.0;  // distance of the loss argument from its kink
};

// Loss of a case. Patches: p1, p2 (pairwise) or p1, p2+, p2- (gap).
inline GcLoss gc_loss(const ForwardCache<double>& cache, LossKind kind, PairLabel label, const LossConfig& lc,
                      std::vector<double>* upstream) {
  const int dim = static_cast<int>(cache.acts.back().size()) / cache.batch;
  const auto f1 = cache.feature(0);
  const auto f2 = cache.feature(1);
  const double d = l2_distance<double>(f1, f2);
  if (upstream) upstream->assign(static_cast<std::size_t>(cache.batch) * dim, 0.0);
  if (kind == LossKind::gap) {
    const auto f3 = cache.feature(2);
    const double dn = l2_distance<double>(f1, f3);
    const auto g = gap_loss(d, dn, lc);
    if (upstream && g.loss > 0) {
      const auto gp = l2_distance_grad<double>(f1, f2, d), gn = l2_distance_grad<double>(f1, f3, dn);
      for (int c = 0; c < dim; ++c) {
        (*upstream)[c] = g.grad_pos * gp[c] + g.grad_neg * gn[c];
        (*upstream)[dim + c] = -g.grad_pos * gp[c];
        (*upstream)[2 * dim + c] = -g.grad_neg * gn[c];
      }
    }
    return {g.loss, std::abs(d - dn + lc.g)};
  }
  PairSample s;
  s.d = d;
  s.label = label;
  LossConfig cfg = lc;
  cfg.kind = kind;
  const auto lv = pair_loss(s, cfg);
  if (upstream && lv.grad != 0.0) {
    const auto g = l2_distance_grad<double>(f1, f2, d);
    for (int c = 0; c < dim; ++c) {
      (*upstream)[c] = lv.grad * g[c];
      (*upstream)[dim + c] = -lv.grad * g[c];
    }
  }
  const double t = kind == LossKind::thresholded ? lc.t : 0.0;
  const double margin = label == PairLabel::positive ? std::abs(d - t) : std::abs(lc.m - (d - t));
  return {lv.loss, margin};
}

}  // namespace detail

// Checks `cases` random (params, patches, label) draws for one loss kind.
// Cases with zero loss, within kink_margin of a loss kink, or whose pooling
// argmax flips under a perturbation are redrawn and counted as skipped.
inline GradcheckSummary gradcheck_loss(const std::vector<LayerSpec>& arch, LossKind kind, std::size_t cases,
                                       std::uint64_t seed, const GradcheckOptions& opt = {},
                                       std::vector<GradcheckCase>* details = nullptr) {
  GradcheckSummary sum;
  sum.kind = kind;
  LossConfig lc;
  lc.kind = kind;
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kind) + 1));
  std::size_t attempts = 0;
  while (sum.cases < cases) {
    if (++attempts > 50 * cases + 100) raise<Error>("gradcheck: could not draw enough differentiable cases");
    auto params = init_params<double>(arch, rng());
    for (auto& b : params.biases)
      for (auto& v : b) v = 0.1 * normal01(rng);
    const int npatch = kind == LossKind::gap ? 3 : 2;
    std::vector<double> patches(params.patch_size() * npatch);
    for (auto& v : patches) v = normal01(rng);
    // Correlated second patch so positives have small distances too.
    const bool positive = uniform01(rng) < 0.5;
    const double mix = uniform01(rng);
    for (std::size_t i = 0; i < params.patch_size(); ++i)
      patches[params.patch_size() + i] = mix * patches[i] + (1 - mix) * patches[params.patch_size() + i];
    const PairLabel label = positive ? PairLabel::positive : PairLabel::negative;

    auto cache = forward_batch<double>(params, patches, npatch);
    std::vector<double> upstream;
    const auto base = detail::gc_loss(cache, kind, label, lc, &upstream);
    if (base.loss <= 0.0 || base.margin < opt.kink_margin) {
      ++sum.skipped;
      continue;
    }
    const auto grads = backward<double>(params, cache, upstream);
    std::vector<double*> pp;
    params.for_each([&](double& v) { pp.push_back(&v); });
    std::vector<double> ga;
    grads.for_each([&](const double& v) { ga.push_back(v); });
    std::vector<std::size_t> idx(pp.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_params && opt.max_params < idx.size()) {
      for (std::size_t i = 0; i < opt.max_params; ++i)
        std::swap(idx[i], idx[i + static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(idx.size() - i) - 1))]);
      idx.resize(opt.max_params);
    }
    GradcheckCase c;
    c.kind = kind;
    c.index = sum.cases;
    c.loss = base.loss;
    bool tie = false;
    auto eval = [&] {
      const auto cp = forward_batch<double>(params, patches, npatch);
      tie = tie || cp.argmax != cache.argmax;
      return detail::gc_loss(cp, kind, label, lc, nullptr).loss;
    };
    for (auto i : idx) {
      const double keep = *pp[i];
      *pp[i] = keep + opt.step;
      const double lp = eval();
      *pp[i] = keep - opt.step;
      const double lm = eval();
      *pp[i] = keep;
      if (tie) break;
      const double numeric = (lp - lm) / (2 * opt.step);
      c.max_rel_error = std::max(c.max_rel_error, gradcheck_rel_error(ga[i], numeric, opt.floor));
      ++c.checked;
    }
    if (tie) {
      ++sum.skipped;
      continue;
    }
    c.pass = c.max_rel_error <= opt.tolerance;
    sum.failed += !c.pass;
    sum.max_rel_error = std::max(sum.max_rel_error, c.max_rel_error);
    ++sum.cases;
    if (details) details->push_back(c);
  }
  return sum;
}

inline std::string gradcheck_table(const std::vector<GradcheckSummary>& rows) {
  std::ostringstream o;
  o << "loss,cases,skipped,failed,max_rel_error,result\n";
  for (const auto& r : rows)
    o << to_string(r.kind) << ',' << r.cases << ',' << r.skipped << ',' << r.failed << ',' << r.max_rel_error << ','
      << (r.pass() ? "PASS" : "FAIL") << '\n';
  return o.str();
}

}  // namespace cnnflow
