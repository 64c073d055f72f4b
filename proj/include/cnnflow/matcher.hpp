#pragma once

// PatchMatch-style dense correspondence search over full-resolution feature
// pyramids: random init, scanline propagation, random search, coarse-to-fine
// scale handoff, and forward/backward consistency filtering.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/image.hpp"
#include "cnnflow/pyramid.hpp"

namespace cnnflow {

struct SearchStage {
  double radius = 2.0;   // R at the finest scale
  int count = 1;         // iterations
  double quantum = 1.0;  // offset granularity (0.5 = half-pixel refinement)
};

// Coarse scale s (0-based) searches within radius * 2^s.
struct SearchSchedule {
  std::vector<SearchStage> stages{{2.0, 4, 1.0}, {1.0, 2, 0.5}};

  static SearchSchedule standard() { return {}; }
  static SearchSchedule public_results() {
    SearchSchedule s;
    s.stages.push_back({1.0, 4, 0.5});
    return s;
  }

  int iterations() const {
    int n = 0;
    for (const auto& st : stages) n += st.count;
    return n;
  }

  void validate() const {
    if (stages.empty()) raise<Error>("search schedule is empty");
    for (const auto& st : stages) {
      if (st.count < 1) raise<Error>("search stage count must be >= 1");
      if (!(st.radius >= 1.0)) raise<Error>("search radius must be >= 1");
      if (!(st.quantum > 0.0)) raise<Error>("search quantum must be > 0");
    }
  }

  static double scale_multiplier(std::size_t scale) { return static_cast<double>(std::uint64_t{1} << scale); }
};

struct MatchConfig {
  SearchSchedule schedule;
  int max_disp = 64;  // |u|, |v| bound for initialization and every candidate
  std::uint64_t seed = 1;
};

struct ConsistencyConfig {
  double epsilon = 1.5;
  bool secondary_enabled = false;
  std::uint64_t secondary_seed = 2;

  void validate() const {
    if (!(epsilon >= 0.0)) raise<Error>("consistency epsilon must be >= 0");
  }
};

struct CostResult {
  double cost = 0.0;
  bool clamped = false;  // target fell outside fm2 and was clamped to its edge
};

namespace detail {

inline float sq_dist(const float* a, const float* b, int dim) {
  float acc = 0.0f;
  for (int k = 0; k < dim; ++k) {
    const float d = a[k] - b[k];
    acc += d * d;
  }
  return acc;
}

inline bool is_integral(double v) { return v == std::floor(v); }

// L2 between fm1(x, y) and fm2 at the (possibly fractional) point (tx, ty),
// clamped into fm2.
inline double cost_at(const FeatureMap& fm1, const FeatureMap& fm2, int x, int y, double tx, double ty) {
  const int dim = fm1.dim;
  const float* a = fm1.at(x, y).data();
  tx = std::clamp(tx, 0.0, static_cast<double>(fm2.width - 1));
  ty = std::clamp(ty, 0.0, static_cast<double>(fm2.height - 1));
  if (is_integral(tx) && is_integral(ty))
    return std::sqrt(static_cast<double>(sq_dist(a, fm2.at(static_cast<int>(tx), static_cast<int>(ty)).data(), dim)));
  const int x0 = static_cast<int>(std::floor(tx)), y0 = static_cast<int>(std::floor(ty));
  const int x1 = std::min(x0 + 1, fm2.width - 1), y1 = std::min(y0 + 1, fm2.height - 1);
  const float ax = static_cast<float>(tx - x0), ay = static_cast<float>(ty - y0);
  const float w00 = (1 - ax) * (1 - ay), w10 = ax * (1 - ay), w01 = (1 - ax) * ay, w11 = ax * ay;
  const float *p00 = fm2.at(x0, y0).data(), *p10 = fm2.at(x1, y0).data(), *p01 = fm2.at(x0, y1).data(),
              *p11 = fm2.at(x1, y1).data();
  float acc = 0.0f;
  for (int k = 0; k < dim; ++k) {
    const float d = a[k] - (w00 * p00[k] + w10 * p10[k] + w01 * p01[k] + w11 * p11[k]);
    acc += d * d;
  }
  return std::sqrt(static_cast<double>(acc));
}

inline bool admissible(const FeatureMap& fm2, int x, int y, double u, double v, int max_disp) {
  if (std::abs(u) > max_disp || std::abs(v) > max_disp) return false;
  const double tx = x + u, ty = y + v;
  return tx >= 0 && ty >= 0 && tx <= fm2.width - 1 && ty <= fm2.height - 1;
}

}  // namespace detail

inline CostResult match_cost(const FeatureMap& fm1, const FeatureMap& fm2, int x, int y, double u, double v) {
  if (fm1.dim != fm2.dim) raise<ShapeError>("match_cost: feature dimensions differ");
  if (!fm1.values.empty() && (x < 0 || y < 0 || x >= fm1.width || y >= fm1.height))
    raise<ShapeError>("match_cost: source pixel outside fm1");
  const double tx = x + u, ty = y + v;
  const bool clamped = tx < 0 || ty < 0 || tx > fm2.width - 1 || ty > fm2.height - 1;
  return {detail::cost_at(fm1, fm2, x, y, tx, ty), clamped};
}

// Recomputes every valid pixel's cost against a new pair of maps.
inline void refresh_costs(FlowField& flow, const FeatureMap& fm1, const FeatureMap& fm2) {
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      const auto i = flow.index(x, y);
      flow.cost[i] = static_cast<float>(detail::cost_at(fm1, fm2, x, y, x + flow.u[i], y + flow.v[i]));
    }
}

// Uniform integer displacement in [-max_disp, max_disp]^2 per pixel, shrunk
// so the target stays inside fm2.
inline FlowField init_flow(const FeatureMap& fm1, const FeatureMap& fm2, std::uint64_t seed, int max_disp) {
  if (fm1.dim != fm2.dim) raise<ShapeError>("init_flow: feature dimensions differ");
  FlowField flow(fm1.width, fm1.height);
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      const auto i = flow.index(x, y);
      Rng rng(derive_seed(seed, 0x1417, i));
      const int u = uniform_int(rng, -max_disp, max_disp);
      const int v = uniform_int(rng, -max_disp, max_disp);
      flow.u[i] = static_cast<float>(std::clamp(x + u, 0, fm2.width - 1) - x);
      flow.v[i] = static_cast<float>(std::clamp(y + v, 0, fm2.height - 1) - y);
    }
  refresh_costs(flow, fm1, fm2);
  return flow;
}

enum class PassDirection { forward, backward };

// One scanline pass. Forward visits top-left to bottom-right and offers the
// left and upper neighbours' displacements; backward mirrors it. A candidate
// replaces the current displacement only if it is strictly cheaper.
inline void propagate(FlowField& flow, const FeatureMap& fm1, const FeatureMap& fm2, PassDirection dir,
                      int max_disp = std::numeric_limits<int>::max()) {
  const int step = dir == PassDirection::forward ? 1 : -1;
  const int x_begin = step > 0 ? 0 : flow.width - 1, x_end = step > 0 ? flow.width : -1;
  const int y_begin = step > 0 ? 0 : flow.height - 1, y_end = step > 0 ? flow.height : -1;
  auto offer = [&](std::size_t i, int x, int y, std::size_t j) {
    const float u = flow.u[j], v = flow.v[j];
    if ((u == flow.u[i] && v == flow.v[i]) || !detail::admissible(fm2, x, y, u, v, max_disp)) return;
    const double c = detail::cost_at(fm1, fm2, x, y, x + u, y + v);
    if (c < flow.cost[i]) {
      flow.u[i] = u;
      flow.v[i] = v;
      flow.cost[i] = static_cast<float>(c);
    }
  };
  for (int y = y_begin; y != y_end; y += step)
    for (int x = x_begin; x != x_end; x += step) {
      const auto i = flow.index(x, y);
      const int nx = x - step, ny = y - step;
      if (nx >= 0 && nx < flow.width) offer(i, x, y, flow.index(nx, y));
      if (ny >= 0 && ny < flow.height) offer(i, x, y, flow.index(x, ny));
    }
}

// One random perturbation per pixel: current + uniform offset on the
// `quantum` grid inside [-radius, radius]^2, adopted if strictly cheaper.
// Per-pixel generators are derived from (seed, iteration, pixel).
inline void random_search(FlowField& flow, const FeatureMap& fm1, const FeatureMap& fm2, double radius,
                          std::uint64_t seed, std::uint64_t iteration, double quantum = 1.0,
                          int max_disp = std::numeric_limits<int>::max()) {
  if (!(radius >= 1.0)) raise<Error>("random_search: radius must be >= 1");
  const int steps = static_cast<int>(std::floor(radius / quantum + 1e-9));
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      const auto i = flow.index(x, y);
      Rng rng(derive_seed(seed, iteration + 1, i));
      const double du = uniform_int(rng, -steps, steps) * quantum;
      const double dv = uniform_int(rng, -steps, steps) * quantum;
      if (du == 0.0 && dv == 0.0) continue;
      const double u = flow.u[i] + du, v = flow.v[i] + dv;
      if (!detail::admissible(fm2, x, y, u, v, max_disp)) continue;
      const double c = detail::cost_at(fm1, fm2, x, y, x + u, y + v);
      if (c < flow.cost[i]) {
        flow.u[i] = static_cast<float>(u);
        flow.v[i] = static_cast<float>(v);
        flow.cost[i] = static_cast<float>(c);
      }
    }
}

// Runs the schedule at one scale. Each iteration is a propagation pass
// (alternating direction) followed by a random search.
inline void run_schedule(FlowField& flow, const FeatureMap& fm1, const FeatureMap& fm2, const SearchSchedule& schedule,
                         double multiplier, std::uint64_t seed, int max_disp) {
  std::uint64_t it = 0;
  for (const auto& st : schedule.stages)
    for (int c = 0; c < st.count; ++c, ++it) {
      propagate(flow, fm1, fm2, it % 2 == 0 ? PassDirection::forward : PassDirection::backward, max_disp);
      random_search(flow, fm1, fm2, st.radius * multiplier, seed, it, st.quantum, max_disp);
    }
}

// Coarse-to-fine: random init on the coarsest scale, the schedule per scale
// with radius scaled by 2^s, result handed to the next finer scale.
inline FlowField match_scales(const ScalePyramid& pyr1, const ScalePyramid& pyr2, const MatchConfig& cfg) {
  cfg.schedule.validate();
  if (pyr1.scales() == 0 || pyr1.scales() != pyr2.scales()) raise<ShapeError>("match_scales: pyramids differ in scale count");
  const std::size_t n = pyr1.scales();
  FlowField flow = init_flow(pyr1.maps[n - 1], pyr2.maps[n - 1], cfg.seed, cfg.max_disp);
  for (std::size_t s = n; s-- > 0;) {
    if (s + 1 != n) refresh_costs(flow, pyr1.maps[s], pyr2.maps[s]);
    run_schedule(flow, pyr1.maps[s], pyr2.maps[s], cfg.schedule, SearchSchedule::scale_multiplier(s),
                 derive_seed(cfg.seed, 0x5ca1e, s), cfg.max_disp);
  }
  return flow;
}

inline bool bilinear_flow(const FlowField& f, double x, double y, double& u, double& v) {
  if (x < 0 || y < 0 || x > f.width - 1 || y > f.height - 1) return false;
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, f.width - 1), y1 = std::min(y0 + 1, f.height - 1);
  const double ax = x - x0, ay = y - y0;
  auto lerp = [&](const std::vector<float>& c) {
    return (1 - ay) * ((1 - ax) * c[f.index(x0, y0)] + ax * c[f.index(x1, y0)]) +
           ay * ((1 - ax) * c[f.index(x0, y1)] + ax * c[f.index(x1, y1)]);
  };
  u = lerp(f.u);
  v = lerp(f.v);
  return true;
}

// Keeps pixel x iff |fwd(x) + bwd(x + fwd(x))| <= epsilon (bilinear lookup),
// and, when a secondary forward field is given, |fwd(x) - secondary(x)| <= epsilon.
inline FlowField consistency_filter(const FlowField& fwd, const FlowField& bwd, const ConsistencyConfig& cfg,
                                    const FlowField* secondary = nullptr) {
  cfg.validate();
  if (cfg.secondary_enabled && !secondary)
    raise<Error>("consistency_filter: secondary check enabled but no secondary field given");
  FlowField out = fwd;
  for (int y = 0; y < fwd.height; ++y)
    for (int x = 0; x < fwd.width; ++x) {
      const auto i = fwd.index(x, y);
      if (!fwd.valid[i]) continue;
      double bu = 0, bv = 0;
      bool ok = bilinear_flow(bwd, x + fwd.u[i], y + fwd.v[i], bu, bv) &&
                std::hypot(fwd.u[i] + bu, fwd.v[i] + bv) <= cfg.epsilon;
      if (ok && cfg.secondary_enabled)
        ok = std::hypot(fwd.u[i] - secondary->u[i], fwd.v[i] - secondary->v[i]) <= cfg.epsilon;
      out.valid[i] = ok ? 1 : 0;
    }
  return out;
}

struct FlowEstimate {
  FlowField forward;
  FlowField backward;
  std::optional<FlowField> secondary;
  FlowField filtered;
};

// Forward and backward matching, optional same-feature secondary run with
// another seed, then the consistency filter.
inline FlowEstimate estimate_flow(const ScalePyramid& pyr1, const ScalePyramid& pyr2, const MatchConfig& cfg,
                                  const ConsistencyConfig& consistency) {
  FlowEstimate est;
  est.forward = match_scales(pyr1, pyr2, cfg);
  MatchConfig back = cfg;
  back.seed = derive_seed(cfg.seed, 0xbac4);
  est.backward = match_scales(pyr2, pyr1, back);
  if (consistency.secondary_enabled) {
    MatchConfig sec = cfg;
    sec.seed = consistency.secondary_seed;
    est.secondary = match_scales(pyr1, pyr2, sec);
  }
  est.filtered = consistency_filter(est.forward, est.backward, consistency, est.secondary ? &*est.secondary : nullptr);
  return est;
}

}  // namespace cnnflow
