#pragma once

// Matching robustness r with distance / displacement curves, relative error E,
// endpoint-error metrics and L2-distance histograms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/image.hpp"
#include "cnnflow/loss.hpp"
#include "cnnflow/sampler.hpp"

namespace cnnflow {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline std::vector<double> default_distance_edges() { return {2, 5, 9, 17, 33, 65, 129, kInf}; }
inline std::vector<double> default_flow_edges() { return {0, 9, 17, 33, 65, 129, kInf}; }

struct RobustnessTriple {
  double d_pos = 0.0;
  double d_neg = 0.0;
  double pixel_distance = 0.0;
  double displacement = 0.0;

  bool robust() const noexcept { return d_pos < d_neg; }  // ties are confusions
};

struct RobustnessBin {
  double lo = 0.0, hi = kInf;  // [lo, hi)
  std::size_t samples = 0;
  std::size_t robust = 0;

  double r() const noexcept { return samples ? static_cast<double>(robust) / static_cast<double>(samples) : 0.0; }
};

struct RobustnessReport {
  double r = 0.0;
  std::size_t samples = 0;
  std::size_t robust = 0;
  std::size_t admissible_pixels = 0;
  std::vector<RobustnessBin> r_dist;
  std::vector<RobustnessBin> r_flow;

  // Binomial standard error of r.
  double standard_error() const noexcept {
    return samples ? std::sqrt(r * (1.0 - r) / static_cast<double>(samples)) : 0.0;
  }
};

namespace detail {

inline std::vector<RobustnessBin> make_bins(std::span<const double> edges) {
  if (edges.size() < 2) raise<Error>("robustness bins need at least two edges");
  std::vector<RobustnessBin> bins;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    if (!(edges[i] < edges[i + 1])) raise<Error>("robustness bin edges must increase");
    bins.push_back({edges[i], edges[i + 1], 0, 0});
  }
  return bins;
}

inline RobustnessBin* find_bin(std::vector<RobustnessBin>& bins, double v) {
  for (auto& b : bins)
    if (v >= b.lo && v < b.hi) return &b;
  return nullptr;
}

}  // namespace detail

// Tallies r and the per-bin curves from a triple set.
inline RobustnessReport robustness_from_triples(std::span<const RobustnessTriple> triples,
                                                std::span<const double> dist_edges,
                                                std::span<const double> flow_edges) {
  RobustnessReport rep;
  rep.r_dist = detail::make_bins(dist_edges);
  rep.r_flow = detail::make_bins(flow_edges);
  for (const auto& t : triples) {
    const bool ok = t.robust();
    ++rep.samples;
    rep.robust += ok;
    if (auto* b = detail::find_bin(rep.r_dist, t.pixel_distance)) {
      ++b->samples;
      b->robust += ok;
    }
    if (auto* b = detail::find_bin(rep.r_flow, t.displacement)) {
      ++b->samples;
      b->robust += ok;
    }
  }
  rep.r = rep.samples ? static_cast<double>(rep.robust) / static_cast<double>(rep.samples) : 0.0;
  return rep;
}

inline RobustnessReport robustness_from_triples(std::span<const RobustnessTriple> triples) {
  const auto de = default_distance_edges();
  const auto fe = default_flow_edges();
  return robustness_from_triples(triples, de, fe);
}

struct RobustnessOptions {
  int negatives_per_pixel = 4;
  int pixel_step = 1;  // evaluate every pixel_step-th row and column
  std::uint64_t seed = 7;
  NegativeOffsetDist negatives;
  std::vector<double> dist_edges = default_distance_edges();
  std::vector<double> flow_edges = default_flow_edges();
};

// Features of one evaluated pair plus its ground truth.
struct RobustnessInput {
  const FeatureMap* fm1 = nullptr;
  const FeatureMap* fm2 = nullptr;
  const ImagePair* truth = nullptr;  // flow and occlusion; images unused
};

// Draws triples: for every admissible pixel (valid flow, visible, p1 and p2+
// windows inside) `negatives_per_pixel` negatives from the offset
// distribution. Per-pixel generators derive from (seed, pair, pixel).
inline std::vector<RobustnessTriple> draw_robustness_triples(std::span<const RobustnessInput> inputs,
                                                             const RobustnessOptions& opt,
                                                             std::size_t* admissible = nullptr) {
  opt.negatives.validate();
  if (opt.negatives_per_pixel < 1) raise<Error>("robustness needs at least one negative per pixel");
  if (opt.pixel_step < 1) raise<Error>("robustness pixel_step must be >= 1");
  std::vector<RobustnessTriple> triples;
  std::size_t count = 0;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const auto& in = inputs[p];
    const auto& fm1 = *in.fm1;
    const auto& fm2 = *in.fm2;
    const auto& truth = *in.truth;
    if (fm1.dim != fm2.dim) raise<ShapeError>("robustness: feature dimensions differ");
    if (fm1.width != truth.flow.width || fm1.height != truth.flow.height || fm2.width != fm1.width ||
        fm2.height != fm1.height)
      raise<ShapeError>("robustness: feature maps and ground truth differ in size");
    const int rf = fm1.receptive_field;
    for (int y = 0; y < fm1.height; y += opt.pixel_step)
      for (int x = 0; x < fm1.width; x += opt.pixel_step) {
        const auto target = positive_target(truth, x, y, rf);
        if (!target) continue;
        ++count;
        const auto f1 = fm1.at(x, y);
        const double d_pos = l2_distance<float>(f1, fm2.at(target->x, target->y));
        const auto i = truth.flow.index(x, y);
        const double disp = std::hypot(truth.flow.u[i], truth.flow.v[i]);
        Rng rng(derive_seed(opt.seed, p, i));
        TrainingSample pos;
        pos.p1 = {x, y};
        pos.p2 = *target;
        for (int k = 0; k < opt.negatives_per_pixel; ++k) {
          const auto neg = sample_negative(truth, pos, opt.negatives, rf, rng);
          triples.push_back({d_pos, l2_distance<float>(f1, fm2.at(neg.p2.x, neg.p2.y)), neg.pixel_distance, disp});
        }
      }
  }
  if (count == 0) raise<Error>("matching_robustness: no admissible pixels");
  if (admissible) *admissible = count;
  return triples;
}

// r = P(L2(p1, p2+) < L2(p1, p2-)) over admissible pixels and pairs.
inline RobustnessReport matching_robustness(std::span<const RobustnessInput> inputs, const RobustnessOptions& opt,
                                            std::vector<RobustnessTriple>* triples_out = nullptr) {
  std::size_t admissible = 0;
  auto triples = draw_robustness_triples(inputs, opt, &admissible);
  auto rep = robustness_from_triples(triples, opt.dist_edges, opt.flow_edges);
  rep.admissible_pixels = admissible;
  if (triples_out) *triples_out = std::move(triples);
  return rep;
}

// E = (1 - r_test) / (1 - r_ref); undefined when r_ref == 1.
inline std::optional<double> relative_error(double r_ref, double r_test) {
  if (r_ref >= 1.0) return std::nullopt;
  return (1.0 - r_test) / (1.0 - r_ref);
}

inline std::vector<std::optional<double>> relative_error(std::span<const RobustnessBin> ref,
                                                         std::span<const RobustnessBin> test) {
  if (ref.size() != test.size()) raise<ShapeError>("relative_error: curves have different bin counts");
  std::vector<std::optional<double>> e;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (ref[i].lo != test[i].lo || ref[i].hi != test[i].hi) raise<ShapeError>("relative_error: bin edges differ");
    if (ref[i].samples == 0 || test[i].samples == 0)
      e.push_back(std::nullopt);
    else
      e.push_back(relative_error(ref[i].r(), test[i].r()));
  }
  return e;
}

namespace detail {

inline std::string fmt_edge(double v) {
  if (std::isinf(v)) return "inf";
  std::ostringstream o;
  o << v;
  return o.str();
}

inline std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "undefined";
  std::ostringstream o;
  o.precision(10);
  o << *v;
  return o.str();
}

}  // namespace detail

// bin_lo,bin_hi,r,samples,E_vs_reference; last row is the overall summary.
inline std::string robustness_csv(std::span<const RobustnessBin> bins, double overall_r, std::size_t overall_samples,
                                  const std::vector<std::optional<double>>* e_bins = nullptr,
                                  std::optional<double> e_overall = std::nullopt) {
  std::ostringstream o;
  o.precision(10);
  o << "bin_lo,bin_hi,r,samples,E_vs_reference\n";
  for (std::size_t i = 0; i < bins.size(); ++i) {
    o << detail::fmt_edge(bins[i].lo) << ',' << detail::fmt_edge(bins[i].hi) << ',' << bins[i].r() << ','
      << bins[i].samples << ',';
    o << (e_bins ? detail::fmt_opt((*e_bins)[i]) : std::string{}) << '\n';
  }
  o << "all,all," << overall_r << ',' << overall_samples << ',' << (e_bins ? detail::fmt_opt(e_overall) : "")
    << '\n';
  return o.str();
}

struct EpeReport {
  double epe_noc = 0.0;
  double epe_all = 0.0;
  double pct_noc_3 = 0.0, pct_noc_5 = 0.0;
  double pct_all_3 = 0.0, pct_all_5 = 0.0;
  std::size_t n_noc = 0, n_all = 0;
  std::size_t skipped_invalid = 0;  // gt-valid pixels left out because the estimate is invalid there
  bool filled = false;              // estimate was densified with the nearest-valid filler
};

// Densifies an estimate by copying the nearest valid pixel (4-neighbour BFS,
// fixed visiting order). A baseline filler for EPE-all only.
inline FlowField nearest_valid_fill(const FlowField& flow) {
  FlowField out = flow;
  std::deque<std::size_t> queue;
  std::vector<std::uint8_t> seen(flow.size(), 0);
  for (std::size_t i = 0; i < flow.size(); ++i)
    if (flow.valid[i]) {
      queue.push_back(i);
      seen[i] = 1;
    }
  if (queue.empty()) raise<Error>("nearest_valid_fill: no valid pixel to copy from");
  while (!queue.empty()) {
    const auto i = queue.front();
    queue.pop_front();
    const int x = static_cast<int>(i % flow.width), y = static_cast<int>(i / flow.width);
    const int nx[4] = {x - 1, x + 1, x, x}, ny[4] = {y, y, y - 1, y + 1};
    for (int k = 0; k < 4; ++k) {
      if (nx[k] < 0 || ny[k] < 0 || nx[k] >= flow.width || ny[k] >= flow.height) continue;
      const auto j = flow.index(nx[k], ny[k]);
      if (seen[j]) continue;
      seen[j] = 1;
      out.u[j] = out.u[i];
      out.v[j] = out.v[i];
      out.cost[j] = out.cost[i];
      queue.push_back(j);
    }
  }
  std::fill(out.valid.begin(), out.valid.end(), 1);
  return out;
}

// noc domain: gt valid and not occluded; all domain: gt valid. Pixels where
// the estimate is invalid are skipped (and counted) unless `fill` is set.
inline EpeReport epe_metrics(const FlowField& est_in, const FlowField& gt, const Mask* occlusion = nullptr,
                             bool fill = false) {
  if (est_in.width != gt.width || est_in.height != gt.height)
    raise<ShapeError>("epe_metrics: estimate is ", est_in.width, "x", est_in.height, ", ground truth ", gt.width,
                      "x", gt.height);
  if (occlusion && (occlusion->width != gt.width || occlusion->height != gt.height))
    raise<ShapeError>("epe_metrics: occlusion mask size differs");
  const FlowField est = fill ? nearest_valid_fill(est_in) : est_in;
  EpeReport r;
  r.filled = fill;
  double sum_noc = 0, sum_all = 0;
  std::size_t noc3 = 0, noc5 = 0, all3 = 0, all5 = 0;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const auto i = gt.index(x, y);
      if (!gt.valid[i]) continue;
      if (!est.valid[i]) {
        ++r.skipped_invalid;
        continue;
      }
      const double e = std::hypot(static_cast<double>(est.u[i]) - gt.u[i], static_cast<double>(est.v[i]) - gt.v[i]);
      ++r.n_all;
      sum_all += e;
      all3 += e > 3.0;
      all5 += e > 5.0;
      if (occlusion && occlusion->at(x, y)) continue;
      ++r.n_noc;
      sum_noc += e;
      noc3 += e > 3.0;
      noc5 += e > 5.0;
    }
  if (r.n_all == 0) raise<Error>("epe_metrics: empty evaluation domain");
  r.epe_all = sum_all / static_cast<double>(r.n_all);
  r.pct_all_3 = 100.0 * static_cast<double>(all3) / static_cast<double>(r.n_all);
  r.pct_all_5 = 100.0 * static_cast<double>(all5) / static_cast<double>(r.n_all);
  if (r.n_noc > 0) {
    r.epe_noc = sum_noc / static_cast<double>(r.n_noc);
    r.pct_noc_3 = 100.0 * static_cast<double>(noc3) / static_cast<double>(r.n_noc);
    r.pct_noc_5 = 100.0 * static_cast<double>(noc5) / static_cast<double>(r.n_noc);
  }
  return r;
}

inline std::string epe_csv(const EpeReport& r) {
  std::ostringstream o;
  o.precision(10);
  o << "domain,epe,pct_over_3,pct_over_5,pixels\n";
  o << "noc," << r.epe_noc << ',' << r.pct_noc_3 << ',' << r.pct_noc_5 << ',' << r.n_noc << '\n';
  o << (r.filled ? "all_filled_baseline," : "all,") << r.epe_all << ',' << r.pct_all_3 << ',' << r.pct_all_5 << ','
    << r.n_all << '\n';
  o << "skipped_invalid,,,," << r.skipped_invalid << '\n';
  return o.str();
}

struct L2Histogram {
  std::vector<double> edges;             // bins + 1 edges
  std::vector<double> positive_density;  // per-bin mass, sums to 1
  std::vector<double> negative_density;
  double positive_variance = 0.0;  // population variance of the raw distances
  double negative_variance = 0.0;
  double positive_mean = 0.0;
  double negative_mean = 0.0;
};

namespace detail {

inline void mean_var(std::span<const double> v, double& mean, double& var) {
  mean = var = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
}

}  // namespace detail

// Shared-range histograms of positive and negative L2 distances. With
// hi <= lo the range is taken from the data; a degenerate range puts all
// mass in the first bin.
inline L2Histogram l2_histogram(std::span<const double> positives, std::span<const double> negatives, int bins,
                                double lo = 0.0, double hi = 0.0) {
  if (bins < 1) raise<Error>("l2_histogram: need at least one bin");
  if (hi <= lo) {
    lo = kInf;
    hi = -kInf;
    for (auto s : {positives, negatives})
      for (double d : s) {
        lo = std::min(lo, d);
        hi = std::max(hi, d);
      }
    if (!std::isfinite(lo)) lo = hi = 0.0;
  }
  L2Histogram h;
  const double width = (hi - lo) / bins;
  for (int b = 0; b <= bins; ++b) h.edges.push_back(lo + width * b);
  auto fill = [&](std::span<const double> ds, std::vector<double>& out) {
    out.assign(static_cast<std::size_t>(bins), 0.0);
    if (ds.empty()) return;
    for (double d : ds) {
      int b = width > 0 ? static_cast<int>(std::floor((d - lo) / width)) : 0;
      out[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))] += 1.0;
    }
    for (auto& v : out) v /= static_cast<double>(ds.size());
  };
  fill(positives, h.positive_density);
  fill(negatives, h.negative_density);
  detail::mean_var(positives, h.positive_mean, h.positive_variance);
  detail::mean_var(negatives, h.negative_mean, h.negative_variance);
  return h;
}

inline std::string histogram_csv(const L2Histogram& h) {
  std::ostringstream o;
  o.precision(10);
  o << "bin_center,positive_density,negative_density\n";
  for (std::size_t b = 0; b + 1 < h.edges.size(); ++b)
    o << 0.5 * (h.edges[b] + h.edges[b + 1]) << ',' << h.positive_density[b] << ',' << h.negative_density[b] << '\n';
  o << "# variance_positive," << h.positive_variance << ",variance_negative," << h.negative_variance << '\n';
  return o.str();
}

struct L2Samples {
  std::vector<double> positive;
  std::vector<double> negative;
};

// Positive distances and negatives at exactly `pixel_distance` (rounded
// Euclidean) from the true match, one of each per drawn admissible pixel.
inline L2Samples l2_samples_at_distance(std::span<const RobustnessInput> inputs, int pixel_distance,
                                        std::size_t count, std::uint64_t seed) {
  if (inputs.empty()) raise<Error>("l2_samples_at_distance: no inputs");
  NegativeOffsetDist dist;
  dist.min_distance = pixel_distance;
  dist.near_radius = pixel_distance;
  dist.far_cap = pixel_distance + 1.0;
  dist.near_probability = 1.0;
  L2Samples out;
  Rng rng(seed);
  std::size_t misses = 0;
  while (out.positive.size() < count) {
    const auto& in = inputs[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(inputs.size()) - 1))];
    const int rf = in.fm1->receptive_field;
    const auto pos = sample_positive(*in.truth, rf, rng);
    const auto f1 = in.fm1->at(pos.p1.x, pos.p1.y);
    TrainingSample neg;
    try {
      neg = sample_negative(*in.truth, pos, dist, rf, rng, 64);
    } catch (const Error&) {
      if (++misses > 100 * count) raise<Error>("l2_samples_at_distance: cannot place negatives at distance ", pixel_distance);
      continue;
    }
    if (static_cast<int>(neg.pixel_distance) != pixel_distance) continue;
    out.positive.push_back(l2_distance<float>(f1, in.fm2->at(pos.p2.x, pos.p2.y)));
    out.negative.push_back(l2_distance<float>(f1, in.fm2->at(neg.p2.x, neg.p2.y)));
  }
  return out;
}

}  // namespace cnnflow
