#pragma once

// Pairwise embedding losses on L2 feature distances, non-zero-loss batch
// selection and the hard-mining baseline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cnnflow/common.hpp"

namespace cnnflow {

enum class LossKind { hinge, thresholded, gap, hinge_hard_mined };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::hinge: return "hinge";
    case LossKind::thresholded: return "thresholded";
    case LossKind::gap: return "gap";
    case LossKind::hinge_hard_mined: return "hinge_hard_mined";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "hinge") return LossKind::hinge;
  if (s == "thresholded") return LossKind::thresholded;
  if (s == "gap") return LossKind::gap;
  if (s == "hinge_hard_mined") return LossKind::hinge_hard_mined;
  raise<FormatError>("unknown loss kind '", s, "' (hinge | thresholded | gap | hinge_hard_mined)");
}

struct LossConfig {
  LossKind kind = LossKind::thresholded;
  double m = 1.0;  // margin
  double t = 0.3;  // threshold
  double g = 0.4;  // gap
  int mining_factor = 1;

  void validate() const {
    if (!(m > 0)) raise<Error>("loss.m must be > 0 (got ", m, ")");
    if (!(t >= 0 && t < m / 2)) raise<Error>("loss.t must satisfy 0 <= t < m/2 (got ", t, ")");
    if (!(g > 0)) raise<Error>("loss.g must be > 0 (got ", g, ")");
    if (mining_factor < 1) raise<Error>("loss.mining_factor must be >= 1 (got ", mining_factor, ")");
  }
};

enum class PairLabel : std::uint8_t { negative = 0, positive = 1 };

struct PairSample {
  double d = 0.0;  // L2 feature distance
  PairLabel label = PairLabel::positive;
  double pixel_distance = 0.0;  // |p2 - p2+|
  double displacement = 0.0;    // |p2+ - p1|
  int level = 0;                // resolution level
  std::size_t id = 0;           // caller's handle back to the patches

  bool positive() const noexcept { return label == PairLabel::positive; }
};

struct LossValue {
  double loss = 0.0;
  double grad = 0.0;  // dLoss / dd
};

struct GapLossValue {
  double loss = 0.0;
  double grad_pos = 0.0;  // dLoss / dpos_d
  double grad_neg = 0.0;  // reversed gradient applied to the negative pair
};

// ||f1 - f2||_2 in double precision.
template <typename T>
double l2_distance(std::span<const T> f1, std::span<const T> f2) {
  if (f1.size() != f2.size()) raise<ShapeError>("l2_distance: dimension mismatch ", f1.size(), " vs ", f2.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < f1.size(); ++i) {
    const double d = static_cast<double>(f1[i]) - static_cast<double>(f2[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

// d(distance)/d(f1) = (f1 - f2) / d; zero when d == 0. The gradient w.r.t. f2
// is the negation.
template <typename T>
std::vector<double> l2_distance_grad(std::span<const T> f1, std::span<const T> f2, double d) {
  std::vector<double> g(f1.size(), 0.0);
  if (d == 0.0) return g;
  for (std::size_t i = 0; i < f1.size(); ++i) g[i] = (static_cast<double>(f1[i]) - static_cast<double>(f2[i])) / d;
  return g;
}

inline LossValue hinge_loss(const PairSample& s, const LossConfig& cfg) {
  if (s.positive()) return {s.d, s.d > 0.0 ? 1.0 : 0.0};
  const double l = cfg.m - s.d;
  return l > 0.0 ? LossValue{l, -1.0} : LossValue{0.0, 0.0};
}

// Positives stop being pulled once d <= t. The negative branch is shifted by
// the same t, so the zero-loss edges t and m + t stay m apart as in the hinge.
inline LossValue thresholded_loss(const PairSample& s, const LossConfig& cfg) {
  if (s.positive()) {
    const double l = s.d - cfg.t;
    return l > 0.0 ? LossValue{l, 1.0} : LossValue{0.0, 0.0};
  }
  const double l = cfg.m - (s.d - cfg.t);
  return l > 0.0 ? LossValue{l, -1.0} : LossValue{0.0, 0.0};
}

inline GapLossValue gap_loss(double pos_d, double neg_d, const LossConfig& cfg) {
  const double l = pos_d - neg_d + cfg.g;
  if (l <= 0.0) return {};
  return {l, 1.0, -1.0};
}

// Per-pair loss for the pairwise kinds (hard mining ranks by hinge loss).
inline LossValue pair_loss(const PairSample& s, const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::thresholded: return thresholded_loss(s, cfg);
    case LossKind::hinge:
    case LossKind::hinge_hard_mined: return hinge_loss(s, cfg);
    case LossKind::gap: break;
  }
  raise<Error>("pair_loss: the gap loss is defined on (positive, negative) pairs, use gap_loss");
}

template <typename Item>
struct Selection {
  std::vector<Item> batch;
  std::size_t scanned = 0;
  std::size_t rejected = 0;
  std::optional<std::string> warning;

  double rejection_ratio() const noexcept {
    return scanned == 0 ? 0.0 : static_cast<double>(rejected) / static_cast<double>(scanned);
  }
  // Fraction of scanned candidates that will be back-propagated.
  double backprop_fraction() const noexcept { return scanned == 0 ? 0.0 : 1.0 - rejection_ratio(); }
};

// Pulls candidates from `next` (returns std::optional<Item>) and keeps the
// first `batch_size` whose loss is strictly positive. Only the loss forward
// pass is evaluated for rejected candidates.
template <typename Item, typename Next, typename LossOf>
Selection<Item> select_batch(Next&& next, LossOf&& loss_of, std::size_t batch_size) {
  Selection<Item> sel;
  sel.batch.reserve(batch_size);
  while (sel.batch.size() < batch_size) {
    std::optional<Item> item = next();
    if (!item) {
      sel.warning = detail::concat("candidate stream exhausted after ", sel.scanned, " candidates; batch has ",
                                   sel.batch.size(), " of ", batch_size, " samples");
      break;
    }
    ++sel.scanned;
    if (loss_of(*item) > 0.0) {
      sel.batch.push_back(std::move(*item));
    } else {
      ++sel.rejected;
    }
  }
  return sel;
}

template <typename Next>
Selection<PairSample> select_batch(Next&& next, const LossConfig& cfg, std::size_t batch_size = 100) {
  return select_batch<PairSample>(std::forward<Next>(next),
                                  [&](const PairSample& s) { return pair_loss(s, cfg).loss; }, batch_size);
}

// Keeps the batch_size candidates with the largest hinge loss (stable for
// ties). With mining_factor == 1 the input is returned unchanged.
inline std::vector<PairSample> hard_mine(std::span<const PairSample> candidates, const LossConfig& cfg,
                                         std::size_t batch_size) {
  if (cfg.mining_factor <= 1 || candidates.size() <= batch_size)
    return {candidates.begin(), candidates.end()};
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> loss(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) loss[i] = hinge_loss(candidates[i], cfg).loss;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return loss[a] > loss[b]; });
  std::vector<PairSample> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) out.push_back(candidates[order[i]]);
  return out;
}

struct LossMass {
  double positive = 0.0;
  double negative = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;

  // Negative-to-positive loss mass; the instability signal for hard mining.
  double neg_pos_ratio() const noexcept {
    return positive > 0.0 ? negative / positive : std::numeric_limits<double>::infinity();
  }
};

inline LossMass loss_mass(std::span<const PairSample> batch, const LossConfig& cfg) {
  LossMass mass;
  for (const auto& s : batch) {
    const double l = cfg.kind == LossKind::gap ? 0.0 : pair_loss(s, cfg).loss;
    if (s.positive()) {
      mass.positive += l;
      ++mass.positives;
    } else {
      mass.negative += l;
      ++mass.negatives;
    }
  }
  return mass;
}

}  // namespace cnnflow
