#pragma once

// Siamese training loop: triple sampling over (multi-resolution) image pairs,
// loss-only candidate evaluation, non-zero-loss batch selection or hard
// mining, backprop on the accepted batch and the log-space SGD schedule.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/loss.hpp"
#include "cnnflow/sampler.hpp"
#include "cnnflow/tensor_net.hpp"

namespace cnnflow {

enum class GradReduction { sum, mean };

struct TrainConfig {
  LossConfig loss;
  double lr_start = 0.004;
  double lr_end = 0.0004;
  std::size_t batch_size = 100;
  std::size_t samples = 50000;  // back-propagated samples; batches = samples / batch_size
  NegativeOffsetDist negatives;
  bool auto_far_cap = true;  // far_cap = min(256, diagonal / 2) of the first pair
  std::string architecture = "desk32";
  int levels = 1;  // 1 = full resolution only, 3 = 100/50/25 %
  double level_ratio = 0.6;
  std::uint64_t seed = 1;       // sampling stream
  std::uint64_t init_seed = 1;  // weight initialization
  SgdOptions sgd;
  GradReduction reduction = GradReduction::sum;
  std::size_t log_every = 100;
  std::size_t candidate_chunk = 64;  // triples evaluated per forward pass

  std::size_t total_batches() const { return std::max<std::size_t>(1, samples / std::max<std::size_t>(1, batch_size)); }

  void validate() const {
    loss.validate();
    if (batch_size < 1) raise<Error>("train.batch_size must be >= 1");
    if (samples < batch_size) raise<Error>("train.samples must be >= train.batch_size");
    if (levels < 1 || levels > 6) raise<Error>("train.levels must be in [1, 6]");
    if (!(level_ratio > 0.0 && level_ratio <= 1.0)) raise<Error>("train.level_ratio must lie in (0, 1]");
    if (candidate_chunk < 1) raise<Error>("train.candidate_chunk must be >= 1");
    if (log_every < 1) raise<Error>("train.log_every must be >= 1");
    LrSchedule{lr_start, lr_end, total_batches()}.validate();
    if (!auto_far_cap) negatives.validate();
  }
};

struct TrainLogRow {
  std::size_t batch = 0;
  double lr = 0.0;
  double mean_loss_pos = 0.0;
  double mean_loss_neg = 0.0;
  double rejection_ratio = 0.0;
};

struct TrainResult {
  NetworkParams<float> params;
  std::vector<TrainLogRow> log;
  std::size_t scanned = 0;   // candidates whose loss was evaluated
  std::size_t rejected = 0;  // ... of which had zero loss
  std::vector<double> mass_ratio;  // per batch negative/positive hinge mass (hard mining only)
  std::vector<std::string> warnings;

  double rejection_ratio() const noexcept {
    return scanned ? static_cast<double>(rejected) / static_cast<double>(scanned) : 0.0;
  }
};

// Draws (p1, p2+, p2-) triples: pair uniformly, level by the 60 % rule.
class TripleSource {
 public:
  TripleSource(std::span<const ImagePair> pairs, const TrainConfig& cfg, int receptive_field)
      : rf_(receptive_field), rng_(cfg.seed) {
    if (pairs.empty()) raise<Error>("training needs at least one image pair");
    for (const auto& p : pairs) {
      p.validate();
      levels_.push_back(build_pair_levels(p, cfg.levels));
      for (const auto& l : levels_.back())
        if (l.i1.width < rf_ || l.i1.height < rf_)
          raise<ShapeError>("training level of ", l.i1.width, "x", l.i1.height, " is smaller than the receptive field ",
                            rf_);
    }
    probs_ = level_probabilities(static_cast<std::size_t>(cfg.levels), cfg.level_ratio);
    dist_ = cfg.auto_far_cap ? NegativeOffsetDist::for_image(pairs[0].i1.width, pairs[0].i1.height) : cfg.negatives;
    if (cfg.auto_far_cap) {
      dist_.min_distance = cfg.negatives.min_distance;
      dist_.near_radius = cfg.negatives.near_radius;
      dist_.near_probability = cfg.negatives.near_probability;
      if (dist_.far_cap <= dist_.near_radius) dist_.far_cap = dist_.near_radius + 1.0;
    }
    dist_.validate();
  }

  int receptive_field() const noexcept { return rf_; }
  const NegativeOffsetDist& distribution() const noexcept { return dist_; }

  // Appends p1, p2+, p2- patches of a fresh triple to `store`.
  SampleTriple next(std::vector<float>& store) {
    const auto k = static_cast<std::size_t>(uniform_int(rng_, 0, static_cast<int>(levels_.size()) - 1));
    const auto t = sample_multiresolution(levels_[k], probs_, dist_, rf_, rng_);
    const auto& lv = levels_[k][static_cast<std::size_t>(t.positive.level)];
    const std::size_t n = static_cast<std::size_t>(rf_) * rf_;
    const std::size_t off = store.size();
    store.resize(off + 3 * n);
    extract_patch<float>(lv.i1, t.positive.p1, rf_, {store.data() + off, n});
    extract_patch<float>(lv.i2, t.positive.p2, rf_, {store.data() + off + n, n});
    extract_patch<float>(lv.i2, t.negative.p2, rf_, {store.data() + off + 2 * n, n});
    return t;
  }

 private:
  int rf_;
  Rng rng_;
  std::vector<std::vector<ImagePair>> levels_;
  std::vector<double> probs_;
  NegativeOffsetDist dist_;
};

namespace detail {

// Evaluated triples: patches (3 per triple) and feature distances.
struct TripleChunk {
  std::vector<float> patches;
  std::vector<SampleTriple> triples;
  std::vector<double> d_pos, d_neg;
};

inline void evaluate_triples(const NetworkParams<float>& params, TripleSource& src, std::size_t count,
                             TripleChunk& chunk) {
  thread_local ForwardCache<float> cache;
  const std::size_t first = chunk.triples.size();
  const std::size_t n = params.patch_size();
  for (std::size_t i = 0; i < count; ++i) chunk.triples.push_back(src.next(chunk.patches));
  const std::span<const float> fresh(chunk.patches.data() + first * 3 * n, count * 3 * n);
  forward_batch_into<float>(params, fresh, static_cast<int>(3 * count), cache);
  for (std::size_t i = 0; i < count; ++i) {
    const auto f1 = cache.feature(static_cast<int>(3 * i));
    const auto fp = cache.feature(static_cast<int>(3 * i + 1));
    const auto fn = cache.feature(static_cast<int>(3 * i + 2));
    chunk.d_pos.push_back(l2_distance<float>(f1, fp));
    chunk.d_neg.push_back(l2_distance<float>(f1, fn));
  }
}

inline PairSample pair_sample(const TripleChunk& c, std::size_t triple, bool positive) {
  const auto& s = positive ? c.triples[triple].positive : c.triples[triple].negative;
  PairSample p;
  p.d = positive ? c.d_pos[triple] : c.d_neg[triple];
  p.label = positive ? PairLabel::positive : PairLabel::negative;
  p.pixel_distance = s.pixel_distance;
  p.displacement = s.displacement;
  p.level = s.level;
  p.id = 2 * triple + (positive ? 0 : 1);
  return p;
}

// Window accumulator for the training log.
struct LogWindow {
  double pos_sum = 0, neg_sum = 0;
  std::size_t pos_n = 0, neg_n = 0, scanned = 0, rejected = 0;

  void add(bool positive, double loss) {
    (positive ? pos_sum : neg_sum) += loss;
    ++(positive ? pos_n : neg_n);
    ++scanned;
    rejected += loss <= 0.0;
  }
};

}  // namespace detail

// Forward-evaluates `count` fresh pair candidates (positive then negative of
// each triple) with the given parameters.
inline std::vector<PairSample> evaluate_pair_candidates(const NetworkParams<float>& params, TripleSource& src,
                                                        std::size_t count) {
  detail::TripleChunk chunk;
  detail::evaluate_triples(params, src, (count + 1) / 2, chunk);
  std::vector<PairSample> out;
  for (std::size_t t = 0; t < chunk.triples.size() && out.size() < count; ++t) {
    out.push_back(detail::pair_sample(chunk, t, true));
    if (out.size() < count) out.push_back(detail::pair_sample(chunk, t, false));
  }
  return out;
}

inline NetworkParams<float> make_network(const TrainConfig& cfg) {
  return init_params<float>(parse_architecture(cfg.architecture), cfg.init_seed);
}

// `observer`, when given, is called after every update with (batch, params).
template <typename Observer>
TrainResult train(std::span<const ImagePair> pairs, const TrainConfig& cfg, NetworkParams<float> params,
                  Observer&& observer) {
  cfg.validate();
  const std::size_t total = cfg.total_batches();
  const std::size_t B = cfg.batch_size;
  const int rf = params.receptive_field;
  const std::size_t n = params.patch_size();
  const int F = params.feature_dim;
  TripleSource src(pairs, cfg, rf);
  SgdOptimizer<float> opt(LrSchedule{cfg.lr_start, cfg.lr_end, total}, cfg.sgd);
  const LossConfig& lc = cfg.loss;
  const bool gap = lc.kind == LossKind::gap;
  const bool mined = lc.kind == LossKind::hinge_hard_mined;
  const float scale = cfg.reduction == GradReduction::mean ? 1.0f / static_cast<float>(B) : 1.0f;

  TrainResult res;
  detail::LogWindow win;
  std::vector<float> batch_patches, upstream;
  ForwardCache<float> cache;

  for (std::size_t b = 0; b < total; ++b) {
    detail::TripleChunk chunk;
    std::size_t cursor = 0;  // next unconsumed candidate index (pair ids or triples)
    auto refill = [&] { detail::evaluate_triples(params, src, cfg.candidate_chunk, chunk); };
    batch_patches.clear();

    if (gap) {
      auto next = [&]() -> std::optional<std::size_t> {
        if (cursor == chunk.triples.size()) refill();
        return cursor++;
      };
      auto loss_of = [&](std::size_t t) {
        const double l = gap_loss(chunk.d_pos[t], chunk.d_neg[t], lc).loss;
        win.add(true, l);
        return l;
      };
      const auto sel = select_batch<std::size_t>(next, loss_of, B);
      res.scanned += sel.scanned;
      res.rejected += sel.rejected;
      for (auto t : sel.batch)
        batch_patches.insert(batch_patches.end(), chunk.patches.begin() + static_cast<std::ptrdiff_t>(3 * t * n),
                             chunk.patches.begin() + static_cast<std::ptrdiff_t>(3 * (t + 1) * n));
      const int count = static_cast<int>(sel.batch.size());
      if (count > 0) forward_batch_into<float>(params, batch_patches, 3 * count, cache);
      upstream.assign(static_cast<std::size_t>(3 * count) * F, 0.0f);
      for (int i = 0; i < count; ++i) {
        const auto f1 = cache.feature(3 * i), fp = cache.feature(3 * i + 1), fn = cache.feature(3 * i + 2);
        const double dp = l2_distance<float>(f1, fp), dn = l2_distance<float>(f1, fn);
        const auto gl = gap_loss(dp, dn, lc);
        if (gl.loss <= 0.0) continue;
        const auto gp = l2_distance_grad<float>(f1, fp, dp), gn = l2_distance_grad<float>(f1, fn, dn);
        for (int c = 0; c < F; ++c) {
          const float a = static_cast<float>(gl.grad_pos * gp[c]) * scale;
          const float z = static_cast<float>(gl.grad_neg * gn[c]) * scale;
          upstream[static_cast<std::size_t>(3 * i) * F + c] = a + z;
          upstream[static_cast<std::size_t>(3 * i + 1) * F + c] = -a;
          upstream[static_cast<std::size_t>(3 * i + 2) * F + c] = -z;
        }
      }
      if (count > 0) opt.step(params, backward<float>(params, cache, upstream), b);
      if (sel.warning) res.warnings.push_back(*sel.warning);
    } else {
      std::vector<PairSample> batch;
      if (mined) {
        const std::size_t want = static_cast<std::size_t>(lc.mining_factor) * B;
        while (2 * chunk.triples.size() < want) refill();
        std::vector<PairSample> cands;
        for (std::size_t id = 0; id < want; ++id) {
          cands.push_back(detail::pair_sample(chunk, id / 2, id % 2 == 0));
          win.add(cands.back().positive(), hinge_loss(cands.back(), lc).loss);
        }
        res.scanned += want;
        for (const auto& c : cands) res.rejected += hinge_loss(c, lc).loss <= 0.0;
        batch = hard_mine(cands, lc, B);
        res.mass_ratio.push_back(loss_mass(batch, LossConfig{LossKind::hinge, lc.m, lc.t, lc.g, 1}).neg_pos_ratio());
      } else {
        auto next = [&]() -> std::optional<PairSample> {
          if (cursor == 2 * chunk.triples.size()) refill();
          const auto id = cursor++;
          return detail::pair_sample(chunk, id / 2, id % 2 == 0);
        };
        auto loss_of = [&](const PairSample& s) {
          const double l = pair_loss(s, lc).loss;
          win.add(s.positive(), l);
          return l;
        };
        auto sel = select_batch<PairSample>(next, loss_of, B);
        res.scanned += sel.scanned;
        res.rejected += sel.rejected;
        if (sel.warning) res.warnings.push_back(*sel.warning);
        batch = std::move(sel.batch);
      }
      for (const auto& s : batch) {
        const std::size_t t = s.id / 2;
        const auto p1 = chunk.patches.begin() + static_cast<std::ptrdiff_t>(3 * t * n);
        const auto p2 = p1 + static_cast<std::ptrdiff_t>((s.positive() ? 1 : 2) * n);
        batch_patches.insert(batch_patches.end(), p1, p1 + static_cast<std::ptrdiff_t>(n));
        batch_patches.insert(batch_patches.end(), p2, p2 + static_cast<std::ptrdiff_t>(n));
      }
      const int count = static_cast<int>(batch.size());
      if (count > 0) {
        forward_batch_into<float>(params, batch_patches, 2 * count, cache);
        upstream.assign(static_cast<std::size_t>(2 * count) * F, 0.0f);
        for (int i = 0; i < count; ++i) {
          const auto f1 = cache.feature(2 * i), f2 = cache.feature(2 * i + 1);
          PairSample s = batch[static_cast<std::size_t>(i)];
          s.d = l2_distance<float>(f1, f2);
          const auto lv = pair_loss(s, lc);
          if (lv.grad == 0.0) continue;
          const auto g = l2_distance_grad<float>(f1, f2, s.d);
          for (int c = 0; c < F; ++c) {
            const float a = static_cast<float>(lv.grad * g[c]) * scale;
            upstream[static_cast<std::size_t>(2 * i) * F + c] = a;
            upstream[static_cast<std::size_t>(2 * i + 1) * F + c] = -a;
          }
        }
        opt.step(params, backward<float>(params, cache, upstream), b);
      }
    }

    observer(b, static_cast<const NetworkParams<float>&>(params));
    if ((b + 1) % cfg.log_every == 0 || b + 1 == total) {
      TrainLogRow row;
      row.batch = b + 1;
      row.lr = opt.schedule().rate(b);
      row.mean_loss_pos = win.pos_n ? win.pos_sum / static_cast<double>(win.pos_n) : 0.0;
      row.mean_loss_neg = win.neg_n ? win.neg_sum / static_cast<double>(win.neg_n) : 0.0;
      row.rejection_ratio = win.scanned ? static_cast<double>(win.rejected) / static_cast<double>(win.scanned) : 0.0;
      res.log.push_back(row);
      win = {};
    }
  }
  res.params = std::move(params);
  return res;
}

inline TrainResult train(std::span<const ImagePair> pairs, const TrainConfig& cfg, NetworkParams<float> params) {
  return train(pairs, cfg, std::move(params), [](std::size_t, const NetworkParams<float>&) {});
}

inline TrainResult train(std::span<const ImagePair> pairs, const TrainConfig& cfg) {
  return train(pairs, cfg, make_network(cfg));
}

inline std::string train_log_csv(std::span<const TrainLogRow> rows) {
  std::ostringstream o;
  o.precision(10);
  o << "batch,lr,mean_loss_pos,mean_loss_neg,rejection_ratio\n";
  for (const auto& r : rows)
    o << r.batch << ',' << r.lr << ',' << r.mean_loss_pos << ',' << r.mean_loss_neg << ',' << r.rejection_ratio << '\n';
  return o.str();
}

}  // namespace cnnflow
