#pragma once

// MOT evaluation: CLEAR (MOTA), IDF1, and HOTA with the DetA/AssA
// decomposition, plus the embedding-similarity analyses (top-k similarity
// distribution and per-frame similarity matrices).
//
// HOTA follows the standard protocol: 19 localization thresholds
// 0.05..0.95, an alpha-independent per-frame matching that maximizes
// global-alignment-weighted similarity, and per-alpha association scores
// A(c) = TPA / (TPA + FPA + FNA) averaged over TP detections. Sequences
// aggregate by count summing, never by metric averaging.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <vector>

#include "fdta/geometry.hpp"
#include "fdta/track_record.hpp"

namespace fdta::metrics {

using geom::Box2D;
using track::TrackRecord;

inline constexpr int kNumAlphas = 19;  // 0.05, 0.10, ..., 0.95

inline double alpha_level(int a) { return 0.05 * (a + 1); }

struct EvalResult {
  double hota = 0.0, deta = 0.0, assa = 0.0, idf1 = 0.0, mota = 0.0;  // percentages
  std::int64_t tp = 0, fp = 0, fn = 0, idsw = 0;
  std::int64_t idtp = 0, idfp = 0, idfn = 0;
};

namespace detail {

struct Sequence {
  // frame -> (id, box) rows
  std::map<std::int64_t, std::vector<std::pair<std::int64_t, Box2D>>> frames;
  std::int64_t total = 0;
};

inline Sequence index_records(const std::vector<TrackRecord>& records, const char* what) {
  track::validate_records(records, what);
  Sequence seq;
  for (const auto& r : records) {
    auto& frame = seq.frames[r.frame];
    for (const auto& [id, box] : frame)
      if (id == r.id)
        throw std::invalid_argument(std::string(what) + ": duplicate id within a frame");
    frame.emplace_back(r.id, r.box);
    ++seq.total;
  }
  return seq;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CLEAR / MOTA

struct ClearCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, idsw = 0;
  std::int64_t num_gt = 0;

  double mota() const {
    return 1.0 - static_cast<double>(fn + fp + idsw) / static_cast<double>(num_gt);
  }
};

// Standard CLEAR with carry-over: a ground truth keeps its previous
// hypothesis when the overlap still clears the threshold; the rest match by
// Hungarian on 1-IoU. An ID switch is a TP whose hypothesis differs from
// the ground truth's most recent one.
inline ClearCounts clear_mota_counts(const std::vector<TrackRecord>& gt,
                                     const std::vector<TrackRecord>& pred,
                                     double iou_threshold = 0.5) {
  auto gt_seq = detail::index_records(gt, "clear_mota gt");
  auto pred_seq = detail::index_records(pred, "clear_mota pred");
  if (gt_seq.total == 0) throw std::invalid_argument("clear_mota: empty ground truth");

  ClearCounts counts;
  counts.num_gt = gt_seq.total;
  std::map<std::int64_t, std::int64_t> last_match;  // gt id -> most recent pred id

  std::vector<std::int64_t> all_frames;
  for (const auto& [f, rows] : gt_seq.frames) all_frames.push_back(f);
  for (const auto& [f, rows] : pred_seq.frames)
    if (!gt_seq.frames.count(f)) all_frames.push_back(f);
  std::sort(all_frames.begin(), all_frames.end());

  for (const auto f : all_frames) {
    const auto git = gt_seq.frames.find(f);
    const auto pit = pred_seq.frames.find(f);
    const auto* grows = git == gt_seq.frames.end() ? nullptr : &git->second;
    const auto* prows = pit == pred_seq.frames.end() ? nullptr : &pit->second;
    const std::size_t ng = grows ? grows->size() : 0;
    const std::size_t np = prows ? prows->size() : 0;
    if (ng == 0) {
      counts.fp += static_cast<std::int64_t>(np);
      continue;
    }
    if (np == 0) {
      counts.fn += static_cast<std::int64_t>(ng);
      continue;
    }

    std::vector<char> g_done(ng, 0), p_done(np, 0);
    std::vector<std::pair<std::size_t, std::size_t>> matches;

    // Carry-over pass, ascending gt id order.
    for (std::size_t gi = 0; gi < ng; ++gi) {
      const auto [gid, gbox] = (*grows)[gi];
      auto lm = last_match.find(gid);
      if (lm == last_match.end()) continue;
      for (std::size_t pi = 0; pi < np; ++pi) {
        if (p_done[pi] || (*prows)[pi].first != lm->second) continue;
        if (geom::iou(gbox, (*prows)[pi].second) >= iou_threshold) {
          g_done[gi] = 1;
          p_done[pi] = 1;
          matches.emplace_back(gi, pi);
        }
        break;
      }
    }

    // Hungarian on the remainder.
    std::vector<std::size_t> g_rem, p_rem;
    for (std::size_t gi = 0; gi < ng; ++gi)
      if (!g_done[gi]) g_rem.push_back(gi);
    for (std::size_t pi = 0; pi < np; ++pi)
      if (!p_done[pi]) p_rem.push_back(pi);
    if (!g_rem.empty() && !p_rem.empty()) {
      std::vector<std::vector<double>> cost(g_rem.size(), std::vector<double>(p_rem.size()));
      for (std::size_t a = 0; a < g_rem.size(); ++a)
        for (std::size_t b = 0; b < p_rem.size(); ++b) {
          const double overlap = geom::iou((*grows)[g_rem[a]].second, (*prows)[p_rem[b]].second);
          cost[a][b] = overlap >= iou_threshold ? 1.0 - overlap : geom::kForbiddenCost;
        }
      for (auto [a, b] : geom::hungarian(cost).pairs) {
        if (cost[a][b] >= geom::kForbiddenCost) continue;
        matches.emplace_back(g_rem[a], p_rem[b]);
      }
    }

    counts.tp += static_cast<std::int64_t>(matches.size());
    counts.fn += static_cast<std::int64_t>(ng - matches.size());
    counts.fp += static_cast<std::int64_t>(np - matches.size());
    for (auto [gi, pi] : matches) {
      const auto gid = (*grows)[gi].first;
      const auto pid = (*prows)[pi].first;
      auto lm = last_match.find(gid);
      if (lm != last_match.end() && lm->second != pid) ++counts.idsw;
      last_match[gid] = pid;
    }
  }
  return counts;
}

inline double clear_mota(const std::vector<TrackRecord>& gt, const std::vector<TrackRecord>& pred,
                         double iou_threshold = 0.5) {
  return clear_mota_counts(gt, pred, iou_threshold).mota();
}

// ---------------------------------------------------------------------------
// IDF1

struct IdCounts {
  std::int64_t idtp = 0, idfp = 0, idfn = 0;

  double idf1() const {
    const double denom = static_cast<double>(2 * idtp + idfp + idfn);
    return denom > 0.0 ? 2.0 * static_cast<double>(idtp) / denom : 0.0;
  }
};

// Global trajectory-level bipartite matching maximizing per-frame id
// overlap (equivalently minimizing IDFP + IDFN).
inline IdCounts idf1_counts(const std::vector<TrackRecord>& gt,
                            const std::vector<TrackRecord>& pred, double iou_threshold = 0.5) {
  auto gt_seq = detail::index_records(gt, "idf1 gt");
  auto pred_seq = detail::index_records(pred, "idf1 pred");
  if (gt_seq.total == 0) throw std::invalid_argument("idf1: empty ground truth");

  std::map<std::int64_t, int> gid_index, pid_index;
  for (const auto& [f, rows] : gt_seq.frames)
    for (const auto& [id, box] : rows)
      gid_index.emplace(id, static_cast<int>(gid_index.size()));
  for (const auto& [f, rows] : pred_seq.frames)
    for (const auto& [id, box] : rows)
      pid_index.emplace(id, static_cast<int>(pid_index.size()));

  const std::size_t ng = gid_index.size(), np = pid_index.size();
  std::vector<std::vector<double>> overlap(ng, std::vector<double>(np, 0.0));
  for (const auto& [f, grows] : gt_seq.frames) {
    auto pit = pred_seq.frames.find(f);
    if (pit == pred_seq.frames.end()) continue;
    for (const auto& [gid, gbox] : grows)
      for (const auto& [pid, pbox] : pit->second)
        if (geom::iou(gbox, pbox) >= iou_threshold)
          overlap[gid_index[gid]][pid_index[pid]] += 1.0;
  }

  IdCounts counts;
  double idtp = 0.0;
  if (ng > 0 && np > 0) {
    double max_overlap = 0.0;
    for (const auto& row : overlap)
      for (double v : row) max_overlap = std::max(max_overlap, v);
    std::vector<std::vector<double>> cost(ng, std::vector<double>(np));
    for (std::size_t g = 0; g < ng; ++g)
      for (std::size_t p = 0; p < np; ++p) cost[g][p] = max_overlap - overlap[g][p];
    for (auto [g, p] : geom::hungarian(cost).pairs) idtp += overlap[g][p];
  }
  counts.idtp = static_cast<std::int64_t>(idtp + 0.5);
  counts.idfn = gt_seq.total - counts.idtp;
  counts.idfp = pred_seq.total - counts.idtp;
  return counts;
}

inline double idf1(const std::vector<TrackRecord>& gt, const std::vector<TrackRecord>& pred,
                   double iou_threshold = 0.5) {
  return idf1_counts(gt, pred, iou_threshold).idf1();
}

// ---------------------------------------------------------------------------
// HOTA

struct HotaCounts {
  std::array<double, kNumAlphas> tp{}, fn{}, fp{}, ass_sum{};

  void accumulate(const HotaCounts& other) {
    for (int a = 0; a < kNumAlphas; ++a) {
      tp[a] += other.tp[a];
      fn[a] += other.fn[a];
      fp[a] += other.fp[a];
      ass_sum[a] += other.ass_sum[a];
    }
  }
};

struct HotaResult {
  double hota = 0.0, deta = 0.0, assa = 0.0;
  std::array<double, kNumAlphas> hota_alpha{}, deta_alpha{}, assa_alpha{};
};

inline HotaCounts hota_counts(const std::vector<TrackRecord>& gt,
                              const std::vector<TrackRecord>& pred) {
  auto gt_seq = detail::index_records(gt, "hota gt");
  auto pred_seq = detail::index_records(pred, "hota pred");
  if (gt_seq.total == 0) throw std::invalid_argument("hota: empty ground truth");

  std::map<std::int64_t, int> gid_index, pid_index;
  for (const auto& [f, rows] : gt_seq.frames)
    for (const auto& [id, box] : rows)
      gid_index.emplace(id, static_cast<int>(gid_index.size()));
  for (const auto& [f, rows] : pred_seq.frames)
    for (const auto& [id, box] : rows)
      pid_index.emplace(id, static_cast<int>(pid_index.size()));
  const std::size_t ng = gid_index.size(), np = pid_index.size();

  std::vector<double> gcount(ng, 0.0), pcount(np, 0.0);
  for (const auto& [f, rows] : gt_seq.frames)
    for (const auto& [id, box] : rows) gcount[gid_index[id]] += 1.0;
  for (const auto& [f, rows] : pred_seq.frames)
    for (const auto& [id, box] : rows) pcount[pid_index[id]] += 1.0;

  // First pass: accumulate Jaccard-weighted potential matches.
  std::vector<std::vector<double>> potential(ng, std::vector<double>(np, 0.0));
  std::vector<std::int64_t> all_frames;
  for (const auto& [f, rows] : gt_seq.frames) all_frames.push_back(f);
  for (const auto& [f, rows] : pred_seq.frames)
    if (!gt_seq.frames.count(f)) all_frames.push_back(f);
  std::sort(all_frames.begin(), all_frames.end());

  struct FramePairs {
    std::vector<int> g, p;          // dense indices present this frame
    std::vector<double> sim;        // row-major |g| x |p| IoU
  };
  std::vector<FramePairs> frame_data;
  frame_data.reserve(all_frames.size());
  for (const auto f : all_frames) {
    FramePairs fp;
    if (auto it = gt_seq.frames.find(f); it != gt_seq.frames.end())
      for (const auto& [id, box] : it->second) fp.g.push_back(gid_index[id]);
    if (auto it = pred_seq.frames.find(f); it != pred_seq.frames.end())
      for (const auto& [id, box] : it->second) fp.p.push_back(pid_index[id]);
    const auto* grows = gt_seq.frames.count(f) ? &gt_seq.frames.at(f) : nullptr;
    const auto* prows = pred_seq.frames.count(f) ? &pred_seq.frames.at(f) : nullptr;
    fp.sim.assign(fp.g.size() * fp.p.size(), 0.0);
    for (std::size_t a = 0; grows && a < grows->size(); ++a)
      for (std::size_t b = 0; prows && b < prows->size(); ++b)
        fp.sim[a * fp.p.size() + b] = geom::iou((*grows)[a].second, (*prows)[b].second);

    for (std::size_t a = 0; a < fp.g.size(); ++a)
      for (std::size_t b = 0; b < fp.p.size(); ++b) {
        const double s = fp.sim[a * fp.p.size() + b];
        if (s <= 0.0) continue;
        double row_sum = 0.0, col_sum = 0.0;
        for (std::size_t bb = 0; bb < fp.p.size(); ++bb) row_sum += fp.sim[a * fp.p.size() + bb];
        for (std::size_t aa = 0; aa < fp.g.size(); ++aa) col_sum += fp.sim[aa * fp.p.size() + b];
        const double denom = row_sum + col_sum - s;
        if (denom > 0.0) potential[fp.g[a]][fp.p[b]] += s / denom;
      }
    frame_data.push_back(std::move(fp));
  }

  std::vector<std::vector<double>> align(ng, std::vector<double>(np, 0.0));
  for (std::size_t g = 0; g < ng; ++g)
    for (std::size_t p = 0; p < np; ++p) {
      const double denom = gcount[g] + pcount[p] - potential[g][p];
      if (denom > 0.0) align[g][p] = potential[g][p] / denom;
    }

  // Second pass: per-frame matching on alignment-weighted similarity
  // (alpha-independent), then per-alpha thresholding.
  std::vector<std::map<std::pair<int, int>, double>> match_counts(kNumAlphas);
  HotaCounts counts;
  for (const auto& fp : frame_data) {
    if (fp.g.empty() || fp.p.empty()) continue;
    double max_score = 0.0;
    std::vector<std::vector<double>> score(fp.g.size(), std::vector<double>(fp.p.size()));
    for (std::size_t a = 0; a < fp.g.size(); ++a)
      for (std::size_t b = 0; b < fp.p.size(); ++b) {
        score[a][b] = align[fp.g[a]][fp.p[b]] * fp.sim[a * fp.p.size() + b];
        max_score = std::max(max_score, score[a][b]);
      }
    std::vector<std::vector<double>> cost(fp.g.size(), std::vector<double>(fp.p.size()));
    for (std::size_t a = 0; a < fp.g.size(); ++a)
      for (std::size_t b = 0; b < fp.p.size(); ++b) cost[a][b] = max_score - score[a][b];
    for (auto [a, b] : geom::hungarian(cost).pairs) {
      const double s = fp.sim[a * fp.p.size() + b];
      for (int al = 0; al < kNumAlphas; ++al) {
        if (s < alpha_level(al) - 1e-9) continue;
        counts.tp[al] += 1.0;
        match_counts[al][{fp.g[a], fp.p[b]}] += 1.0;
      }
    }
  }
  for (int al = 0; al < kNumAlphas; ++al) {
    counts.fn[al] = static_cast<double>(gt_seq.total) - counts.tp[al];
    counts.fp[al] = static_cast<double>(pred_seq.total) - counts.tp[al];
    for (const auto& [gp, m] : match_counts[al]) {
      const double denom = gcount[gp.first] + pcount[gp.second] - m;
      if (denom > 0.0) counts.ass_sum[al] += m * (m / denom);
    }
  }
  return counts;
}

inline HotaResult hota_finalize(const HotaCounts& counts) {
  HotaResult result;
  for (int a = 0; a < kNumAlphas; ++a) {
    const double det_denom = counts.tp[a] + counts.fn[a] + counts.fp[a];
    result.deta_alpha[a] = det_denom > 0.0 ? counts.tp[a] / det_denom : 0.0;
    result.assa_alpha[a] = counts.tp[a] > 0.0 ? counts.ass_sum[a] / counts.tp[a] : 0.0;
    result.hota_alpha[a] = std::sqrt(result.deta_alpha[a] * result.assa_alpha[a]);
    result.deta += result.deta_alpha[a];
    result.assa += result.assa_alpha[a];
    result.hota += result.hota_alpha[a];
  }
  result.deta /= kNumAlphas;
  result.assa /= kNumAlphas;
  result.hota /= kNumAlphas;
  return result;
}

inline HotaResult hota(const std::vector<TrackRecord>& gt, const std::vector<TrackRecord>& pred) {
  return hota_finalize(hota_counts(gt, pred));
}

// ---------------------------------------------------------------------------
// Combined evaluation

inline EvalResult evaluate(const std::vector<TrackRecord>& gt,
                           const std::vector<TrackRecord>& pred, double iou_threshold = 0.5) {
  EvalResult result;
  auto clear = clear_mota_counts(gt, pred, iou_threshold);
  result.tp = clear.tp;
  result.fp = clear.fp;
  result.fn = clear.fn;
  result.idsw = clear.idsw;
  result.mota = 100.0 * clear.mota();
  auto ids = idf1_counts(gt, pred, iou_threshold);
  result.idtp = ids.idtp;
  result.idfp = ids.idfp;
  result.idfn = ids.idfn;
  result.idf1 = 100.0 * ids.idf1();
  auto h = hota(gt, pred);
  result.hota = 100.0 * h.hota;
  result.deta = 100.0 * h.deta;
  result.assa = 100.0 * h.assa;
  return result;
}

// Multi-sequence aggregation by count summing.
inline EvalResult evaluate_many(
    const std::vector<std::pair<std::vector<TrackRecord>, std::vector<TrackRecord>>>& pairs,
    double iou_threshold = 0.5) {
  if (pairs.empty()) throw std::invalid_argument("evaluate_many: no sequences");
  EvalResult result;
  HotaCounts hota_acc;
  std::int64_t num_gt = 0;
  for (const auto& [gt, pred] : pairs) {
    auto clear = clear_mota_counts(gt, pred, iou_threshold);
    result.tp += clear.tp;
    result.fp += clear.fp;
    result.fn += clear.fn;
    result.idsw += clear.idsw;
    num_gt += clear.num_gt;
    auto ids = idf1_counts(gt, pred, iou_threshold);
    result.idtp += ids.idtp;
    result.idfp += ids.idfp;
    result.idfn += ids.idfn;
    hota_acc.accumulate(hota_counts(gt, pred));
  }
  result.mota = 100.0 * (1.0 - static_cast<double>(result.fn + result.fp + result.idsw) /
                                   static_cast<double>(num_gt));
  const double id_denom = static_cast<double>(2 * result.idtp + result.idfp + result.idfn);
  result.idf1 = id_denom > 0.0 ? 100.0 * 2.0 * result.idtp / id_denom : 0.0;
  auto h = hota_finalize(hota_acc);
  result.hota = 100.0 * h.hota;
  result.deta = 100.0 * h.deta;
  result.assa = 100.0 * h.assa;
  return result;
}

// ---------------------------------------------------------------------------
// Embedding similarity analyses

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na < 1e-24 || nb < 1e-24) throw std::invalid_argument("cosine: zero-norm embedding");
  return dot / std::sqrt(na * nb);
}

// Symmetric cosine matrix with unit diagonal for one frame's embeddings.
inline std::vector<std::vector<double>> similarity_matrix(
    const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("similarity_matrix: no embeddings");
  for (const auto& e : embeddings) {
    double n2 = 0.0;
    for (double x : e) n2 += x * x;
    if (n2 < 1e-24) throw std::invalid_argument("similarity_matrix: zero-norm embedding");
  }
  const std::size_t n = embeddings.size();
  std::vector<std::vector<double>> out(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = cosine(embeddings[i], embeddings[j]);
      out[i][j] = s;
      out[j][i] = s;
    }
  return out;
}

struct Histogram {
  double bin_width = 0.05;
  double lo = -1.0;
  std::vector<std::int64_t> counts;  // 40 bins over [-1, 1]
  std::vector<double> values;        // pooled top-k similarities

  double fraction_above(double threshold) const {
    if (values.empty()) return 0.0;
    std::size_t n = 0;
    for (double v : values)
      if (v > threshold) ++n;
    return static_cast<double>(n) / static_cast<double>(values.size());
  }
};

// Per frame: all pairwise cosines, keep the min(k, #pairs) largest, pool
// across frames, bin into width-0.05 bins over [-1, 1]. Frames with fewer
// than two embeddings are skipped.
inline Histogram top_k_similarity_distribution(
    const std::vector<std::vector<std::vector<double>>>& frames, int k = 3) {
  if (k < 1) throw std::invalid_argument("top_k_similarity_distribution: k must be >= 1");
  Histogram hist;
  hist.counts.assign(40, 0);
  for (const auto& frame : frames) {
    if (frame.size() < 2) continue;
    std::vector<double> sims;
    for (std::size_t i = 0; i < frame.size(); ++i)
      for (std::size_t j = i + 1; j < frame.size(); ++j)
        sims.push_back(cosine(frame[i], frame[j]));
    std::partial_sort(sims.begin(), sims.begin() + std::min<std::size_t>(k, sims.size()),
                      sims.end(), std::greater<double>());
    sims.resize(std::min<std::size_t>(k, sims.size()));
    for (double s : sims) hist.values.push_back(s);
  }
  for (double s : hist.values) {
    int bin = static_cast<int>(std::floor((s - hist.lo) / hist.bin_width));
    bin = std::clamp(bin, 0, static_cast<int>(hist.counts.size()) - 1);
    ++hist.counts[bin];
  }
  return hist;
}

}  // namespace fdta::metrics
