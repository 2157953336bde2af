#pragma once

// Online association engine: per-identity trajectory stores, optional
// temporal refinement before matching, identity prediction via cosine
// similarity + Hungarian assignment, and track lifecycle (birth, miss,
// death).

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "fdta/geometry.hpp"
#include "fdta/metrics.hpp"
#include "fdta/temporal.hpp"
#include "fdta/track_record.hpp"

namespace fdta::track {

struct TrackerConfig {
  int window = 30;                    // trajectory length T
  double similarity_threshold = 0.3;  // matches below are rejected
  int max_misses = 30;                // consecutive misses before retirement
  double det_threshold = 0.5;         // detection score gate
  temporal::MissingMode missing_mode = temporal::MissingMode::Mask;
  const temporal::TemporalAdapter* ta = nullptr;  // optional refinement
};

struct TrackState {
  temporal::TrajectoryWindow window;
  int misses = 0;
  std::vector<double> refined_latest;  // matching representation, refreshed per frame
};

// Live identities with their sliding windows.
struct TrackStore {
  std::map<std::int64_t, TrackState> tracks;
  std::int64_t next_id = 1;

  void validate(int window_len, int max_misses) const {
    for (const auto& [id, state] : tracks) {
      if (state.window.length() != window_len)
        throw std::logic_error("TrackStore: window length drift");
      if (state.misses >= max_misses) throw std::logic_error("TrackStore: dead track retained");
    }
  }
};

namespace detail {

inline int last_present_slot(const temporal::TrajectoryWindow& w) {
  for (int j = w.length() - 1; j >= 0; --j)
    if (w.present[j]) return j;
  return -1;
}

inline temporal::TrajectoryWindow fresh_window(std::int64_t id, int t, int dim) {
  temporal::TrajectoryWindow w;
  w.id = id;
  w.present.assign(t, 0);
  w.slots.assign(t, std::vector<double>(dim, 0.0));
  w.frames.assign(t, 0);
  return w;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na < 1e-24 || nb < 1e-24) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace detail

// Recomputes each track's matching representation: the temporally refined
// embedding at its most recent present slot (or the raw embedding when no
// adapter is configured).
inline void refresh_refined(TrackStore& store, const TrackerConfig& cfg) {
  ad::NoGradGuard nograd;
  for (auto& [id, state] : store.tracks) {
    const int j = detail::last_present_slot(state.window);
    if (j < 0) continue;
    if (cfg.ta != nullptr) {
      ad::Tensor refined = temporal::temporal_encode(*cfg.ta, state.window, cfg.missing_mode);
      const int dim = refined.dim(1);
      state.refined_latest.assign(
          refined.values().begin() + static_cast<std::size_t>(j) * dim,
          refined.values().begin() + static_cast<std::size_t>(j + 1) * dim);
    } else {
      state.refined_latest = state.window.slots[j];
    }
  }
}

// Cosine similarity + Hungarian assignment of current detections to live
// identities. Returns one entry per detection: the matched identity, or 0
// for a fresh id. Requires refreshed matching representations.
inline std::vector<std::int64_t> predict_ids(const std::vector<std::vector<double>>& embeddings,
                                             const TrackStore& store, double threshold) {
  std::vector<std::int64_t> out(embeddings.size(), 0);
  if (embeddings.empty() || store.tracks.empty()) return out;
  std::vector<std::int64_t> ids;
  ids.reserve(store.tracks.size());
  for (const auto& [id, state] : store.tracks)
    if (!state.refined_latest.empty()) ids.push_back(id);
  if (ids.empty()) return out;

  std::vector<std::vector<double>> cost(embeddings.size(), std::vector<double>(ids.size()));
  for (std::size_t d = 0; d < embeddings.size(); ++d)
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const double sim =
          detail::cosine(embeddings[d], store.tracks.at(ids[t]).refined_latest);
      cost[d][t] = sim >= threshold ? 1.0 - sim : geom::kForbiddenCost;
    }
  for (auto [d, t] : geom::hungarian(cost).pairs) {
    if (cost[d][t] >= geom::kForbiddenCost) continue;
    out[d] = ids[t];
  }
  return out;
}

// Applies one frame of assignments: matched identities append their new
// embedding, fresh detections are born, unmatched live identities take an
// [empty] slot and age toward retirement. Windows keep the last T slots.
inline void update_store(TrackStore& store, std::vector<std::int64_t>& assignments,
                         const std::vector<std::vector<double>>& embeddings, std::int64_t frame,
                         const TrackerConfig& cfg) {
  if (assignments.size() != embeddings.size())
    throw std::invalid_argument("update_store: assignment/embedding size mismatch");
  std::map<std::int64_t, char> matched;
  for (std::size_t d = 0; d < assignments.size(); ++d) {
    if (assignments[d] == 0) {
      const int dim = static_cast<int>(embeddings[d].size());
      assignments[d] = store.next_id++;
      auto& state = store.tracks[assignments[d]];
      state.window = detail::fresh_window(assignments[d], cfg.window, dim);
      state.misses = 0;
    }
    auto it = store.tracks.find(assignments[d]);
    if (it == store.tracks.end())
      throw std::invalid_argument("update_store: assignment to unknown identity");
    auto& w = it->second.window;
    w.slots.erase(w.slots.begin());
    w.present.erase(w.present.begin());
    w.frames.erase(w.frames.begin());
    w.slots.push_back(embeddings[d]);
    w.present.push_back(1);
    w.frames.push_back(frame);
    it->second.misses = 0;
    matched[assignments[d]] = 1;
  }
  std::vector<std::int64_t> dead;
  for (auto& [id, state] : store.tracks) {
    if (matched.count(id)) continue;
    auto& w = state.window;
    const std::size_t dim = w.slots.back().size();
    w.slots.erase(w.slots.begin());
    w.present.erase(w.present.begin());
    w.frames.erase(w.frames.begin());
    w.slots.emplace_back(dim, 0.0);
    w.present.push_back(0);
    w.frames.push_back(frame);
    ++state.misses;
    if (state.misses >= cfg.max_misses) dead.push_back(id);
  }
  for (auto id : dead) store.tracks.erase(id);
}

// One frame of tracker input.
struct FrameInput {
  std::int64_t frame = 0;
  std::vector<geom::Box2D> boxes;
  std::vector<double> scores;
  std::vector<std::vector<double>> embeddings;

  void validate() const {
    if (boxes.size() != scores.size() || boxes.size() != embeddings.size())
      throw std::invalid_argument("FrameInput: field sizes disagree");
  }
};

// Online tracking over an ordered sequence. Deterministic; every detection
// at or above the score threshold yields exactly one record.
inline std::vector<TrackRecord> track_sequence(const std::vector<FrameInput>& frames,
                                               const TrackerConfig& cfg) {
  std::vector<TrackRecord> records;
  TrackStore store;
  std::int64_t prev_frame = 0;
  for (const auto& input : frames) {
    input.validate();
    if (input.frame <= prev_frame)
      throw std::invalid_argument("track_sequence: frames must be strictly increasing");
    prev_frame = input.frame;

    std::vector<geom::Box2D> boxes;
    std::vector<double> scores;
    std::vector<std::vector<double>> embeddings;
    for (std::size_t d = 0; d < input.boxes.size(); ++d) {
      if (input.scores[d] < cfg.det_threshold) continue;
      boxes.push_back(input.boxes[d]);
      scores.push_back(input.scores[d]);
      embeddings.push_back(input.embeddings[d]);
    }

    refresh_refined(store, cfg);
    auto assignments = predict_ids(embeddings, store, cfg.similarity_threshold);
    update_store(store, assignments, embeddings, input.frame, cfg);
    for (std::size_t d = 0; d < boxes.size(); ++d)
      records.push_back(TrackRecord{input.frame, assignments[d], boxes[d], scores[d]});
  }
  return records;
}

}  // namespace fdta::track
