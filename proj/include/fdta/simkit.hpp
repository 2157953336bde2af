#pragma once

// Synthetic scenario generator and differentiable toy encoder: multi-object
// 2D scenes with depth ground truth, appearance codes, occlusions, detection
// noise, and the trajectory-level training augmentations. Everything is a
// pure function of (config, seed).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdta/autodiff.hpp"
#include "fdta/geometry.hpp"
#include "fdta/nn.hpp"
#include "fdta/rng.hpp"

namespace fdta::sim {

using geom::Box2D;

enum class MotionPreset { Linear, Crossing, Circular, RandomWalk };

inline MotionPreset preset_from_string(const std::string& s) {
  if (s == "linear") return MotionPreset::Linear;
  if (s == "crossing") return MotionPreset::Crossing;
  if (s == "circular") return MotionPreset::Circular;
  if (s == "random-walk" || s == "random_walk") return MotionPreset::RandomWalk;
  throw std::invalid_argument("unknown motion preset: " + s);
}

inline const char* preset_name(MotionPreset p) {
  switch (p) {
    case MotionPreset::Linear: return "linear";
    case MotionPreset::Crossing: return "crossing";
    case MotionPreset::Circular: return "circular";
    case MotionPreset::RandomWalk: return "random-walk";
  }
  return "?";
}

struct ScenarioConfig {
  int n_objects = 8;
  int n_frames = 200;
  double arena_w = 64.0;
  double arena_h = 64.0;
  MotionPreset preset = MotionPreset::Crossing;
  double occlusion_rate = 0.0;   // chance the farther of two overlapping objects is missed
  double det_noise_sigma = 0.0;  // Gaussian box jitter, arena units
  double drop_prob = 0.0;        // independent detection drops
  int appearance_dim = 16;
  double appearance_cos = 0.0;   // base inter-identity cosine ("identical clothing" knob)
  double appearance_noise = 0.05;
  std::uint64_t seed = 1;

  // Geometry of the rendered world.
  double box_base = 7.0;         // nominal box side at reference depth
  double depth_near = 4.0;       // depth at the top of the arena
  double depth_span = 20.0;      // added across the arena height
  double depth_id_step = 1.0;    // per-identity depth offset
  double background_depth = 256.0;
};

struct ObjectTruth {
  Box2D box;
  double depth = 0.0;
};

struct Detection {
  Box2D box;
  double score = 1.0;
  int src_object = -1;             // index into object_ids
  std::vector<double> obs;         // toy-encoder observation vector
};

struct Scenario {
  ScenarioConfig cfg;
  std::vector<std::int64_t> object_ids;                // stable, 1-based
  std::vector<std::vector<double>> appearance;         // unit code per object
  std::vector<std::vector<ObjectTruth>> truth;         // [frame][object]
  std::vector<std::vector<Detection>> detections;      // [frame][...]

  int frames() const { return static_cast<int>(truth.size()); }
  int objects() const { return static_cast<int>(object_ids.size()); }
};

inline int observation_dim(const ScenarioConfig& cfg) {
  return 4 + cfg.appearance_dim + 1 + 3;  // box, appearance, time, noise
}

namespace detail {

inline double apparent_scale(double depth) { return std::sqrt(8.0 / std::max(depth, 1.0)); }

inline double object_depth(const ScenarioConfig& cfg, int obj, double cy) {
  return cfg.depth_near + cfg.depth_span * (cy / cfg.arena_h) + cfg.depth_id_step * obj;
}

inline Box2D box_at(const ScenarioConfig& cfg, int obj, double cx, double cy) {
  const double depth = object_depth(cfg, obj, cy);
  const double side = cfg.box_base * apparent_scale(depth);
  return Box2D{cx - side / 2.0, cy - side / 2.0, side, side};
}

}  // namespace detail

// Observation fed to the toy encoder: normalized box, appearance code with
// per-observation noise, normalized time, and a noise channel.
inline std::vector<double> make_observation(const ScenarioConfig& cfg, const Box2D& box,
                                            const std::vector<double>& appearance, int frame,
                                            Rng& rng) {
  std::vector<double> obs;
  obs.reserve(observation_dim(cfg));
  obs.push_back(box.x / cfg.arena_w);
  obs.push_back(box.y / cfg.arena_h);
  obs.push_back(box.w / cfg.arena_w);
  obs.push_back(box.h / cfg.arena_h);
  for (double a : appearance) obs.push_back(a + cfg.appearance_noise * rng.gaussian());
  obs.push_back(static_cast<double>(frame) / std::max(1, cfg.n_frames));
  for (int i = 0; i < 3; ++i) obs.push_back(0.1 * rng.gaussian());
  return obs;
}

// Re-derives detections from ground truth with jitter and drops. sigma=0 and
// drop=0 reproduce the GT boxes exactly.
inline std::vector<std::vector<Detection>> corrupt_detections(const Scenario& scenario,
                                                              double sigma_box, double drop_prob,
                                                              std::uint64_t seed) {
  if (sigma_box < 0.0) throw std::invalid_argument("corrupt_detections: sigma must be >= 0");
  if (drop_prob < 0.0 || drop_prob >= 1.0)
    throw std::invalid_argument("corrupt_detections: drop_prob must be in [0, 1)");
  const auto& cfg = scenario.cfg;
  Rng rng(seed);
  Rng occ_rng(seed ^ 0x5bd1e995ULL);
  std::vector<std::vector<Detection>> out(scenario.frames());
  for (int f = 0; f < scenario.frames(); ++f) {
    // Depth-based occlusion: the farther of two heavily overlapping objects
    // may go undetected.
    std::vector<char> suppressed(scenario.objects(), 0);
    if (cfg.occlusion_rate > 0.0) {
      for (int a = 0; a < scenario.objects(); ++a)
        for (int b = a + 1; b < scenario.objects(); ++b) {
          const auto& ta = scenario.truth[f][a];
          const auto& tb = scenario.truth[f][b];
          if (geom::iou(ta.box, tb.box) <= 0.5) continue;
          if (!occ_rng.bernoulli(cfg.occlusion_rate)) continue;
          suppressed[ta.depth >= tb.depth ? a : b] = 1;
        }
    }
    for (int o = 0; o < scenario.objects(); ++o) {
      if (suppressed[o]) continue;
      if (drop_prob > 0.0 && rng.bernoulli(drop_prob)) continue;
      const auto& truth = scenario.truth[f][o];
      Detection det;
      det.src_object = o;
      det.box = truth.box;
      if (sigma_box > 0.0) {
        det.box.x += sigma_box * rng.gaussian();
        det.box.y += sigma_box * rng.gaussian();
        det.box.w = std::max(0.5, det.box.w + sigma_box * rng.gaussian());
        det.box.h = std::max(0.5, det.box.h + sigma_box * rng.gaussian());
      }
      det.score = 1.0;
      det.obs = make_observation(cfg, det.box, scenario.appearance[o], f + 1, rng);
      out[f].push_back(det);
    }
  }
  return out;
}

// Deterministic scene synthesis. The crossing preset drives object pairs
// through shared crossing points near mid-sequence and verifies that an
// overlap frame (IoU > 0.3) exists.
inline Scenario generate_scenario(const ScenarioConfig& cfg) {
  if (cfg.n_objects < 1) throw std::invalid_argument("generate_scenario: need n_objects >= 1");
  if (cfg.n_frames < 1) throw std::invalid_argument("generate_scenario: need n_frames >= 1");
  const double margin = cfg.box_base * 1.5;
  if (cfg.arena_w < margin * 2.0 + cfg.n_objects || cfg.arena_h < margin * 2.0 + 2.0)
    throw std::invalid_argument("generate_scenario: arena too small for n_objects");

  Scenario scenario;
  scenario.cfg = cfg;
  Rng rng(cfg.seed);

  // Appearance codes: shared base direction plus per-identity residual with
  // configurable base cosine.
  const std::vector<double> base = rng.unit_vector(cfg.appearance_dim);
  const double c = std::clamp(cfg.appearance_cos, 0.0, 0.999);
  for (int o = 0; o < cfg.n_objects; ++o) {
    scenario.object_ids.push_back(o + 1);
    auto residual = rng.unit_vector(cfg.appearance_dim);
    std::vector<double> code(cfg.appearance_dim);
    double n2 = 0.0;
    for (int i = 0; i < cfg.appearance_dim; ++i) {
      code[i] = std::sqrt(c) * base[i] + std::sqrt(1.0 - c) * residual[i];
      n2 += code[i] * code[i];
    }
    for (auto& x : code) x /= std::sqrt(n2);
    scenario.appearance.push_back(std::move(code));
  }

  const double cx0 = cfg.arena_w / 2.0, cy0 = cfg.arena_h / 2.0;
  const double rx = cfg.arena_w / 2.0 - margin;
  const double ry = cfg.arena_h / 2.0 - margin;

  struct State {
    double x, y, vx, vy;
  };
  std::vector<State> states(cfg.n_objects);

  switch (cfg.preset) {
    case MotionPreset::Linear: {
      for (auto& s : states) {
        s.x = rng.uniform(margin, cfg.arena_w - margin);
        s.y = rng.uniform(margin, cfg.arena_h - margin);
        const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double speed = (rx + ry) / cfg.n_frames * rng.uniform(0.6, 1.4);
        s.vx = speed * std::cos(angle);
        s.vy = speed * std::sin(angle);
      }
      break;
    }
    case MotionPreset::Crossing: {
      // Pair 2i with 2i+1 on opposite sides of a shared crossing point.
      for (int o = 0; o < cfg.n_objects; ++o) {
        const int pair = o / 2;
        const double angle = 2.0 * 3.14159265358979323846 * pair / std::max(1, (cfg.n_objects + 1) / 2) +
                             rng.uniform(-0.08, 0.08);
        const double px = cx0 + rng.uniform(-0.08, 0.08) * rx;  // crossing point
        const double py = cy0 + rng.uniform(-0.08, 0.08) * ry;
        const double dirx = std::cos(angle) * (o % 2 == 0 ? 1.0 : -1.0);
        const double diry = std::sin(angle) * (o % 2 == 0 ? 1.0 : -1.0);
        const double reach = std::min(rx, ry);
        const double t_cross = cfg.n_frames * (0.4 + 0.2 * (pair % 3) / 3.0);
        states[o].x = px + dirx * reach;
        states[o].y = py + diry * reach;
        states[o].vx = -dirx * reach / t_cross;
        states[o].vy = -diry * reach / t_cross;
      }
      break;
    }
    case MotionPreset::Circular: {
      for (int o = 0; o < cfg.n_objects; ++o) {
        const double phase = 2.0 * 3.14159265358979323846 * o / cfg.n_objects;
        const double radius = std::min(rx, ry) * (0.35 + 0.6 * (o % 3) / 3.0);
        // Store polar parameters in the state; integrate below.
        states[o].x = radius;
        states[o].y = phase;
        states[o].vx = 2.0 * 3.14159265358979323846 * rng.uniform(0.6, 1.3) / cfg.n_frames;
        states[o].vy = 0.0;
      }
      break;
    }
    case MotionPreset::RandomWalk: {
      for (auto& s : states) {
        s.x = rng.uniform(margin, cfg.arena_w - margin);
        s.y = rng.uniform(margin, cfg.arena_h - margin);
        s.vx = rng.gaussian() * 0.3;
        s.vy = rng.gaussian() * 0.3;
      }
      break;
    }
  }

  scenario.truth.assign(cfg.n_frames, {});
  for (int f = 0; f < cfg.n_frames; ++f) {
    auto& frame_truth = scenario.truth[f];
    frame_truth.resize(cfg.n_objects);
    for (int o = 0; o < cfg.n_objects; ++o) {
      auto& s = states[o];
      double cx, cy;
      if (cfg.preset == MotionPreset::Circular) {
        cx = cx0 + s.x * std::cos(s.y);
        cy = cy0 + s.x * std::sin(s.y) * (ry / rx);
        s.y += s.vx;
      } else {
        cx = s.x;
        cy = s.y;
        if (cfg.preset == MotionPreset::RandomWalk) {
          s.vx += rng.gaussian() * 0.15;
          s.vy += rng.gaussian() * 0.15;
          const double speed = std::hypot(s.vx, s.vy);
          const double cap = 1.2;
          if (speed > cap) {
            s.vx *= cap / speed;
            s.vy *= cap / speed;
          }
        }
        s.x += s.vx;
        s.y += s.vy;
        // Reflect at the margins.
        if (s.x < margin) { s.x = 2 * margin - s.x; s.vx = -s.vx; }
        if (s.x > cfg.arena_w - margin) { s.x = 2 * (cfg.arena_w - margin) - s.x; s.vx = -s.vx; }
        if (s.y < margin) { s.y = 2 * margin - s.y; s.vy = -s.vy; }
        if (s.y > cfg.arena_h - margin) { s.y = 2 * (cfg.arena_h - margin) - s.y; s.vy = -s.vy; }
      }
      cx = std::clamp(cx, margin, cfg.arena_w - margin);
      cy = std::clamp(cy, margin, cfg.arena_h - margin);
      ObjectTruth truth;
      truth.box = detail::box_at(cfg, o, cx, cy);
      truth.depth = detail::object_depth(cfg, o, cy);
      frame_truth[o] = truth;
    }
  }

  if (cfg.preset == MotionPreset::Crossing && cfg.n_objects >= 2) {
    bool found = false;
    for (int f = 0; f < cfg.n_frames && !found; ++f)
      for (int a = 0; a < cfg.n_objects && !found; ++a)
        for (int b = a + 1; b < cfg.n_objects; ++b)
          if (geom::iou(scenario.truth[f][a].box, scenario.truth[f][b].box) > 0.3) {
            found = true;
            break;
          }
    if (!found) throw std::logic_error("generate_scenario: crossing preset produced no overlap");
  }

  scenario.detections =
      corrupt_detections(scenario, cfg.det_noise_sigma, cfg.drop_prob, cfg.seed ^ 0x9E3779B9ULL);
  return scenario;
}

// ---------------------------------------------------------------------------
// Rendering (pure functions of scenario + frame)

// Physical depth per grid cell; nearer objects win, uncovered cells hold the
// background depth. Coverage is cell-center-in-box.
inline std::vector<double> render_depth_grid(const Scenario& scenario, int frame, int grid_h,
                                             int grid_w) {
  const auto& cfg = scenario.cfg;
  std::vector<double> grid(static_cast<std::size_t>(grid_h) * grid_w, cfg.background_depth);
  const auto& truth = scenario.truth.at(frame);
  for (int i = 0; i < grid_h; ++i) {
    const double cy = (i + 0.5) * cfg.arena_h / grid_h;
    for (int j = 0; j < grid_w; ++j) {
      const double cx = (j + 0.5) * cfg.arena_w / grid_w;
      double& cell = grid[static_cast<std::size_t>(i) * grid_w + j];
      for (const auto& t : truth) {
        if (cx < t.box.x || cx > t.box.x2() || cy < t.box.y || cy > t.box.y2()) continue;
        cell = std::min(cell, t.depth);
      }
    }
  }
  return grid;
}

// Toy visual features at one pyramid level: occupancy, appearance intensity
// of the nearest covering object, apparent-size cue, and a vertical
// gradient. Channels = 4.
inline ad::Tensor render_features(const Scenario& scenario, int frame, int grid_h, int grid_w) {
  constexpr int kChannels = 4;
  const auto& cfg = scenario.cfg;
  const auto& truth = scenario.truth.at(frame);
  std::vector<double> grid(static_cast<std::size_t>(grid_h) * grid_w * kChannels, 0.0);
  for (int i = 0; i < grid_h; ++i) {
    const double cy = (i + 0.5) * cfg.arena_h / grid_h;
    for (int j = 0; j < grid_w; ++j) {
      const double cx = (j + 0.5) * cfg.arena_w / grid_w;
      double nearest_depth = std::numeric_limits<double>::infinity();
      int nearest = -1;
      for (int o = 0; o < static_cast<int>(truth.size()); ++o) {
        const auto& t = truth[o];
        if (cx < t.box.x || cx > t.box.x2() || cy < t.box.y || cy > t.box.y2()) continue;
        if (t.depth < nearest_depth) {
          nearest_depth = t.depth;
          nearest = o;
        }
      }
      double* cell = &grid[(static_cast<std::size_t>(i) * grid_w + j) * kChannels];
      if (nearest >= 0) {
        cell[0] = 1.0;
        cell[1] = scenario.appearance[nearest][0];
        cell[2] = truth[nearest].box.h / cfg.arena_h * 4.0;
      }
      cell[3] = cy / cfg.arena_h;
    }
  }
  return ad::Tensor::leaf({grid_h, grid_w, kChannels}, std::move(grid));
}

inline constexpr int kFeatureChannels = 4;

// ---------------------------------------------------------------------------
// Training batch augmentation

// Per-detection training label within a sampled window.
struct BatchSlot {
  std::optional<std::int64_t> id;
  double iou = 0.0;
};

// Labels for one sampled window: frames()[t][d] labels detection d of window
// slot t. Augmentation rewrites labels only; evaluation GT stays untouched.
struct TrainingBatch {
  std::vector<std::vector<BatchSlot>> frames;
};

// Trajectory occlusion: labeled slots become unlabeled with probability
// occlusion_prob, but each identity keeps its first (anchor) occurrence.
// Identity switching: two co-present identities swap labels over a
// contiguous span.
inline TrainingBatch augment_batch(const TrainingBatch& batch, double occlusion_prob,
                                   double switch_prob, std::uint64_t seed) {
  if (occlusion_prob < 0.0 || occlusion_prob >= 1.0 + 1e-12 || switch_prob < 0.0 ||
      switch_prob >= 1.0 + 1e-12)
    throw std::invalid_argument("augment_batch: probabilities must be in [0, 1)");
  TrainingBatch out = batch;
  Rng rng(seed);
  const int t_total = static_cast<int>(out.frames.size());

  // Occlusion.
  if (occlusion_prob > 0.0) {
    std::vector<std::int64_t> seen;
    for (auto& frame : out.frames)
      for (auto& slot : frame) {
        if (!slot.id.has_value()) continue;
        const bool anchor =
            std::find(seen.begin(), seen.end(), *slot.id) == seen.end();
        if (anchor) {
          seen.push_back(*slot.id);
          continue;
        }
        if (rng.bernoulli(occlusion_prob)) slot.id.reset();
      }
  }

  // Switching.
  if (switch_prob > 0.0) {
    for (int f = 0; f < t_total; ++f) {
      if (!rng.bernoulli(switch_prob)) continue;
      std::vector<std::int64_t> present;
      for (const auto& slot : out.frames[f])
        if (slot.id.has_value()) present.push_back(*slot.id);
      if (present.size() < 2) continue;
      const std::int64_t a = present[rng.below(present.size())];
      std::int64_t b = a;
      while (b == a) b = present[rng.below(present.size())];
      const int max_span = std::min(8, t_total - f);
      const int span = max_span < 2 ? 1 : rng.range(2, max_span);
      for (int g = f; g < f + span && g < t_total; ++g)
        for (auto& slot : out.frames[g]) {
          if (!slot.id.has_value()) continue;
          if (*slot.id == a)
            slot.id = b;
          else if (*slot.id == b)
            slot.id = a;
        }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy encoder

// Stand-in for the detector backbone: a dense stack over the observation
// vectors, one embedding row per detection.
inline ad::Tensor toy_encoder(const nn::Mlp& encoder,
                              const std::vector<std::vector<double>>& observations) {
  if (observations.empty()) throw std::invalid_argument("toy_encoder: no observations");
  const int n = static_cast<int>(observations.size());
  const int in_dim = static_cast<int>(observations.front().size());
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(n) * in_dim);
  for (const auto& obs : observations) {
    if (static_cast<int>(obs.size()) != in_dim)
      throw std::invalid_argument("toy_encoder: ragged observations");
    flat.insert(flat.end(), obs.begin(), obs.end());
  }
  return nn::mlp_forward(encoder, ad::Tensor::leaf({n, in_dim}, std::move(flat)));
}

}  // namespace fdta::sim
