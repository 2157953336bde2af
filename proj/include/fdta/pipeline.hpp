#pragma once

// Training loop with the combined loss, window sampling with random
// temporal intervals, the shared embedding forward used by training and
// tracking, scenario import/export, and the analysis runners.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdta/identity.hpp"
#include "fdta/metrics.hpp"
#include "fdta/model.hpp"
#include "fdta/mot_io.hpp"
#include "fdta/simkit.hpp"
#include "fdta/tracker.hpp"

namespace fdta::pipe {

// ---------------------------------------------------------------------------
// Loss composition

// Softmax cross-entropy over candidate logits (id classification).
inline Tensor id_loss(const Tensor& logits, std::size_t target) {
  if (logits.rank() != 1 || logits.numel() == 0)
    throw std::invalid_argument("id_loss: nonempty logit vector expected");
  if (target >= logits.numel()) throw std::invalid_argument("id_loss: target out of range");
  return ad::sub(ad::logsumexp(logits), ad::gather(logits, {target}));
}

// Combined objective: det + lambda_id * id + lambda_depth * depth +
// lambda_ia * ia, where det is already the weighted detection sum.
inline double total_loss(double det, double id, double depth, double ia,
                         const LossWeights& w) {
  if (det < 0 || id < 0 || depth < 0 || ia < 0)
    throw std::invalid_argument("total_loss: components must be nonnegative");
  w.validate();
  return det + w.id * id + w.depth * depth + w.ia * ia;
}

inline Tensor total_loss_t(const Tensor& det, const Tensor& id, const Tensor& depth,
                           const Tensor& ia, const LossWeights& w) {
  Tensor total = det;
  total = ad::add(total, ad::smul(id, w.id));
  total = ad::add(total, ad::smul(depth, w.depth));
  return ad::add(total, ad::smul(ia, w.ia));
}

// Weighted detection loss per the standard decomposition.
inline Tensor detection_loss_t(const Tensor& cls, const Tensor& l1, const Tensor& giou,
                               const LossWeights& w) {
  return ad::add(ad::smul(cls, w.cls), ad::add(ad::smul(l1, w.bbox), ad::smul(giou, w.giou)));
}

// ---------------------------------------------------------------------------
// Sequence data

// One training/evaluation sequence. When depth_dir is set, depth grids load
// from DGRID1 files (and reads are counted); otherwise they render from the
// scenario on demand.
struct SequenceData {
  sim::Scenario scenario;
  std::string depth_dir;
};

inline std::vector<track::TrackRecord> gt_records(const sim::Scenario& scenario) {
  std::vector<track::TrackRecord> out;
  for (int f = 0; f < scenario.frames(); ++f)
    for (int o = 0; o < scenario.objects(); ++o)
      out.push_back(
          track::TrackRecord{f + 1, scenario.object_ids[o], scenario.truth[f][o].box, 1.0});
  return out;
}

inline std::string depth_grid_filename(int frame_1based) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06d.dgrid", frame_1based);
  return name;
}

inline std::vector<double> sequence_depth_grid(const SequenceData& seq, int frame, int grid,
                                               int* files_read) {
  if (!seq.depth_dir.empty()) {
    const std::string path =
        seq.depth_dir + "/" + depth_grid_filename(frame + 1);
    auto loaded = io::read_dgrid(path);
    if (loaded.rows != grid || loaded.cols != grid)
      throw io::DataError(path + ": depth grid resolution mismatch");
    if (files_read != nullptr) ++*files_read;
    return loaded.values;
  }
  return sim::render_depth_grid(seq.scenario, frame, grid, grid);
}

// ---------------------------------------------------------------------------
// Scenario config file ([sim] section) and directory layout

inline sim::ScenarioConfig scenario_config_from(const io::Config& cfg) {
  sim::ScenarioConfig sc;
  sc.n_objects = static_cast<int>(cfg.get_int("sim.n_objects", sc.n_objects));
  sc.n_frames = static_cast<int>(cfg.get_int("sim.n_frames", sc.n_frames));
  sc.arena_w = cfg.get_double("sim.arena_w", sc.arena_w);
  sc.arena_h = cfg.get_double("sim.arena_h", sc.arena_h);
  sc.preset = sim::preset_from_string(cfg.get_string("sim.preset", "crossing"));
  sc.occlusion_rate = cfg.get_double("sim.occlusion_rate", sc.occlusion_rate);
  sc.det_noise_sigma = cfg.get_double("sim.det_noise_sigma", sc.det_noise_sigma);
  sc.drop_prob = cfg.get_double("sim.drop_prob", sc.drop_prob);
  sc.appearance_dim = static_cast<int>(cfg.get_int("sim.appearance_dim", sc.appearance_dim));
  sc.appearance_cos = cfg.get_double("sim.appearance_cos", sc.appearance_cos);
  sc.appearance_noise = cfg.get_double("sim.appearance_noise", sc.appearance_noise);
  sc.seed = static_cast<std::uint64_t>(cfg.get_int("sim.seed", static_cast<std::int64_t>(sc.seed)));
  sc.box_base = cfg.get_double("sim.box_base", sc.box_base);
  sc.depth_near = cfg.get_double("sim.depth_near", sc.depth_near);
  sc.depth_span = cfg.get_double("sim.depth_span", sc.depth_span);
  sc.depth_id_step = cfg.get_double("sim.depth_id_step", sc.depth_id_step);
  sc.background_depth = cfg.get_double("sim.background_depth", sc.background_depth);
  return sc;
}

inline std::string scenario_config_text(const sim::ScenarioConfig& sc) {
  char buf[640];
  std::snprintf(buf, sizeof(buf),
                "[sim]\n"
                "n_objects=%d\nn_frames=%d\narena_w=%.6f\narena_h=%.6f\npreset=%s\n"
                "occlusion_rate=%.6f\ndet_noise_sigma=%.6f\ndrop_prob=%.6f\n"
                "appearance_dim=%d\nappearance_cos=%.6f\nappearance_noise=%.6f\n"
                "seed=%llu\nbox_base=%.6f\ndepth_near=%.6f\ndepth_span=%.6f\n"
                "depth_id_step=%.6f\nbackground_depth=%.6f\n",
                sc.n_objects, sc.n_frames, sc.arena_w, sc.arena_h, sim::preset_name(sc.preset),
                sc.occlusion_rate, sc.det_noise_sigma, sc.drop_prob, sc.appearance_dim,
                sc.appearance_cos, sc.appearance_noise,
                static_cast<unsigned long long>(sc.seed), sc.box_base, sc.depth_near,
                sc.depth_span, sc.depth_id_step, sc.background_depth);
  return buf;
}

// Writes gt.txt, det.txt, appearance.appr, depth/NNNNNN.dgrid, and
// scenario.cfg. Everything derives deterministically from the scenario.
inline void export_scenario(const sim::Scenario& scenario, const std::string& dir,
                            int depth_grid) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  fs::create_directories(dir + "/depth");
  io::write_mot(gt_records(scenario), dir + "/gt.txt");

  std::string det_text;
  char line[256];
  for (int f = 0; f < scenario.frames(); ++f)
    for (const auto& det : scenario.detections[f]) {
      std::snprintf(line, sizeof(line), "%d,-1,%.4f,%.4f,%.4f,%.4f,%.4f,-1,-1,-1\n", f + 1,
                    det.box.x, det.box.y, det.box.w, det.box.h, det.score);
      det_text += line;
    }
  io::write_text(dir + "/det.txt", det_text);
  io::write_appearance(scenario.appearance, dir + "/appearance.appr");
  for (int f = 0; f < scenario.frames(); ++f)
    io::write_dgrid(depth_grid, depth_grid,
                    sim::render_depth_grid(scenario, f, depth_grid, depth_grid),
                    dir + "/depth/" + depth_grid_filename(f + 1));
  io::write_text(dir + "/scenario.cfg", scenario_config_text(scenario.cfg));
}

// Loads a simulate-produced directory by regenerating the scenario from its
// stored config (bit-exact) and pointing depth reads at the exported grids.
inline SequenceData load_sequence(const std::string& dir) {
  SequenceData seq;
  seq.scenario = sim::generate_scenario(scenario_config_from(io::Config::load(dir + "/scenario.cfg")));
  if (std::filesystem::exists(dir + "/depth")) seq.depth_dir = dir + "/depth";
  return seq;
}

// ---------------------------------------------------------------------------
// Shared embedding forward

struct FrameForward {
  Tensor embeddings;  // [N(+bg) x D] refined embeddings
  std::optional<spatial::SpatialOutputs> sa_out;
  int n_real = 0;  // rows beyond n_real are background samples
};

// Toy-encoder + optional spatial fusion over one frame's observations.
// Background observations (random boxes, zero appearance) ride along for the
// classification head.
inline FrameForward frame_forward(const FdtaModel& model, const SequenceData& seq, int frame,
                                  const std::vector<const sim::Detection*>& dets,
                                  int background_samples, Rng* bg_rng) {
  const auto& scfg = seq.scenario.cfg;
  std::vector<std::vector<double>> obs;
  obs.reserve(dets.size() + background_samples);
  for (const auto* det : dets) obs.push_back(det->obs);
  if (background_samples > 0 && bg_rng != nullptr) {
    const std::vector<double> no_appearance(scfg.appearance_dim, 0.0);
    for (int b = 0; b < background_samples; ++b) {
      geom::Box2D box{bg_rng->uniform(0.0, scfg.arena_w * 0.8),
                      bg_rng->uniform(0.0, scfg.arena_h * 0.8),
                      bg_rng->uniform(1.0, scfg.box_base), bg_rng->uniform(1.0, scfg.box_base)};
      obs.push_back(sim::make_observation(scfg, box, no_appearance, frame + 1, *bg_rng));
    }
  }
  FrameForward out;
  out.n_real = static_cast<int>(dets.size());
  if (obs.empty()) return out;
  Tensor raw = sim::toy_encoder(model.encoder, obs);
  if (model.cfg.sa) {
    const int g = model.cfg.depth_grid;
    Tensor f8 = sim::render_features(seq.scenario, frame, g, g);
    Tensor f16 = sim::render_features(seq.scenario, frame, g / 2, g / 2);
    Tensor f32 = sim::render_features(seq.scenario, frame, g / 4, g / 4);
    out.sa_out = spatial::spatial_forward(model.sa, f8, f16, f32);
    out.embeddings = spatial::fuse_depth(model.sa, raw, *out.sa_out, model.cfg.sa_depth_pe);
  } else {
    out.embeddings = raw;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLosses {
  double total = 0, cls = 0, l1 = 0, giou = 0, id = 0, depth = 0, ia = 0;
};

struct TrainResult {
  std::vector<EpochLosses> curves;
  int depth_files_read = 0;
  std::int64_t ia_pairs = 0;
  std::int64_t steps = 0;
};

namespace detail {

struct SlotData {
  int frame = 0;  // 0-based scenario frame
  std::vector<const sim::Detection*> dets;
  std::vector<identity::LabeledEmbedding> raw_labels;  // aligned with dets
};

struct StepLosses {
  Tensor total, cls, l1, giou, id, depth, ia;
};

inline std::vector<int> plan_window(const sim::Scenario& scenario, const RunConfig& cfg,
                                    Rng& rng) {
  const int t = cfg.t_window;
  const int n = scenario.frames();
  int interval = rng.range(cfg.interval_min, cfg.interval_max);
  const int max_fit = t > 1 ? std::max(1, (n - 1) / (t - 1)) : 1;
  interval = std::min(interval, max_fit);
  const int span = (t - 1) * interval;
  const int max_start = std::max(0, n - 1 - span);
  const int start = max_start > 0 ? static_cast<int>(rng.below(max_start + 1)) : 0;
  std::vector<int> frames;
  frames.reserve(t);
  for (int k = 0; k < t; ++k) frames.push_back(std::min(start + k * interval, n - 1));
  return frames;
}

// One training window forward. All loss components come back as scalar
// tensors on a shared graph.
inline StepLosses forward_window(const FdtaModel& model, const SequenceData& seq,
                                 const std::vector<int>& frames, const RunConfig& cfg,
                                 bool ia_active, std::uint64_t step_seed, TrainResult& diag) {
  const auto& scenario = seq.scenario;
  const auto& scfg = scenario.cfg;
  const int t_len = static_cast<int>(frames.size());
  Rng step_rng(step_seed);

  // Label every slot against ground truth.
  std::vector<SlotData> slots(t_len);
  sim::TrainingBatch batch;
  batch.frames.resize(t_len);
  for (int t = 0; t < t_len; ++t) {
    slots[t].frame = frames[t];
    std::vector<geom::Box2D> det_boxes, gt_boxes;
    std::vector<std::int64_t> gt_ids;
    for (const auto& det : scenario.detections[frames[t]]) {
      slots[t].dets.push_back(&det);
      det_boxes.push_back(det.box);
    }
    for (int o = 0; o < scenario.objects(); ++o) {
      gt_boxes.push_back(scenario.truth[frames[t]][o].box);
      gt_ids.push_back(scenario.object_ids[o]);
    }
    slots[t].raw_labels =
        identity::label_frame(det_boxes, gt_boxes, gt_ids, frames[t] + 1, 0);
    for (const auto& label : slots[t].raw_labels) {
      sim::BatchSlot bslot;
      bslot.id = label.id;
      bslot.iou = label.iou;
      batch.frames[t].push_back(bslot);
    }
  }
  const sim::TrainingBatch aug =
      sim::augment_batch(batch, cfg.occlusion_prob, cfg.switch_prob, step_seed ^ 0xA06AULL);

  // Per-slot embeddings (+ depth loss when the spatial adapter is on).
  std::vector<FrameForward> forwards(t_len);
  std::vector<Tensor> depth_terms, cls_terms, l1_terms, giou_terms;
  auto bins = model.sa.bins;
  const auto pixel_order = spatial::patch_pixel_order(cfg.depth_grid, cfg.depth_grid, cfg.patch);
  for (int t = 0; t < t_len; ++t) {
    forwards[t] = frame_forward(model, seq, slots[t].frame, slots[t].dets,
                                cfg.background_samples, &step_rng);
    if (!forwards[t].embeddings.defined()) continue;

    if (cfg.sa) {
      auto grid = sequence_depth_grid(seq, slots[t].frame, cfg.depth_grid, &diag.depth_files_read);
      std::vector<geom::Box2D> gt_boxes;
      for (int o = 0; o < scenario.objects(); ++o)
        gt_boxes.push_back(scenario.truth[slots[t].frame][o].box);
      auto fg_grid = spatial::foreground_mask(gt_boxes, scfg.arena_w, scfg.arena_h,
                                              cfg.depth_grid, cfg.depth_grid);
      std::vector<int> targets(pixel_order.size());
      std::vector<std::uint8_t> fg(pixel_order.size());
      for (std::size_t i = 0; i < pixel_order.size(); ++i) {
        targets[i] = spatial::discretize_depth(grid[pixel_order[i]], bins);
        fg[i] = fg_grid[pixel_order[i]];
      }
      depth_terms.push_back(spatial::weighted_depth_loss_t(
          forwards[t].sa_out->depth_logits, targets, fg,
          cfg.sa_fg_weight ? cfg.fg_weight : 1.0));
    }

    // Classification: real detections are class 1, background class 0.
    const int rows = forwards[t].embeddings.dim(0);
    for (int r = 0; r < rows; ++r) {
      Tensor logits = nn::mlp_forward(model.cls_head, ad::pick_row(forwards[t].embeddings, r));
      const bool real = r < forwards[t].n_real;
      cls_terms.push_back(
          geom::focal_loss_logits_t(logits, real ? 1 : 0, real ? 0.25 : 0.75, 2.0));
    }

    // Box regression on matched detections.
    for (std::size_t d = 0; d < slots[t].raw_labels.size(); ++d) {
      const auto& label = slots[t].raw_labels[d];
      if (!label.id.has_value()) continue;
      const int gt_index = static_cast<int>(*label.id - 1);
      const auto& gt_box = scenario.truth[slots[t].frame][gt_index].box;
      Tensor pred = ad::sigmoid(
          nn::mlp_forward(model.box_head, ad::pick_row(forwards[t].embeddings,
                                                       static_cast<int>(d))));
      Tensor target = Tensor::leaf({4}, {gt_box.x / scfg.arena_w, gt_box.y / scfg.arena_h,
                                         gt_box.w / scfg.arena_w, gt_box.h / scfg.arena_h});
      l1_terms.push_back(geom::l1_box_loss_t(pred, target));
      giou_terms.push_back(geom::giou_loss_t(pred, target));
    }
  }

  // Identity windows from augmented labels.
  std::map<std::int64_t, std::vector<int>> slot_of_id;  // id -> det index per slot (-1 absent)
  for (int t = 0; t < t_len; ++t)
    for (std::size_t d = 0; d < aug.frames[t].size(); ++d) {
      const auto& bslot = aug.frames[t][d];
      if (!bslot.id.has_value()) continue;
      auto& slots_vec = slot_of_id[*bslot.id];
      if (slots_vec.empty()) slots_vec.assign(t_len, -1);
      if (slots_vec[t] < 0) slots_vec[t] = static_cast<int>(d);
    }

  std::map<std::int64_t, Tensor> ta_out;
  std::map<std::int64_t, std::vector<std::uint8_t>> presence;
  for (const auto& [id, det_of_slot] : slot_of_id) {
    std::vector<std::uint8_t> present(t_len, 0);
    std::vector<Tensor> row_storage;
    std::vector<const Tensor*> rows(t_len, nullptr);
    row_storage.reserve(t_len);
    for (int t = 0; t < t_len; ++t) {
      if (det_of_slot[t] < 0) continue;
      present[t] = 1;
      row_storage.push_back(ad::pick_row(forwards[t].embeddings, det_of_slot[t]));
    }
    std::size_t next = 0;
    for (int t = 0; t < t_len; ++t)
      if (present[t]) rows[t] = &row_storage[next++];
    presence[id] = present;
    if (cfg.ta)
      ta_out.emplace(id, temporal::temporal_encode(model.ta, present, rows, nullptr,
                                                   cfg.missing_mode));
    else if (!row_storage.empty()) {
      // Raw histories: stack present rows in slot order for indexed access.
      std::vector<Tensor> padded;
      padded.reserve(t_len);
      std::size_t k = 0;
      Tensor zero = Tensor::zeros({cfg.embed_dim});
      for (int t = 0; t < t_len; ++t)
        padded.push_back(present[t] ? row_storage[k++] : zero);
      ta_out.emplace(id, ad::concat_rows(padded));
    }
  }

  // ID prediction loss: each labeled detection against identities already
  // seen in the window, plus the "new object" class.
  std::vector<Tensor> id_terms;
  std::map<std::pair<std::int64_t, int>, Tensor> hist_cache;
  for (int t = 1; t < t_len; ++t) {
    for (std::size_t d = 0; d < aug.frames[t].size(); ++d) {
      const auto& bslot = aug.frames[t][d];
      if (!bslot.id.has_value()) continue;
      std::vector<std::int64_t> candidates;
      for (const auto& [id, present] : presence)
        for (int k = 0; k < t; ++k)
          if (present[k]) {
            candidates.push_back(id);
            break;
          }
      if (candidates.empty()) continue;
      Tensor det_norm = ad::l2_normalize(ad::pick_row(forwards[t].embeddings,
                                                      static_cast<int>(d)));
      std::vector<Tensor> logits;
      std::size_t target = candidates.size();  // default: the "new" class
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        const auto id = candidates[c];
        int last = -1;
        for (int k = 0; k < t; ++k)
          if (presence[id][k]) last = k;
        auto key = std::make_pair(id, last);
        auto it = hist_cache.find(key);
        if (it == hist_cache.end())
          it = hist_cache.emplace(key, ad::l2_normalize(ad::pick_row(ta_out.at(id), last))).first;
        logits.push_back(ad::smul(ad::dot(det_norm, it->second), 1.0 / cfg.tau_id));
        if (id == *bslot.id) target = c;
      }
      logits.push_back(ad::reshape(model.new_logit, {1}));
      id_terms.push_back(id_loss(ad::concat_vec(logits), target));
    }
  }

  // Quality-aware contrastive loss over the pooled (pre-augmentation)
  // labeled embeddings.
  Tensor ia_term = Tensor::scalar(0.0);
  if (cfg.ia && ia_active) {
    std::vector<Tensor> pool_rows;
    std::vector<identity::LabeledEmbedding> pool_labels;
    for (int t = 0; t < t_len; ++t)
      for (std::size_t d = 0; d < slots[t].raw_labels.size(); ++d) {
        const auto& label = slots[t].raw_labels[d];
        if (!label.id.has_value()) continue;
        auto copy = label;
        copy.embedding_index = pool_rows.size();
        pool_labels.push_back(copy);
        pool_rows.push_back(ad::pick_row(forwards[t].embeddings, static_cast<int>(d)));
      }
    if (!pool_labels.empty()) {
      auto pairs = identity::sample_pairs(pool_labels, cfg.iou_threshold, cfg.ia_iou_filter);
      diag.ia_pairs += static_cast<std::int64_t>(pairs.positives.size());
      if (!pairs.positives.empty()) {
        std::vector<Tensor> surviving;
        surviving.reserve(pairs.samples.size());
        for (const auto& s : pairs.samples) surviving.push_back(pool_rows[s.embedding_index]);
        ia_term = identity::ia_loss(ad::concat_rows(surviving), pairs, model.phi, cfg.tau,
                                    cfg.ia_cfe);
      }
    }
  }

  auto mean_of = [](std::vector<Tensor>& terms) {
    if (terms.empty()) return Tensor::scalar(0.0);
    return ad::mean(ad::concat_vec(terms));
  };
  StepLosses losses;
  losses.cls = mean_of(cls_terms);
  losses.l1 = mean_of(l1_terms);
  losses.giou = mean_of(giou_terms);
  losses.id = mean_of(id_terms);
  losses.depth = mean_of(depth_terms);
  losses.ia = ia_term;
  Tensor det = detection_loss_t(losses.cls, losses.l1, losses.giou, cfg.weights);
  losses.total = total_loss_t(det, losses.id, losses.depth, losses.ia, cfg.weights);
  return losses;
}

}  // namespace detail

// Window-sampled training over the provided sequences. Deterministic per
// (config, seed); the contrastive loss is disabled during warm-up epochs.
inline TrainResult train_toy(FdtaModel& model, const std::vector<SequenceData>& data,
                             const RunConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_toy: need at least one scenario");
  cfg.validate();
  TrainResult result;
  AdamW optimizer(model.params, cfg.lr, cfg.weight_decay);
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool ia_active = epoch > cfg.ia_warmup_epochs;
    EpochLosses acc;
    int steps_in_epoch = 0;
    for (std::size_t s = 0; s < data.size(); ++s) {
      for (int w = 0; w < cfg.windows_per_epoch; ++w) {
        ++step;
        Rng window_rng(cfg.seed * 1000003ULL + step);
        auto frames = detail::plan_window(data[s].scenario, cfg, window_rng);
        detail::StepLosses losses;
        try {
          losses = detail::forward_window(model, data[s], frames, cfg, ia_active,
                                          cfg.seed ^ (step * 0x9E3779B97F4A7C15ULL), result);
          model.params.zero_grad();
          losses.total.backward();
        } catch (const std::runtime_error& e) {
          throw std::runtime_error("train_toy: aborted at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(step) + ": " + e.what());
        }
        optimizer.step();
        acc.total += losses.total.scalar_value();
        acc.cls += losses.cls.scalar_value();
        acc.l1 += losses.l1.scalar_value();
        acc.giou += losses.giou.scalar_value();
        acc.id += losses.id.scalar_value();
        acc.depth += losses.depth.scalar_value();
        acc.ia += losses.ia.scalar_value();
        ++steps_in_epoch;
        ++result.steps;
      }
    }
    const double n = std::max(1, steps_in_epoch);
    result.curves.push_back(EpochLosses{acc.total / n, acc.cls / n, acc.l1 / n, acc.giou / n,
                                        acc.id / n, acc.depth / n, acc.ia / n});
  }
  return result;
}

inline std::string curves_csv(const TrainResult& result) {
  std::string out = "epoch,total,cls,l1,giou,id,depth,ia\n";
  char line[256];
  for (std::size_t e = 0; e < result.curves.size(); ++e) {
    const auto& c = result.curves[e];
    std::snprintf(line, sizeof(line), "%zu,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f\n", e + 1, c.total,
                  c.cls, c.l1, c.giou, c.id, c.depth, c.ia);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference: tracking and analysis

// Refined embeddings for every frame of a sequence (no tape).
inline std::vector<track::FrameInput> compute_frame_inputs(const FdtaModel& model,
                                                           const SequenceData& seq) {
  ad::NoGradGuard nograd;
  std::vector<track::FrameInput> inputs;
  inputs.reserve(seq.scenario.frames());
  for (int f = 0; f < seq.scenario.frames(); ++f) {
    track::FrameInput input;
    input.frame = f + 1;
    std::vector<const sim::Detection*> dets;
    for (const auto& det : seq.scenario.detections[f]) {
      dets.push_back(&det);
      input.boxes.push_back(det.box);
      input.scores.push_back(det.score);
    }
    if (!dets.empty()) {
      auto fwd = frame_forward(model, seq, f, dets, 0, nullptr);
      const int dim = fwd.embeddings.dim(1);
      for (int r = 0; r < fwd.embeddings.dim(0); ++r)
        input.embeddings.emplace_back(
            fwd.embeddings.values().begin() + static_cast<std::size_t>(r) * dim,
            fwd.embeddings.values().begin() + static_cast<std::size_t>(r + 1) * dim);
    }
    inputs.push_back(std::move(input));
  }
  return inputs;
}

inline track::TrackerConfig tracker_config_from(const FdtaModel& model) {
  track::TrackerConfig tc;
  tc.window = model.cfg.t_window;
  tc.similarity_threshold = model.cfg.sim_threshold;
  tc.max_misses = model.cfg.max_misses;
  tc.det_threshold = model.cfg.det_threshold;
  tc.missing_mode = model.cfg.missing_mode;
  tc.ta = model.cfg.ta ? &model.ta : nullptr;
  return tc;
}

inline std::vector<track::TrackRecord> run_tracking(const FdtaModel& model,
                                                    const SequenceData& seq) {
  return track::track_sequence(compute_frame_inputs(model, seq), tracker_config_from(model));
}

// Per-frame refined embedding sets for the similarity analyses.
inline std::vector<std::vector<std::vector<double>>> embedding_frames(
    const FdtaModel& model, const SequenceData& seq) {
  std::vector<std::vector<std::vector<double>>> frames;
  for (auto& input : compute_frame_inputs(model, seq)) frames.push_back(std::move(input.embeddings));
  return frames;
}

inline metrics::Histogram analyze_similarities(const FdtaModel& model,
                                               const std::vector<SequenceData>& data, int k = 3) {
  std::vector<std::vector<std::vector<double>>> all_frames;
  for (const auto& seq : data)
    for (auto& frame : embedding_frames(model, seq)) all_frames.push_back(std::move(frame));
  return metrics::top_k_similarity_distribution(all_frames, k);
}

}  // namespace fdta::pipe
