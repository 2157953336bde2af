#pragma once

// Run configuration, the assembled model (toy encoder, detection heads, and
// the three adapters), the AdamW optimizer, and binary checkpointing.

#include <cstdint>
#include <cstdlib>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdta/identity.hpp"
#include "fdta/mot_io.hpp"
#include "fdta/nn.hpp"
#include "fdta/simkit.hpp"
#include "fdta/spatial.hpp"
#include "fdta/temporal.hpp"

namespace fdta::pipe {

using ad::Tensor;

struct LossWeights {
  double cls = 2.0;
  double bbox = 5.0;
  double giou = 2.0;
  double id = 1.0;
  double depth = 1.0;
  double ia = 1.0;

  void validate() const {
    if (cls < 0 || bbox < 0 || giou < 0 || id < 0 || depth < 0 || ia < 0)
      throw std::invalid_argument("LossWeights: weights must be nonnegative");
  }
};

struct RunConfig {
  // Adapter toggles and ablation sub-toggles.
  bool sa = true, ta = true, ia = true;
  bool sa_depth_pe = true;
  bool sa_fg_weight = true;
  temporal::MissingMode missing_mode = temporal::MissingMode::Mask;
  bool ia_cfe = true;
  bool ia_iou_filter = true;

  // Model dimensions.
  int embed_dim = 64;
  int heads = 2;
  int ffn_dim = 128;
  int t_window = 30;    // T
  int ta_layers = 6;    // L
  int depth_grid = 32;  // feature grid resolution (square)
  int patch = 8;
  int depth_bins = 12;  // K
  int pe_entries = 64;  // N_pe
  int sa_enc_layers = 2;
  int fusion_layers = 2;
  double d_min = 1e-3;
  double d_max = 256.0;

  // Losses and training.
  double tau = 0.1;     // IA temperature
  double tau_id = 1.0;  // id-logit temperature
  double fg_weight = 7.0;
  double iou_threshold = 0.5;
  int epochs = 10;
  int windows_per_epoch = 2;  // sampled windows per scenario per epoch
  int ia_warmup_epochs = 1;
  int interval_min = 1, interval_max = 4;
  double lr = 1e-4;
  double weight_decay = 5e-4;
  double occlusion_prob = 0.0;  // trajectory occlusion augmentation
  double switch_prob = 0.0;     // identity switching augmentation
  int background_samples = 2;   // negatives per frame for the class head
  std::uint64_t seed = 1;
  LossWeights weights;

  // Tracker.
  double sim_threshold = 0.3;
  int max_misses = 30;
  double det_threshold = 0.5;

  void validate() const {
    weights.validate();
    if (ta && t_window < 2) throw std::invalid_argument("RunConfig: T must be >= 2 with TA on");
    if (embed_dim % heads != 0)
      throw std::invalid_argument("RunConfig: heads must divide embed_dim");
    if (depth_grid % patch != 0 || (depth_grid / 2) % 2 != 0)
      throw std::invalid_argument("RunConfig: patch must divide depth_grid and pyramid halves");
    if (tau <= 0 || tau_id <= 0) throw std::invalid_argument("RunConfig: temperatures > 0");
    if (fg_weight < 1) throw std::invalid_argument("RunConfig: fg_weight >= 1");
  }
};

inline temporal::MissingMode missing_mode_from_string(const std::string& s) {
  if (s == "mask") return temporal::MissingMode::Mask;
  if (s == "zero-vector" || s == "zero_vector") return temporal::MissingMode::ZeroVector;
  if (s == "off") return temporal::MissingMode::Off;
  throw io::DataError("unknown missing-mask mode: " + s);
}

// Reads a RunConfig from a parsed key=value file; FDTA_SEED overrides the
// configured seed when set.
inline RunConfig run_config_from(const io::Config& cfg) {
  RunConfig rc;
  rc.sa = cfg.get_bool("adapters.sa", rc.sa);
  rc.ta = cfg.get_bool("adapters.ta", rc.ta);
  rc.ia = cfg.get_bool("adapters.ia", rc.ia);
  rc.sa_depth_pe = cfg.get_bool("adapters.depth_pe", rc.sa_depth_pe);
  rc.sa_fg_weight = cfg.get_bool("adapters.fg_weight_on", rc.sa_fg_weight);
  rc.missing_mode =
      missing_mode_from_string(cfg.get_string("adapters.missing_mode", "mask"));
  rc.ia_cfe = cfg.get_bool("adapters.cfe", rc.ia_cfe);
  rc.ia_iou_filter = cfg.get_bool("adapters.iou_filter", rc.ia_iou_filter);

  rc.embed_dim = static_cast<int>(cfg.get_int("model.embed_dim", rc.embed_dim));
  rc.heads = static_cast<int>(cfg.get_int("model.heads", rc.heads));
  rc.ffn_dim = static_cast<int>(cfg.get_int("model.ffn_dim", rc.ffn_dim));
  rc.t_window = static_cast<int>(cfg.get_int("model.t_window", rc.t_window));
  rc.ta_layers = static_cast<int>(cfg.get_int("model.ta_layers", rc.ta_layers));
  rc.depth_grid = static_cast<int>(cfg.get_int("model.depth_grid", rc.depth_grid));
  rc.patch = static_cast<int>(cfg.get_int("model.patch", rc.patch));
  rc.depth_bins = static_cast<int>(cfg.get_int("model.depth_bins", rc.depth_bins));
  rc.pe_entries = static_cast<int>(cfg.get_int("model.pe_entries", rc.pe_entries));
  rc.sa_enc_layers = static_cast<int>(cfg.get_int("model.sa_enc_layers", rc.sa_enc_layers));
  rc.fusion_layers = static_cast<int>(cfg.get_int("model.fusion_layers", rc.fusion_layers));
  rc.d_min = cfg.get_double("model.d_min", rc.d_min);
  rc.d_max = cfg.get_double("model.d_max", rc.d_max);

  rc.tau = cfg.get_double("train.tau", rc.tau);
  rc.tau_id = cfg.get_double("train.tau_id", rc.tau_id);
  rc.fg_weight = cfg.get_double("train.fg_weight", rc.fg_weight);
  rc.iou_threshold = cfg.get_double("train.iou_threshold", rc.iou_threshold);
  rc.epochs = static_cast<int>(cfg.get_int("train.epochs", rc.epochs));
  rc.windows_per_epoch =
      static_cast<int>(cfg.get_int("train.windows_per_epoch", rc.windows_per_epoch));
  rc.ia_warmup_epochs =
      static_cast<int>(cfg.get_int("train.ia_warmup_epochs", rc.ia_warmup_epochs));
  rc.interval_min = static_cast<int>(cfg.get_int("train.interval_min", rc.interval_min));
  rc.interval_max = static_cast<int>(cfg.get_int("train.interval_max", rc.interval_max));
  rc.lr = cfg.get_double("train.lr", rc.lr);
  rc.weight_decay = cfg.get_double("train.weight_decay", rc.weight_decay);
  rc.occlusion_prob = cfg.get_double("train.occlusion_prob", rc.occlusion_prob);
  rc.switch_prob = cfg.get_double("train.switch_prob", rc.switch_prob);
  rc.background_samples =
      static_cast<int>(cfg.get_int("train.background_samples", rc.background_samples));
  rc.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", static_cast<std::int64_t>(rc.seed)));

  rc.weights.cls = cfg.get_double("loss.cls", rc.weights.cls);
  rc.weights.bbox = cfg.get_double("loss.bbox", rc.weights.bbox);
  rc.weights.giou = cfg.get_double("loss.giou", rc.weights.giou);
  rc.weights.id = cfg.get_double("loss.id", rc.weights.id);
  rc.weights.depth = cfg.get_double("loss.depth", rc.weights.depth);
  rc.weights.ia = cfg.get_double("loss.ia", rc.weights.ia);

  rc.sim_threshold = cfg.get_double("tracker.sim_threshold", rc.sim_threshold);
  rc.max_misses = static_cast<int>(cfg.get_int("tracker.max_misses", rc.max_misses));
  rc.det_threshold = cfg.get_double("tracker.det_threshold", rc.det_threshold);

  if (const char* env = std::getenv("FDTA_SEED"); env != nullptr && env[0] != '\0')
    rc.seed = static_cast<std::uint64_t>(std::stoull(env));
  rc.validate();
  return rc;
}

// ---------------------------------------------------------------------------
// Model

// All parameters exist regardless of adapter toggles so initialization (and
// checkpoints) are toggle-independent; toggles only govern which paths run.
struct FdtaModel {
  RunConfig cfg;
  nn::Mlp encoder;     // observation -> embedding
  nn::Mlp box_head;    // embedding -> 4 box logits (sigmoid-normalized)
  nn::Mlp cls_head;    // embedding -> 2 class logits
  Tensor new_logit;    // score of the "new object" class in id prediction
  spatial::SpatialAdapter sa;
  temporal::TemporalAdapter ta;
  nn::Mlp phi;         // identity projection head
  nn::ParamRegistry params;
};

inline FdtaModel make_model(const RunConfig& cfg, int observation_dim) {
  cfg.validate();
  FdtaModel m;
  m.cfg = cfg;
  Rng rng(cfg.seed ^ 0xF17A5EEDULL);
  const int d = cfg.embed_dim;
  m.encoder = nn::make_mlp(rng, {observation_dim, d, d});
  m.box_head = nn::make_mlp(rng, {d, d, 4});
  m.cls_head = nn::make_mlp(rng, {d, d, 2});
  m.new_logit = Tensor::scalar(0.0, true);
  auto bins = spatial::lid_bins(cfg.depth_bins, cfg.d_min, cfg.d_max);
  m.sa = spatial::make_spatial_adapter(rng, cfg.patch, sim::kFeatureChannels, d, cfg.heads,
                                       cfg.ffn_dim, cfg.sa_enc_layers, cfg.fusion_layers,
                                       cfg.pe_entries, bins);
  m.ta = temporal::make_temporal_adapter(rng, d, cfg.heads, cfg.ffn_dim, cfg.ta_layers);
  m.phi = identity::make_projection_head(rng, d);

  m.params.add_mlp("encoder", m.encoder);
  m.params.add_mlp("box_head", m.box_head);
  m.params.add_mlp("cls_head", m.cls_head);
  m.params.add("new_logit", m.new_logit);
  spatial::register_params(m.params, "sa", m.sa);
  temporal::register_params(m.params, "ta", m.ta);
  identity::register_params(m.params, "ia", m.phi);
  return m;
}

// ---------------------------------------------------------------------------
// Optimizer: decoupled weight decay, lazy updates

// AdamW with beta = (0.9, 0.999), eps = 1e-8. Parameters whose gradient is
// identically zero in a step are skipped entirely (no moment update, no
// decay), so disabled adapters stay bit-exact at initialization.
class AdamW {
 public:
  AdamW(nn::ParamRegistry& params, double lr, double weight_decay)
      : params_(params), lr_(lr), wd_(weight_decay) {
    for (const auto& [name, t] : params.items) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t p = 0; p < params_.items.size(); ++p) {
      auto& tensor = params_.items[p].second;
      const auto& g = tensor.grad();
      bool any = false;
      for (double x : g)
        if (x != 0.0) {
          any = true;
          break;
        }
      if (!any) continue;
      auto& vals = tensor.mutable_values();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * g[i];
        v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = m_[p][i] / bc1;
        const double vhat = v_[p][i] / bc2;
        vals[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * vals[i]);
      }
    }
  }

 private:
  nn::ParamRegistry& params_;
  double lr_, wd_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, parameter count, then (name, shape, f64 LE) blobs.

inline std::string encode_checkpoint(const FdtaModel& model) {
  std::string out = "FDTACKP1";
  io::detail::put_u32(out, static_cast<std::uint32_t>(model.params.items.size()));
  for (const auto& [name, t] : model.params.items) {
    io::detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    io::detail::put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (int dsize : t.shape()) io::detail::put_u32(out, static_cast<std::uint32_t>(dsize));
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      io::detail::put_u32(out, static_cast<std::uint32_t>(bits & 0xFFFFFFFFULL));
      io::detail::put_u32(out, static_cast<std::uint32_t>(bits >> 32));
    }
  }
  return out;
}

inline void save_checkpoint(const FdtaModel& model, const std::string& path) {
  io::detail::write_file(path, encode_checkpoint(model));
}

inline void load_checkpoint(FdtaModel& model, const std::string& path) {
  const std::string data = io::detail::read_file(path);
  if (data.size() < 8 || data.compare(0, 8, "FDTACKP1") != 0)
    throw io::DataError(path + ": bad checkpoint magic");
  std::size_t off = 8;
  const std::uint32_t count = io::detail::get_u32(data, off, path);
  if (count != model.params.items.size())
    throw io::DataError(path + ": checkpoint parameter count mismatch");
  for (auto& [name, tensor] : model.params.items) {
    const std::uint32_t name_len = io::detail::get_u32(data, off, path);
    if (off + name_len > data.size()) throw io::DataError(path + ": truncated");
    const std::string stored_name = data.substr(off, name_len);
    off += name_len;
    if (stored_name != name)
      throw io::DataError(path + ": parameter order mismatch at " + stored_name);
    const std::uint32_t ndims = io::detail::get_u32(data, off, path);
    ad::Shape shape;
    for (std::uint32_t i = 0; i < ndims; ++i)
      shape.push_back(static_cast<int>(io::detail::get_u32(data, off, path)));
    if (shape != tensor.shape()) throw io::DataError(path + ": shape mismatch at " + name);
    auto& vals = tensor.mutable_values();
    for (auto& v : vals) {
      const std::uint64_t lo = io::detail::get_u32(data, off, path);
      const std::uint64_t hi = io::detail::get_u32(data, off, path);
      const std::uint64_t bits = lo | (hi << 32);
      std::memcpy(&v, &bits, sizeof(v));
    }
  }
  if (off != data.size()) throw io::DataError(path + ": trailing bytes");
}

}  // namespace fdta::pipe
