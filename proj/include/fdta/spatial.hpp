#pragma once

// Spatial adapter: linear-increasing depth discretization, expectation depth
// head, foreground-weighted focal depth loss, learnable depth positional
// encoding, pyramid feature averaging, and the depth cross-attention fusion
// into object embeddings.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fdta/autodiff.hpp"
#include "fdta/geometry.hpp"
#include "fdta/nn.hpp"

namespace fdta::spatial {

using ad::Tensor;

// K foreground bins plus one background bin; bin widths grow with depth so
// resolution concentrates near the camera.
struct DepthBins {
  int k = 0;  // foreground bin count
  double d_min = 0.0;
  double d_max = 0.0;
  double bin_size = 0.0;
  std::vector<double> values;  // b_0 .. b_K, strictly increasing, b_K == d_max

  int bin_count() const { return k + 1; }
};

inline DepthBins lid_bins(int k, double d_min = 1e-3, double d_max = 256.0) {
  if (k < 1) throw std::invalid_argument("lid_bins: K must be >= 1");
  if (!(d_max > d_min)) throw std::invalid_argument("lid_bins: inverted depth range");
  DepthBins bins;
  bins.k = k;
  bins.d_min = d_min;
  bins.d_max = d_max;
  bins.bin_size = 2.0 * (d_max - d_min) / (k * (1.0 + k));
  bins.values.resize(k + 1);
  for (int i = 0; i < k; ++i) {
    const double c = i + 0.5;
    bins.values[i] = c * c * bins.bin_size / 2.0 - bins.bin_size / 8.0 + d_min;
  }
  bins.values[k] = d_max;  // background bin
  for (int i = 0; i < k; ++i)
    if (!(bins.values[i] < bins.values[i + 1]))
      throw std::logic_error("lid_bins: bin values not strictly increasing");
  return bins;
}

// Nearest bin value; out-of-range depths clamp to the end bins, ties go to
// the lower index.
inline int discretize_depth(double depth, const DepthBins& bins) {
  if (std::isnan(depth)) throw std::invalid_argument("discretize_depth: NaN depth");
  if (depth <= bins.values.front()) return 0;
  if (depth >= bins.values.back()) return bins.k;
  int best = 0;
  double best_dist = std::fabs(depth - bins.values[0]);
  for (int i = 1; i <= bins.k; ++i) {
    const double d = std::fabs(depth - bins.values[i]);
    if (d < best_dist) {
      best_dist = d;
      best = i;
    }
  }
  return best;
}

// Expected depth of one probability row over all K+1 bins.
inline double depth_expectation(const std::vector<double>& probs, const DepthBins& bins) {
  if (static_cast<int>(probs.size()) != bins.bin_count())
    throw std::invalid_argument("depth_expectation: bin count mismatch");
  double s = 0.0, e = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] < 0.0) throw std::invalid_argument("depth_expectation: negative probability");
    s += probs[i];
    e += probs[i] * bins.values[i];
  }
  if (std::fabs(s - 1.0) > 1e-6)
    throw std::invalid_argument("depth_expectation: probabilities not normalized");
  return e;
}

// Per-pixel depth maps at feature-grid resolution.
struct DepthField {
  int rows = 0;
  int cols = 0;
  std::vector<std::vector<double>> probs;  // per pixel, K+1 probabilities
  std::vector<double> expected;            // d-hat per pixel
  std::vector<std::uint8_t> foreground;    // 1 inside a GT box
  std::vector<int> target_bins;            // training targets

  std::size_t pixels() const { return static_cast<std::size_t>(rows) * cols; }
};

// Mean over all pixels of w_ij * FL(d_ij, target_ij); w is fg_weight inside
// ground-truth boxes and 1 elsewhere.
inline double weighted_depth_loss(const DepthField& field, const DepthBins& bins,
                                  double fg_weight, double alpha_t = 0.25, double gamma = 2.0) {
  if (fg_weight < 1.0) throw std::invalid_argument("weighted_depth_loss: fg_weight must be >= 1");
  if (field.probs.size() != field.pixels() || field.target_bins.size() != field.pixels())
    throw std::invalid_argument("weighted_depth_loss: field size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < field.pixels(); ++i) {
    const int t = field.target_bins[i];
    if (t < 0 || t >= bins.bin_count())
      throw std::out_of_range("weighted_depth_loss: target bin out of range");
    const double w = field.foreground[i] ? fg_weight : 1.0;
    total += w * geom::focal_loss(field.probs[i], static_cast<std::size_t>(t), alpha_t, gamma);
  }
  return total / static_cast<double>(field.pixels());
}

// Differentiable variant on per-pixel bin logits [N x (K+1)].
inline Tensor weighted_depth_loss_t(const Tensor& logits, const std::vector<int>& targets,
                                    const std::vector<std::uint8_t>& foreground,
                                    double fg_weight, double alpha_t = 0.25,
                                    double gamma = 2.0) {
  if (logits.rank() != 2) throw std::invalid_argument("weighted_depth_loss_t: matrix expected");
  const int n = logits.dim(0), bins = logits.dim(1);
  if (static_cast<int>(targets.size()) != n || static_cast<int>(foreground.size()) != n)
    throw std::invalid_argument("weighted_depth_loss_t: target size mismatch");
  std::vector<std::size_t> idx(n);
  std::vector<double> weights(n);
  for (int i = 0; i < n; ++i) {
    if (targets[i] < 0 || targets[i] >= bins)
      throw std::out_of_range("weighted_depth_loss_t: target bin out of range");
    idx[i] = static_cast<std::size_t>(i) * bins + targets[i];
    weights[i] = foreground[i] ? fg_weight : 1.0;
  }
  Tensor probs = ad::softmax_rows(logits);
  Tensor pt = ad::clamp_min(ad::gather(probs, std::move(idx)), 1e-12);
  Tensor one_minus = ad::clamp_min(ad::sub(ad::Tensor::full({n}, 1.0), pt), 0.0);
  Tensor fl = ad::smul(ad::mul(ad::pow_t(one_minus, gamma), ad::log_t(pt)), -alpha_t);
  Tensor w = Tensor::leaf({n}, std::move(weights));
  return ad::mean(ad::mul(fl, w));
}

// ---------------------------------------------------------------------------
// Depth positional encoding

// Learnable table of N_pe rows; depths map linearly from [d_min, d_max]
// onto the continuous row coordinate.
struct DepthPeTable {
  Tensor table;  // [N_pe x dim]
  double d_min = 0.0;
  double d_max = 0.0;

  int entries() const { return table.dim(0); }
  int dim() const { return table.dim(1); }
};

inline DepthPeTable make_depth_pe_table(Rng& rng, int entries, int dim, double d_min,
                                        double d_max) {
  if (entries < 2) throw std::invalid_argument("make_depth_pe_table: need at least 2 entries");
  return DepthPeTable{nn::xavier_init(rng, entries, dim), d_min, d_max};
}

// Linear interpolation between the two neighboring table rows:
// out = (1-delta) * PE[floor(u)] + delta * PE[ceil(u)]. Differentiable in
// both the table and the depth input (zero slope where clamped).
inline Tensor depth_pe(const Tensor& dhat, const DepthPeTable& pe) {
  if (dhat.rank() != 1) throw std::invalid_argument("depth_pe: depth vector expected");
  if (pe.entries() < 2) throw std::invalid_argument("depth_pe: empty table");
  const int n = dhat.dim(0);
  const int rows = pe.entries(), dim = pe.dim();
  const double scale = (rows - 1) / (pe.d_max - pe.d_min);
  struct Coord {
    int lo, hi;
    double delta;
    bool clamped;
  };
  std::vector<Coord> coords(n);
  std::vector<double> out(static_cast<std::size_t>(n) * dim);
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(dhat.value_at(i))) throw std::invalid_argument("depth_pe: non-finite depth");
    double u = (dhat.value_at(i) - pe.d_min) * scale;
    bool clamped = false;
    if (u <= 0.0) { u = 0.0; clamped = true; }
    if (u >= rows - 1) { u = rows - 1; clamped = true; }
    const int lo = static_cast<int>(std::floor(u));
    const int hi = static_cast<int>(std::ceil(u));
    const double delta = u - lo;
    coords[i] = {lo, hi, delta, clamped};
    for (int c = 0; c < dim; ++c)
      out[static_cast<std::size_t>(i) * dim + c] =
          (1.0 - delta) * pe.table.value_at(static_cast<std::size_t>(lo) * dim + c) +
          delta * pe.table.value_at(static_cast<std::size_t>(hi) * dim + c);
  }
  return ad::detail::make_op(
      {n, dim}, std::move(out), {dhat.ptr(), pe.table.ptr()},
      [n, dim, scale, coords = std::move(coords)](ad::Node& self) {
        ad::Node& pd = *self.parents[0];
        ad::Node& pt = *self.parents[1];
        for (int i = 0; i < n; ++i) {
          const auto& co = coords[i];
          double slope_acc = 0.0;
          for (int c = 0; c < dim; ++c) {
            const double g = self.grad[static_cast<std::size_t>(i) * dim + c];
            if (pt.requires_grad) {
              pt.grad[static_cast<std::size_t>(co.lo) * dim + c] += (1.0 - co.delta) * g;
              pt.grad[static_cast<std::size_t>(co.hi) * dim + c] += co.delta * g;
            }
            slope_acc += g * (pt.value[static_cast<std::size_t>(co.hi) * dim + c] -
                              pt.value[static_cast<std::size_t>(co.lo) * dim + c]);
          }
          if (pd.requires_grad && !co.clamped) pd.grad[i] += slope_acc * scale;
        }
      });
}

// ---------------------------------------------------------------------------
// Pyramid averaging

// F_avg = 1/3 (f8 + up2(f16) + up4(f32)); all grids are HxWxC with the
// coarser levels at exactly half and quarter resolution.
inline Tensor pyramid_average(const Tensor& f8, const Tensor& f16, const Tensor& f32) {
  if (f8.rank() != 3 || f16.rank() != 3 || f32.rank() != 3)
    throw std::invalid_argument("pyramid_average: HxWxC grids expected");
  if (f16.dim(0) * 2 != f8.dim(0) || f16.dim(1) * 2 != f8.dim(1) ||
      f32.dim(0) * 4 != f8.dim(0) || f32.dim(1) * 4 != f8.dim(1) ||
      f8.dim(2) != f16.dim(2) || f8.dim(2) != f32.dim(2))
    throw std::invalid_argument("pyramid_average: incompatible pyramid dims");
  Tensor sum = ad::add(f8, ad::add(ad::upsample_bilinear(f16, 2), ad::upsample_bilinear(f32, 4)));
  return ad::smul(sum, 1.0 / 3.0);
}

// ---------------------------------------------------------------------------
// Foreground rasterization and patch ordering

// Maps patch-major pixel order (patchify layout) to row-major grid indices.
inline std::vector<std::size_t> patch_pixel_order(int h, int w, int p) {
  if (h % p != 0 || w % p != 0)
    throw std::invalid_argument("patch_pixel_order: patch size must divide grid");
  std::vector<std::size_t> order;
  order.reserve(static_cast<std::size_t>(h) * w);
  for (int qi = 0; qi < h / p; ++qi)
    for (int qj = 0; qj < w / p; ++qj)
      for (int pi = 0; pi < p; ++pi)
        for (int pj = 0; pj < p; ++pj)
          order.push_back(static_cast<std::size_t>(qi * p + pi) * w + (qj * p + pj));
  return order;
}

// Union of GT boxes rasterized at grid resolution; border cells count as
// foreground.
inline std::vector<std::uint8_t> foreground_mask(const std::vector<geom::Box2D>& boxes,
                                                 double arena_w, double arena_h, int grid_h,
                                                 int grid_w) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(grid_h) * grid_w, 0);
  const double sx = arena_w / grid_w;
  const double sy = arena_h / grid_h;
  for (const auto& b : boxes) {
    const int j0 = std::max(0, static_cast<int>(std::floor(b.x / sx)));
    const int j1 = std::min(grid_w - 1, static_cast<int>(std::floor(b.x2() / sx)));
    const int i0 = std::max(0, static_cast<int>(std::floor(b.y / sy)));
    const int i1 = std::min(grid_h - 1, static_cast<int>(std::floor(b.y2() / sy)));
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j) mask[static_cast<std::size_t>(i) * grid_w + j] = 1;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Adapter parameters and forward pass

// One decoder-style refinement block: self-attention over objects, cross-
// attention to visual tokens, cross-attention to depth tokens, feed-forward.
struct FusionBlock {
  nn::LayerNorm ln_self, ln_vis, ln_depth, ln_ff;
  nn::MultiHeadAttention self_attn, vis_attn, depth_attn;
  nn::Linear ff1, ff2;
};

struct SpatialAdapter {
  nn::Mlp depth_extract;        // patch features -> dense depth tokens
  nn::Linear depth_head;        // dense token -> per-pixel bin logits
  std::vector<nn::EncoderLayer> depth_encoder;
  DepthPeTable pe;
  nn::Linear vis_proj;          // patch features -> visual tokens
  std::vector<FusionBlock> fusion;
  int patch = 0;
  DepthBins bins;
};

inline FusionBlock make_fusion_block(Rng& rng, int dim, int heads, int ffn_dim) {
  return FusionBlock{nn::make_layer_norm(dim),      nn::make_layer_norm(dim),
                     nn::make_layer_norm(dim),      nn::make_layer_norm(dim),
                     nn::make_mha(rng, dim, heads), nn::make_mha(rng, dim, heads),
                     nn::make_mha(rng, dim, heads), nn::make_linear(rng, dim, ffn_dim),
                     nn::make_linear(rng, ffn_dim, dim)};
}

inline SpatialAdapter make_spatial_adapter(Rng& rng, int patch, int channels, int dim,
                                           int heads, int ffn_dim, int enc_layers,
                                           int fusion_layers, int pe_entries,
                                           const DepthBins& bins) {
  SpatialAdapter sa;
  const int patch_dim = patch * patch * channels;
  sa.depth_extract = nn::make_mlp(rng, {patch_dim, dim, dim});
  sa.depth_head = nn::make_linear(rng, dim, patch * patch * bins.bin_count());
  for (int i = 0; i < enc_layers; ++i)
    sa.depth_encoder.push_back(nn::make_encoder_layer(rng, dim, heads, ffn_dim));
  sa.pe = make_depth_pe_table(rng, pe_entries, dim, bins.d_min, bins.d_max);
  sa.vis_proj = nn::make_linear(rng, patch_dim, dim);
  for (int i = 0; i < fusion_layers; ++i)
    sa.fusion.push_back(make_fusion_block(rng, dim, heads, ffn_dim));
  sa.patch = patch;
  sa.bins = bins;
  return sa;
}

struct SpatialOutputs {
  Tensor depth_logits;   // [pixels x (K+1)], patch-major pixel order
  Tensor dhat;           // [pixels], expected depth per pixel
  Tensor depth_tokens;   // F_D, [patches x dim]
  Tensor pe_d;           // [patches x dim]
  Tensor vis_tokens;     // [patches x dim]
};

// Depth branch over one frame's pyramid features.
inline SpatialOutputs spatial_forward(const SpatialAdapter& sa, const Tensor& f8,
                                      const Tensor& f16, const Tensor& f32) {
  Tensor avg = pyramid_average(f8, f16, f32);
  Tensor patches = ad::patchify(avg, sa.patch);  // [P x patch_dim]
  const int p_count = patches.dim(0);
  const int pixels_per_patch = sa.patch * sa.patch;
  const int bin_count = sa.bins.bin_count();

  Tensor dense = nn::mlp_forward(sa.depth_extract, patches);       // F_dense
  Tensor head = nn::linear_forward(sa.depth_head, dense);          // [P x pp*(K+1)]
  Tensor logits = ad::reshape(head, {p_count * pixels_per_patch, bin_count});
  Tensor probs = ad::softmax_rows(logits);

  std::vector<double> bin_values = sa.bins.values;
  Tensor bins_col = Tensor::leaf({bin_count, 1}, std::move(bin_values));
  Tensor dhat = ad::reshape(ad::matmul(probs, bins_col), {p_count * pixels_per_patch});

  Tensor depth_tokens = nn::encoder_forward(sa.depth_encoder, dense);

  // Patch-mean depth indexes the PE table (one positional row per token).
  Tensor pool_m = Tensor::zeros({p_count, p_count * pixels_per_patch});
  {
    auto& vals = pool_m.mutable_values();
    const double inv = 1.0 / pixels_per_patch;
    for (int q = 0; q < p_count; ++q)
      for (int l = 0; l < pixels_per_patch; ++l)
        vals[static_cast<std::size_t>(q) * (p_count * pixels_per_patch) + q * pixels_per_patch +
             l] = inv;
  }
  Tensor patch_depth =
      ad::reshape(ad::matmul(pool_m, ad::reshape(dhat, {p_count * pixels_per_patch, 1})),
                  {p_count});
  Tensor pe_d = depth_pe(patch_depth, sa.pe);

  Tensor vis_tokens = nn::linear_forward(sa.vis_proj, patches);
  return SpatialOutputs{logits, dhat, depth_tokens, pe_d, vis_tokens};
}

// Enriches object embeddings [N x dim]: self -> vision -> depth -> ffn per
// block, residual throughout. Depth keys carry PE_d when enabled.
inline Tensor fuse_depth(const SpatialAdapter& sa, Tensor objects, const SpatialOutputs& out,
                         bool use_depth_pe) {
  Tensor depth_keys = use_depth_pe ? ad::add(out.depth_tokens, out.pe_d) : out.depth_tokens;
  for (const auto& block : sa.fusion) {
    Tensor n1 = nn::layer_norm_forward(block.ln_self, objects);
    objects = ad::add(objects, nn::mha_forward(block.self_attn, n1, n1, n1));
    Tensor n2 = nn::layer_norm_forward(block.ln_vis, objects);
    objects = ad::add(objects, nn::mha_forward(block.vis_attn, n2, out.vis_tokens, out.vis_tokens));
    Tensor n3 = nn::layer_norm_forward(block.ln_depth, objects);
    objects = ad::add(objects, nn::mha_forward(block.depth_attn, n3, depth_keys, out.depth_tokens));
    Tensor n4 = nn::layer_norm_forward(block.ln_ff, objects);
    objects = ad::add(objects, nn::linear_forward(block.ff2, ad::relu(nn::linear_forward(block.ff1, n4))));
  }
  return objects;
}

inline void register_params(nn::ParamRegistry& reg, const std::string& prefix,
                            const SpatialAdapter& sa) {
  reg.add_mlp(prefix + ".extract", sa.depth_extract);
  reg.add_linear(prefix + ".head", sa.depth_head);
  reg.add_encoder(prefix + ".enc", sa.depth_encoder);
  reg.add(prefix + ".pe_table", sa.pe.table);
  reg.add_linear(prefix + ".vis_proj", sa.vis_proj);
  for (std::size_t i = 0; i < sa.fusion.size(); ++i) {
    const std::string base = prefix + ".fuse" + std::to_string(i);
    const auto& b = sa.fusion[i];
    reg.add_layer_norm(base + ".ln_self", b.ln_self);
    reg.add_layer_norm(base + ".ln_vis", b.ln_vis);
    reg.add_layer_norm(base + ".ln_depth", b.ln_depth);
    reg.add_layer_norm(base + ".ln_ff", b.ln_ff);
    reg.add_mha(base + ".self", b.self_attn);
    reg.add_mha(base + ".vis", b.vis_attn);
    reg.add_mha(base + ".depth", b.depth_attn);
    reg.add_linear(base + ".ff1", b.ff1);
    reg.add_linear(base + ".ff2", b.ff2);
  }
}

}  // namespace fdta::spatial
