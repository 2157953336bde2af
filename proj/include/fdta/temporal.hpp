#pragma once

// Temporal adapter: per-identity trajectory windows, the dual causal+missing
// attention mask, and the masked transformer encoder over each history.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fdta/autodiff.hpp"
#include "fdta/nn.hpp"

namespace fdta::temporal {

using ad::Tensor;

// Last-T history of one identity. Absent slots hold no data of their own;
// the encoder substitutes the shared [empty] token.
struct TrajectoryWindow {
  std::int64_t id = 0;
  std::vector<std::vector<double>> slots;  // embedding per slot (ignored when absent)
  std::vector<std::uint8_t> present;
  std::vector<std::int64_t> frames;

  int length() const { return static_cast<int>(present.size()); }

  void validate() const {
    if (slots.size() != present.size() || frames.size() != present.size())
      throw std::invalid_argument("TrajectoryWindow: field lengths disagree");
  }
};

// How absent slots enter the encoder. Mask is the intended behavior; the
// other two exist as ablation arms.
enum class MissingMode {
  Mask,        // [empty] token content, blocked by the attention mask
  ZeroVector,  // zero content, causal mask only
  Off,         // [empty] token content, causal mask only
};

// M[j,k] = 1 when k > j (causal) or slot k is absent, except the diagonal
// stays open.
inline ad::AttentionMask build_dual_mask(const std::vector<std::uint8_t>& presence) {
  const int t = static_cast<int>(presence.size());
  if (t < 1) throw std::invalid_argument("build_dual_mask: need T >= 1");
  ad::AttentionMask mask(t);
  for (int j = 0; j < t; ++j)
    for (int k = 0; k < t; ++k) {
      if (j == k) continue;
      if (k > j || !presence[k]) mask.at(j, k) = 1;
    }
  return mask;
}

inline ad::AttentionMask build_causal_mask(int t) {
  if (t < 1) throw std::invalid_argument("build_causal_mask: need T >= 1");
  ad::AttentionMask mask(t);
  for (int j = 0; j < t; ++j)
    for (int k = j + 1; k < t; ++k) mask.at(j, k) = 1;
  return mask;
}

struct TemporalAdapter {
  std::vector<nn::EncoderLayer> layers;
  Tensor empty_token;  // shared learned placeholder, [dim]

  int dim() const { return empty_token.dim(0); }
};

inline TemporalAdapter make_temporal_adapter(Rng& rng, int dim, int heads, int ffn_dim,
                                             int n_layers) {
  TemporalAdapter ta;
  for (int i = 0; i < n_layers; ++i)
    ta.layers.push_back(nn::make_encoder_layer(rng, dim, heads, ffn_dim));
  std::vector<double> tok(dim);
  for (auto& x : tok) x = rng.uniform(-0.1, 0.1);
  ta.empty_token = Tensor::leaf({dim}, std::move(tok), true);
  return ta;
}

// Builds the encoder input: one row per slot with sinusoidal slot-position
// encodings added. `rows`, when given, supplies present slots as tape
// tensors (training); otherwise the window's stored values are used.
inline Tensor assemble_window_input(const TemporalAdapter& ta,
                                    const std::vector<std::uint8_t>& present,
                                    const std::vector<const Tensor*>& rows,
                                    const std::vector<std::vector<double>>* stored,
                                    MissingMode mode) {
  const int t = static_cast<int>(present.size());
  const int d = ta.dim();
  if (!rows.empty() && static_cast<int>(rows.size()) != t)
    throw std::invalid_argument("assemble_window_input: rows length mismatch");
  std::vector<Tensor> parts;
  parts.reserve(t);
  Tensor zero_row;
  for (int j = 0; j < t; ++j) {
    if (present[j]) {
      if (!rows.empty() && rows[j] != nullptr) {
        parts.push_back(*rows[j]);
      } else if (stored != nullptr) {
        parts.push_back(Tensor::leaf({d}, (*stored)[j]));
      } else {
        throw std::invalid_argument("assemble_window_input: present slot without content");
      }
    } else if (mode == MissingMode::ZeroVector) {
      if (!zero_row.defined()) zero_row = Tensor::zeros({d});
      parts.push_back(zero_row);
    } else {
      parts.push_back(ta.empty_token);
    }
  }
  Tensor x = ad::concat_rows(parts);
  std::vector<double> pe(static_cast<std::size_t>(t) * d);
  for (int j = 0; j < t; ++j) {
    auto row = ad::sinusoidal_pe(j, d);
    std::copy(row.begin(), row.end(), pe.begin() + static_cast<std::size_t>(j) * d);
  }
  return ad::add_const(x, pe);
}

// Refined trajectory F-hat = TA(F, M). Output position j depends only on
// present slots k <= j (and itself).
inline Tensor temporal_encode(const TemporalAdapter& ta,
                              const std::vector<std::uint8_t>& present,
                              const std::vector<const Tensor*>& rows,
                              const std::vector<std::vector<double>>* stored,
                              MissingMode mode = MissingMode::Mask) {
  if (present.empty()) throw std::invalid_argument("temporal_encode: empty window");
  Tensor x = assemble_window_input(ta, present, rows, stored, mode);
  ad::AttentionMask mask = mode == MissingMode::Mask
                               ? build_dual_mask(present)
                               : build_causal_mask(static_cast<int>(present.size()));
  return nn::encoder_forward(ta.layers, x, &mask);
}

// Convenience: encode a stored window (inference path).
inline Tensor temporal_encode(const TemporalAdapter& ta, const TrajectoryWindow& window,
                              MissingMode mode = MissingMode::Mask) {
  window.validate();
  return temporal_encode(ta, window.present, {}, &window.slots, mode);
}

inline void register_params(nn::ParamRegistry& reg, const std::string& prefix,
                            const TemporalAdapter& ta) {
  reg.add_encoder(prefix + ".enc", ta.layers);
  reg.add(prefix + ".empty_token", ta.empty_token);
}

}  // namespace fdta::temporal
