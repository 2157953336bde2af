#pragma once

// Parameterized layers over the autodiff substrate: dense stacks, layer
// norm, multi-head attention, pre-norm transformer encoder blocks, and a
// flat registry used by the optimizer and the checkpoint format.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fdta/autodiff.hpp"
#include "fdta/rng.hpp"

namespace fdta::nn {

using ad::Tensor;

enum class Act { None, Relu };

struct DenseLayer {
  Tensor w;  // [in x out]
  Tensor b;  // [out]
  Act act = Act::None;
};

// Per-layer weight/bias stack with an activation tag per layer.
struct Mlp {
  std::vector<DenseLayer> layers;

  int in_dim() const { return layers.front().w.dim(0); }
  int out_dim() const { return layers.back().w.dim(1); }
};

inline Tensor xavier_init(Rng& rng, int in, int out) {
  const double s = std::sqrt(6.0 / (in + out));
  std::vector<double> v(static_cast<std::size_t>(in) * out);
  for (auto& x : v) x = rng.uniform(-s, s);
  return Tensor::leaf({in, out}, std::move(v), true);
}

inline DenseLayer make_dense(Rng& rng, int in, int out, Act act) {
  return DenseLayer{xavier_init(rng, in, out), Tensor::zeros({out}, true), act};
}

// ReLU on hidden layers, linear output.
inline Mlp make_mlp(Rng& rng, const std::vector<int>& dims) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least one layer");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool last = i + 2 == dims.size();
    mlp.layers.push_back(make_dense(rng, dims[i], dims[i + 1], last ? Act::None : Act::Relu));
  }
  return mlp;
}

// Forward through the stack; x is a row batch [n x in] or a single vector.
inline Tensor mlp_forward(const Mlp& mlp, const Tensor& x) {
  if (mlp.layers.empty()) throw std::invalid_argument("mlp_forward: empty network");
  const bool vec = x.rank() == 1;
  Tensor h = vec ? ad::reshape(x, {1, x.dim(0)}) : x;
  for (const auto& layer : mlp.layers) {
    if (h.dim(1) != layer.w.dim(0))
      throw std::invalid_argument("mlp_forward: dimension mismatch");
    h = ad::add_rowvec(ad::matmul(h, layer.w), layer.b);
    if (layer.act == Act::Relu) h = ad::relu(h);
  }
  return vec ? ad::reshape(h, {h.dim(1)}) : h;
}

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]
};

inline Linear make_linear(Rng& rng, int in, int out) {
  return Linear{xavier_init(rng, in, out), Tensor::zeros({out}, true)};
}

inline Tensor linear_forward(const Linear& lin, const Tensor& x) {
  const bool vec = x.rank() == 1;
  Tensor h = vec ? ad::reshape(x, {1, x.dim(0)}) : x;
  h = ad::add_rowvec(ad::matmul(h, lin.w), lin.b);
  return vec ? ad::reshape(h, {h.dim(1)}) : h;
}

struct LayerNorm {
  Tensor gain;
  Tensor bias;
};

inline LayerNorm make_layer_norm(int dim) {
  return LayerNorm{Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
}

inline Tensor layer_norm_forward(const LayerNorm& ln, const Tensor& x) {
  return ad::layer_norm(x, ln.gain, ln.bias);
}

// Multi-head attention with separate query/key/value inputs so the same
// block serves self- and cross-attention. Key positional content is added
// by the caller to k_in before projection.
struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;
};

inline MultiHeadAttention make_mha(Rng& rng, int dim, int heads) {
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("make_mha: heads must divide model dim");
  return MultiHeadAttention{make_linear(rng, dim, dim), make_linear(rng, dim, dim),
                            make_linear(rng, dim, dim), make_linear(rng, dim, dim), heads};
}

inline Tensor mha_forward(const MultiHeadAttention& mha, const Tensor& q_in,
                          const Tensor& k_in, const Tensor& v_in,
                          const ad::AttentionMask* mask = nullptr) {
  const int dim = mha.q.w.dim(0);
  if (q_in.dim(1) != dim || k_in.dim(1) != dim || v_in.dim(1) != dim)
    throw std::invalid_argument("mha_forward: model dim mismatch");
  if (k_in.dim(0) != v_in.dim(0))
    throw std::invalid_argument("mha_forward: key/value length mismatch");
  Tensor q = linear_forward(mha.q, q_in);
  Tensor k = linear_forward(mha.k, k_in);
  Tensor v = linear_forward(mha.v, v_in);
  const int dk = dim / mha.heads;
  std::vector<Tensor> heads_out;
  heads_out.reserve(mha.heads);
  for (int h = 0; h < mha.heads; ++h) {
    Tensor qh = ad::slice_cols(q, h * dk, dk);
    Tensor kh = ad::slice_cols(k, h * dk, dk);
    Tensor vh = ad::slice_cols(v, h * dk, dk);
    heads_out.push_back(ad::attention(qh, kh, vh, mask));
  }
  Tensor cat = ad::concat_cols(heads_out);
  return linear_forward(mha.o, cat);
}

// Pre-norm transformer encoder block: x + MHA(LN(x)), then x + FFN(LN(x)).
struct EncoderLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear ff1, ff2;
};

inline EncoderLayer make_encoder_layer(Rng& rng, int dim, int heads, int ffn_dim) {
  return EncoderLayer{make_layer_norm(dim), make_layer_norm(dim), make_mha(rng, dim, heads),
                      make_linear(rng, dim, ffn_dim), make_linear(rng, ffn_dim, dim)};
}

inline Tensor encoder_layer_forward(const EncoderLayer& layer, const Tensor& x,
                                    const ad::AttentionMask* mask = nullptr) {
  Tensor n1 = layer_norm_forward(layer.ln1, x);
  Tensor h = ad::add(x, mha_forward(layer.attn, n1, n1, n1, mask));
  Tensor n2 = layer_norm_forward(layer.ln2, h);
  Tensor ff = linear_forward(layer.ff2, ad::relu(linear_forward(layer.ff1, n2)));
  return ad::add(h, ff);
}

inline Tensor encoder_forward(const std::vector<EncoderLayer>& layers, Tensor x,
                              const ad::AttentionMask* mask = nullptr) {
  for (const auto& layer : layers) x = encoder_layer_forward(layer, x, mask);
  return x;
}

// Named flat view over every trainable tensor of a model. Registration
// order is the serialization order, so it must be deterministic.
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(const std::string& name, const Tensor& t) {
    if (!t.requires_grad())
      throw std::invalid_argument("ParamRegistry: tensor does not require grad: " + name);
    items.emplace_back(name, t);
  }

  void add_mlp(const std::string& prefix, const Mlp& mlp) {
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
      add(prefix + ".w" + std::to_string(i), mlp.layers[i].w);
      add(prefix + ".b" + std::to_string(i), mlp.layers[i].b);
    }
  }

  void add_linear(const std::string& prefix, const Linear& lin) {
    add(prefix + ".w", lin.w);
    add(prefix + ".b", lin.b);
  }

  void add_layer_norm(const std::string& prefix, const LayerNorm& ln) {
    add(prefix + ".gain", ln.gain);
    add(prefix + ".bias", ln.bias);
  }

  void add_mha(const std::string& prefix, const MultiHeadAttention& mha) {
    add_linear(prefix + ".q", mha.q);
    add_linear(prefix + ".k", mha.k);
    add_linear(prefix + ".v", mha.v);
    add_linear(prefix + ".o", mha.o);
  }

  void add_encoder(const std::string& prefix, const std::vector<EncoderLayer>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string base = prefix + ".layer" + std::to_string(i);
      add_layer_norm(base + ".ln1", layers[i].ln1);
      add_layer_norm(base + ".ln2", layers[i].ln2);
      add_mha(base + ".attn", layers[i].attn);
      add_linear(base + ".ff1", layers[i].ff1);
      add_linear(base + ".ff2", layers[i].ff2);
    }
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : items) t.zero_grad();
  }
};

}  // namespace fdta::nn
