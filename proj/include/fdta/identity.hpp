#pragma once

// Identity adapter: ground-truth identity assignment via Hungarian matching
// on IoU, cross-batch contrastive pair sampling with the IoU filter,
// harmonic-mean quality weights, the projection head, and the quality-aware
// InfoNCE loss.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fdta/autodiff.hpp"
#include "fdta/geometry.hpp"
#include "fdta/nn.hpp"

namespace fdta::identity {

using ad::Tensor;

// One pooled sample: an embedding slot with its frame, assigned identity,
// and assignment quality. Unmatched detections carry no identity.
struct LabeledEmbedding {
  std::size_t embedding_index = 0;  // caller-side handle into the pool
  std::int64_t frame = 0;
  std::optional<std::int64_t> id;
  double iou = 0.0;
};

// (detection index, gt index, iou) matches for one frame.
struct FrameAssignment {
  std::vector<int> gt_of_detection;  // -1 when unmatched
  std::vector<double> iou_of_detection;
};

// Hungarian on cost 1 - IoU; zero-overlap matches are discarded.
inline FrameAssignment assign_identities(const std::vector<geom::Box2D>& detections,
                                         const std::vector<geom::Box2D>& gt) {
  FrameAssignment out;
  out.gt_of_detection.assign(detections.size(), -1);
  out.iou_of_detection.assign(detections.size(), 0.0);
  if (detections.empty() || gt.empty()) return out;
  std::vector<std::vector<double>> cost(detections.size(), std::vector<double>(gt.size()));
  for (std::size_t d = 0; d < detections.size(); ++d)
    for (std::size_t g = 0; g < gt.size(); ++g)
      cost[d][g] = 1.0 - geom::iou(detections[d], gt[g]);
  auto assignment = geom::hungarian(cost);
  for (auto [d, g] : assignment.pairs) {
    const double overlap = 1.0 - cost[d][g];
    if (overlap <= 0.0) continue;  // IoU 0: leave unmatched
    out.gt_of_detection[d] = g;
    out.iou_of_detection[d] = overlap;
  }
  return out;
}

// Labels detections of one frame against ground-truth boxes with ids.
inline std::vector<LabeledEmbedding> label_frame(const std::vector<geom::Box2D>& detections,
                                                 const std::vector<geom::Box2D>& gt_boxes,
                                                 const std::vector<std::int64_t>& gt_ids,
                                                 std::int64_t frame,
                                                 std::size_t first_embedding_index) {
  if (gt_boxes.size() != gt_ids.size())
    throw std::invalid_argument("label_frame: gt boxes/ids size mismatch");
  auto assignment = assign_identities(detections, gt_boxes);
  std::vector<LabeledEmbedding> out(detections.size());
  for (std::size_t d = 0; d < detections.size(); ++d) {
    out[d].embedding_index = first_embedding_index + d;
    out[d].frame = frame;
    out[d].iou = assignment.iou_of_detection[d];
    if (assignment.gt_of_detection[d] >= 0)
      out[d].id = gt_ids[assignment.gt_of_detection[d]];
  }
  return out;
}

// Harmonic mean of two IoU scores (Eq.-style quality weight).
inline double pair_weight(double iou_a, double iou_b) {
  if (iou_a + iou_b <= 0.0) throw std::invalid_argument("pair_weight: zero denominator");
  return 2.0 * iou_a * iou_b / (iou_a + iou_b);
}

struct PositivePair {
  std::size_t a = 0;  // indices into the surviving sample list
  std::size_t b = 0;
  double weight = 1.0;
};

struct PairSet {
  std::vector<LabeledEmbedding> samples;           // post-filter pool
  std::vector<PositivePair> positives;             // unordered same-id cross-frame pairs
  std::vector<std::vector<std::size_t>> negatives;  // per sample: different-id samples
};

// Pairs from the pooled samples: positives are same-identity pairs spanning
// distinct frames; negatives are all different-identity pairs. Unlabeled
// samples and samples below the IoU threshold are dropped entirely. With
// use_quality=false the filter and harmonic weights are disabled (weights 1).
inline PairSet sample_pairs(const std::vector<LabeledEmbedding>& pool, double iou_threshold = 0.5,
                            bool use_quality = true) {
  PairSet out;
  for (const auto& sample : pool) {
    if (!sample.id.has_value()) continue;
    if (use_quality && sample.iou < iou_threshold) continue;
    out.samples.push_back(sample);
  }
  const std::size_t n = out.samples.size();
  out.negatives.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& a = out.samples[i];
      const auto& b = out.samples[j];
      if (*a.id == *b.id) {
        if (a.frame != b.frame)
          out.positives.push_back(
              {i, j, use_quality ? pair_weight(a.iou, b.iou) : 1.0});
      } else {
        out.negatives[i].push_back(j);
        out.negatives[j].push_back(i);
      }
    }
  }
  return out;
}

// 3-layer projection head; outputs are unit length so similarities are
// cosines.
inline nn::Mlp make_projection_head(Rng& rng, int dim) {
  return nn::make_mlp(rng, {dim, dim, dim, dim});
}

inline Tensor project(const Tensor& embedding, const nn::Mlp& phi) {
  return ad::l2_normalize(nn::mlp_forward(phi, embedding));
}

inline Tensor project_rows(const Tensor& embeddings, const nn::Mlp& phi) {
  return ad::l2_normalize_rows(nn::mlp_forward(phi, embeddings));
}

// InfoNCE over one anchor: -log exp(a.p/tau) / (exp(a.p/tau) + sum exp(a.n/tau)).
// Zero when the negative set is empty.
inline Tensor info_nce(const Tensor& anchor, const Tensor& positive,
                       const std::vector<Tensor>& negatives, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("info_nce: tau must be positive");
  Tensor pos = ad::smul(ad::dot(anchor, positive), 1.0 / tau);
  if (negatives.empty()) return ad::smul(pos, 0.0);
  std::vector<Tensor> logits{pos};
  logits.reserve(negatives.size() + 1);
  for (const auto& n : negatives) logits.push_back(ad::smul(ad::dot(anchor, n), 1.0 / tau));
  return ad::sub(ad::logsumexp(ad::concat_vec(logits)), pos);
}

// Quality-aware contrastive loss over a pair set. `projected` holds one
// unit-norm row per surviving sample (aligned with pairs.samples). Each
// unordered positive pair is evaluated in both anchor directions and
// averaged. Empty positive sets yield zero (and set *warned).
inline Tensor ia_loss_from_projected(const Tensor& projected, const PairSet& pairs, double tau,
                                     bool* warned_empty = nullptr) {
  if (tau <= 0.0) throw std::invalid_argument("ia_loss: tau must be positive");
  if (pairs.positives.empty()) {
    if (warned_empty != nullptr) *warned_empty = true;
    return Tensor::scalar(0.0);
  }
  const int n = projected.dim(0);
  if (static_cast<std::size_t>(n) != pairs.samples.size())
    throw std::invalid_argument("ia_loss: projected rows / samples mismatch");

  // Similarity matrix once; per-anchor negative logsumexp once.
  Tensor sims = ad::smul(ad::matmul(projected, ad::transpose(projected)), 1.0 / tau);
  std::vector<Tensor> neg_lse(n);
  std::vector<char> has_neg(n, 0);
  auto anchor_neg_lse = [&](std::size_t a) -> Tensor& {
    if (!has_neg[a]) {
      const auto& negs = pairs.negatives[a];
      if (!negs.empty()) {
        std::vector<std::size_t> flat;
        flat.reserve(negs.size());
        for (auto j : negs) flat.push_back(a * static_cast<std::size_t>(n) + j);
        neg_lse[a] = ad::logsumexp(ad::gather(sims, std::move(flat)));
      }
      has_neg[a] = 1;
    }
    return neg_lse[a];
  };

  auto directed_term = [&](std::size_t a, std::size_t p) -> Tensor {
    Tensor pos = ad::gather(sims, {a * static_cast<std::size_t>(n) + p});
    Tensor& nlse = anchor_neg_lse(a);
    if (!nlse.defined()) return ad::smul(pos, 0.0);  // no negatives: loss 0
    std::vector<Tensor> two{pos, nlse};
    return ad::sub(ad::logsumexp(ad::concat_vec(two)), pos);
  };

  std::vector<Tensor> terms;
  terms.reserve(pairs.positives.size());
  for (const auto& pp : pairs.positives) {
    Tensor both = ad::add(directed_term(pp.a, pp.b), directed_term(pp.b, pp.a));
    terms.push_back(ad::smul(both, 0.5 * pp.weight));
  }
  return ad::smul(ad::sum(ad::concat_vec(terms)), 1.0 / static_cast<double>(terms.size()));
}

// Full path: project the pooled embeddings (rows aligned with pairs.samples)
// through phi, or L2-normalize them directly when the head is disabled.
inline Tensor ia_loss(const Tensor& pooled_embeddings, const PairSet& pairs, const nn::Mlp& phi,
                      double tau, bool use_cfe = true, bool* warned_empty = nullptr) {
  Tensor projected =
      use_cfe ? project_rows(pooled_embeddings, phi) : ad::l2_normalize_rows(pooled_embeddings);
  return ia_loss_from_projected(projected, pairs, tau, warned_empty);
}

inline void register_params(nn::ParamRegistry& reg, const std::string& prefix,
                            const nn::Mlp& phi) {
  reg.add_mlp(prefix + ".phi", phi);
}

}  // namespace fdta::identity
