#pragma once

// Axis-aligned boxes, overlap measures, detection loss components, and the
// rectangular Hungarian assignment solver shared by identity labeling, ID
// prediction, and the metric suite.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fdta/autodiff.hpp"

namespace fdta::geom {

// Sentinel cost marking forbidden assignment cells; must dominate any real
// cost that reaches the solver.
inline constexpr double kForbiddenCost = 1e9;

// Top-left corner plus extent, image units (MOTChallenge convention).
struct Box2D {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double x2() const { return x + w; }
  double y2() const { return y + h; }

  bool valid() const {
    return w >= 0.0 && h >= 0.0 && std::isfinite(x) && std::isfinite(y) &&
           std::isfinite(w) && std::isfinite(h);
  }
};

inline double iou(const Box2D& a, const Box2D& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: invalid box");
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;  // degenerate zero-area boxes
  return inter / uni;
}

// 1 - GIoU; range [0, 2), 0 for identical boxes.
inline double giou_loss(const Box2D& a, const Box2D& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("giou_loss: invalid box");
  const double uni_area = a.area() + b.area();
  if (uni_area <= 0.0) throw std::invalid_argument("giou_loss: both boxes degenerate");
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = uni_area - inter;
  const double cw = std::max(a.x2(), b.x2()) - std::min(a.x, b.x);
  const double ch = std::max(a.y2(), b.y2()) - std::min(a.y, b.y);
  const double enclose = cw * ch;
  const double iou_v = uni > 0.0 ? inter / uni : 0.0;
  const double giou = enclose > 0.0 ? iou_v - (enclose - uni) / enclose : iou_v;
  return 1.0 - giou;
}

// Sum of absolute coordinate differences over (x, y, w, h).
inline double l1_box_loss(const Box2D& a, const Box2D& b) {
  return std::fabs(a.x - b.x) + std::fabs(a.y - b.y) + std::fabs(a.w - b.w) +
         std::fabs(a.h - b.h);
}

// Focal loss on an explicit probability vector. p_t is clamped at 1e-12 so
// a zero-probability target stays finite.
inline double focal_loss(const std::vector<double>& p, std::size_t target, double alpha_t = 0.25,
                         double gamma = 2.0) {
  if (target >= p.size()) throw std::invalid_argument("focal_loss: target out of range");
  double s = 0.0;
  for (double v : p) {
    if (v < 0.0) throw std::invalid_argument("focal_loss: negative probability");
    s += v;
  }
  if (std::fabs(s - 1.0) > 1e-6) throw std::invalid_argument("focal_loss: p not normalized");
  const double pt = std::max(p[target], 1e-12);
  return -alpha_t * std::pow(1.0 - pt, gamma) * std::log(pt);
}

// ---------------------------------------------------------------------------
// Differentiable variants used by the training losses. Targets are plain
// boxes; predictions are 4-vectors (x, y, w, h) on the tape.

inline ad::Tensor box_tensor(const Box2D& b) {
  return ad::Tensor::leaf({4}, {b.x, b.y, b.w, b.h});
}

inline ad::Tensor l1_box_loss_t(const ad::Tensor& pred, const ad::Tensor& gt) {
  if (pred.rank() != 1 || pred.dim(0) != 4 || gt.rank() != 1 || gt.dim(0) != 4)
    throw std::invalid_argument("l1_box_loss_t: 4-vectors expected");
  return ad::sum(ad::abs_t(ad::sub(pred, gt)));
}

inline ad::Tensor giou_loss_t(const ad::Tensor& pred, const ad::Tensor& gt) {
  if (pred.rank() != 1 || pred.dim(0) != 4 || gt.rank() != 1 || gt.dim(0) != 4)
    throw std::invalid_argument("giou_loss_t: 4-vectors expected");
  auto corner = [](const ad::Tensor& b) {
    ad::Tensor x1 = ad::gather(b, {0});
    ad::Tensor y1 = ad::gather(b, {1});
    ad::Tensor x2 = ad::add(x1, ad::gather(b, {2}));
    ad::Tensor y2 = ad::add(y1, ad::gather(b, {3}));
    return std::array<ad::Tensor, 4>{x1, y1, x2, y2};
  };
  auto [ax1, ay1, ax2, ay2] = corner(pred);
  auto [bx1, by1, bx2, by2] = corner(gt);
  ad::Tensor iw = ad::clamp_min(ad::sub(ad::min_el(ax2, bx2), ad::max_el(ax1, bx1)), 0.0);
  ad::Tensor ih = ad::clamp_min(ad::sub(ad::min_el(ay2, by2), ad::max_el(ay1, by1)), 0.0);
  ad::Tensor inter = ad::mul(iw, ih);
  ad::Tensor area_a = ad::mul(ad::gather(pred, {2}), ad::gather(pred, {3}));
  ad::Tensor area_b = ad::mul(ad::gather(gt, {2}), ad::gather(gt, {3}));
  ad::Tensor uni = ad::sub(ad::add(area_a, area_b), inter);
  if (uni.value_at(0) <= 0.0) throw std::invalid_argument("giou_loss_t: both boxes degenerate");
  ad::Tensor cw = ad::sub(ad::max_el(ax2, bx2), ad::min_el(ax1, bx1));
  ad::Tensor ch = ad::sub(ad::max_el(ay2, by2), ad::min_el(ay1, by1));
  ad::Tensor enclose = ad::clamp_min(ad::mul(cw, ch), 1e-12);
  ad::Tensor iou_v = ad::div(inter, uni);
  ad::Tensor giou = ad::sub(iou_v, ad::div(ad::sub(enclose, uni), enclose));
  return ad::reshape(ad::sub(ad::Tensor::scalar(1.0), giou), {1});
}

// Focal loss over class logits (softmax applied internally).
inline ad::Tensor focal_loss_logits_t(const ad::Tensor& logits, std::size_t target,
                                      double alpha_t = 0.25, double gamma = 2.0) {
  if (logits.rank() != 1) throw std::invalid_argument("focal_loss_logits_t: vector expected");
  if (target >= logits.numel())
    throw std::invalid_argument("focal_loss_logits_t: target out of range");
  ad::Tensor p = ad::softmax(logits);
  ad::Tensor pt = ad::clamp_min(ad::gather(p, {target}), 1e-12);
  ad::Tensor one_minus = ad::sub(ad::Tensor::scalar(1.0), pt);
  ad::Tensor focal = ad::mul(ad::pow_t(ad::clamp_min(one_minus, 0.0), gamma), ad::log_t(pt));
  return ad::smul(focal, -alpha_t);
}

// ---------------------------------------------------------------------------
// Assignment

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), sorted by row
  double cost = 0.0;
};

// Minimum-cost matching of size min(R, C) on a dense rectangular matrix
// (Jonker-Volgenant style shortest augmenting paths, O(n^3)). Deterministic:
// rows are processed in index order and equal-slack columns resolve to the
// lowest index.
inline Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  Assignment result;
  const int rows = static_cast<int>(cost.size());
  if (rows == 0) return result;
  const int cols = static_cast<int>(cost[0].size());
  if (cols == 0) return result;
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != cols)
      throw std::invalid_argument("hungarian: ragged cost matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw std::invalid_argument("hungarian: non-finite cost");
  }

  // Solve with rows <= cols; transpose back afterwards if needed.
  const bool transposed = rows > cols;
  const int n = transposed ? cols : rows;
  const int m = transposed ? rows : cols;
  auto at = [&](int r, int c) { return transposed ? cost[c][r] : cost[r][c]; };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> match_col(m + 1, 0);  // 1-based row matched to col; 0 = free
  std::vector<int> way(m + 1, 0);

  for (int i = 1; i <= n; ++i) {
    match_col[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match_col[j0];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[j0] != 0);
    do {
      const int j1 = way[j0];
      match_col[j0] = match_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  for (int j = 1; j <= m; ++j) {
    if (match_col[j] == 0) continue;
    const int r = match_col[j] - 1;
    const int c = j - 1;
    if (transposed)
      result.pairs.emplace_back(c, r);
    else
      result.pairs.emplace_back(r, c);
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  for (const auto& [r, c] : result.pairs) result.cost += cost[r][c];
  return result;
}

}  // namespace fdta::geom
