#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fdta/geometry.hpp"
#include "fdta/rng.hpp"

using namespace fdta;
using geom::Box2D;

namespace {

// Brute-force assignment oracle: enumerate every size-min(R,C) injective
// assignment and return the minimum total cost.
double brute_force_min_cost(const std::vector<std::vector<double>>& cost) {
  const int rows = static_cast<int>(cost.size());
  const int cols = rows == 0 ? 0 : static_cast<int>(cost[0].size());
  if (rows == 0 || cols == 0) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  if (rows <= cols) {
    std::vector<int> perm(cols);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double total = 0.0;
      for (int r = 0; r < rows; ++r) total += cost[r][perm[r]];
      best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    std::vector<int> perm(rows);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double total = 0.0;
      for (int c = 0; c < cols; ++c) total += cost[perm[c]][c];
      best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  return best;
}

}  // namespace

TEST_CASE("iou closed forms") {
  Box2D a{0, 0, 2, 2};
  CHECK(geom::iou(a, a) == 1.0);
  CHECK(geom::iou(a, Box2D{10, 10, 2, 2}) == 0.0);
  CHECK(geom::iou(a, Box2D{1, 0, 2, 2}) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  // Degenerate zero-area boxes report zero overlap.
  CHECK(geom::iou(Box2D{0, 0, 0, 0}, Box2D{0, 0, 0, 0}) == 0.0);
}

TEST_CASE("iou symmetry and range on random boxes") {
  Rng rng(41);
  for (int i = 0; i < 200; ++i) {
    Box2D a{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 5), rng.uniform(0, 5)};
    Box2D b{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 5), rng.uniform(0, 5)};
    const double ab = geom::iou(a, b);
    CHECK(ab == geom::iou(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(geom::giou_loss(a, b) >= 0.0);
    CHECK(geom::giou_loss(a, b) < 2.0);
  }
}

TEST_CASE("giou loss closed forms") {
  Box2D a{0, 0, 1, 1};
  CHECK(geom::giou_loss(a, a) == 0.0);
  // Disjoint along x: enclosing 3x1, GIoU = -1/3, loss 4/3.
  CHECK(geom::giou_loss(a, Box2D{2, 0, 1, 1}) == Catch::Approx(4.0 / 3.0).epsilon(1e-12));
  // When the union fills the enclosing box, loss reduces to 1 - IoU.
  Box2D left{0, 0, 1, 2}, right{1, 0, 1, 2};
  CHECK(geom::giou_loss(left, right) == Catch::Approx(1.0 - geom::iou(left, right)).epsilon(1e-12));
  CHECK_THROWS(geom::giou_loss(Box2D{0, 0, 0, 0}, Box2D{1, 1, 0, 0}));
}

TEST_CASE("l1 box loss closed forms") {
  Box2D a{0, 0, 1, 1};
  CHECK(geom::l1_box_loss(a, a) == 0.0);
  CHECK(geom::l1_box_loss(a, Box2D{1, 0, 1, 1}) == 1.0);
  CHECK(geom::l1_box_loss(a, Box2D{1, 2, 3, 0}) == 6.0);
}

TEST_CASE("focal loss closed forms") {
  CHECK(geom::focal_loss({0.0, 1.0}, 1) == Catch::Approx(0.0).margin(1e-11));
  // p_t = 0.5, alpha 0.25, gamma 2 -> 0.25 * 0.25 * ln 2
  CHECK(geom::focal_loss({0.5, 0.5}, 0) ==
        Catch::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
  // gamma = 0, alpha = 1 -> plain cross-entropy.
  CHECK(geom::focal_loss({0.3, 0.7}, 1, 1.0, 0.0) == Catch::Approx(-std::log(0.7)).epsilon(1e-12));
  // p_t = 0 is clamped, stays finite.
  CHECK(std::isfinite(geom::focal_loss({1.0, 0.0}, 1)));
  CHECK_THROWS(geom::focal_loss({0.5, 0.2}, 0));
}

TEST_CASE("focal loss monotone decreasing in p_t") {
  double prev = std::numeric_limits<double>::infinity();
  for (double pt = 0.05; pt < 1.0; pt += 0.05) {
    const double loss = geom::focal_loss({1.0 - pt, pt}, 1);
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("differentiable losses match plain versions and pass grad check") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Box2D gt{rng.uniform(0, 8), rng.uniform(0, 8), rng.uniform(1, 5), rng.uniform(1, 5)};
    Box2D pr{gt.x + rng.uniform(0.1, 2.0), gt.y + rng.uniform(0.1, 2.0),
             gt.w + rng.uniform(0.1, 1.0), gt.h + rng.uniform(0.1, 1.0)};
    ad::Tensor pred = ad::Tensor::leaf({4}, {pr.x, pr.y, pr.w, pr.h}, true);
    ad::Tensor gt_t = geom::box_tensor(gt);

    CHECK(geom::l1_box_loss_t(pred, gt_t).scalar_value() ==
          Catch::Approx(geom::l1_box_loss(pr, gt)).epsilon(1e-12));
    CHECK(geom::giou_loss_t(pred, gt_t).scalar_value() ==
          Catch::Approx(geom::giou_loss(pr, gt)).epsilon(1e-10));

    std::vector<ad::Tensor> params{pred};
    auto f_l1 = [&]() { return geom::l1_box_loss_t(pred, gt_t); };
    CHECK(ad::grad_check(f_l1, params, 1e-5).max_rel_err < 1e-4);
    auto f_giou = [&]() { return geom::giou_loss_t(pred, gt_t); };
    CHECK(ad::grad_check(f_giou, params, 1e-5).max_rel_err < 1e-4);
  }
}

TEST_CASE("focal loss gradient w.r.t. logits") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.range(2, 6);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    ad::Tensor logits = ad::Tensor::leaf({n}, v, true);
    const std::size_t target = rng.below(n);
    std::vector<ad::Tensor> params{logits};
    auto f = [&]() { return geom::focal_loss_logits_t(logits, target); };
    CHECK(ad::grad_check(f, params, 1e-5).max_rel_err < 1e-4);

    // Same value as the probability-space version.
    auto p = ad::softmax(logits).values();
    CHECK(f().scalar_value() == Catch::Approx(geom::focal_loss(p, target)).epsilon(1e-9));
  }
}

TEST_CASE("hungarian closed forms") {
  // Identity-like cost: diagonal matching, cost 0.
  auto a = geom::hungarian({{0, 1, 1}, {1, 0, 1}, {1, 1, 0}});
  CHECK(a.cost == 0.0);
  REQUIRE(a.pairs.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(a.pairs[i] == std::pair<int, int>{i, i});

  // [[1,2],[2,4]] -> anti-diagonal, cost 4.
  auto b = geom::hungarian({{1, 2}, {2, 4}});
  CHECK(b.cost == 4.0);
  REQUIRE(b.pairs.size() == 2);
  CHECK(b.pairs[0] == std::pair<int, int>{0, 1});
  CHECK(b.pairs[1] == std::pair<int, int>{1, 0});

  // 1x3 row: argmin column.
  auto c = geom::hungarian({{5, 1, 9}});
  REQUIRE(c.pairs.size() == 1);
  CHECK(c.pairs[0] == std::pair<int, int>{0, 1});
  CHECK(c.cost == 1.0);

  CHECK(geom::hungarian({}).pairs.empty());
}

TEST_CASE("hungarian matches brute force on random matrices") {
  Rng rng(59);
  for (int trial = 0; trial < 200; ++trial) {
    const int r = rng.range(1, 6);
    const int c = rng.range(1, 6);
    std::vector<std::vector<double>> cost(r, std::vector<double>(c));
    for (auto& row : cost)
      for (auto& v : row) v = rng.uniform(0.0, 10.0);
    auto result = geom::hungarian(cost);
    CHECK(result.pairs.size() == static_cast<std::size_t>(std::min(r, c)));
    CHECK(result.cost == Catch::Approx(brute_force_min_cost(cost)).epsilon(1e-9));
    // Each row/col used at most once; cost equals sum of matched entries.
    std::vector<int> rows_used(r, 0), cols_used(c, 0);
    double total = 0.0;
    for (auto [rr, cc] : result.pairs) {
      ++rows_used[rr];
      ++cols_used[cc];
      total += cost[rr][cc];
    }
    CHECK(total == Catch::Approx(result.cost));
    CHECK(*std::max_element(rows_used.begin(), rows_used.end()) <= 1);
    CHECK(*std::max_element(cols_used.begin(), cols_used.end()) <= 1);
  }
}

TEST_CASE("hungarian rejects bad input") {
  CHECK_THROWS(geom::hungarian({{1.0, 2.0}, {3.0}}));
  CHECK_THROWS(geom::hungarian({{std::numeric_limits<double>::infinity()}}));
}
