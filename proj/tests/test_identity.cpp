#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "fdta/identity.hpp"

using namespace fdta;
using ad::Tensor;
using geom::Box2D;
using identity::LabeledEmbedding;

namespace {

Tensor unit_rows(Rng& rng, int n, int dim) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) {
    auto row = rng.unit_vector(dim);
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor::leaf({n, dim}, std::move(v), true);
}

}  // namespace

TEST_CASE("assign identities closed forms") {
  std::vector<Box2D> gt{{0, 0, 2, 2}, {10, 0, 2, 2}};
  std::vector<std::int64_t> ids{5, 9};

  // Detections equal to GT: each gets its id with iou 1.
  auto labeled = identity::label_frame(gt, gt, ids, 1, 0);
  REQUIRE(labeled.size() == 2);
  CHECK(labeled[0].id == 5);
  CHECK(labeled[0].iou == 1.0);
  CHECK(labeled[1].id == 9);
  CHECK(labeled[1].embedding_index == 1);

  // One detection overlapping two GTs at different IoUs goes to the higher.
  std::vector<Box2D> gt2{{0, 0, 4, 4}, {3, 0, 4, 4}};
  std::vector<Box2D> det2{{0.0, 0.0, 4.0, 3.0}};  // IoU 0.75 with gt A, lower with B
  auto a2 = identity::assign_identities(det2, gt2);
  CHECK(a2.gt_of_detection[0] == 0);
  CHECK(a2.iou_of_detection[0] == Catch::Approx(0.75));

  // Disjoint detection is unmatched.
  auto a3 = identity::assign_identities({{100, 100, 1, 1}}, gt2);
  CHECK(a3.gt_of_detection[0] == -1);

  // Empty inputs.
  CHECK(identity::assign_identities({}, gt2).gt_of_detection.empty());
  CHECK(identity::assign_identities(det2, {}).gt_of_detection[0] == -1);
}

TEST_CASE("pair weight harmonic mean") {
  CHECK(identity::pair_weight(1.0, 1.0) == 1.0);
  CHECK(identity::pair_weight(0.5, 1.0) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(identity::pair_weight(0.6, 0.6) == Catch::Approx(0.6).epsilon(1e-12));
  CHECK_THROWS(identity::pair_weight(0.0, 0.0));

  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.uniform(0.01, 1.0), b = rng.uniform(0.01, 1.0);
    const double w = identity::pair_weight(a, b);
    CHECK(w >= std::min(a, b) - 1e-12);
    CHECK(w <= std::max(a, b) + 1e-12);
    CHECK(w == Catch::Approx(2.0 * a * b / (a + b)).margin(1e-12));
  }
}

TEST_CASE("pair sampling closed forms") {
  auto mk = [](std::int64_t id, std::int64_t frame, double iou) {
    LabeledEmbedding e;
    e.id = id;
    e.frame = frame;
    e.iou = iou;
    return e;
  };

  // One identity across 3 frames: 3 positive pairs, no negatives.
  auto p1 = identity::sample_pairs({mk(1, 1, 0.9), mk(1, 2, 0.8), mk(1, 3, 0.7)});
  CHECK(p1.positives.size() == 3);
  for (const auto& negs : p1.negatives) CHECK(negs.empty());

  // Two identities, 2 frames each, co-present: 2 positives, 4 cross-id pairs.
  auto p2 = identity::sample_pairs(
      {mk(1, 1, 1.0), mk(2, 1, 1.0), mk(1, 2, 1.0), mk(2, 2, 1.0)});
  CHECK(p2.positives.size() == 2);
  std::size_t directed = 0;
  for (const auto& negs : p2.negatives) directed += negs.size();
  CHECK(directed == 8);  // 4 unordered cross-id pairs, both directions

  // IoU below threshold excludes the sample entirely.
  auto p3 = identity::sample_pairs({mk(1, 1, 0.4), mk(1, 2, 0.9), mk(2, 2, 0.9)});
  CHECK(p3.samples.size() == 2);
  CHECK(p3.positives.empty());

  // Unlabeled samples never enter the pool.
  LabeledEmbedding unmatched;
  unmatched.frame = 1;
  unmatched.iou = 0.9;
  auto p4 = identity::sample_pairs({unmatched, mk(1, 1, 0.9)});
  CHECK(p4.samples.size() == 1);

  // Same-frame same-id samples form no positive pair.
  auto p5 = identity::sample_pairs({mk(1, 1, 0.9), mk(1, 1, 0.8)});
  CHECK(p5.positives.empty());

  // With quality handling off, low-IoU samples stay and weights are 1.
  auto p6 = identity::sample_pairs({mk(1, 1, 0.4), mk(1, 2, 0.9)}, 0.5, false);
  CHECK(p6.samples.size() == 2);
  REQUIRE(p6.positives.size() == 1);
  CHECK(p6.positives[0].weight == 1.0);
}

TEST_CASE("pair accounting matches the counting oracle") {
  Rng rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    const int n_ids = rng.range(1, 5);
    const int n_frames = rng.range(1, 8);
    std::vector<LabeledEmbedding> pool;
    for (std::int64_t f = 1; f <= n_frames; ++f)
      for (std::int64_t id = 1; id <= n_ids; ++id) {
        if (!rng.bernoulli(0.7)) continue;
        LabeledEmbedding e;
        e.frame = f;
        e.iou = rng.uniform(0.0, 1.0);
        if (rng.bernoulli(0.9)) e.id = id;
        pool.push_back(e);
      }
    auto pairs = identity::sample_pairs(pool, 0.5);

    std::map<std::int64_t, int> frames_per_id;
    for (const auto& s : pairs.samples) ++frames_per_id[*s.id];
    std::size_t expected = 0;
    for (auto [id, m] : frames_per_id)
      expected += static_cast<std::size_t>(m) * (m - 1) / 2;
    REQUIRE(pairs.positives.size() == expected);

    for (const auto& pp : pairs.positives) {
      CHECK(pairs.samples[pp.a].frame != pairs.samples[pp.b].frame);
      CHECK(*pairs.samples[pp.a].id == *pairs.samples[pp.b].id);
      CHECK(pairs.samples[pp.a].iou >= 0.5);
      CHECK(pairs.samples[pp.b].iou >= 0.5);
    }
    for (std::size_t i = 0; i < pairs.negatives.size(); ++i)
      for (auto j : pairs.negatives[i]) CHECK(*pairs.samples[i].id != *pairs.samples[j].id);
  }
}

TEST_CASE("projection head output is unit norm and deterministic") {
  Rng rng(7);
  auto phi = identity::make_projection_head(rng, 8);
  Tensor e = Tensor::leaf({8}, rng.gaussian_vector(8), true);
  Tensor z = identity::project(e, phi);
  double n2 = 0.0;
  for (double x : z.values()) n2 += x * x;
  CHECK(std::fabs(std::sqrt(n2) - 1.0) < 1e-9);
  CHECK(identity::project(e, phi).values() == z.values());

  std::vector<Tensor> params{e, phi.layers[0].w, phi.layers[2].w};
  auto f = [&]() {
    Tensor target = Tensor::full({8}, 0.3);
    Tensor diff = ad::sub(identity::project(e, phi), target);
    return ad::sum(ad::mul(diff, diff));
  };
  CHECK(ad::grad_check(f, params, 1e-5).max_rel_err < 1e-4);
}

TEST_CASE("info_nce closed forms") {
  Rng rng(9);
  const int dim = 6;
  Tensor a = Tensor::leaf({dim}, rng.unit_vector(dim), true);
  Tensor p = Tensor::leaf({dim}, rng.unit_vector(dim), true);

  // No negatives: zero.
  CHECK(identity::info_nce(a, p, {}, 0.1).scalar_value() == 0.0);

  // One negative with equal similarity: ln 2.
  Tensor n_same = p;
  CHECK(identity::info_nce(a, p, {n_same}, 0.1).scalar_value() ==
        Catch::Approx(std::log(2.0)).epsilon(1e-12));

  // Closed form ln(1 + exp(-delta/tau)).
  for (double tau : {0.05, 0.1, 0.5, 1.0}) {
    Tensor n = Tensor::leaf({dim}, rng.unit_vector(dim));
    const double sp = ad::dot(a, p).scalar_value();
    const double sn = ad::dot(a, n).scalar_value();
    const double delta = sp - sn;
    const double expect = std::log(1.0 + std::exp(-delta / tau));
    CHECK(identity::info_nce(a, p, {n}, tau).scalar_value() ==
          Catch::Approx(expect).epsilon(1e-10));
  }
  CHECK_THROWS(identity::info_nce(a, p, {}, 0.0));
}

TEST_CASE("info_nce gradient and shift invariance") {
  Rng rng(21);
  const int dim = 5;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = Tensor::leaf({dim}, rng.gaussian_vector(dim), true);
    Tensor p = Tensor::leaf({dim}, rng.gaussian_vector(dim), true);
    Tensor n1 = Tensor::leaf({dim}, rng.gaussian_vector(dim), true);
    Tensor n2 = Tensor::leaf({dim}, rng.gaussian_vector(dim), true);
    std::vector<Tensor> params{a, p, n1, n2};
    auto f = [&]() { return identity::info_nce(a, p, {n1, n2}, 0.5); };
    CHECK(ad::grad_check(f, params, 1e-5).max_rel_err < 1e-4);
  }

  // Softmax shift invariance: adding a constant to every similarity leaves
  // the loss unchanged. Evaluate through raw logit vectors.
  const double sims[] = {0.9, 0.2, -0.4};
  auto nce_of = [&](double shift) {
    Tensor logits = Tensor::leaf({3}, {sims[0] + shift, sims[1] + shift, sims[2] + shift});
    Tensor scaled = ad::smul(logits, 1.0 / 0.1);
    return ad::sub(ad::logsumexp(scaled), ad::gather(scaled, {0})).scalar_value();
  };
  CHECK(nce_of(0.0) == Catch::Approx(nce_of(0.37)).margin(1e-10));
}

TEST_CASE("ia_loss composition") {
  Rng rng(33);
  const int dim = 6;

  // Pool: two same-id samples (frames 1, 2) and one other-id sample.
  std::vector<LabeledEmbedding> pool(3);
  pool[0].id = 1; pool[0].frame = 1; pool[0].iou = 1.0; pool[0].embedding_index = 0;
  pool[1].id = 1; pool[1].frame = 2; pool[1].iou = 1.0; pool[1].embedding_index = 1;
  pool[2].id = 2; pool[2].frame = 1; pool[2].iou = 1.0; pool[2].embedding_index = 2;
  auto pairs = identity::sample_pairs(pool);
  REQUIRE(pairs.positives.size() == 1);
  CHECK(pairs.positives[0].weight == 1.0);

  Tensor z = unit_rows(rng, 3, dim);
  Tensor z_unit = ad::l2_normalize_rows(z);
  const double tau = 0.1;
  Tensor loss = identity::ia_loss_from_projected(z_unit, pairs, tau);

  // Hand-computed: average of the two directed InfoNCE terms.
  auto row = [&](int r) {
    std::vector<double> v(z_unit.values().begin() + r * dim,
                          z_unit.values().begin() + (r + 1) * dim);
    return v;
  };
  auto dotv = [&](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += x[i] * y[i];
    return s;
  };
  auto nce = [&](int anchor, int pos, int neg) {
    const double sp = dotv(row(anchor), row(pos)) / tau;
    const double sn = dotv(row(anchor), row(neg)) / tau;
    const double mx = std::max(sp, sn);
    return mx + std::log(std::exp(sp - mx) + std::exp(sn - mx)) - sp;
  };
  const double expect = 0.5 * (nce(0, 1, 2) + nce(1, 0, 2));
  CHECK(loss.scalar_value() == Catch::Approx(expect).epsilon(1e-10));

  // Doubling every weight doubles the loss.
  auto doubled = pairs;
  for (auto& pp : doubled.positives) pp.weight *= 2.0;
  CHECK(identity::ia_loss_from_projected(z_unit, doubled, tau).scalar_value() ==
        Catch::Approx(2.0 * loss.scalar_value()).epsilon(1e-10));

  // Empty positive set: defined as zero with a warning flag.
  identity::PairSet empty;
  bool warned = false;
  CHECK(identity::ia_loss_from_projected(z_unit, empty, tau, &warned).scalar_value() == 0.0);
  CHECK(warned);
}

TEST_CASE("ia_loss two pairs weighted mean") {
  Rng rng(35);
  const int dim = 4;
  std::vector<LabeledEmbedding> pool(4);
  pool[0].id = 1; pool[0].frame = 1; pool[0].iou = 0.8;
  pool[1].id = 1; pool[1].frame = 2; pool[1].iou = 0.6;
  pool[2].id = 2; pool[2].frame = 1; pool[2].iou = 1.0;
  pool[3].id = 2; pool[3].frame = 2; pool[3].iou = 1.0;
  for (std::size_t i = 0; i < 4; ++i) pool[i].embedding_index = i;
  auto pairs = identity::sample_pairs(pool);
  REQUIRE(pairs.positives.size() == 2);

  Tensor z = ad::l2_normalize_rows(unit_rows(rng, 4, dim));
  const double tau = 0.2;
  Tensor loss = identity::ia_loss_from_projected(z, pairs, tau);

  double expect = 0.0;
  for (const auto& pp : pairs.positives) {
    auto directed = [&](std::size_t anchor, std::size_t pos) {
      const auto& vals = z.values();
      auto dotrc = [&](std::size_t r, std::size_t c) {
        double s = 0.0;
        for (int i = 0; i < dim; ++i) s += vals[r * dim + i] * vals[c * dim + i];
        return s / tau;
      };
      std::vector<double> logits{dotrc(anchor, pos)};
      for (auto nidx : pairs.negatives[anchor]) logits.push_back(dotrc(anchor, nidx));
      double mx = logits[0];
      for (double x : logits) mx = std::max(mx, x);
      double s = 0.0;
      for (double x : logits) s += std::exp(x - mx);
      return mx + std::log(s) - logits[0];
    };
    expect += pp.weight * 0.5 * (directed(pp.a, pp.b) + directed(pp.b, pp.a));
  }
  expect /= pairs.positives.size();
  CHECK(loss.scalar_value() == Catch::Approx(expect).epsilon(1e-10));
}

TEST_CASE("ia_loss gradient check through the projection head") {
  Rng rng(39);
  const int dim = 6;
  std::vector<LabeledEmbedding> pool(5);
  const std::int64_t ids[] = {1, 1, 2, 2, 1};
  const std::int64_t frames[] = {1, 2, 1, 2, 3};
  for (int i = 0; i < 5; ++i) {
    pool[i].id = ids[i];
    pool[i].frame = frames[i];
    pool[i].iou = 0.6 + 0.08 * i;
    pool[i].embedding_index = i;
  }
  auto pairs = identity::sample_pairs(pool);
  auto phi = identity::make_projection_head(rng, dim);
  Tensor pooled = unit_rows(rng, 5, dim);
  std::vector<Tensor> params{pooled, phi.layers[0].w, phi.layers[1].w, phi.layers[2].b};
  auto f = [&]() { return identity::ia_loss(pooled, pairs, phi, 0.3); };
  CHECK(ad::grad_check(f, params, 1e-5).max_rel_err < 1e-4);

  // Without the projection head: InfoNCE directly on normalized embeddings.
  auto f2 = [&]() { return identity::ia_loss(pooled, pairs, phi, 0.3, false); };
  std::vector<Tensor> params2{pooled};
  CHECK(ad::grad_check(f2, params2, 1e-5).max_rel_err < 1e-4);
}

TEST_CASE("ia_loss decreases under gradient descent on a tiny pool") {
  Rng rng(51);
  const int dim = 8;
  std::vector<LabeledEmbedding> pool(10);
  for (int i = 0; i < 10; ++i) {
    pool[i].id = i % 2 + 1;
    pool[i].frame = i / 2 + 1;
    pool[i].iou = 0.9;
    pool[i].embedding_index = i;
  }
  auto pairs = identity::sample_pairs(pool);
  auto phi = identity::make_projection_head(rng, dim);
  Tensor pooled = unit_rows(rng, 10, dim);

  std::vector<Tensor> params{pooled};
  for (auto& layer : phi.layers) {
    params.push_back(layer.w);
    params.push_back(layer.b);
  }
  double initial = 0.0, final_loss = 0.0;
  const double lr = 0.05;
  for (int step = 0; step < 200; ++step) {
    for (auto& p : params) p.zero_grad();
    Tensor loss = identity::ia_loss(pooled, pairs, phi, 0.1);
    if (step == 0) initial = loss.scalar_value();
    final_loss = loss.scalar_value();
    loss.backward();
    for (auto& p : params) {
      auto& vals = p.mutable_values();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * g[i];
    }
  }
  CHECK(final_loss < initial);
}
