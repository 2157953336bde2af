#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fdta/spatial.hpp"

using namespace fdta;
using ad::Tensor;
using spatial::DepthBins;

namespace {

Tensor random_grid(Rng& rng, int h, int w, int c, bool requires_grad = false) {
  std::vector<double> v(static_cast<std::size_t>(h) * w * c);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::leaf({h, w, c}, std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("lid bins closed form K=4") {
  auto bins = spatial::lid_bins(4, 0.0, 20.0);
  CHECK(bins.bin_size == Catch::Approx(2.0).epsilon(1e-15));
  REQUIRE(bins.values.size() == 5);
  const double expect[] = {0.0, 2.0, 6.0, 12.0, 20.0};
  for (int i = 0; i < 5; ++i) CHECK(bins.values[i] == Catch::Approx(expect[i]).margin(1e-12));
}

TEST_CASE("lid bins K=1 and defaults") {
  auto bins = spatial::lid_bins(1, 3.0, 7.0);
  CHECK(bins.bin_size == Catch::Approx(4.0));
  // i=0: (0.5)^2 * bs/2 - bs/8 cancels exactly, so the first bin sits at
  // d_min (the K=4 case shows the same: b_0 = 0 = d_min).
  CHECK(bins.values[0] == Catch::Approx(3.0).margin(1e-12));
  CHECK(bins.values[1] == 7.0);

  auto defaults = spatial::lid_bins(12);
  CHECK(defaults.d_min == 1e-3);
  CHECK(defaults.d_max == 256.0);
  CHECK(defaults.values.back() == 256.0);

  CHECK_THROWS(spatial::lid_bins(0, 0.0, 1.0));
  CHECK_THROWS(spatial::lid_bins(4, 2.0, 1.0));
}

TEST_CASE("lid bins strictly increasing across K and ranges") {
  Rng rng(101);
  for (int k : {1, 2, 3, 5, 8, 16, 32, 64, 128}) {
    const double lo = rng.uniform(0.0, 10.0);
    const double hi = lo + rng.uniform(0.5, 300.0);
    auto bins = spatial::lid_bins(k, lo, hi);
    for (int i = 0; i < k; ++i) CHECK(bins.values[i] < bins.values[i + 1]);
    CHECK(bins.values[0] >= lo);
    CHECK(bins.values.back() == hi);
    CHECK(bins.bin_size == Catch::Approx(2.0 * (hi - lo) / (k * (1.0 + k))));
  }
}

TEST_CASE("discretize depth nearest-bin semantics") {
  auto bins = spatial::lid_bins(4, 0.0, 20.0);  // values 0,2,6,12,20
  CHECK(spatial::discretize_depth(6.0, bins) == 2);
  CHECK(spatial::discretize_depth(5.0, bins) == 2);  // |5-6| < |5-2|
  CHECK(spatial::discretize_depth(1e6, bins) == 4);
  CHECK(spatial::discretize_depth(-5.0, bins) == 0);
  // Tie between bins 0 (value 0) and 1 (value 2) at depth 1 -> lower index.
  CHECK(spatial::discretize_depth(1.0, bins) == 0);
  CHECK_THROWS(spatial::discretize_depth(std::nan(""), bins));
}

TEST_CASE("depth expectation") {
  auto bins = spatial::lid_bins(4, 0.0, 20.0);
  CHECK(spatial::depth_expectation({0, 1, 0, 0, 0}, bins) == 2.0);
  CHECK(spatial::depth_expectation({0.2, 0.2, 0.2, 0.2, 0.2}, bins) == Catch::Approx(8.0));
  CHECK(spatial::depth_expectation({0, 0, 0, 0, 1}, bins) == 20.0);
  CHECK_THROWS(spatial::depth_expectation({0.5, 0.2, 0, 0, 0}, bins));
}

TEST_CASE("one-hot round trip through expectation and discretization") {
  auto bins = spatial::lid_bins(12, 1e-3, 256.0);
  for (int k = 0; k <= 12; ++k) {
    std::vector<double> probs(13, 0.0);
    probs[k] = 1.0;
    const double d = spatial::depth_expectation(probs, bins);
    CHECK(spatial::discretize_depth(d, bins) == k);
  }
}

TEST_CASE("weighted depth loss") {
  auto bins = spatial::lid_bins(2, 0.0, 10.0);
  spatial::DepthField field;
  field.rows = 1;
  field.cols = 2;
  field.probs = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}};
  field.target_bins = {0, 1};
  field.foreground = {1, 0};
  CHECK(spatial::weighted_depth_loss(field, bins, 7.0) == Catch::Approx(0.0).margin(1e-11));

  // Single foreground pixel at p_t = 0.5 with weight 7.
  spatial::DepthField one;
  one.rows = one.cols = 1;
  one.probs = {{0.5, 0.5, 0.0}};
  one.target_bins = {0};
  one.foreground = {1};
  CHECK(spatial::weighted_depth_loss(one, bins, 7.0) ==
        Catch::Approx(7.0 * 0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));

  // fg_weight = 1 reduces to the unweighted mean focal loss.
  Rng rng(3);
  spatial::DepthField rnd;
  rnd.rows = 2;
  rnd.cols = 3;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> p(3);
    double s = 0.0;
    for (auto& x : p) {
      x = rng.uniform(0.05, 1.0);
      s += x;
    }
    for (auto& x : p) x /= s;
    rnd.probs.push_back(p);
    rnd.target_bins.push_back(rng.range(0, 2));
    rnd.foreground.push_back(static_cast<std::uint8_t>(rng.range(0, 1)));
  }
  double plain = 0.0;
  for (int i = 0; i < 6; ++i) plain += geom::focal_loss(rnd.probs[i], rnd.target_bins[i]);
  plain /= 6.0;
  CHECK(spatial::weighted_depth_loss(rnd, bins, 1.0) == Catch::Approx(plain).margin(1e-12));

  spatial::DepthField bad = one;
  bad.target_bins = {9};
  CHECK_THROWS(spatial::weighted_depth_loss(bad, bins, 7.0));
}

TEST_CASE("weighted depth loss tensor path matches and differentiates") {
  Rng rng(23);
  const int n = 6, k1 = 4;
  std::vector<double> logits(n * k1);
  for (auto& x : logits) x = rng.uniform(-2.0, 2.0);
  std::vector<int> targets(n);
  std::vector<std::uint8_t> fg(n);
  for (int i = 0; i < n; ++i) {
    targets[i] = rng.range(0, k1 - 1);
    fg[i] = static_cast<std::uint8_t>(rng.range(0, 1));
  }
  Tensor lt = Tensor::leaf({n, k1}, logits, true);
  Tensor loss = spatial::weighted_depth_loss_t(lt, targets, fg, 7.0);

  // Cross-check against the probability-space version.
  auto probs = ad::softmax_rows(Tensor::leaf({n, k1}, logits)).values();
  double expect = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(probs.begin() + i * k1, probs.begin() + (i + 1) * k1);
    expect += (fg[i] ? 7.0 : 1.0) * geom::focal_loss(row, targets[i]);
  }
  expect /= n;
  CHECK(loss.scalar_value() == Catch::Approx(expect).epsilon(1e-10));

  std::vector<Tensor> params{lt};
  auto f = [&]() { return spatial::weighted_depth_loss_t(lt, targets, fg, 7.0); };
  CHECK(ad::grad_check(f, params, 1e-5).max_rel_err < 1e-4);
}

TEST_CASE("depth pe interpolation") {
  Rng rng(5);
  auto pe = spatial::make_depth_pe_table(rng, 8, 4, 0.0, 7.0);  // u == depth here
  const int dim = 4;

  // Integral coordinate: exact table row.
  Tensor d3 = Tensor::leaf({1}, {3.0});
  auto row = spatial::depth_pe(d3, pe).values();
  for (int c = 0; c < dim; ++c) CHECK(row[c] == pe.table.value_at(3 * dim + c));

  // u = 1.25 -> 0.75 PE[1] + 0.25 PE[2].
  Tensor d125 = Tensor::leaf({1}, {1.25});
  auto mix = spatial::depth_pe(d125, pe).values();
  for (int c = 0; c < dim; ++c)
    CHECK(mix[c] == Catch::Approx(0.75 * pe.table.value_at(1 * dim + c) +
                                  0.25 * pe.table.value_at(2 * dim + c))
                        .margin(1e-15));

  // Below range clamps to PE[0].
  Tensor dneg = Tensor::leaf({1}, {-3.0});
  auto lo = spatial::depth_pe(dneg, pe).values();
  for (int c = 0; c < dim; ++c) CHECK(lo[c] == pe.table.value_at(c));

  // Piecewise linear inside a cell: pe(u) = (pe(u-h) + pe(u+h)) / 2.
  for (int trial = 0; trial < 20; ++trial) {
    const double u = rng.uniform(0.1, 6.9);
    const double h = 0.03;
    auto at = [&](double x) {
      return spatial::depth_pe(Tensor::leaf({1}, {x}), pe).values();
    };
    const double cell = std::floor(u);
    if (u - h < cell || u + h > cell + 1.0) continue;  // stay within one cell
    auto mid = at(u), l = at(u - h), r = at(u + h);
    for (int c = 0; c < dim; ++c) CHECK(std::fabs(mid[c] - 0.5 * (l[c] + r[c])) < 1e-12);
  }
}

TEST_CASE("depth pe gradients") {
  Rng rng(9);
  auto pe = spatial::make_depth_pe_table(rng, 6, 3, 0.0, 10.0);
  Tensor depths = Tensor::leaf({4}, {1.3, 4.7, 8.21, 2.9}, true);
  std::vector<Tensor> params{depths, pe.table};
  auto f = [&]() { return ad::sum(ad::mul(spatial::depth_pe(depths, pe),
                                          spatial::depth_pe(depths, pe))); };
  CHECK(ad::grad_check(f, params, 1e-5).max_rel_err < 1e-4);
}

TEST_CASE("pyramid average closed forms") {
  // All-constant pyramid: average of equals.
  Tensor f8 = Tensor::full({4, 4, 2}, 3.5);
  Tensor f16 = Tensor::full({2, 2, 2}, 3.5);
  Tensor f32 = Tensor::full({1, 1, 2}, 3.5);
  for (double v : spatial::pyramid_average(f8, f16, f32).values())
    CHECK(v == Catch::Approx(3.5).epsilon(1e-12));

  // Zero coarse levels: f8 / 3.
  Rng rng(77);
  Tensor r8 = random_grid(rng, 4, 4, 2);
  Tensor z16 = Tensor::zeros({2, 2, 2});
  Tensor z32 = Tensor::zeros({1, 1, 2});
  auto out = spatial::pyramid_average(r8, z16, z32).values();
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(out[i] == Catch::Approx(r8.values()[i] / 3.0).margin(1e-12));

  // Single-cell f16 upsamples to a constant grid.
  Tensor g8 = Tensor::zeros({2, 2, 1});
  Tensor g16 = Tensor::full({1, 1, 1}, 0.9);
  // f32 would need 0.5x0.5; use matching 2x2 pyramid base instead: here we
  // check the upsample op directly.
  auto up = ad::upsample_bilinear(g16, 2).values();
  for (double v : up) CHECK(v == 0.9);

  CHECK_THROWS(spatial::pyramid_average(r8, z32, z16));
}

TEST_CASE("foreground mask rasterization") {
  // Arena 8x8 onto a 4x4 grid: each cell covers 2x2 units.
  auto mask = spatial::foreground_mask({geom::Box2D{2.0, 2.0, 2.0, 2.0}}, 8.0, 8.0, 4, 4);
  // Box spans cells [1,2] in both axes (border cells included).
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const bool fg = i >= 1 && i <= 2 && j >= 1 && j <= 2;
      CHECK(mask[i * 4 + j] == static_cast<std::uint8_t>(fg));
    }
  auto empty = spatial::foreground_mask({}, 8.0, 8.0, 4, 4);
  for (auto v : empty) CHECK(v == 0);
}

TEST_CASE("spatial forward shapes and fusion") {
  Rng rng(55);
  const int dim = 16, heads = 2, ffn = 32, patch = 2, channels = 2;
  auto bins = spatial::lid_bins(4, 0.0, 20.0);
  auto sa = spatial::make_spatial_adapter(rng, patch, channels, dim, heads, ffn, 1, 1, 8, bins);

  Tensor f8 = random_grid(rng, 4, 4, channels);
  Tensor f16 = random_grid(rng, 2, 2, channels);
  Tensor f32 = random_grid(rng, 1, 1, channels);
  auto out = spatial::spatial_forward(sa, f8, f16, f32);
  CHECK(out.depth_logits.shape() == ad::Shape{16, 5});
  CHECK(out.dhat.shape() == ad::Shape{16});
  CHECK(out.depth_tokens.shape() == ad::Shape{4, dim});
  CHECK(out.pe_d.shape() == ad::Shape{4, dim});
  for (double d : out.dhat.values()) {
    CHECK(d >= bins.values.front());
    CHECK(d <= bins.values.back());
  }

  Tensor objects = Tensor::leaf({3, dim}, Rng(1).gaussian_vector(3 * dim), true);
  Tensor fused = spatial::fuse_depth(sa, objects, out, true);
  CHECK(fused.shape() == objects.shape());

  // Zeroing the depth cross-attention output projection makes the block a
  // no-op: fusion equals the same blocks without the depth layer.
  for (auto& block : sa.fusion) {
    auto& w = block.depth_attn.o.w.mutable_values();
    std::fill(w.begin(), w.end(), 0.0);
    auto& b = block.depth_attn.o.b.mutable_values();
    std::fill(b.begin(), b.end(), 0.0);
  }
  Tensor with_zeroed = spatial::fuse_depth(sa, objects, out, true);
  Tensor reference = objects;
  for (const auto& block : sa.fusion) {
    Tensor n1 = nn::layer_norm_forward(block.ln_self, reference);
    reference = ad::add(reference, nn::mha_forward(block.self_attn, n1, n1, n1));
    Tensor n2 = nn::layer_norm_forward(block.ln_vis, reference);
    reference =
        ad::add(reference, nn::mha_forward(block.vis_attn, n2, out.vis_tokens, out.vis_tokens));
    Tensor n4 = nn::layer_norm_forward(block.ln_ff, reference);
    reference = ad::add(
        reference, nn::linear_forward(block.ff2, ad::relu(nn::linear_forward(block.ff1, n4))));
  }
  for (std::size_t i = 0; i < with_zeroed.numel(); ++i)
    CHECK(with_zeroed.values()[i] == Catch::Approx(reference.values()[i]).margin(1e-12));
}

TEST_CASE("gradients flow through the full spatial branch") {
  Rng rng(66);
  const int dim = 8, heads = 2, ffn = 16, patch = 2, channels = 1;
  auto bins = spatial::lid_bins(3, 0.0, 10.0);
  auto sa = spatial::make_spatial_adapter(rng, patch, channels, dim, heads, ffn, 1, 1, 4, bins);

  Tensor f8 = random_grid(rng, 4, 4, channels);
  Tensor f16 = random_grid(rng, 2, 2, channels);
  Tensor f32 = random_grid(rng, 1, 1, channels);
  Tensor objects = Tensor::leaf({2, dim}, Rng(2).gaussian_vector(2 * dim), true);

  std::vector<int> targets(16);
  std::vector<std::uint8_t> fg(16, 0);
  Rng trng(8);
  for (auto& t : targets) t = trng.range(0, 3);
  fg[3] = fg[7] = 1;

  std::vector<Tensor> params{objects, sa.depth_head.w, sa.pe.table,
                             sa.fusion[0].depth_attn.o.w, sa.depth_extract.layers[0].w};
  auto f = [&]() {
    auto out = spatial::spatial_forward(sa, f8, f16, f32);
    Tensor fused = spatial::fuse_depth(sa, objects, out, true);
    Tensor depth_loss = spatial::weighted_depth_loss_t(out.depth_logits, targets, fg, 7.0);
    return ad::add(depth_loss, ad::mean(ad::mul(fused, fused)));
  };
  CHECK(ad::grad_check(f, params, 1e-5).max_rel_err < 1e-4);
}
