#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "pixelseg/malis.hpp"
#include "pixelseg/rng.hpp"

using namespace pixelseg;

namespace {

// Random binary foreground plane; rejects degenerate all-one/all-zero draws
// when asked to.
Plane<std::uint8_t> random_fg(Rng& rng, int h, int w, bool mixed) {
  for (;;) {
    Plane<std::uint8_t> fg(h, w);
    int ones = 0;
    for (auto& v : fg.pix) {
      v = rng.coin() ? 1 : 0;
      ones += v;
    }
    if (!mixed || (ones > 0 && ones < static_cast<int>(fg.size()))) return fg;
  }
}

Plane<double> random_probs(Rng& rng, int h, int w) {
  Plane<double> p(h, w);
  for (auto& v : p.pix) v = rng.uniform(0.01, 0.99);
  return p;
}

AffinityGraph<double> truth_graph(const Plane<std::uint8_t>& fg) {
  Plane<double> t(fg.height, fg.width);
  for (std::size_t i = 0; i < fg.size(); ++i) t.pix[i] = fg.pix[i] ? 1.0 : 0.0;
  return affinity_forward(t);
}

// Mirrors the library's edge enumeration: horizontal edges in raster order,
// then vertical ones.
std::vector<oracle::BruteEdge> edge_list(const AffinityGraph<double>& pred,
                                         const AffinityGraph<double>& truth, bool positive) {
  std::vector<oracle::BruteEdge> edges;
  const int h = pred.height, w = pred.width;
  int id = 0;
  auto value = [&](double p, double t) { return positive ? std::min(p, t) : std::max(p, t); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      edges.push_back({id++, y * w + x, y * w + x + 1, value(pred.a_x.at(y, x), truth.a_x.at(y, x))});
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x)
      edges.push_back({id++, y * w + x, (y + 1) * w + x, value(pred.a_y.at(y, x), truth.a_y.at(y, x))});
  return edges;
}

}  // namespace

TEST_CASE("affinity forward: min of endpoints with argmin offsets") {
  // Constant image: every real edge equals the constant, offsets 0.
  Plane<double> c(3, 4, 0.7);
  const auto g = affinity_forward(c);
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 4; ++x) {
      if (x + 1 < 4) {
        CHECK(g.a_x.at(y, x) == 0.7);
        CHECK(g.m_x.at(y, x) == 0);
      } else {
        CHECK(g.a_x.at(y, x) == 1.0);  // unused last column stays 1
      }
      if (y + 1 < 3) CHECK(g.a_y.at(y, x) == 0.7);
      else CHECK(g.a_y.at(y, x) == 1.0);
    }
  }

  Plane<double> two(1, 2);
  two.at(0, 0) = 0.3;
  two.at(0, 1) = 0.8;
  const auto g2 = affinity_forward(two);
  CHECK(g2.a_x.at(0, 0) == 0.3);
  CHECK(g2.m_x.at(0, 0) == 0);  // first endpoint supplied the min
  two.at(0, 0) = 0.8;
  two.at(0, 1) = 0.3;
  const auto g3 = affinity_forward(two);
  CHECK(g3.a_x.at(0, 0) == 0.3);
  CHECK(g3.m_x.at(0, 0) == 1);
  two.at(0, 1) = 0.8;  // tie
  CHECK(affinity_forward(two).m_x.at(0, 0) == 0);

  // Binary label image: affinity 1 exactly inside components, 0 on any edge
  // touching background.
  Plane<double> lab(2, 3, 0.0);
  lab.at(0, 0) = lab.at(0, 1) = lab.at(1, 0) = 1.0;
  const auto gl = affinity_forward(lab);
  CHECK(gl.a_x.at(0, 0) == 1.0);
  CHECK(gl.a_x.at(0, 1) == 0.0);
  CHECK(gl.a_y.at(0, 0) == 1.0);
  CHECK(gl.a_y.at(0, 1) == 0.0);
  CHECK(gl.a_y.at(0, 2) == 0.0);
}

TEST_CASE("affinity backward: symmetric attribution onto the argmin pixel") {
  Plane<double> img(1, 2);
  img.at(0, 0) = 0.3;
  img.at(0, 1) = 0.8;
  const auto g = affinity_forward(img);
  Plane<double> da_x(1, 2, 0.0), da_y(1, 2, 0.0), d_pos, d_neg;
  affinity_backward(da_x, da_y, g, d_pos, d_neg);
  CHECK(d_pos.pix == std::vector<double>{0.0, 0.0});

  da_x.at(0, 0) = 0.25;
  affinity_backward(da_x, da_y, g, d_pos, d_neg);
  CHECK(d_pos.at(0, 0) == 0.25);
  CHECK(d_pos.at(0, 1) == 0.0);
  CHECK(d_neg.at(0, 0) == -0.25);

  // Random case: attribution is symmetric and routes to argmin endpoints.
  Rng rng(31);
  Plane<double> img2 = random_probs(rng, 4, 5);
  const auto g2 = affinity_forward(img2);
  Plane<double> dax(4, 5), day(4, 5);
  for (auto& v : dax.pix) v = rng.uniform(-1.0, 1.0);
  for (auto& v : day.pix) v = rng.uniform(-1.0, 1.0);
  affinity_backward(dax, day, g2, d_pos, d_neg);
  for (std::size_t i = 0; i < d_pos.size(); ++i) CHECK(d_pos.pix[i] == -d_neg.pix[i]);
  // Independently recompute the routing.
  Plane<double> want(4, 5, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x + 1 < 5; ++x)
      want.at(y, x + (img2.at(y, x + 1) < img2.at(y, x) ? 1 : 0)) += dax.at(y, x);
  for (int y = 0; y + 1 < 4; ++y)
    for (int x = 0; x < 5; ++x)
      want.at(y + (img2.at(y + 1, x) < img2.at(y, x) ? 1 : 0), x) += day.at(y, x);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(d_pos.pix[i] == want.pix[i]);
}

TEST_CASE("connected components: 4-connectivity, raster numbering") {
  Plane<std::uint8_t> empty(3, 3, 0);
  CHECK(connected_components(empty).pix == std::vector<int>(9, 0));

  // Two blobs separated by a one-pixel membrane column.
  Plane<std::uint8_t> blobs(3, 5, 0);
  for (int y = 0; y < 3; ++y) {
    blobs.at(y, 0) = blobs.at(y, 1) = 1;
    blobs.at(y, 3) = blobs.at(y, 4) = 1;
  }
  const auto comp = connected_components(blobs);
  CHECK(comp.at(0, 0) == 1);
  CHECK(comp.at(2, 1) == 1);
  CHECK(comp.at(0, 3) == 2);
  CHECK(comp.at(2, 4) == 2);
  CHECK(comp.at(1, 2) == 0);

  // Diagonal touching is not connected under 4-connectivity.
  Plane<std::uint8_t> diag(2, 2, 0);
  diag.at(0, 0) = diag.at(1, 1) = 1;
  const auto dc = connected_components(diag);
  CHECK(dc.at(0, 0) == 1);
  CHECK(dc.at(1, 1) == 2);

  Plane<std::uint8_t> full(2, 2, 1);
  CHECK(connected_components(full).pix == std::vector<int>(4, 1));
}

TEST_CASE("maximin gradient: single-pair closed form") {
  // 1x2, both pixels in one component, predicted foreground [0.4, 0.7].
  Plane<double> probs(1, 2);
  probs.at(0, 0) = 0.4;
  probs.at(0, 1) = 0.7;
  Plane<std::uint8_t> fg(1, 2, 1);
  const auto pred = affinity_forward(probs);
  const auto truth = truth_graph(fg);
  const auto comp = connected_components(fg);
  const auto res = malis_gradient(pred, truth, comp);
  CHECK(res.total_pos == 1);
  CHECK(res.total_neg == 0);
  CHECK(res.pos_x.at(0, 0) == 1);
  CHECK(res.loss_pos == doctest::Approx(0.36).epsilon(1e-12));  // (1-0.4)^2
  CHECK(res.loss_neg == 0.0);
  CHECK(res.da_x.at(0, 0) == doctest::Approx(-1.2).epsilon(1e-12));  // -2(1-a)

  // Gradient descent raises the should-connect affinity: a - lr*da > a.
  CHECK(res.da_x.at(0, 0) < 0.0);
}

TEST_CASE("maximin gradient: cross pair lands on the bottleneck edge only") {
  // 1x3 with components [1, 0, 2]; predicted foreground [0.3, 0.8, 0.5].
  Plane<double> probs(1, 3);
  probs.at(0, 0) = 0.3;
  probs.at(0, 1) = 0.8;
  probs.at(0, 2) = 0.5;
  Plane<std::uint8_t> fg(1, 3, 0);
  fg.at(0, 0) = fg.at(0, 2) = 1;
  const auto pred = affinity_forward(probs);  // edges (0.3, 0.5)
  const auto truth = truth_graph(fg);         // edges (0, 0)
  const auto comp = connected_components(fg);
  const auto res = malis_gradient(pred, truth, comp);
  CHECK(res.total_pos == 0);
  CHECK(res.loss_pos == 0.0);
  // Edge values on the negative pass are the predictions. The higher edge
  // (0.5) merges bg with component 2 first: one bg-fg pair. The lower edge
  // (0.3) then merges component 1 against both: the cross-component pair
  // (maximin = argmin of the two edges) plus one more bg-fg pair.
  CHECK(res.total_neg == 3);
  CHECK(res.neg_x.at(0, 1) == 1);
  CHECK(res.neg_x.at(0, 0) == 2);
  CHECK(res.da_x.at(0, 1) == doctest::Approx(2.0 * 0.5 * 1.0 / 3.0).epsilon(1e-12));
  CHECK(res.da_x.at(0, 0) == doctest::Approx(2.0 * 0.3 * 2.0 / 3.0).epsilon(1e-12));
  // Gradient descent lowers should-separate affinities.
  CHECK(res.da_x.at(0, 0) > 0.0);
}

TEST_CASE("maximin gradient: perfect predictions are a zero-gradient fixpoint") {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    const Plane<std::uint8_t> fg = random_fg(rng, 5, 5, true);
    Plane<double> exact(5, 5);
    for (std::size_t i = 0; i < fg.size(); ++i) exact.pix[i] = fg.pix[i] ? 1.0 : 0.0;
    const auto pred = affinity_forward(exact);
    const auto res = malis_gradient(pred, truth_graph(fg), connected_components(fg));
    CHECK(res.loss == 0.0);
    for (double v : res.da_x.pix) CHECK(v == 0.0);
    for (double v : res.da_y.pix) CHECK(v == 0.0);
  }
}

TEST_CASE("maximin gradient: degenerate instances") {
  // All background: no positive pairs at all.
  Plane<std::uint8_t> none(3, 3, 0);
  Rng rng(5);
  const auto pred = affinity_forward(random_probs(rng, 3, 3));
  const auto res = malis_gradient(pred, truth_graph(none), connected_components(none));
  CHECK(res.total_pos == 0);
  CHECK(res.loss_pos == 0.0);
  CHECK(res.total_neg == 0);  // bg-bg pairs never count

  // Single component covering everything: no negative pairs.
  Plane<std::uint8_t> all(3, 3, 1);
  const auto res2 = malis_gradient(pred, truth_graph(all), connected_components(all));
  CHECK(res2.total_neg == 0);
  CHECK(res2.total_pos == 36);  // C(9,2)

  // 1x1 image: no edges, nothing to do.
  Plane<std::uint8_t> one(1, 1, 1);
  const auto res3 = malis_gradient(affinity_forward(Plane<double>(1, 1, 0.5)), truth_graph(one),
                                   connected_components(one));
  CHECK(res3.loss == 0.0);
}

TEST_CASE("maximin gradient matches the exhaustive per-pair brute force") {
  Rng rng(909);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 2 + static_cast<int>(rng.uniform_index(4));  // 2..5
    const int w = 2 + static_cast<int>(rng.uniform_index(4));
    const Plane<std::uint8_t> fg = random_fg(rng, h, w, false);
    const Plane<double> probs = random_probs(rng, h, w);
    const auto pred = affinity_forward(probs);
    const auto truth = truth_graph(fg);
    const auto comp = connected_components(fg);
    const auto res = malis_gradient(pred, truth, comp);

    const int n_px = h * w;
    auto want_pos = [&](int p, int q) { return comp.pix[p] == comp.pix[q] && comp.pix[p] > 0; };
    auto want_neg = [&](int p, int q) { return comp.pix[p] != comp.pix[q]; };
    const auto pos_edges = edge_list(pred, truth, true);
    const auto neg_edges = edge_list(pred, truth, false);
    const auto brute_pos = oracle::brute_pair_counts(n_px, pos_edges, want_pos);
    const auto brute_neg = oracle::brute_pair_counts(n_px, neg_edges, want_neg);

    long long total_pos = 0, total_neg = 0;
    for (long long v : brute_pos) total_pos += v;
    for (long long v : brute_neg) total_neg += v;
    REQUIRE(res.total_pos == total_pos);
    REQUIRE(res.total_neg == total_neg);

    // Whole-instance accounting: every qualifying pair is counted exactly once.
    long long analytic_pos = 0, analytic_neg = 0;
    for (int p = 0; p < n_px; ++p)
      for (int q = p + 1; q < n_px; ++q) {
        analytic_pos += want_pos(p, q) ? 1 : 0;
        analytic_neg += want_neg(p, q) ? 1 : 0;
      }
    REQUIRE(total_pos == analytic_pos);
    REQUIRE(total_neg == analytic_neg);

    // Edge-by-edge: pair counts exactly, gradients to 1e-12.
    int id = 0;
    auto check_edge = [&](int y, int x, bool horizontal) {
      const double p = horizontal ? pred.a_x.at(y, x) : pred.a_y.at(y, x);
      const double t = horizontal ? truth.a_x.at(y, x) : truth.a_y.at(y, x);
      const long long cp = horizontal ? res.pos_x.at(y, x) : res.pos_y.at(y, x);
      const long long cn = horizontal ? res.neg_x.at(y, x) : res.neg_y.at(y, x);
      CAPTURE(trial);
      CAPTURE(id);
      REQUIRE(cp == brute_pos[id]);
      REQUIRE(cn == brute_neg[id]);
      // Positive pairs only on should-connect edges, negative only on
      // should-separate ones.
      if (t == 1.0) CHECK(cn == 0);
      if (t == 0.0) CHECK(cp == 0);
      double want_da = 0.0;
      const double ap = std::min(p, t), an = std::max(p, t);
      if (total_pos > 0 && p <= t)
        want_da += static_cast<double>(brute_pos[id]) * (-2.0) * (1.0 - ap) /
                   static_cast<double>(total_pos);
      if (total_neg > 0 && p >= t)
        want_da += static_cast<double>(brute_neg[id]) * 2.0 * an / static_cast<double>(total_neg);
      const double got = horizontal ? res.da_x.at(y, x) : res.da_y.at(y, x);
      REQUIRE(std::abs(got - want_da) <= 1e-12);
      ++id;
    };
    for (int y = 0; y < h; ++y)
      for (int x = 0; x + 1 < w; ++x) check_edge(y, x, true);
    for (int y = 0; y + 1 < h; ++y)
      for (int x = 0; x < w; ++x) check_edge(y, x, false);
  }
}

TEST_CASE("maximin gradient is invariant under component relabeling") {
  Rng rng(404);
  const Plane<std::uint8_t> fg = random_fg(rng, 5, 5, true);
  const Plane<double> probs = random_probs(rng, 5, 5);
  const auto pred = affinity_forward(probs);
  const auto truth = truth_graph(fg);
  Plane<int> comp = connected_components(fg);
  const auto res = malis_gradient(pred, truth, comp);

  int c_max = 0;
  for (int v : comp.pix) c_max = std::max(c_max, v);
  REQUIRE(c_max >= 2);  // otherwise the permutation below is trivial
  Plane<int> permuted = comp;
  for (auto& v : permuted.pix) {
    if (v > 0) v = c_max + 1 - v;  // reverse the id order
  }
  const auto res2 = malis_gradient(pred, truth, permuted);
  CHECK(res.total_pos == res2.total_pos);
  CHECK(res.total_neg == res2.total_neg);
  CHECK(res.da_x.pix == res2.da_x.pix);
  CHECK(res.da_y.pix == res2.da_y.pix);
  CHECK(res.loss == res2.loss);
}

TEST_CASE("composed softmax-affinity-maximin loss passes finite differences") {
  Rng rng(550);
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    const int h = 4, w = 4;
    const Plane<std::uint8_t> fg = random_fg(rng, h, w, true);
    Blob<double> scores(2, h, w);
    for (auto& v : scores.data) v = rng.uniform(-1.0, 1.0);

    Blob<double> at_point = scores;
    at_point.ensure_diff();
    const double loss0 = malis_softmax_loss(at_point, fg);
    CHECK(std::isfinite(loss0));

    // Scores' gradient sums to zero per pixel (softmax shift invariance).
    for (std::size_t px = 0; px < at_point.plane(); ++px) {
      CHECK(std::abs(at_point.diff[px] + at_point.diff[at_point.plane() + px]) < 1e-14);
    }

    const double step = 1e-6;
    for (std::size_t i = 0; i < scores.data.size(); ++i) {
      Blob<double> plus = scores, minus = scores;
      plus.data[i] += step;
      minus.data[i] -= step;
      plus.ensure_diff();
      minus.ensure_diff();
      const double lp = malis_softmax_loss(plus, fg);
      const double lm = malis_softmax_loss(minus, fg);
      const double numeric = (lp - lm) / (2.0 * step);
      const double analytic = at_point.diff[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("composed loss input validation") {
  Plane<std::uint8_t> fg(2, 2, 1);
  Blob<double> three(3, 2, 2);
  CHECK_THROWS_AS(malis_softmax_loss(three, fg), SizeError);
  Blob<double> wrong(2, 3, 3);
  CHECK_THROWS_AS(malis_softmax_loss(wrong, fg), SizeError);
}
