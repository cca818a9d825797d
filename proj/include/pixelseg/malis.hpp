#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <utility>
#include <vector>

#include "pixelseg/blob.hpp"
#include "pixelseg/common.hpp"
#include "pixelseg/layers.hpp"

namespace pixelseg {

// 4-neighbor affinity graph over an image. Edge maps are image-sized: a_x(y,x)
// connects (y,x)-(y,x+1) and is meaningful for x < width-1; a_y(y,x) connects
// (y,x)-(y+1,x) for y < height-1. The unused last column / last row stays at 1.
// m_x / m_y record which endpoint supplied the min (0 = first, ties -> 0).
template <typename S>
struct AffinityGraph {
  int height = 0, width = 0;
  Plane<S> a_x, a_y;
  Plane<std::uint8_t> m_x, m_y;

  AffinityGraph() = default;
  AffinityGraph(int h, int w)
      : height(h), width(w), a_x(h, w, S(1)), a_y(h, w, S(1)), m_x(h, w, 0), m_y(h, w, 0) {}
};

// Edge affinities from a foreground map: every edge takes the smaller of its
// two endpoint values. Images with extent < 2 along an axis simply have no
// edges along that axis.
template <typename S>
AffinityGraph<S> affinity_forward(const Plane<S>& fg) {
  AffinityGraph<S> g(fg.height, fg.width);
  for (int y = 0; y < fg.height; ++y) {
    for (int x = 0; x + 1 < fg.width; ++x) {
      const S a = fg.at(y, x), b = fg.at(y, x + 1);
      g.a_x.at(y, x) = std::min(a, b);
      g.m_x.at(y, x) = (b < a) ? 1 : 0;
    }
  }
  for (int y = 0; y + 1 < fg.height; ++y) {
    for (int x = 0; x < fg.width; ++x) {
      const S a = fg.at(y, x), b = fg.at(y + 1, x);
      g.a_y.at(y, x) = std::min(a, b);
      g.m_y.at(y, x) = (b < a) ? 1 : 0;
    }
  }
  return g;
}

// Routes per-edge gradients back onto the pixel that supplied each edge's
// value. Attribution is symmetric: the same amount is added to d_pos and
// subtracted from d_neg (d_pos + d_neg = 0 identically).
template <typename S>
void affinity_backward(const Plane<S>& da_x, const Plane<S>& da_y, const AffinityGraph<S>& g,
                       Plane<S>& d_pos, Plane<S>& d_neg) {
  if (da_x.height != g.height || da_x.width != g.width || da_y.height != g.height ||
      da_y.width != g.width) {
    throw SizeError("affinity_backward: gradient maps must match the graph extent");
  }
  d_pos = Plane<S>(g.height, g.width, S(0));
  d_neg = Plane<S>(g.height, g.width, S(0));
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x + 1 < g.width; ++x) {
      const S dv = da_x.at(y, x);
      d_pos.at(y, x + g.m_x.at(y, x)) += dv;
      d_neg.at(y, x + g.m_x.at(y, x)) -= dv;
    }
  }
  for (int y = 0; y + 1 < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const S dv = da_y.at(y, x);
      d_pos.at(y + g.m_y.at(y, x), x) += dv;
      d_neg.at(y + g.m_y.at(y, x), x) -= dv;
    }
  }
}

// 4-connected components of the foreground (nonzero) pixels. Background stays
// 0; components are numbered 1..C by the raster position of their first pixel.
template <typename T>
Plane<int> connected_components(const Plane<T>& labels) {
  Plane<int> comp(labels.height, labels.width, 0);
  int next = 0;
  for (int sy = 0; sy < labels.height; ++sy) {
    for (int sx = 0; sx < labels.width; ++sx) {
      if (labels.at(sy, sx) == T(0) || comp.at(sy, sx) != 0) continue;
      ++next;
      std::deque<std::pair<int, int>> work{{sy, sx}};
      comp.at(sy, sx) = next;
      while (!work.empty()) {
        const auto [y, x] = work.front();
        work.pop_front();
        const int ny[4] = {y - 1, y + 1, y, y};
        const int nx[4] = {x, x, x - 1, x + 1};
        for (int i = 0; i < 4; ++i) {
          if (ny[i] < 0 || ny[i] >= labels.height || nx[i] < 0 || nx[i] >= labels.width) continue;
          if (labels.at(ny[i], nx[i]) == T(0) || comp.at(ny[i], nx[i]) != 0) continue;
          comp.at(ny[i], nx[i]) = next;
          work.push_back({ny[i], nx[i]});
        }
      }
    }
  }
  return comp;
}

// Gradient of the maximin structured loss with respect to the predicted
// affinities, plus the per-edge pair counts both constrained passes
// accumulated (exposed so exhaustive oracles can match them exactly).
template <typename S>
struct MalisResult {
  Plane<S> da_x, da_y;                        // d(loss)/d(predicted affinity)
  Plane<long long> pos_x, pos_y;              // positive-pass pair counts per edge
  Plane<long long> neg_x, neg_y;              // negative-pass pair counts per edge
  long long total_pos = 0, total_neg = 0;     // normalizers (whole-instance pair counts)
  double loss_pos = 0.0, loss_neg = 0.0, loss = 0.0;
};

namespace detail {

// Union-find over pixels that tracks, per set, how many member pixels carry
// each ground-truth component id (0 = background, kept separate).
class PairTracker {
 public:
  explicit PairTracker(const Plane<int>& comp) {
    const int n = static_cast<int>(comp.size());
    parent_.resize(n);
    rank_.assign(n, 0);
    counts_.resize(n);
    for (int i = 0; i < n; ++i) {
      parent_[i] = i;
      counts_[i][comp.pix[i]] = 1;
    }
  }

  int find(int v) {
    while (parent_[v] != v) {
      parent_[v] = parent_[parent_[v]];
      v = parent_[v];
    }
    return v;
  }

  // Pairs the union of (ra, rb) newly creates: same nonzero component on both
  // sides (positive), and everything else except background-background
  // (negative).
  void pair_counts(int ra, int rb, long long& pos, long long& neg) const {
    const auto& ca = counts_[ra];
    const auto& cb = counts_[rb];
    long long size_a = 0, size_b = 0;
    for (const auto& [id, n] : ca) size_a += n;
    for (const auto& [id, n] : cb) size_b += n;
    pos = 0;
    long long same_or_bg = 0;
    for (const auto& [id, n] : ca) {
      const auto it = cb.find(id);
      if (it == cb.end()) continue;
      if (id > 0) pos += n * it->second;
      else same_or_bg += n * it->second;  // background-background: no pair in either pass
    }
    neg = size_a * size_b - pos - same_or_bg;
  }

  void merge(int ra, int rb) {
    if (rank_[ra] < rank_[rb]) std::swap(ra, rb);
    parent_[rb] = ra;
    if (rank_[ra] == rank_[rb]) ++rank_[ra];
    auto& ca = counts_[ra];
    for (const auto& [id, n] : counts_[rb]) ca[id] += n;
    counts_[rb].clear();
  }

 private:
  std::vector<int> parent_;
  std::vector<int> rank_;
  std::vector<std::map<int, long long>> counts_;
};

}  // namespace detail

// Constrained maximin loss over the affinity graph. Two passes:
//   positive, on A+ = min(pred, truth): every pixel pair inside one true
//     component charges its maximin edge with l+(a) = (1-a)^2;
//   negative, on A- = max(pred, truth): every should-be-separate pair
//     (different components, or component vs background) charges its maximin
//     edge with l-(a) = a^2. Background-background pairs charge nothing.
// Each pass processes edges by descending value (ties by edge raster index,
// horizontal block first) over a union-find; an edge that merges two sets is
// the maximin edge of exactly the pairs that merge creates. Per-pass results
// are normalized by the pass's whole-instance pair count. The returned
// gradient is with respect to pred: a pass's edge gradient reaches pred only
// where pred supplies the min resp. max.
template <typename S>
MalisResult<S> malis_gradient(const AffinityGraph<S>& pred, const AffinityGraph<S>& truth,
                              const Plane<int>& comp) {
  const int h = pred.height, w = pred.width;
  if (truth.height != h || truth.width != w || comp.height != h || comp.width != w) {
    throw SizeError("malis_gradient: pred, truth and component shapes must agree");
  }
  MalisResult<S> res;
  res.da_x = Plane<S>(h, w, S(0));
  res.da_y = Plane<S>(h, w, S(0));
  res.pos_x = Plane<long long>(h, w, 0);
  res.pos_y = Plane<long long>(h, w, 0);
  res.neg_x = Plane<long long>(h, w, 0);
  res.neg_y = Plane<long long>(h, w, 0);

  struct Edge {
    int id;          // raster index: all horizontal edges first, then vertical
    int a, b;        // endpoint pixel indices
    int y, x;        // map position
    bool horizontal;
  };
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(h) * w * 2);
  int id = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      edges.push_back({id++, y * w + x, y * w + x + 1, y, x, true});
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x)
      edges.push_back({id++, y * w + x, (y + 1) * w + x, y, x, false});

  // One constrained pass; `positive` selects the pair class and loss.
  auto run_pass = [&](bool positive) {
    std::vector<S> value(edges.size());
    for (const Edge& e : edges) {
      const S p = e.horizontal ? pred.a_x.at(e.y, e.x) : pred.a_y.at(e.y, e.x);
      const S t = e.horizontal ? truth.a_x.at(e.y, e.x) : truth.a_y.at(e.y, e.x);
      value[e.id] = positive ? std::min(p, t) : std::max(p, t);
    }
    std::vector<int> order(edges.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int i, int j) {
      if (value[i] != value[j]) return value[i] > value[j];
      return i < j;
    });

    detail::PairTracker uf(comp);
    long long total = 0;
    double loss_raw = 0.0;
    std::vector<long long> count(edges.size(), 0);
    std::vector<double> grad_raw(edges.size(), 0.0);
    for (int ei : order) {
      const Edge& e = edges[ei];
      const int ra = uf.find(e.a), rb = uf.find(e.b);
      if (ra == rb) continue;
      long long pos = 0, neg = 0;
      uf.pair_counts(ra, rb, pos, neg);
      uf.merge(ra, rb);
      const long long n = positive ? pos : neg;
      if (n == 0) continue;
      count[ei] = n;
      total += n;
      const double a = static_cast<double>(value[ei]);
      if (positive) {
        loss_raw += static_cast<double>(n) * (1.0 - a) * (1.0 - a);
        grad_raw[ei] = static_cast<double>(n) * (-2.0) * (1.0 - a);
      } else {
        loss_raw += static_cast<double>(n) * a * a;
        grad_raw[ei] = static_cast<double>(n) * 2.0 * a;
      }
    }

    const double norm = total > 0 ? 1.0 / static_cast<double>(total) : 0.0;
    for (const Edge& e : edges) {
      if (count[e.id] == 0) continue;
      Plane<long long>& counts = e.horizontal ? (positive ? res.pos_x : res.neg_x)
                                              : (positive ? res.pos_y : res.neg_y);
      counts.at(e.y, e.x) = count[e.id];
      // The pass value is min/max of (pred, truth); gradient flows into pred
      // only where pred supplies it (ties go to pred).
      const S p = e.horizontal ? pred.a_x.at(e.y, e.x) : pred.a_y.at(e.y, e.x);
      const S t = e.horizontal ? truth.a_x.at(e.y, e.x) : truth.a_y.at(e.y, e.x);
      const bool reaches_pred = positive ? (p <= t) : (p >= t);
      if (reaches_pred) {
        Plane<S>& da = e.horizontal ? res.da_x : res.da_y;
        da.at(e.y, e.x) += static_cast<S>(grad_raw[e.id] * norm);
      }
    }
    if (positive) {
      res.total_pos = total;
      res.loss_pos = loss_raw * norm;
    } else {
      res.total_neg = total;
      res.loss_neg = loss_raw * norm;
    }
  };

  run_pass(true);
  run_pass(false);
  res.loss = res.loss_pos + res.loss_neg;
  return res;
}

// Composed structured loss on a two-channel score map: softmax -> foreground
// probability -> affinity graph -> maximin loss, with the gradient pulled all
// the way back into scores.diff (accumulated). The ground truth is a binary
// foreground plane; true affinities and components both derive from it, so an
// edge is "should connect" exactly when both endpoints are foreground.
//
// The per-pixel attribution is symmetric across the two probability channels
// (foreground +g, background -g); chaining that pair through the softmax
// Jacobian yields exactly twice the derivative of the loss (which depends on
// the foreground probability alone, and the channels sum to one), so the
// composition scales it by 1/2 to keep analytic and numeric gradients equal.
template <typename S>
double malis_softmax_loss(Blob<S>& scores, const Plane<std::uint8_t>& fg) {
  if (scores.channels != 2) {
    throw SizeError("malis loss: needs exactly 2 score channels, got " +
                    std::to_string(scores.channels));
  }
  if (fg.height != scores.height || fg.width != scores.width) {
    throw SizeError("malis loss: label plane does not match score extent");
  }
  const int h = scores.height, w = scores.width;

  Blob<S> probs;
  softmax_forward(scores, probs);
  Plane<S> fg_prob(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) fg_prob.at(y, x) = probs.at(1, y, x);
  Plane<S> fg_true(h, w);
  for (std::size_t i = 0; i < fg.size(); ++i) fg_true.pix[i] = fg.pix[i] ? S(1) : S(0);

  const AffinityGraph<S> pred = affinity_forward(fg_prob);
  const AffinityGraph<S> truth = affinity_forward(fg_true);
  const Plane<int> comp = connected_components(fg);
  const MalisResult<S> res = malis_gradient(pred, truth, comp);

  Plane<S> d_pos, d_neg;
  affinity_backward(res.da_x, res.da_y, pred, d_pos, d_neg);

  probs.ensure_diff();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      probs.diff_at(1, y, x) = d_pos.at(y, x) * S(0.5);
      probs.diff_at(0, y, x) = d_neg.at(y, x) * S(0.5);
    }
  }
  softmax_backward(scores, probs);
  return res.loss;
}

}  // namespace pixelseg
