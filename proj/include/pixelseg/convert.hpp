#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pixelseg/blob.hpp"
#include "pixelseg/common.hpp"
#include "pixelseg/netgraph.hpp"
#include "pixelseg/netspec.hpp"
#include "pixelseg/rng.hpp"

namespace pixelseg {

// ---- size propagation ----------------------------------------------------------

struct SizeRow {
  std::string name;
  LayerKind kind;
  int k = 1, s = 1, d = 1;
  int f_in = 0, f_out = 0;
  int w_in = 0, w_out = 0;
};
using SizeTable = std::vector<SizeRow>;

// Walks the DAG and computes every blob's spatial extent for a given square
// input size. Strict: any divisibility or span violation throws a SizeError
// naming the layer.
inline SizeTable propagate_sizes(const NetSpec& spec, int w0) {
  if (w0 < 1) throw SizeError("propagate_sizes: w0 must be >= 1");
  SizeTable table;
  const auto channels = compute_channels(spec);
  std::map<std::string, int> width;  // blob -> extent
  for (const auto& l : spec.layers) {
    SizeRow row;
    row.name = l.name;
    row.kind = l.kind;
    row.k = l.k;
    row.s = l.s;
    row.d = l.d;
    row.f_out = channels.at(l.output);
    int w_in = 0;
    int f_in = 0;
    if (l.kind == LayerKind::Data) {
      w_in = w0;
    } else {
      w_in = width.at(l.inputs[0]);
      for (const auto& b : l.inputs) f_in += channels.at(b);
    }
    row.f_in = (l.kind == LayerKind::Data) ? spec.f0 : f_in;
    row.w_in = w_in;
    int w_out = w_in;
    try {
      switch (l.kind) {
        case LayerKind::Data:
          w_out = w0;
          break;
        case LayerKind::ConvSK:
        case LayerKind::PoolMax:
          w_out = ConvGeometry::out_extent(w_in, l.k, l.d, l.s, l.p, "extent");
          break;
        case LayerKind::Relu:
        case LayerKind::SoftmaxLoss:
          w_out = w_in;
          break;
        case LayerKind::Upconv:
          w_out = 2 * w_in;
          break;
        case LayerKind::MergeCrop: {
          const int wa = width.at(l.inputs[0]);
          const int wb = width.at(l.inputs[1]);
          if (wb < wa) {
            throw SizeError("second input (" + std::to_string(wb) +
                            ") smaller than first (" + std::to_string(wa) + ")");
          }
          w_out = wa;
          break;
        }
      }
    } catch (const Error& e) {
      throw SizeError("layer '" + l.name + "': " + e.what());
    }
    row.w_out = w_out;
    width[l.output] = w_out;
    table.push_back(row);
  }
  return table;
}

inline int output_extent(const NetSpec& spec, int w0) {
  return propagate_sizes(spec, w0).back().w_out;
}

// ---- sliding-window net classification and correction ---------------------------

// A sliding-window (SW) net uses plain convolutions (d=1), downsampling pools
// (s=k, d=1) and elementwise layers only.
inline bool is_sw_spec(const NetSpec& spec, std::string* why = nullptr) {
  for (const auto& l : spec.layers) {
    auto fail = [&](const std::string& msg) {
      if (why) *why = "layer '" + l.name + "': " + msg;
      return false;
    };
    switch (l.kind) {
      case LayerKind::Data:
      case LayerKind::Relu:
      case LayerKind::SoftmaxLoss:
        break;
      case LayerKind::ConvSK:
        if (l.d != 1) return fail("convolution with kernel stride d=" + std::to_string(l.d));
        break;
      case LayerKind::PoolMax:
        if (l.d != 1) return fail("pool with kernel stride d=" + std::to_string(l.d));
        if (l.s != l.k) return fail("pool with s != k (strided-kernel form)");
        break;
      case LayerKind::Upconv:
        return fail("upconvolution is not a sliding-window layer");
      case LayerKind::MergeCrop:
        return fail("mergecrop is not a sliding-window layer");
    }
  }
  return true;
}

namespace detail {

// Forward sizes with downsampling-pool rounding (ceil), the semantics sloppy
// SW configurations rely on. Used only to find the output size a net was
// *meant* to have before back-deriving consistent sizes.
inline int lenient_output_extent(const NetSpec& spec, int w0) {
  std::map<std::string, int> width;
  for (const auto& l : spec.layers) {
    int w = (l.kind == LayerKind::Data) ? w0 : width.at(l.inputs[0]);
    switch (l.kind) {
      case LayerKind::Data:
        break;
      case LayerKind::ConvSK: {
        const int span = (l.k - 1) * l.d + 1;
        if (span > w) {
          throw SizeError("layer '" + l.name + "': kernel span " + std::to_string(span) +
                          " exceeds input " + std::to_string(w));
        }
        w = w - span + 1;
        break;
      }
      case LayerKind::PoolMax: {
        if (l.k > w) throw SizeError("layer '" + l.name + "': pool larger than input");
        w = (w - l.k + l.s - 1) / l.s + 1;  // ceil((w-k)/s) + 1
        break;
      }
      case LayerKind::Relu:
      case LayerKind::SoftmaxLoss:
        break;
      case LayerKind::Upconv:
        w = 2 * w;
        break;
      case LayerKind::MergeCrop:
        w = width.at(l.inputs[0]);
        break;
    }
    width[l.output] = w;
  }
  return width.at(spec.layers.back().output);
}

}  // namespace detail

// Fixes a sliding-window net whose declared input size does not divide cleanly
// through its pools: keeps the (lenient) output size and back-derives the input
// extent that makes every layer exact — pools need w_prev = k*w, convolutions
// and inner products w_prev = (k-1) + w, elementwise layers pass through.
inline NetSpec correct_sw(const NetSpec& spec) {
  std::string why;
  if (!is_sw_spec(spec, &why)) throw SpecError("not a sliding-window net: " + why);
  int w = detail::lenient_output_extent(spec, spec.w0);
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::ConvSK:
        w = (l.k - 1) + w;
        break;
      case LayerKind::PoolMax:
        w = l.k * w;
        break;
      default:
        break;
    }
  }
  NetSpec fixed = spec;
  fixed.w0 = w;
  return fixed;
}

// ---- sliding-window to strided-kernel conversion ---------------------------------
//
// Rewrites an SW net into its strided-kernel twin: strides move out of the
// data flow and into kernel strides d, pools keep their extent but stop
// downsampling, inner products become spanning convolutions. The result
// computes, in one pass, the SW net's output for every input offset; with
// input w0 >= w0_SW the output extent is w0 - w0_SW + 1.
inline NetSpec sw_to_sk(const NetSpec& spec) {
  std::string why;
  if (!is_sw_spec(spec, &why)) throw SpecError("not a sliding-window net: " + why);
  NetSpec sk = spec;
  int w = spec.w0;
  int d_temp = 1;
  for (std::size_t i = 0; i < sk.layers.size(); ++i) {
    LayerSpec& l = sk.layers[i];
    switch (l.kind) {
      case LayerKind::Data:
        break;
      case LayerKind::ConvSK: {
        if (l.k > w) {
          throw SizeError("layer '" + l.name + "': kernel " + std::to_string(l.k) +
                          " exceeds input extent " + std::to_string(w));
        }
        if (l.k == w) {
          // Inner product: the kernel spans the whole remaining extent. The
          // accumulated stride is consumed here and resets.
          l.d = d_temp;
          d_temp = 1;
          w = 1;
        } else {
          l.d = d_temp;
          w = w - l.k + 1;
        }
        l.s = 1;
        break;
      }
      case LayerKind::PoolMax: {
        if (w % l.k != 0) {
          throw SpecError("layer '" + l.name + "': input extent " + std::to_string(w) +
                          " not divisible by pool kernel " + std::to_string(l.k) +
                          " (run size correction first)");
        }
        l.s = 1;      // pooling keeps resolution in the strided-kernel form
        l.d = d_temp;
        d_temp *= l.k;
        w = w / l.k;
        break;
      }
      case LayerKind::Relu:
      case LayerKind::SoftmaxLoss:
        break;  // elementwise: copied unchanged
      case LayerKind::Upconv:
      case LayerKind::MergeCrop:
        throw SpecError("layer '" + l.name + "': kind " + kind_name(l.kind) +
                        " with spatial extent cannot be converted");
    }
  }
  if (d_temp != 1) {
    throw SpecError("net ends with unresolved kernel stride d=" + std::to_string(d_temp) +
                    " (no inner product consumed the accumulated pooling)");
  }
  return sk;
}

// ---- parameter, FLOP and memory models --------------------------------------------

struct ParamRow {
  std::string name;
  long long weights = 0;
  long long biases = 0;
};

struct ParamTable {
  std::vector<ParamRow> rows;
  long long total_weights = 0;
  long long total_biases = 0;
};

// |W| = sum over convolution-like layers of f_in*f_out*k^2; biases reported
// separately and fixed upsampling layers contribute nothing. Independent of
// the input size.
inline ParamTable count_params(const NetSpec& spec) {
  ParamTable t;
  const auto channels = compute_channels(spec);
  for (const auto& l : spec.layers) {
    if (!l.has_weights()) continue;
    long long f_in = 0;
    for (const auto& b : l.inputs) f_in += channels.at(b);
    ParamRow row;
    row.name = l.name;
    row.weights = f_in * l.f_out * static_cast<long long>(l.k) * l.k;
    row.biases = l.f_out;
    t.total_weights += row.weights;
    t.total_biases += row.biases;
    t.rows.push_back(row);
  }
  return t;
}

struct FlopRow {
  std::string name;
  long long flops = 0;
};

struct FlopTable {
  std::vector<FlopRow> rows;
  long long total = 0;
};

// Forward FLOP per convolution-like layer: f_out * w_out^2 * (2*f_in*k^2 - 1),
// a multiply-add counted as two operations.
inline FlopTable flop_estimate(const NetSpec& spec, int w0) {
  FlopTable t;
  const SizeTable sizes = propagate_sizes(spec, w0);
  for (const auto& row : sizes) {
    if (row.kind != LayerKind::ConvSK) continue;
    FlopRow f;
    f.name = row.name;
    const long long fan_in = static_cast<long long>(row.f_in) * row.k * row.k;
    const long long n = static_cast<long long>(row.w_out) * row.w_out;
    f.flops = static_cast<long long>(row.f_out) * n * (2 * fan_in - 1);
    t.total += f.flops;
    t.rows.push_back(f);
  }
  return t;
}

struct MemRow {
  std::string name;
  long long buffer_elems = 0;  // f_in * k^2 * w_out^2
};

struct MemReport {
  std::vector<MemRow> rows;
  long long buffer_elems = 0;  // max over convolution layers
  long long buffer_bytes = 0;  // 4-byte elements
  long long blob_pair_elems = 0;  // max over layers of (inputs + output) blob elements
  long long total_elems = 0;   // min(n,q)*buffer + n*blob_pair
  long long total_bytes = 0;
};

// The im2col buffer dominates: one column matrix of f_in*k^2 by w_out^2
// elements per convolution, shared across layers (q parallel buffers cap the
// sharing). Activations add n * the largest adjacent blob pair.
inline MemReport buffer_and_memory(const NetSpec& spec, int w0, int n = 1, int q = 1) {
  MemReport rep;
  const SizeTable sizes = propagate_sizes(spec, w0);
  // Element count of each blob, keyed by blob name.
  std::map<std::string, long long> by_blob;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const SizeRow& row = sizes[i];
    by_blob[spec.layers[i].output] = static_cast<long long>(row.f_out) * row.w_out * row.w_out;
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const SizeRow& row = sizes[i];
    if (l.kind == LayerKind::ConvSK) {
      MemRow m;
      m.name = l.name;
      const long long fan_in = static_cast<long long>(row.f_in) * l.k * l.k;
      m.buffer_elems = fan_in * row.w_out * row.w_out;
      rep.buffer_elems = std::max(rep.buffer_elems, m.buffer_elems);
      rep.rows.push_back(m);
    }
    long long pair = by_blob.at(l.output);
    for (const auto& b : l.inputs) pair += by_blob.at(b);
    rep.blob_pair_elems = std::max(rep.blob_pair_elems, pair);
  }
  rep.buffer_bytes = rep.buffer_elems * 4;
  rep.total_elems = static_cast<long long>(std::min(n, q)) * rep.buffer_elems +
                    static_cast<long long>(n) * rep.blob_pair_elems;
  rep.total_bytes = rep.total_elems * 4;
  return rep;
}

// Largest output extent whose dominant column buffer still fits cap_bytes
// (4-byte elements). Searches over valid input sizes; returns 0 if nothing
// fits. The step between valid input sizes is the product of downsampling
// strides, so divisibility is preserved along the search.
inline int max_output_size(const NetSpec& spec, long long cap_bytes) {
  long long step = 1;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::PoolMax && l.s > 1) step *= l.s;
  }
  auto probe = [&](long long w0, long long& w_out, long long& buf_bytes) -> bool {
    if (w0 < 1) return false;
    try {
      const MemReport rep = buffer_and_memory(spec, static_cast<int>(w0));
      const SizeTable sizes = propagate_sizes(spec, static_cast<int>(w0));
      w_out = sizes.back().w_out;
      buf_bytes = rep.buffer_bytes;
      return true;
    } catch (const Error&) {
      return false;
    }
  };
  long long w_out0 = 0, buf0 = 0;
  if (!probe(spec.w0, w_out0, buf0)) {
    throw SpecError("max_output_size: the spec's own input size does not propagate");
  }
  // Output extent is affine in t along w0 = spec.w0 + t*step; measure the slope.
  long long w_out1 = 0, buf1 = 0;
  if (!probe(spec.w0 + step, w_out1, buf1)) {
    throw SpecError("max_output_size: cannot probe a second valid input size");
  }
  const long long slope = w_out1 - w_out0;
  if (slope <= 0) throw SpecError("max_output_size: output does not grow with input");
  // t range: smallest t keeping w_out >= 1, largest t worth trying from the cap
  // (buffer >= 4 * w_out^2 always, since f_in*k^2 >= 1).
  const long long t_min = -((w_out0 - 1) / slope);
  long long w_cap = static_cast<long long>(std::sqrt(static_cast<double>(cap_bytes) / 4.0)) + 2;
  long long t_max = (w_cap - w_out0) / slope + 1;
  // Binary search for the largest feasible t: predicate(t) = valid && fits.
  auto fits = [&](long long t, long long& w_out) -> bool {
    long long buf = 0;
    if (!probe(spec.w0 + t * step, w_out, buf)) return false;
    return buf <= cap_bytes;
  };
  long long lo = t_min, hi = t_max, best = 0;
  bool any = false;
  long long w_tmp = 0;
  while (lo <= hi) {
    const long long mid = lo + (hi - lo) / 2;
    if (fits(mid, w_tmp)) {
      any = true;
      best = w_tmp;
      lo = mid + 1;
    } else {
      hi = mid - 1;
    }
  }
  return any ? static_cast<int>(best) : 0;
}

// ---- dual-route equivalence check ---------------------------------------------------
//
// Runs the strided-kernel net once over an enlarged input and the original
// sliding-window net densely at every offset, with shared weights, and reports
// the worst absolute deviation. The sliding-window route below is a separate
// direct-loop executor on purpose: it shares no code with the im2col/GEMM path
// it is checking.

namespace detail {

template <typename S>
Blob<S> reference_forward(const NetSpec& spec, const NetStates<S>& states, const Blob<S>& input) {
  std::map<std::string, Blob<S>> blobs;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    switch (l.kind) {
      case LayerKind::Data:
        blobs[l.output] = input;
        break;
      case LayerKind::ConvSK: {
        const Blob<S>& in = blobs.at(l.inputs[0]);
        const int span = (l.k - 1) * l.d + 1;
        const int oh = (in.height - span) / l.s + 1;
        const int ow = (in.width - span) / l.s + 1;
        if ((in.height - span) % l.s != 0 || (in.width - span) % l.s != 0 || oh < 1 || ow < 1) {
          throw SizeError("reference conv '" + l.name + "': geometry does not divide");
        }
        const LayerState<S>& st = states.layers[li];
        Blob<S> out(l.f_out, oh, ow);
        const int taps = in.channels * l.k * l.k;
        for (int fo = 0; fo < l.f_out; ++fo) {
          const S* wrow = st.weights.data() + static_cast<std::size_t>(fo) * taps;
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              double acc = 0.0;
              int r = 0;
              for (int c = 0; c < in.channels; ++c) {
                for (int ky = 0; ky < l.k; ++ky) {
                  for (int kx = 0; kx < l.k; ++kx, ++r) {
                    acc += static_cast<double>(wrow[r]) *
                           static_cast<double>(in.at(c, oy * l.s + ky * l.d, ox * l.s + kx * l.d));
                  }
                }
              }
              S v = static_cast<S>(acc);
              v += st.bias[fo];
              out.at(fo, oy, ox) = v;
            }
          }
        }
        blobs[l.output] = std::move(out);
        break;
      }
      case LayerKind::PoolMax: {
        const Blob<S>& in = blobs.at(l.inputs[0]);
        const int span = (l.k - 1) * l.d + 1;
        const int oh = (in.height - span) / l.s + 1;
        const int ow = (in.width - span) / l.s + 1;
        Blob<S> out(in.channels, oh, ow);
        for (int c = 0; c < in.channels; ++c) {
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              S best = in.at(c, oy * l.s, ox * l.s);
              for (int ky = 0; ky < l.k; ++ky) {
                for (int kx = 0; kx < l.k; ++kx) {
                  best = std::max(best, in.at(c, oy * l.s + ky * l.d, ox * l.s + kx * l.d));
                }
              }
              out.at(c, oy, ox) = best;
            }
          }
        }
        blobs[l.output] = std::move(out);
        break;
      }
      case LayerKind::Relu: {
        Blob<S> out = blobs.at(l.inputs[0]);
        for (auto& v : out.data) v = std::max(v, S(0));
        blobs[l.output] = std::move(out);
        break;
      }
      case LayerKind::SoftmaxLoss: {
        const Blob<S>& in = blobs.at(l.inputs[0]);
        Blob<S> out(in.channels, in.height, in.width);
        const std::size_t plane = in.plane();
        for (std::size_t px = 0; px < plane; ++px) {
          S m = in.data[px];
          for (int c = 1; c < in.channels; ++c) m = std::max(m, in.data[c * plane + px]);
          double sum = 0.0;
          for (int c = 0; c < in.channels; ++c) {
            const double e = std::exp(static_cast<double>(in.data[c * plane + px] - m));
            out.data[c * plane + px] = static_cast<S>(e);
            sum += e;
          }
          for (int c = 0; c < in.channels; ++c) {
            out.data[c * plane + px] =
                static_cast<S>(static_cast<double>(out.data[c * plane + px]) / sum);
          }
        }
        blobs[l.output] = std::move(out);
        break;
      }
      case LayerKind::Upconv:
      case LayerKind::MergeCrop:
        throw SpecError("reference executor handles sliding-window nets only");
    }
  }
  return blobs.at(spec.layers.back().output);
}

}  // namespace detail

struct EquivalenceReport {
  double max_abs_dev = 0.0;
  int out_extent = 0;  // e + 1
};

// pre: sk was produced from sw (same layer list, identical parameter shapes).
// Runs both routes on a shared random input of extent w0_SW + e.
template <typename S>
EquivalenceReport sk_sw_equivalence_check(const NetSpec& sw, const NetSpec& sk,
                                          std::uint64_t seed, int e) {
  if (sw.layers.size() != sk.layers.size()) {
    throw SpecError("equivalence: nets have different layer counts");
  }
  NetStates<S> states = init_weights<S>(sk, seed);
  {
    // Parameter shapes must agree between the two nets.
    NetStates<S> sw_states = init_weights<S>(sw, seed);
    for (std::size_t i = 0; i < states.layers.size(); ++i) {
      if (states.layers[i].weights.size() != sw_states.layers[i].weights.size()) {
        throw SpecError("equivalence: parameter shape mismatch at layer '" +
                        sk.layers[i].name + "'");
      }
    }
  }
  const int w_in = sw.w0 + e;
  Blob<S> input(sw.f0, w_in, w_in);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  for (auto& v : input.data) v = static_cast<S>(rng.uniform(-1.0, 1.0));

  NetRunner<S> runner(sk, states);
  const Blob<S>& sk_out = runner.forward(input);
  if (sk_out.height != e + 1 || sk_out.width != e + 1) {
    throw SizeError("equivalence: strided-kernel output is " + std::to_string(sk_out.height) +
                    ", expected " + std::to_string(e + 1));
  }

  EquivalenceReport rep;
  rep.out_extent = e + 1;
  for (int oy = 0; oy <= e; ++oy) {
    for (int ox = 0; ox <= e; ++ox) {
      Blob<S> crop(sw.f0, sw.w0, sw.w0);
      for (int c = 0; c < sw.f0; ++c)
        for (int y = 0; y < sw.w0; ++y)
          for (int x = 0; x < sw.w0; ++x) crop.at(c, y, x) = input.at(c, oy + y, ox + x);
      const Blob<S> sw_out = detail::reference_forward(sw, states, crop);
      if (sw_out.height != 1 || sw_out.width != 1 || sw_out.channels != sk_out.channels) {
        throw SizeError("equivalence: sliding-window output is not a matching single pixel");
      }
      for (int c = 0; c < sw_out.channels; ++c) {
        const double dev = std::abs(static_cast<double>(sw_out.at(c, 0, 0)) -
                                    static_cast<double>(sk_out.at(c, oy, ox)));
        rep.max_abs_dev = std::max(rep.max_abs_dev, dev);
      }
    }
  }
  return rep;
}

}  // namespace pixelseg
