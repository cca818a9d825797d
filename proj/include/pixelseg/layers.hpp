#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pixelseg/blob.hpp"
#include "pixelseg/common.hpp"
#include "pixelseg/tensor.hpp"

namespace pixelseg {

// Per-layer mutable state: learnable parameters with their accumulated
// gradients and momentum buffers (convolution-like layers), plus the max-pool
// routing cache. Gradients accumulate across backward calls until the solver
// step zeroes them.
template <typename S>
struct LayerState {
  std::vector<S> weights;      // f_out x (f_in * k * k), row-major
  std::vector<S> bias;         // f_out
  std::vector<S> weight_diff;
  std::vector<S> bias_diff;
  std::vector<S> weight_mom;
  std::vector<S> bias_mom;
  std::vector<std::size_t> argmax;  // input linear index backing each pool output

  void init_conv(int f_out, int fan_in) {
    weights.assign(static_cast<std::size_t>(f_out) * fan_in, S(0));
    bias.assign(f_out, S(0));
    weight_diff.assign(weights.size(), S(0));
    bias_diff.assign(bias.size(), S(0));
    weight_mom.assign(weights.size(), S(0));
    bias_mom.assign(bias.size(), S(0));
  }
};

// ---- convolution with strided kernels ---------------------------------------

// out = W * im2col(in) + b. The column buffer is caller-provided so one
// allocation can back every convolution in a net.
template <typename S>
void conv_sk_forward(const Blob<S>& in, const LayerState<S>& state, int f_out,
                     const ConvGeometry& g, ColumnBuffer<S>& colbuf, Blob<S>& out) {
  const int fan_in = in.channels * g.k * g.k;
  if (state.weights.size() != static_cast<std::size_t>(f_out) * fan_in) {
    throw SizeError("conv: weight count " + std::to_string(state.weights.size()) +
                    " != f_out*f_in*k*k = " + std::to_string(static_cast<long long>(f_out) * fan_in));
  }
  if (state.bias.size() != static_cast<std::size_t>(f_out)) {
    throw SizeError("conv: bias count mismatch");
  }
  im2col_sk(in, g, colbuf);
  out.resize(f_out, g.out_h, g.out_w);
  const int n = colbuf.cols;
  gemm<S>(false, false, f_out, n, fan_in, S(1), state.weights.data(), colbuf.data.data(), S(0),
          out.data.data());
  for (int fo = 0; fo < f_out; ++fo) {
    S* row = out.data.data() + static_cast<std::size_t>(fo) * n;
    const S b = state.bias[fo];
    for (int j = 0; j < n; ++j) row[j] += b;
  }
}

// Accumulates dW, db, and d(input). col_grad is a second shared buffer
// (columns of the input gradient before the scatter back to image layout).
template <typename S>
void conv_sk_backward(Blob<S>& in, LayerState<S>& state, int f_out, const ConvGeometry& g,
                      ColumnBuffer<S>& colbuf, ColumnBuffer<S>& col_grad, const Blob<S>& out,
                      bool propagate_input = true) {
  const int fan_in = in.channels * g.k * g.k;
  const int n = g.out_h * g.out_w;
  if (out.diff.size() != out.size()) throw SizeError("conv backward: output diff missing");
  // dW += dOut * col(in)^T
  im2col_sk(in, g, colbuf);
  gemm<S>(false, true, f_out, fan_in, n, S(1), out.diff.data(), colbuf.data.data(), S(1),
          state.weight_diff.data());
  // db += row sums of dOut
  for (int fo = 0; fo < f_out; ++fo) {
    double acc = 0.0;
    const S* row = out.diff.data() + static_cast<std::size_t>(fo) * n;
    for (int j = 0; j < n; ++j) acc += static_cast<double>(row[j]);
    state.bias_diff[fo] += static_cast<S>(acc);
  }
  if (!propagate_input) return;
  // d(in) += col2im(W^T * dOut)
  col_grad.resize(fan_in, n);
  gemm<S>(true, false, fan_in, n, f_out, S(1), state.weights.data(), out.diff.data(), S(0),
          col_grad.data.data());
  Blob<S> scatter;
  col2im_sk(col_grad, g, in.channels, scatter);
  in.ensure_diff();
  for (std::size_t i = 0; i < in.size(); ++i) in.diff[i] += scatter.data[i];
}

// ---- max pooling -------------------------------------------------------------

// Covers both variants: the downsampling pool (s = k) and the strided-kernel
// pool (s = 1, d >= 1). Ties go to the smallest input linear index; the
// (ky,kx)-ascending scan with strict '>' guarantees that.
template <typename S>
void maxpool_sk_forward(const Blob<S>& in, LayerState<S>& state, const ConvGeometry& g,
                        Blob<S>& out) {
  out.resize(in.channels, g.out_h, g.out_w);
  state.argmax.resize(out.size());
  std::size_t o = 0;
  for (int c = 0; c < in.channels; ++c) {
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox, ++o) {
        S best = S(0);
        std::size_t best_idx = 0;
        bool first = true;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.s + ky * g.d;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.s + kx * g.d;
            const std::size_t idx = in.index(c, iy, ix);
            const S v = in.data[idx];
            if (first || v > best) {
              best = v;
              best_idx = idx;
              first = false;
            }
          }
        }
        out.data[o] = best;
        state.argmax[o] = best_idx;
      }
    }
  }
}

template <typename S>
void maxpool_sk_backward(Blob<S>& in, const LayerState<S>& state, const Blob<S>& out) {
  if (state.argmax.size() != out.size()) throw SizeError("pool backward: stale argmax cache");
  in.ensure_diff();
  for (std::size_t o = 0; o < out.size(); ++o) in.diff[state.argmax[o]] += out.diff[o];
}

// ---- rectifier ----------------------------------------------------------------

template <typename S>
void relu_forward(const Blob<S>& in, Blob<S>& out) {
  out.resize(in.channels, in.height, in.width);
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in.data[i] > S(0) ? in.data[i] : S(0);
}

// Subgradient at exactly 0 is taken as 0.
template <typename S>
void relu_backward(Blob<S>& in, const Blob<S>& out) {
  in.ensure_diff();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in.data[i] > S(0)) in.diff[i] += out.diff[i];
  }
}

// ---- upconvolution (fixed nearest-neighbor 2x) ---------------------------------

// Constant non-learnable upsampling: each input pixel is replicated into a
// 2x2 block. Channel count is preserved.
template <typename S>
void upconv_forward(const Blob<S>& in, Blob<S>& out) {
  out.resize(in.channels, in.height * 2, in.width * 2);
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < in.height; ++y) {
      for (int x = 0; x < in.width; ++x) {
        const S v = in.at(c, y, x);
        out.at(c, 2 * y, 2 * x) = v;
        out.at(c, 2 * y, 2 * x + 1) = v;
        out.at(c, 2 * y + 1, 2 * x) = v;
        out.at(c, 2 * y + 1, 2 * x + 1) = v;
      }
    }
  }
}

template <typename S>
void upconv_backward(Blob<S>& in, const Blob<S>& out) {
  in.ensure_diff();
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < in.height; ++y) {
      for (int x = 0; x < in.width; ++x) {
        in.diff_at(c, y, x) += out.diff_at(c, 2 * y, 2 * x) + out.diff_at(c, 2 * y, 2 * x + 1) +
                               out.diff_at(c, 2 * y + 1, 2 * x) +
                               out.diff_at(c, 2 * y + 1, 2 * x + 1);
      }
    }
  }
}

// ---- merge-crop ----------------------------------------------------------------

// Concatenates A with a center crop of B (offset floor((B-A)/2) per axis).
// A's channels come first. B must be at least as large as A spatially.
template <typename S>
void mergecrop_forward(const Blob<S>& a, const Blob<S>& b, Blob<S>& out) {
  if (b.height < a.height || b.width < a.width) {
    throw SizeError("mergecrop: second input " + std::to_string(b.height) + "x" +
                    std::to_string(b.width) + " smaller than first " + std::to_string(a.height) +
                    "x" + std::to_string(a.width));
  }
  const int oy = (b.height - a.height) / 2;
  const int ox = (b.width - a.width) / 2;
  out.resize(a.channels + b.channels, a.height, a.width);
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) out.at(c, y, x) = a.at(c, y, x);
  for (int c = 0; c < b.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) out.at(a.channels + c, y, x) = b.at(c, y + oy, x + ox);
}

// Gradient flows into A only; the cropped path is treated as a constant lateral
// feed (per the fixed training scheme for U-shaped nets here).
template <typename S>
void mergecrop_backward(Blob<S>& a, const Blob<S>& out) {
  a.ensure_diff();
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) a.diff_at(c, y, x) += out.diff_at(c, y, x);
}

// ---- softmax and its pixelwise negative-log-likelihood loss ---------------------

// Channel softmax per pixel, max-shifted for stability.
template <typename S>
void softmax_forward(const Blob<S>& in, Blob<S>& out) {
  out.resize(in.channels, in.height, in.width);
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
      out.data[c * plane + px] = static_cast<S>(static_cast<double>(out.data[c * plane + px]) / sum);
    }
  }
}

// d(in) += J_softmax^T * d(out): per pixel, dIn_c = p_c * (dOut_c - sum_j dOut_j p_j).
template <typename S>
void softmax_backward(Blob<S>& in, const Blob<S>& out) {
  in.ensure_diff();
  const std::size_t plane = in.plane();
  for (std::size_t px = 0; px < plane; ++px) {
    double mix = 0.0;
    for (int c = 0; c < in.channels; ++c) {
      mix += static_cast<double>(out.diff[c * plane + px]) *
             static_cast<double>(out.data[c * plane + px]);
    }
    for (int c = 0; c < in.channels; ++c) {
      in.diff[c * plane + px] += static_cast<S>(
          static_cast<double>(out.data[c * plane + px]) *
          (static_cast<double>(out.diff[c * plane + px]) - mix));
    }
  }
}

// Pixelwise NLL over unmasked pixels: loss = -(1/N) sum log p(label), and
// scores.diff += (p - onehot)/N on unmasked pixels. mask may be empty (all
// pixels count); mask pixel 0 drops the pixel from loss and gradient. If every
// pixel is masked the loss is 0 and no gradient is written.
template <typename S>
double softmax_loss(Blob<S>& scores, const Plane<int>& labels, const Plane<std::uint8_t>& mask) {
  if (labels.height != scores.height || labels.width != scores.width) {
    throw SizeError("softmax_loss: label plane " + std::to_string(labels.height) + "x" +
                    std::to_string(labels.width) + " does not match scores");
  }
  const bool masked = !mask.pix.empty();
  if (masked && (mask.height != scores.height || mask.width != scores.width)) {
    throw SizeError("softmax_loss: mask plane does not match scores");
  }
  Blob<S> probs;
  softmax_forward(scores, probs);
  const std::size_t plane = scores.plane();
  std::size_t n = 0;
  for (std::size_t px = 0; px < plane; ++px) {
    if (!masked || mask.pix[px]) ++n;
  }
  if (n == 0) return 0.0;
  scores.ensure_diff();
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t px = 0; px < plane; ++px) {
    if (masked && !mask.pix[px]) continue;
    const int label = labels.pix[px];
    if (label < 0 || label >= scores.channels) {
      throw SpecError("softmax_loss: label " + std::to_string(label) + " outside [0, " +
                      std::to_string(scores.channels) + ")");
    }
    loss -= std::log(std::max(static_cast<double>(probs.data[label * plane + px]), 1e-300));
    for (int c = 0; c < scores.channels; ++c) {
      const double onehot = (c == label) ? 1.0 : 0.0;
      scores.diff[c * plane + px] +=
          static_cast<S>((static_cast<double>(probs.data[c * plane + px]) - onehot) * inv_n);
    }
  }
  return loss * inv_n;
}

}  // namespace pixelseg
