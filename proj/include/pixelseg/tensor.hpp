#pragma once

#include <string>
#include <vector>

#include "pixelseg/blob.hpp"
#include "pixelseg/common.hpp"

namespace pixelseg {

// Geometry of one strided-kernel window pass. The kernel has k taps per axis
// placed d pixels apart, so it spans (k-1)*d + 1 input pixels; s is the output
// stride and p symmetric zero padding.
struct ConvGeometry {
  int k = 1;
  int d = 1;
  int s = 1;
  int p = 0;
  int in_h = 0;
  int in_w = 0;
  int out_h = 0;
  int out_w = 0;

  int span() const { return (k - 1) * d + 1; }

  static int out_extent(int in, int k, int d, int s, int p, const char* what) {
    const int span = (k - 1) * d + 1;
    if (k < 1 || d < 1 || s < 1 || p < 0) {
      throw SizeError(std::string(what) + ": require k,d,s >= 1 and p >= 0");
    }
    const int padded = in + 2 * p;
    if (span > padded) {
      throw SizeError(std::string(what) + ": kernel span " + std::to_string(span) +
                      " exceeds padded input " + std::to_string(padded));
    }
    const int num = padded - span;
    if (num % s != 0) {
      throw SizeError(std::string(what) + ": input " + std::to_string(in) + " with span " +
                      std::to_string(span) + " not divisible by stride " + std::to_string(s));
    }
    return num / s + 1;
  }

  static ConvGeometry from_input(int k, int d, int s, int p, int in_h, int in_w) {
    ConvGeometry g;
    g.k = k;
    g.d = d;
    g.s = s;
    g.p = p;
    g.in_h = in_h;
    g.in_w = in_w;
    g.out_h = out_extent(in_h, k, d, s, p, "height");
    g.out_w = out_extent(in_w, k, d, s, p, "width");
    return g;
  }
};

// Column matrix produced by im2col_sk: rows = channels*k*k kernel taps,
// cols = out_h*out_w output positions, row-major.
template <typename S>
struct ColumnBuffer {
  int rows = 0;
  int cols = 0;
  std::vector<S> data;

  void resize(int r, int c) {
    rows = r;
    cols = c;
    const std::size_t need = static_cast<std::size_t>(r) * c;
    if (data.size() < need) data.resize(need);
  }

  S& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const S& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

// Gathers strided-kernel windows into columns. Row r = (c*k + ky)*k + kx holds
// input[c, oy*s + ky*d - p, ox*s + kx*d - p] at column n = oy*out_w + ox,
// zero where the tap falls outside the input.
template <typename S>
void im2col_sk(const Blob<S>& in, const ConvGeometry& g, ColumnBuffer<S>& col) {
  if (in.height != g.in_h || in.width != g.in_w) {
    throw SizeError("im2col_sk: blob is " + std::to_string(in.height) + "x" +
                    std::to_string(in.width) + " but geometry expects " + std::to_string(g.in_h) +
                    "x" + std::to_string(g.in_w));
  }
  col.resize(in.channels * g.k * g.k, g.out_h * g.out_w);
  const int k = g.k, d = g.d, s = g.s, p = g.p;
  std::size_t r = 0;
  for (int c = 0; c < in.channels; ++c) {
    const S* plane = in.data.data() + c * in.plane();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++r) {
        S* dst = col.data.data() + r * col.cols;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * s + ky * d - p;
          if (iy < 0 || iy >= g.in_h) {
            for (int ox = 0; ox < g.out_w; ++ox) *dst++ = S(0);
            continue;
          }
          const S* row = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * s + kx * d - p;
            *dst++ = (ix >= 0 && ix < g.in_w) ? row[ix] : S(0);
          }
        }
      }
    }
  }
}

// Exact adjoint of im2col_sk: scatter-adds columns back onto an image.
template <typename S>
void col2im_sk(const ColumnBuffer<S>& col, const ConvGeometry& g, int channels, Blob<S>& out) {
  if (col.rows != channels * g.k * g.k || col.cols != g.out_h * g.out_w) {
    throw SizeError("col2im_sk: column buffer is " + std::to_string(col.rows) + "x" +
                    std::to_string(col.cols) + ", expected " +
                    std::to_string(channels * g.k * g.k) + "x" +
                    std::to_string(g.out_h * g.out_w));
  }
  out.resize(channels, g.in_h, g.in_w);
  const int k = g.k, d = g.d, s = g.s, p = g.p;
  std::size_t r = 0;
  for (int c = 0; c < channels; ++c) {
    S* plane = out.data.data() + c * out.plane();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++r) {
        const S* src = col.data.data() + r * col.cols;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * s + ky * d - p;
          if (iy < 0 || iy >= g.in_h) {
            src += g.out_w;
            continue;
          }
          S* row = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * s + kx * d - p;
            if (ix >= 0 && ix < g.in_w) row[ix] += src[ox];
          }
          src += g.out_w;
        }
      }
    }
  }
}

// Row-major C <- alpha*A*B + beta*C with A m-by-k, B k-by-n. The reduction
// runs over kk in ascending order into a 64-bit accumulator, so results are
// bit-stable across runs and independent of n (tile size). transpose_a/b give
// the two transposed variants the backward passes need.
template <typename S>
void gemm(bool transpose_a, bool transpose_b, int m, int n, int k, S alpha, const S* a,
          const S* b, S beta, S* c) {
  const std::size_t lda = transpose_a ? m : k;
  const std::size_t ldb = transpose_b ? k : n;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) {
        const S av = transpose_a ? a[kk * lda + i] : a[i * lda + kk];
        const S bv = transpose_b ? b[j * ldb + kk] : b[kk * ldb + j];
        acc += static_cast<double>(av) * static_cast<double>(bv);
      }
      double r = static_cast<double>(alpha) * acc;
      if (beta != S(0)) r += static_cast<double>(beta) * static_cast<double>(c[i * static_cast<std::size_t>(n) + j]);
      c[i * static_cast<std::size_t>(n) + j] = static_cast<S>(r);
    }
  }
}

// FLOP count convention for one GEMM: n*m*(2k-1) (multiply-add = 2 FLOP,
// minus the missing first add).
inline long long gemm_flops(long long m, long long n, long long k) {
  return m * n * (2 * k - 1);
}

}  // namespace pixelseg
