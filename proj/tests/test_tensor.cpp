#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "pixelseg/blob.hpp"
#include "pixelseg/rng.hpp"
#include "pixelseg/tensor.hpp"

using namespace pixelseg;

namespace {

template <typename S>
Blob<S> random_blob(int f, int h, int w, Rng& rng) {
  Blob<S> b(f, h, w);
  for (auto& v : b.data) v = static_cast<S>(rng.uniform(-1.0, 1.0));
  return b;
}

template <typename S>
double dot(const std::vector<S>& a, const std::vector<S>& b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

}  // namespace

TEST_CASE("output extent formula and failure modes") {
  // out = (in + 2p - ((k-1)d + 1)) / s + 1, exactly divisible.
  CHECK(ConvGeometry::out_extent(7, 3, 2, 1, 0, "t") == 3);
  CHECK(ConvGeometry::out_extent(229, 7, 1, 1, 0, "t") == 223);
  CHECK(ConvGeometry::out_extent(222, 5, 2, 1, 0, "t") == 214);
  CHECK(ConvGeometry::out_extent(100, 2, 1, 2, 0, "t") == 50);   // downsampling pool
  CHECK(ConvGeometry::out_extent(200, 2, 4, 1, 0, "t") == 196);  // strided-kernel pool
  CHECK(ConvGeometry::out_extent(5, 3, 1, 1, 1, "t") == 5);      // padded same-size
  // Kernel span exceeding the (padded) input.
  CHECK_THROWS_AS(ConvGeometry::out_extent(4, 3, 2, 1, 0, "t"), SizeError);
  // Stride must divide exactly.
  CHECK_THROWS_AS(ConvGeometry::out_extent(5, 2, 1, 2, 0, "t"), SizeError);
  // Bad parameters.
  CHECK_THROWS_AS(ConvGeometry::out_extent(5, 0, 1, 1, 0, "t"), SizeError);
}

TEST_CASE("im2col with k=1 is an exact reshape") {
  Rng rng(7);
  const Blob<float> in = random_blob<float>(3, 4, 5, rng);
  const ConvGeometry g = ConvGeometry::from_input(1, 1, 1, 0, 4, 5);
  ColumnBuffer<float> col;
  im2col_sk(in, g, col);
  REQUIRE(col.rows == 3);
  REQUIRE(col.cols == 20);
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(col.data[i] == in.data[i]);
}

TEST_CASE("strided-kernel gather matches the frozen single-channel example") {
  // 7x7 input, k=3, d=2: output 3x3, 9 rows, 9 columns; the (ky=2,kx=2) tap of
  // the first output position reads input pixel (4,4).
  Blob<float> in(1, 7, 7);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) in.at(0, y, x) = static_cast<float>(10 * y + x);
  const ConvGeometry g = ConvGeometry::from_input(3, 2, 1, 0, 7, 7);
  REQUIRE(g.out_h == 3);
  REQUIRE(g.out_w == 3);
  ColumnBuffer<float> col;
  im2col_sk(in, g, col);
  REQUIRE(col.rows == 9);
  REQUIRE(col.cols == 9);
  const int r = (0 * 3 + 2) * 3 + 2;  // c=0, ky=2, kx=2
  const int n = 0 * 3 + 0;            // oy=0, ox=0
  CHECK(col.at(r, n) == in.at(0, 4, 4));
  CHECK(col.at(r, n) == doctest::Approx(44.0f));
}

TEST_CASE("gather agrees with the definition oracle across shapes") {
  Rng rng(11);
  struct Case {
    int f, h, w, k, d, s, p;
  };
  const Case cases[] = {
      {1, 7, 7, 3, 2, 1, 0}, {2, 9, 8, 3, 1, 1, 1}, {3, 10, 10, 2, 1, 2, 0},
      {2, 11, 11, 3, 3, 1, 0}, {1, 7, 7, 2, 2, 2, 0}, {4, 5, 5, 5, 1, 1, 2},
  };
  for (const auto& c : cases) {
    const Blob<double> in = random_blob<double>(c.f, c.h, c.w, rng);
    const ConvGeometry g = ConvGeometry::from_input(c.k, c.d, c.s, c.p, c.h, c.w);
    ColumnBuffer<double> col;
    im2col_sk(in, g, col);
    const ColumnBuffer<double> ref = oracle::ref_im2col(in, g);
    REQUIRE(col.rows == ref.rows);
    REQUIRE(col.cols == ref.cols);
    const std::size_t n = static_cast<std::size_t>(col.rows) * col.cols;
    for (std::size_t i = 0; i < n; ++i) CHECK(col.data[i] == ref.data[i]);
  }
}

TEST_CASE("column geometry of a mid-net strided layer") {
  // 48 channels, k=5, d=2 on a 222-wide input: 214 output positions per axis,
  // 1200 kernel taps per column.
  const ConvGeometry g = ConvGeometry::from_input(5, 2, 1, 0, 222, 222);
  CHECK(g.out_h == 214);
  CHECK(g.out_w == 214);
  CHECK(48 * g.k * g.k == 1200);
  CHECK(g.out_h * g.out_w == 45796);
}

TEST_CASE("scatter is the exact adjoint of gather") {
  Rng rng(13);
  struct Case {
    int f, h, w, k, d, s, p;
  };
  const Case cases[] = {{2, 8, 8, 3, 2, 1, 0}, {3, 9, 7, 2, 1, 1, 1}, {1, 10, 10, 2, 1, 2, 0}};
  for (const auto& c : cases) {
    const ConvGeometry g = ConvGeometry::from_input(c.k, c.d, c.s, c.p, c.h, c.w);
    // double stack: inner products agree to near machine precision
    {
      const Blob<double> x = random_blob<double>(c.f, c.h, c.w, rng);
      ColumnBuffer<double> cx;
      im2col_sk(x, g, cx);
      ColumnBuffer<double> y;
      y.resize(cx.rows, cx.cols);
      for (auto& v : y.data) v = rng.uniform(-1.0, 1.0);
      Blob<double> xty;
      col2im_sk(y, g, c.f, xty);
      const double lhs = dot(cx.data, y.data, static_cast<std::size_t>(cx.rows) * cx.cols);
      const double rhs = dot(x.data, xty.data, x.size());
      CHECK(std::abs(lhs - rhs) <= 1e-12 * std::max({std::abs(lhs), std::abs(rhs), 1.0}));
    }
    // float stack: 1e-6 relative
    {
      const Blob<float> x = random_blob<float>(c.f, c.h, c.w, rng);
      ColumnBuffer<float> cx;
      im2col_sk(x, g, cx);
      ColumnBuffer<float> y;
      y.resize(cx.rows, cx.cols);
      for (auto& v : y.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
      Blob<float> xty;
      col2im_sk(y, g, c.f, xty);
      const double lhs = dot(cx.data, y.data, static_cast<std::size_t>(cx.rows) * cx.cols);
      const double rhs = dot(x.data, xty.data, x.size());
      CHECK(std::abs(lhs - rhs) <= 1e-6 * std::max({std::abs(lhs), std::abs(rhs), 1.0}));
    }
  }
}

TEST_CASE("padding gathers zeros outside the input") {
  Blob<float> in(1, 3, 3);
  for (auto& v : in.data) v = 1.0f;
  const ConvGeometry g = ConvGeometry::from_input(3, 1, 1, 1, 3, 3);
  ColumnBuffer<float> col;
  im2col_sk(in, g, col);
  // Tap (ky=0,kx=0) of output (0,0) reads input(-1,-1) -> 0.
  CHECK(col.at(0, 0) == 0.0f);
  // Center tap of output (0,0) reads input(0,0) -> 1.
  CHECK(col.at(4, 0) == 1.0f);
}

TEST_CASE("gemm matches the frozen 2x2 product") {
  const float a[] = {1, 2, 3, 4};
  const float b[] = {5, 6, 7, 8};
  float c[4] = {-1, -1, -1, -1};
  gemm<float>(false, false, 2, 2, 2, 1.0f, a, b, 0.0f, c);
  CHECK(c[0] == 19.0f);
  CHECK(c[1] == 22.0f);
  CHECK(c[2] == 43.0f);
  CHECK(c[3] == 50.0f);
}

TEST_CASE("gemm transpose variants, alpha/beta semantics") {
  Rng rng(17);
  const int m = 4, n = 5, k = 3;
  std::vector<double> A(m * k), B(k * n), At(k * m), Bt(n * k);
  for (auto& v : A) v = rng.uniform(-1, 1);
  for (auto& v : B) v = rng.uniform(-1, 1);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) At[j * m + i] = A[i * k + j];
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n; ++j) Bt[j * k + i] = B[i * n + j];

  std::vector<double> c0(m * n, 0.0), c1(m * n, 123.0), c2(m * n, 0.0), c3(m * n, 0.0);
  gemm<double>(false, false, m, n, k, 1.0, A.data(), B.data(), 0.0, c0.data());
  // beta=0 ignores prior contents entirely.
  gemm<double>(false, false, m, n, k, 1.0, A.data(), B.data(), 0.0, c1.data());
  CHECK(c0 == c1);
  gemm<double>(true, false, m, n, k, 1.0, At.data(), B.data(), 0.0, c2.data());
  CHECK(c0 == c2);
  gemm<double>(false, true, m, n, k, 1.0, A.data(), Bt.data(), 0.0, c3.data());
  CHECK(c0 == c3);
  // beta=1 accumulates, alpha scales.
  std::vector<double> c4 = c0;
  gemm<double>(false, false, m, n, k, 2.0, A.data(), B.data(), 1.0, c4.data());
  for (int i = 0; i < m * n; ++i) CHECK(c4[i] == doctest::Approx(3.0 * c0[i]).epsilon(1e-12));
}

TEST_CASE("gemm is deterministic and column-chunk invariant") {
  Rng rng(19);
  const int m = 6, n = 32, k = 50;
  std::vector<float> A(m * k), B(k * n);
  for (auto& v : A) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : B) v = static_cast<float>(rng.uniform(-1, 1));
  std::vector<float> c1(m * n, 0.0f), c2(m * n, 0.0f);
  gemm<float>(false, false, m, n, k, 1.0f, A.data(), B.data(), 0.0f, c1.data());
  gemm<float>(false, false, m, n, k, 1.0f, A.data(), B.data(), 0.0f, c2.data());
  CHECK(c1 == c2);  // bit-identical across runs

  // Computing a column subset yields bit-identical entries: the reduction
  // order over kk does not depend on n. (This is what makes tiled inference
  // outputs independent of the tile partition.)
  const int n1 = 13;
  std::vector<float> Bsub(k * n1), csub(m * n1, 0.0f);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n1; ++j) Bsub[i * n1 + j] = B[i * n + j];
  gemm<float>(false, false, m, n1, k, 1.0f, A.data(), Bsub.data(), 0.0f, csub.data());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n1; ++j) CHECK(csub[i * n1 + j] == c1[i * n + j]);
}

TEST_CASE("gemm flop convention") {
  CHECK(gemm_flops(2, 2, 2) == 2 * 2 * 3);
  // One strided mid-net layer at full scale: 1024 x 128^2 x (2*19200-1).
  CHECK(gemm_flops(1024, 128 * 128, 192 * 100) == 644228317184LL);
}
