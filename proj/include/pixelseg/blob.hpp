#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pixelseg/common.hpp"

namespace pixelseg {

// Dense feature-map container: channels x height x width, row-major with the
// channel as the slowest index. `data` holds activations, `diff` gradients.
template <typename S>
struct Blob {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<S> data;
  std::vector<S> diff;

  Blob() = default;
  Blob(int f, int h, int w) { resize(f, h, w); }

  void resize(int f, int h, int w) {
    if (f < 0 || h < 0 || w < 0) throw SizeError("Blob: negative dimension");
    channels = f;
    height = h;
    width = w;
    data.assign(size(), S(0));
    diff.clear();
  }

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return static_cast<std::size_t>(channels) * plane(); }

  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height + y) * width + x;
  }

  S& at(int c, int y, int x) { return data[index(c, y, x)]; }
  const S& at(int c, int y, int x) const { return data[index(c, y, x)]; }

  void ensure_diff() {
    if (diff.size() != size()) diff.assign(size(), S(0));
  }

  void zero_diff() { diff.assign(size(), S(0)); }

  S& diff_at(int c, int y, int x) { return diff[index(c, y, x)]; }
  const S& diff_at(int c, int y, int x) const { return diff[index(c, y, x)]; }
};

// A single-channel 2D plane (labels, masks, probability maps, gray images).
template <typename T>
struct Plane {
  int height = 0;
  int width = 0;
  std::vector<T> pix;

  Plane() = default;
  Plane(int h, int w, T fill = T()) : height(h), width(w), pix(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return pix.size(); }
  T& at(int y, int x) { return pix[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int y, int x) const { return pix[static_cast<std::size_t>(y) * width + x]; }
};

}  // namespace pixelseg
