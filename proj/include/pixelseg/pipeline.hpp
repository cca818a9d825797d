#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pixelseg/blob.hpp"
#include "pixelseg/common.hpp"
#include "pixelseg/convert.hpp"
#include "pixelseg/image_io.hpp"
#include "pixelseg/layers.hpp"
#include "pixelseg/malis.hpp"
#include "pixelseg/netgraph.hpp"
#include "pixelseg/netspec.hpp"
#include "pixelseg/rng.hpp"

namespace pixelseg {

struct LabeledImage {
  std::string name;
  Plane<std::uint8_t> raw;
  Plane<int> labels;
};

// ---- preprocessing ---------------------------------------------------------------

// Pads by reflection without duplicating the border pixel: ceil(v/2) on top
// and left, floor(v/2) on bottom and right.
template <typename T>
Plane<T> mirror_pad(const Plane<T>& img, int v) {
  if (v < 0) throw SizeError("mirror_pad: negative padding");
  if (v == 0) return img;
  const int before = (v + 1) / 2;  // remainder v/2 lands after
  if (before > img.height - 1 || before > img.width - 1) {
    throw SizeError("mirror_pad: padding " + std::to_string(before) +
                    " needs an image larger than " + std::to_string(before + 1) + " pixels");
  }
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i;               // reflect about 0 (pixel 0 not duplicated)
    if (i >= n) i = 2 * n - 2 - i;   // reflect about n-1
    return i;
  };
  Plane<T> out(img.height + v, img.width + v);
  for (int y = 0; y < out.height; ++y) {
    const int sy = reflect(y - before, img.height);
    for (int x = 0; x < out.width; ++x) {
      out.at(y, x) = img.at(sy, reflect(x - before, img.width));
    }
  }
  return out;
}

// Remaps label ids through a table. The table's value set must be a dense
// range 0..L'-1 (a gap would leave a class with no pixels able to exist).
inline Plane<int> consolidate_labels(const Plane<int>& labels, const std::vector<int>& mapping) {
  if (mapping.empty()) throw SpecError("consolidate_labels: empty mapping");
  std::set<int> values(mapping.begin(), mapping.end());
  if (*values.begin() < 0) throw SpecError("consolidate_labels: negative target label");
  int expect = 0;
  for (int v : values) {
    if (v != expect) {
      throw SpecError("consolidate_labels: target labels have a gap at " + std::to_string(expect));
    }
    ++expect;
  }
  Plane<int> out(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels.pix[i];
    if (l < 0 || l >= static_cast<int>(mapping.size())) {
      throw SizeError("consolidate_labels: label " + std::to_string(l) +
                      " outside the mapping table");
    }
    out.pix[i] = mapping[l];
  }
  return out;
}

// x/127.5 - 1: maps 8-bit [0,255] onto [-1,1].
template <typename S>
Plane<S> normalize_image(const Plane<std::uint8_t>& img) {
  Plane<S> out(img.height, img.width);
  for (std::size_t i = 0; i < img.size(); ++i) {
    out.pix[i] = static_cast<S>(static_cast<double>(img.pix[i]) / 127.5 - 1.0);
  }
  return out;
}

// ---- histogram equalization ---------------------------------------------------------

// Coverage-weighted label frequencies: every pixel counts once per w-patch
// offset that covers it, so border pixels (covered by fewer training patches)
// weigh less. Normalized to sum 1.
inline std::vector<double> compute_label_stats(const std::vector<LabeledImage>& data, int w,
                                               int n_labels) {
  if (w < 1) throw SpecError("label stats: patch size must be >= 1");
  if (n_labels < 1) throw SpecError("label stats: need at least one label");
  std::vector<double> c(n_labels, 0.0);
  double total = 0.0;
  for (const auto& img : data) {
    const Plane<int>& lab = img.labels;
    if (lab.height < w || lab.width < w) continue;  // no patch fits; contributes nothing
    auto cover = [w](int i, int n) {
      // number of valid offsets o with o <= i < o + w and 0 <= o <= n - w
      return std::min(i, n - w) - std::max(0, i - w + 1) + 1;
    };
    for (int y = 0; y < lab.height; ++y) {
      const double wy = cover(y, lab.height);
      for (int x = 0; x < lab.width; ++x) {
        const int l = lab.at(y, x);
        if (l < 0 || l >= n_labels) {
          throw SizeError("label stats: image '" + img.name + "' has label " + std::to_string(l) +
                          " outside 0.." + std::to_string(n_labels - 1));
        }
        const double weight = wy * cover(x, lab.width);
        c[l] += weight;
        total += weight;
      }
    }
  }
  if (total > 0.0) {
    for (double& v : c) v /= total;
  }
  return c;
}

// Patch sampler. With the prior enabled, patch j is drawn with probability
// proportional to r_j = sum_i a_{j,i}/c_i (a_{j,i} = fraction of patch j's
// pixels carrying label i), which prefers patches rich in rare labels; without
// it, sampling is uniform over all offsets. c_hat is the label posterior of
// the sampling distribution, normalized to sum 1.
struct SamplerState {
  int patch_w = 0;
  int n_labels = 0;
  bool prior = false;
  std::vector<double> c;      // coverage-weighted label stats
  std::vector<double> c_hat;  // posterior under the sampling distribution
  struct PerImage {
    int n_y = 0, n_x = 0;
    std::vector<double> cum;  // cumulative patch weights, raster order
  };
  std::vector<PerImage> images;
  double total = 0.0;
};

struct PatchRef {
  int image = 0;
  int oy = 0, ox = 0;
};

inline SamplerState build_sampler(const std::vector<LabeledImage>& data, int patch_w,
                                  int n_labels, bool prior) {
  SamplerState s;
  s.patch_w = patch_w;
  s.n_labels = n_labels;
  s.prior = prior;
  s.c = compute_label_stats(data, patch_w, n_labels);
  s.c_hat.assign(n_labels, 0.0);
  s.images.resize(data.size());
  const double n_px = static_cast<double>(patch_w) * patch_w;
  for (std::size_t im = 0; im < data.size(); ++im) {
    const Plane<int>& lab = data[im].labels;
    SamplerState::PerImage& per = s.images[im];
    if (lab.height < patch_w || lab.width < patch_w) continue;
    per.n_y = lab.height - patch_w + 1;
    per.n_x = lab.width - patch_w + 1;
    // Per-label integral images make every patch's label histogram O(1).
    const int ih = lab.height + 1, iw = lab.width + 1;
    std::vector<std::vector<double>> integral(n_labels, std::vector<double>(ih * iw, 0.0));
    for (int y = 0; y < lab.height; ++y) {
      for (int x = 0; x < lab.width; ++x) {
        const int l = lab.at(y, x);
        for (int i = 0; i < n_labels; ++i) {
          integral[i][(y + 1) * iw + (x + 1)] = integral[i][y * iw + (x + 1)] +
                                                integral[i][(y + 1) * iw + x] -
                                                integral[i][y * iw + x] + (l == i ? 1.0 : 0.0);
        }
      }
    }
    per.cum.resize(static_cast<std::size_t>(per.n_y) * per.n_x);
    double running = 0.0;
    std::vector<double> a(n_labels);
    for (int oy = 0; oy < per.n_y; ++oy) {
      for (int ox = 0; ox < per.n_x; ++ox) {
        double r = prior ? 0.0 : 1.0;
        for (int i = 0; i < n_labels; ++i) {
          const double count = integral[i][(oy + patch_w) * iw + (ox + patch_w)] -
                               integral[i][oy * iw + (ox + patch_w)] -
                               integral[i][(oy + patch_w) * iw + ox] +
                               integral[i][oy * iw + ox];
          a[i] = count / n_px;
          if (prior && s.c[i] > 0.0) r += a[i] / s.c[i];
        }
        for (int i = 0; i < n_labels; ++i) s.c_hat[i] += r * a[i];
        running += r;
        per.cum[static_cast<std::size_t>(oy) * per.n_x + ox] = running;
      }
    }
    s.total += running;
  }
  double z = 0.0;
  for (double v : s.c_hat) z += v;
  if (z > 0.0) {
    for (double& v : s.c_hat) v /= z;
  }
  return s;
}

inline PatchRef patch_prior_sample(const SamplerState& s, Rng& rng) {
  if (s.total <= 0.0) throw SpecError("patch sampler: no image admits a patch of this size");
  double u = rng.uniform() * s.total;
  for (std::size_t im = 0; im < s.images.size(); ++im) {
    const auto& per = s.images[im];
    if (per.cum.empty()) continue;
    const double mass = per.cum.back();
    if (u >= mass && im + 1 < s.images.size()) {
      u -= mass;
      continue;
    }
    const auto it = std::upper_bound(per.cum.begin(), per.cum.end(), u);
    std::size_t j = static_cast<std::size_t>(it - per.cum.begin());
    if (j >= per.cum.size()) j = per.cum.size() - 1;
    PatchRef ref;
    ref.image = static_cast<int>(im);
    ref.oy = static_cast<int>(j) / per.n_x;
    ref.ox = static_cast<int>(j) % per.n_x;
    return ref;
  }
  throw SpecError("patch sampler: empty sampler");
}

// Per-pixel loss mask: a pixel of label i is kept with probability
// (min_j c_j)/c_i over the labels present in the statistics, so the kept-label
// histogram is uniform and the rarest label is never masked.
inline Plane<std::uint8_t> mask_errors(const Plane<int>& labels, const std::vector<double>& c,
                                       Rng& rng) {
  double c_min = 0.0;
  for (double v : c) {
    if (v > 0.0 && (c_min == 0.0 || v < c_min)) c_min = v;
  }
  Plane<std::uint8_t> mask(labels.height, labels.width, 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels.pix[i];
    if (l < 0 || l >= static_cast<int>(c.size())) {
      throw SizeError("mask_errors: label " + std::to_string(l) + " has no statistics entry");
    }
    const double keep = c[l] > 0.0 ? c_min / c[l] : 1.0;
    mask.pix[i] = rng.uniform() < keep ? 1 : 0;
  }
  return mask;
}

// ---- augmentation --------------------------------------------------------------------

// One quarter turn clockwise.
template <typename T>
Plane<T> rotate90(const Plane<T>& in) {
  Plane<T> out(in.width, in.height);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.at(y, x) = in.at(in.height - 1 - x, y);
  return out;
}

template <typename T>
Plane<T> mirror_lr(const Plane<T>& in) {
  Plane<T> out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) out.at(y, x) = in.at(y, in.width - 1 - x);
  return out;
}

template <typename T>
Plane<T> mirror_tb(const Plane<T>& in) {
  Plane<T> out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) out.at(y, x) = in.at(in.height - 1 - y, x);
  return out;
}

// 5x5 Gaussian blur with reflected borders; sigma <= 0 is the identity.
template <typename S>
void gaussian_blur5(Plane<S>& img, double sigma) {
  if (sigma <= 0.0) return;
  double k[5];
  double sum = 0.0;
  for (int i = -2; i <= 2; ++i) {
    k[i + 2] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[i + 2];
  }
  for (double& v : k) v /= sum;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return std::clamp(i, 0, n - 1);  // tiny images: clamp after one reflection
  };
  // Separable: horizontal then vertical pass.
  Plane<S> tmp(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -2; i <= 2; ++i) acc += k[i + 2] * static_cast<double>(img.at(y, reflect(x + i, img.width)));
      tmp.at(y, x) = static_cast<S>(acc);
    }
  }
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -2; i <= 2; ++i) acc += k[i + 2] * static_cast<double>(tmp.at(reflect(y + i, img.height), x));
      img.at(y, x) = static_cast<S>(acc);
    }
  }
}

// ---- solver configuration ---------------------------------------------------------------

enum class LossKind { Softmax, Malis, SoftmaxThenMalis };

struct SolverConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int iterations = 100;
  LossKind loss = LossKind::Softmax;
  int switch_iter = 0;  // softmax_then_malis: last softmax iteration
  bool mask = false;
  bool patch_prior = false;
  bool rot90 = false;
  bool mirror = false;
  double blur_sigma = 0.0;  // 0 = blur off
  std::uint64_t seed = 1;
  int patch_w = 0;  // output patch extent
  int pad_v = 0;    // context surplus: network input = patch_w + pad_v
};

// In-place raw/label patch augmentation: optional quarter turns (uniform
// 0..3), optional left-right and top-bottom mirrors (independent coins), then
// an optional 5x5 Gaussian blur on the raw patch only, with sigma drawn as
// |N(0, blur_sigma)| per call. Labels transform with the raw patch but are
// never blurred.
template <typename S>
void augment(Plane<S>& raw, Plane<int>& labels, Rng& rng, const SolverConfig& cfg) {
  if (cfg.rot90) {
    const int quarter = static_cast<int>(rng.uniform_index(4));
    for (int i = 0; i < quarter; ++i) {
      raw = rotate90(raw);
      labels = rotate90(labels);
    }
  }
  if (cfg.mirror) {
    if (rng.coin()) {
      raw = mirror_lr(raw);
      labels = mirror_lr(labels);
    }
    if (rng.coin()) {
      raw = mirror_tb(raw);
      labels = mirror_tb(labels);
    }
  }
  if (cfg.blur_sigma > 0.0) {
    gaussian_blur5(raw, std::abs(rng.gaussian(0.0, cfg.blur_sigma)));
  }
}

// Line-based "key = value" parser; '#' starts a comment. All problems are
// collected and reported together.
inline SolverConfig parse_solver_config(const std::string& text) {
  SolverConfig cfg;
  std::vector<std::string> errors;
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  bool saw_patch_w = false, saw_pad_v = false;
  while (std::getline(is, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.resize(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    auto fail = [&](const std::string& msg) {
      errors.push_back("line " + std::to_string(lineno) + ": " + msg);
    };
    if (eq == std::string::npos) {
      fail("expected key = value, got '" + line + "'");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto as_double = [&](double& out) {
      try {
        std::size_t used = 0;
        out = std::stod(val, &used);
        if (used != val.size()) throw std::invalid_argument("");
        return true;
      } catch (...) {
        fail("key '" + key + "' needs a number, got '" + val + "'");
        return false;
      }
    };
    auto as_int = [&](int& out) {
      try {
        std::size_t used = 0;
        out = std::stoi(val, &used);
        if (used != val.size()) throw std::invalid_argument("");
        return true;
      } catch (...) {
        fail("key '" + key + "' needs an integer, got '" + val + "'");
        return false;
      }
    };
    auto as_bool = [&](bool& out) {
      if (val == "1" || val == "true" || val == "on") {
        out = true;
        return true;
      }
      if (val == "0" || val == "false" || val == "off") {
        out = false;
        return true;
      }
      fail("key '" + key + "' needs a boolean (0/1/true/false/on/off), got '" + val + "'");
      return false;
    };
    if (key == "lr") as_double(cfg.lr);
    else if (key == "momentum") as_double(cfg.momentum);
    else if (key == "weight_decay") as_double(cfg.weight_decay);
    else if (key == "iterations") as_int(cfg.iterations);
    else if (key == "switch_iter") as_int(cfg.switch_iter);
    else if (key == "mask") as_bool(cfg.mask);
    else if (key == "patch_prior") as_bool(cfg.patch_prior);
    else if (key == "rot90") as_bool(cfg.rot90);
    else if (key == "mirror") as_bool(cfg.mirror);
    else if (key == "blur_sigma") as_double(cfg.blur_sigma);
    else if (key == "patch_w") { saw_patch_w = as_int(cfg.patch_w) || saw_patch_w; }
    else if (key == "pad_v") { saw_pad_v = as_int(cfg.pad_v) || saw_pad_v; }
    else if (key == "seed") {
      try {
        cfg.seed = std::stoull(val);
      } catch (...) {
        fail("key 'seed' needs an unsigned integer, got '" + val + "'");
      }
    } else if (key == "loss") {
      if (val == "softmax") cfg.loss = LossKind::Softmax;
      else if (val == "malis") cfg.loss = LossKind::Malis;
      else if (val == "softmax_then_malis") cfg.loss = LossKind::SoftmaxThenMalis;
      else fail("unknown loss '" + val + "' (softmax | malis | softmax_then_malis)");
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (cfg.lr <= 0.0) errors.push_back("lr must be > 0");
  if (cfg.iterations < 1) errors.push_back("iterations must be >= 1");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) errors.push_back("momentum must be in [0, 1)");
  if (cfg.weight_decay < 0.0) errors.push_back("weight_decay must be >= 0");
  if (cfg.blur_sigma < 0.0) errors.push_back("blur_sigma must be >= 0");
  if (!saw_patch_w || cfg.patch_w < 1) errors.push_back("patch_w must be set to a positive size");
  if (!saw_pad_v || cfg.pad_v < 0) errors.push_back("pad_v must be set (context surplus >= 0)");
  if (cfg.loss == LossKind::SoftmaxThenMalis &&
      (cfg.switch_iter < 1 || cfg.switch_iter >= cfg.iterations)) {
    errors.push_back("softmax_then_malis needs 1 <= switch_iter < iterations");
  }
  if (!errors.empty()) {
    std::string all = "solver config errors:";
    for (const auto& e : errors) all += "\n" + e;
    throw SpecError(all);
  }
  return cfg;
}

// ---- solver ------------------------------------------------------------------------------

// v <- momentum*v - lr*(diff + weight_decay*w); w <- w + v; diffs zeroed.
template <typename S>
void sgd_step(NetStates<S>& states, const SolverConfig& cfg) {
  const S lr = static_cast<S>(cfg.lr);
  const S mom = static_cast<S>(cfg.momentum);
  const S wd = static_cast<S>(cfg.weight_decay);
  for (auto& st : states.layers) {
    for (std::size_t i = 0; i < st.weights.size(); ++i) {
      st.weight_mom[i] = mom * st.weight_mom[i] - lr * (st.weight_diff[i] + wd * st.weights[i]);
      st.weights[i] += st.weight_mom[i];
      st.weight_diff[i] = S(0);
    }
    for (std::size_t i = 0; i < st.bias.size(); ++i) {
      st.bias_mom[i] = mom * st.bias_mom[i] - lr * (st.bias_diff[i] + wd * st.bias[i]);
      st.bias[i] += st.bias_mom[i];
      st.bias_diff[i] = S(0);
    }
  }
}

// ---- training ----------------------------------------------------------------------------

template <typename S>
struct TrainResult {
  NetStates<S> states;
  std::vector<std::pair<int, double>> loss_log;  // (iteration, loss), 1-based
  SamplerState sampler;
};

namespace detail {

// Replicates a gray plane across the net's input channels.
template <typename S>
Blob<S> plane_to_input(const Plane<S>& p, int channels) {
  Blob<S> in(channels, p.height, p.width);
  for (int c = 0; c < channels; ++c) {
    std::copy(p.pix.begin(), p.pix.end(), in.data.begin() + c * p.size());
  }
  return in;
}

}  // namespace detail

// SGD training loop: sample patch (optionally histogram-equalized), augment,
// forward, loss (softmax with optional masking, or the structured maximin
// loss, or the former switching to the latter after switch_iter), backward,
// parameter step. Bit-deterministic for a fixed seed.
template <typename S>
TrainResult<S> train(const NetSpec& spec, const SolverConfig& cfg,
                     const std::vector<LabeledImage>& data) {
  if (data.empty()) throw SpecError("train: empty dataset");
  const LayerSpec* head = spec.loss_head();
  if (head == nullptr) throw SpecError("train: net has no softmax head as its last layer");
  const std::string scores_name = head->inputs[0];
  const auto channels = compute_channels(spec);
  const int n_labels = channels.at(scores_name);
  if (n_labels < 2) throw SpecError("train: need at least 2 classes");
  const int w = cfg.patch_w, v = cfg.pad_v;
  {
    int out = 0;
    try {
      out = output_extent(spec, w + v);
    } catch (const Error& e) {
      throw SpecError(std::string("train: patch_w + pad_v is not a valid input size: ") +
                      e.what());
    }
    if (out != w) {
      throw SpecError("train: input " + std::to_string(w + v) + " produces output " +
                      std::to_string(out) + ", not patch_w = " + std::to_string(w) +
                      " (wrong pad_v for this net)");
    }
  }
  if ((cfg.rot90 || cfg.mirror) && v % 2 != 0) {
    throw SpecError(
        "train: rot90/mirror augmentation needs an even context surplus v (odd v shifts the "
        "label window under the transform)");
  }
  for (const auto& img : data) {
    if (img.raw.height != img.labels.height || img.raw.width != img.labels.width) {
      throw SizeError("train: image '" + img.name + "' has mismatched raw/label sizes");
    }
  }

  TrainResult<S> result;
  result.states = init_weights<S>(spec, cfg.seed);
  NetRunner<S> runner(spec, result.states);
  result.sampler = build_sampler(data, w, n_labels, cfg.patch_prior);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  // Pad + normalize every raw image once.
  std::vector<Plane<S>> padded;
  padded.reserve(data.size());
  const int before = (v + 1) / 2;
  for (const auto& img : data) {
    padded.push_back(img.raw.height - 1 >= before && img.raw.width - 1 >= before
                         ? normalize_image<S>(mirror_pad(img.raw, v))
                         : Plane<S>());
  }

  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    const PatchRef at = patch_prior_sample(result.sampler, rng);
    const Plane<S>& src = padded[at.image];
    if (src.size() == 0) throw SizeError("train: sampled an image too small to pad");
    Plane<S> raw_patch(w + v, w + v);
    for (int y = 0; y < w + v; ++y)
      for (int x = 0; x < w + v; ++x) raw_patch.at(y, x) = src.at(at.oy + y, at.ox + x);
    Plane<int> label_patch(w, w);
    for (int y = 0; y < w; ++y)
      for (int x = 0; x < w; ++x) label_patch.at(y, x) = data[at.image].labels.at(at.oy + y, at.ox + x);

    augment(raw_patch, label_patch, rng, cfg);

    const Blob<S> input = detail::plane_to_input(raw_patch, spec.f0);
    runner.forward(input);
    runner.zero_blob_diffs();
    Blob<S>& scores = runner.blob_mut(scores_name);

    const bool use_malis = cfg.loss == LossKind::Malis ||
                           (cfg.loss == LossKind::SoftmaxThenMalis && iter > cfg.switch_iter);
    double loss = 0.0;
    if (use_malis) {
      Plane<std::uint8_t> fg(w, w);
      for (std::size_t i = 0; i < fg.size(); ++i) fg.pix[i] = label_patch.pix[i] > 0 ? 1 : 0;
      loss = malis_softmax_loss(scores, fg);
    } else {
      const Plane<std::uint8_t> mask = cfg.mask ? mask_errors(label_patch, result.sampler.c, rng)
                                                : Plane<std::uint8_t>(w, w, 1);
      loss = softmax_loss(scores, label_patch, mask);
    }
    runner.backward();
    sgd_step(result.states, cfg);
    result.loss_log.emplace_back(iter, loss);
  }
  return result;
}

// ---- tiled whole-image inference -------------------------------------------------------------

template <typename S>
struct ProcessResult {
  Plane<std::uint8_t> labels;   // per-pixel argmax class
  std::vector<Plane<S>> probs;  // per-class probability maps
};

// Mirror-pads by the context surplus v, then covers the image with w-sized
// output tiles. Tiles at the right/bottom edges are re-positioned to stay
// inside the image (so they overlap their predecessors; the later tile wins),
// which keeps every output pixel backed by a full-context forward pass.
template <typename S>
ProcessResult<S> process(const NetSpec& spec, NetStates<S>& states, const Plane<std::uint8_t>& image,
                         int w, int v) {
  if (spec.loss_head() == nullptr) {
    throw SpecError("process: net has no probability head as its last layer");
  }
  {
    int out = 0;
    try {
      out = output_extent(spec, w + v);
    } catch (const Error& e) {
      throw SpecError(std::string("process: tile + context is not a valid input size: ") +
                      e.what());
    }
    if (out != w) {
      throw SpecError("process: input " + std::to_string(w + v) + " produces output " +
                      std::to_string(out) + ", not the tile size " + std::to_string(w));
    }
  }
  if (image.height < w || image.width < w) {
    throw SizeError("process: image " + std::to_string(image.height) + "x" +
                    std::to_string(image.width) + " is smaller than one " + std::to_string(w) +
                    "-tile");
  }
  const Plane<S> padded = normalize_image<S>(mirror_pad(image, v));
  const auto channels = compute_channels(spec);
  const int n_classes = channels.at(spec.layers.back().output);

  ProcessResult<S> res;
  res.labels = Plane<std::uint8_t>(image.height, image.width, 0);
  res.probs.assign(n_classes, Plane<S>(image.height, image.width, S(0)));

  auto tile_offsets = [w](int extent) {
    std::vector<int> offs;
    for (int o = 0;; o += w) {
      if (o + w >= extent) {
        offs.push_back(extent - w);  // final tile snaps to the border
        break;
      }
      offs.push_back(o);
    }
    return offs;
  };

  NetRunner<S> runner(spec, states);
  Blob<S> input(spec.f0, w + v, w + v);
  for (int oy : tile_offsets(image.height)) {
    for (int ox : tile_offsets(image.width)) {
      for (int c = 0; c < spec.f0; ++c)
        for (int y = 0; y < w + v; ++y)
          for (int x = 0; x < w + v; ++x) input.at(c, y, x) = padded.at(oy + y, ox + x);
      const Blob<S>& out = runner.forward(input);
      if (out.channels != n_classes || out.height != w || out.width != w) {
        throw SizeError("process: unexpected tile output shape");
      }
      for (int y = 0; y < w; ++y) {
        for (int x = 0; x < w; ++x) {
          int best = 0;
          for (int c = 1; c < n_classes; ++c) {
            if (out.at(c, y, x) > out.at(best, y, x)) best = c;
          }
          res.labels.at(oy + y, ox + x) = static_cast<std::uint8_t>(best);
          for (int c = 0; c < n_classes; ++c) res.probs[c].at(oy + y, ox + x) = out.at(c, y, x);
        }
      }
    }
  }
  return res;
}

// ---- dataset loading ----------------------------------------------------------------------

// Loads raw/label image pairs from two directories, matched by alphabetic
// file name order. Label images hold class ids as pixel values 0..L-1.
inline std::vector<LabeledImage> load_dataset(const std::string& raw_dir,
                                              const std::string& label_dir) {
  namespace fs = std::filesystem;
  auto list_images = [](const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      const std::string ext = e.path().extension().string();
      if (ext == ".pgm" || ext == ".PGM" || ext == ".png" || ext == ".PNG") {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    return files;
  };
  const auto raws = list_images(raw_dir);
  const auto labs = list_images(label_dir);
  if (raws.empty()) throw IoError("no images found in '" + raw_dir + "'");
  if (raws.size() != labs.size()) {
    throw IoError("dataset mismatch: " + std::to_string(raws.size()) + " raw images vs " +
                  std::to_string(labs.size()) + " label images");
  }
  std::vector<LabeledImage> data;
  data.reserve(raws.size());
  for (std::size_t i = 0; i < raws.size(); ++i) {
    LabeledImage img;
    img.name = raws[i].stem().string();
    img.raw = read_gray_image(raws[i].string());
    const Plane<std::uint8_t> lab = read_gray_image(labs[i].string());
    if (lab.height != img.raw.height || lab.width != img.raw.width) {
      throw IoError("dataset mismatch: '" + raws[i].filename().string() + "' is " +
                    std::to_string(img.raw.height) + "x" + std::to_string(img.raw.width) +
                    " but its label image is " + std::to_string(lab.height) + "x" +
                    std::to_string(lab.width));
    }
    img.labels = Plane<int>(lab.height, lab.width);
    for (std::size_t p = 0; p < lab.size(); ++p) img.labels.pix[p] = lab.pix[p];
    data.push_back(std::move(img));
  }
  return data;
}

}  // namespace pixelseg
