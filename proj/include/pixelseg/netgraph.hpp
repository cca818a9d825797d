#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pixelseg/blob.hpp"
#include "pixelseg/common.hpp"
#include "pixelseg/layers.hpp"
#include "pixelseg/netspec.hpp"
#include "pixelseg/rng.hpp"
#include "pixelseg/tensor.hpp"

namespace pixelseg {

template <typename S>
struct NetStates {
  std::vector<LayerState<S>> layers;  // aligned with NetSpec::layers
};

// Allocates and fills every learnable parameter. Weights are drawn layer by
// layer from one seeded stream, so the same seed always produces bit-identical
// parameters. Biases start at zero.
template <typename S>
NetStates<S> init_weights(const NetSpec& spec, std::uint64_t seed) {
  NetStates<S> states;
  states.layers.resize(spec.layers.size());
  Rng rng(seed);
  const auto channels = compute_channels(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (!l.has_weights()) continue;
    int fin_channels = 0;
    for (const auto& b : l.inputs) fin_channels += channels.at(b);
    const int fan_in = fin_channels * l.k * l.k;
    states.layers[i].init_conv(l.f_out, fan_in);
    double sigma = l.init_sigma;
    if (l.init == InitKind::He) sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
    if (l.init == InitKind::None) sigma = 0.01;
    for (auto& w : states.layers[i].weights) w = static_cast<S>(rng.gaussian(0.0, sigma));
  }
  return states;
}

// Executes a NetSpec over named blobs. Owns the blob table and the two shared
// column buffers; weights live in the caller's NetStates so they can be shared
// across runners (e.g. between an SK net and its sliding-window twin).
template <typename S>
class NetRunner {
 public:
  NetRunner(const NetSpec& spec, NetStates<S>& states) : spec_(spec), states_(states) {
    if (states_.layers.size() != spec_.layers.size()) {
      throw SpecError("net runner: state table has " + std::to_string(states_.layers.size()) +
                      " entries for " + std::to_string(spec_.layers.size()) + " layers");
    }
  }

  // Runs every layer in declaration order; returns the last layer's output.
  // The input may be any spatial size consistent with the net's constraints
  // (channel count must match the data layer).
  const Blob<S>& forward(const Blob<S>& input, bool timed = false) {
    if (input.channels != spec_.f0) {
      throw SizeError("forward: input has " + std::to_string(input.channels) + " channels, net expects " +
                      std::to_string(spec_.f0));
    }
    layer_seconds_.assign(spec_.layers.size(), 0.0);
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const LayerSpec& l = spec_.layers[i];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        forward_layer(i, l, input);
      } catch (const Error& e) {
        throw SizeError("layer '" + l.name + "': " + e.what());
      }
      if (timed) {
        const auto t1 = std::chrono::steady_clock::now();
        layer_seconds_[i] = std::chrono::duration<double>(t1 - t0).count();
      }
    }
    return blobs_.at(spec_.layers.back().output);
  }

  // Reverse sweep. Blob diffs must be seeded by the caller beforehand via
  // blob_mut(...).diff; everything unseeded contributes zero. Parameter diffs
  // accumulate into the shared NetStates.
  void backward() {
    for (auto& [name, b] : blobs_) b.ensure_diff();
    for (std::size_t i = spec_.layers.size(); i-- > 0;) {
      const LayerSpec& l = spec_.layers[i];
      try {
        backward_layer(i, l);
      } catch (const Error& e) {
        throw SizeError("layer '" + l.name + "' backward: " + e.what());
      }
    }
  }

  void zero_blob_diffs() {
    for (auto& [name, b] : blobs_) {
      b.ensure_diff();
      b.zero_diff();
    }
  }

  bool has_blob(const std::string& name) const { return blobs_.count(name) != 0; }

  const Blob<S>& blob(const std::string& name) const {
    const auto it = blobs_.find(name);
    if (it == blobs_.end()) throw SpecError("no blob named '" + name + "' (run forward first)");
    return it->second;
  }

  Blob<S>& blob_mut(const std::string& name) {
    const auto it = blobs_.find(name);
    if (it == blobs_.end()) throw SpecError("no blob named '" + name + "' (run forward first)");
    return it->second;
  }

  const std::vector<double>& layer_seconds() const { return layer_seconds_; }

 private:
  static ConvGeometry layer_geometry(const LayerSpec& l, const Blob<S>& in) {
    return ConvGeometry::from_input(l.k, l.d, l.s, l.p, in.height, in.width);
  }

  void forward_layer(std::size_t i, const LayerSpec& l, const Blob<S>& input) {
    switch (l.kind) {
      case LayerKind::Data: {
        blobs_[l.output] = input;  // copy; the runner owns its activations
        break;
      }
      case LayerKind::ConvSK: {
        const Blob<S>& in = blobs_.at(l.inputs[0]);
        conv_sk_forward(in, states_.layers[i], l.f_out, layer_geometry(l, in), colbuf_,
                        blobs_[l.output]);
        break;
      }
      case LayerKind::PoolMax: {
        const Blob<S>& in = blobs_.at(l.inputs[0]);
        maxpool_sk_forward(in, states_.layers[i], layer_geometry(l, in), blobs_[l.output]);
        break;
      }
      case LayerKind::Relu: {
        relu_forward(blobs_.at(l.inputs[0]), blobs_[l.output]);
        break;
      }
      case LayerKind::Upconv: {
        upconv_forward(blobs_.at(l.inputs[0]), blobs_[l.output]);
        break;
      }
      case LayerKind::MergeCrop: {
        mergecrop_forward(blobs_.at(l.inputs[0]), blobs_.at(l.inputs[1]), blobs_[l.output]);
        break;
      }
      case LayerKind::SoftmaxLoss: {
        // At graph level this is the probability head; losses are applied by
        // the training pipeline on top of the produced probabilities.
        softmax_forward(blobs_.at(l.inputs[0]), blobs_[l.output]);
        break;
      }
    }
  }

  void backward_layer(std::size_t i, const LayerSpec& l) {
    switch (l.kind) {
      case LayerKind::Data:
        break;
      case LayerKind::ConvSK: {
        Blob<S>& in = blobs_.at(l.inputs[0]);
        const bool propagate = l.inputs[0] != "data";
        conv_sk_backward(in, states_.layers[i], l.f_out, layer_geometry(l, in), colbuf_, colgrad_,
                         blobs_.at(l.output), propagate);
        break;
      }
      case LayerKind::PoolMax: {
        maxpool_sk_backward(blobs_.at(l.inputs[0]), states_.layers[i], blobs_.at(l.output));
        break;
      }
      case LayerKind::Relu: {
        relu_backward(blobs_.at(l.inputs[0]), blobs_.at(l.output));
        break;
      }
      case LayerKind::Upconv: {
        upconv_backward(blobs_.at(l.inputs[0]), blobs_.at(l.output));
        break;
      }
      case LayerKind::MergeCrop: {
        mergecrop_backward(blobs_.at(l.inputs[0]), blobs_.at(l.output));
        break;
      }
      case LayerKind::SoftmaxLoss: {
        softmax_backward(blobs_.at(l.inputs[0]), blobs_.at(l.output));
        break;
      }
    }
  }

  const NetSpec& spec_;
  NetStates<S>& states_;
  std::map<std::string, Blob<S>> blobs_;
  ColumnBuffer<S> colbuf_, colgrad_;
  std::vector<double> layer_seconds_;
};

}  // namespace pixelseg
