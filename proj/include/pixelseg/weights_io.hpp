#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pixelseg/common.hpp"
#include "pixelseg/netgraph.hpp"
#include "pixelseg/netspec.hpp"

namespace pixelseg {

// Weight file layout (all integers little-endian u32, floats little-endian
// IEEE f32):
//   magic "PXSG", version, entry count,
//   per entry: name length, name bytes, rank, dims[rank], data floats.
// A net stores two entries per convolution layer: "<layer>.weight" with dims
// (f_out, f_in*k*k) and "<layer>.bias" with dims (f_out).

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw IoError("'" + path + "': truncated weights file");
  }
  std::uint32_t u32() {
    need(4);
    const std::uint32_t v = std::uint32_t(bytes[pos]) | (std::uint32_t(bytes[pos + 1]) << 8) |
                            (std::uint32_t(bytes[pos + 2]) << 16) |
                            (std::uint32_t(bytes[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v = 0.0f;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes.begin() + pos, bytes.begin() + pos + n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline constexpr std::uint32_t kWeightsVersion = 1;

template <typename S>
void save_weights(const std::string& path, const NetSpec& spec, const NetStates<S>& states) {
  if (states.layers.size() != spec.layers.size()) {
    throw SpecError("save_weights: state table does not match the spec");
  }
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'P', 'X', 'S', 'G'});
  detail::put_u32(out, kWeightsVersion);
  std::uint32_t entries = 0;
  for (const auto& l : spec.layers)
    if (l.has_weights()) entries += 2;
  detail::put_u32(out, entries);

  auto put_entry = [&out](const std::string& name, const std::vector<std::uint32_t>& dims,
                          const std::vector<S>& data) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(dims.size()));
    std::size_t count = 1;
    for (std::uint32_t d : dims) {
      detail::put_u32(out, d);
      count *= d;
    }
    if (count != data.size()) throw SpecError("save_weights: dim/data mismatch for " + name);
    for (const S& v : data) detail::put_f32(out, static_cast<float>(v));
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (!l.has_weights()) continue;
    const LayerState<S>& st = states.layers[i];
    const auto f_out = static_cast<std::uint32_t>(l.f_out);
    const auto fan_in = static_cast<std::uint32_t>(st.weights.size() / l.f_out);
    put_entry(l.name + ".weight", {f_out, fan_in}, st.weights);
    put_entry(l.name + ".bias", {f_out}, st.bias);
  }

  std::ofstream f(path, std::ios::binary);
  if (!f.good()) throw IoError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f.good()) throw IoError("write failed for '" + path + "'");
}

// Loads weights saved by save_weights into states shaped for `spec`. Every
// entry must match a convolution layer of the spec with the exact shape; every
// such layer must be present in the file.
template <typename S>
NetStates<S> load_weights(const std::string& path, const NetSpec& spec) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw IoError("cannot open '" + path + "' for reading");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                        std::istreambuf_iterator<char>());
  detail::ByteReader r{bytes, 0, path};
  if (r.str(4) != "PXSG") throw IoError("'" + path + "': not a weights file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion) {
    throw IoError("'" + path + "': unsupported weights version " + std::to_string(version));
  }
  const std::uint32_t entries = r.u32();

  struct Entry {
    std::vector<std::uint32_t> dims;
    std::vector<S> data;
  };
  std::map<std::string, Entry> table;
  for (std::uint32_t e = 0; e < entries; ++e) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    if (rank > 4) throw IoError("'" + path + "': implausible rank for entry " + name);
    Entry ent;
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      ent.dims.push_back(r.u32());
      count *= ent.dims.back();
    }
    ent.data.resize(count);
    for (auto& v : ent.data) v = static_cast<S>(r.f32());
    if (!table.emplace(name, std::move(ent)).second) {
      throw IoError("'" + path + "': duplicate entry " + name);
    }
  }

  NetStates<S> states;
  states.layers.resize(spec.layers.size());
  const auto channels = compute_channels(spec);
  std::size_t used = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (!l.has_weights()) continue;
    int fin_channels = 0;
    for (const auto& b : l.inputs) fin_channels += channels.at(b);
    const int fan_in = fin_channels * l.k * l.k;
    const auto wit = table.find(l.name + ".weight");
    const auto bit = table.find(l.name + ".bias");
    if (wit == table.end() || bit == table.end()) {
      throw IoError("'" + path + "': missing weights for layer '" + l.name + "'");
    }
    const Entry& we = wit->second;
    const Entry& be = bit->second;
    if (we.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(l.f_out),
                                              static_cast<std::uint32_t>(fan_in)} ||
        be.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(l.f_out)}) {
      throw IoError("'" + path + "': shape mismatch for layer '" + l.name + "'");
    }
    states.layers[i].init_conv(l.f_out, fan_in);
    states.layers[i].weights = we.data;
    states.layers[i].bias = be.data;
    used += 2;
  }
  if (used != table.size()) {
    for (const auto& [name, ent] : table) {
      const auto dot = name.rfind('.');
      const std::string layer = dot == std::string::npos ? name : name.substr(0, dot);
      const std::string field = dot == std::string::npos ? "" : name.substr(dot + 1);
      const LayerSpec* l = spec.find_layer(layer);
      if (!l || !l->has_weights() || (field != "weight" && field != "bias")) {
        throw IoError("'" + path + "': entry '" + name + "' matches no layer of the net");
      }
    }
  }
  return states;
}

}  // namespace pixelseg
