#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pixelseg/common.hpp"

namespace pixelseg {

enum class LayerKind { Data, ConvSK, PoolMax, Relu, Upconv, MergeCrop, SoftmaxLoss };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Data: return "data";
    case LayerKind::ConvSK: return "conv_sk";
    case LayerKind::PoolMax: return "pool_max";
    case LayerKind::Relu: return "relu";
    case LayerKind::Upconv: return "upconv";
    case LayerKind::MergeCrop: return "mergecrop";
    case LayerKind::SoftmaxLoss: return "softmax_loss";
  }
  return "?";
}

inline std::optional<LayerKind> kind_from_name(const std::string& s) {
  if (s == "data") return LayerKind::Data;
  if (s == "conv_sk") return LayerKind::ConvSK;
  if (s == "pool_max") return LayerKind::PoolMax;
  if (s == "relu") return LayerKind::Relu;
  if (s == "upconv") return LayerKind::Upconv;
  if (s == "mergecrop") return LayerKind::MergeCrop;
  if (s == "softmax_loss") return LayerKind::SoftmaxLoss;
  return std::nullopt;
}

enum class InitKind { None, Gaussian, He };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::ConvSK;
  int k = 1;
  int s = 1;
  int d = 1;
  int p = 0;
  int f_out = 0;                     // 0 = same as input channel count
  std::vector<std::string> inputs;   // blob names consumed
  std::string output;                // blob name produced
  InitKind init = InitKind::None;
  double init_sigma = 0.01;
  int line = 0;                      // config line for diagnostics

  bool has_weights() const { return kind == LayerKind::ConvSK; }
};

// A whole network: a DAG of layers over named blobs. Layer order is
// topological by construction (each blob must be produced before consumed).
// The data layer is always layers[0] with output blob "data".
struct NetSpec {
  int w0 = 0;  // declared square input extent
  int f0 = 0;  // input channels
  int n = 1;   // minibatch size (used by the memory model; training loops samples)
  std::vector<LayerSpec> layers;

  const LayerSpec* find_layer(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return &l;
    return nullptr;
  }

  // The softmax head, when the net has one as its last layer.
  const LayerSpec* loss_head() const {
    if (layers.empty()) return nullptr;
    const LayerSpec& last = layers.back();
    return last.kind == LayerKind::SoftmaxLoss ? &last : nullptr;
  }
};

struct ParseIssue {
  int line;
  std::string message;
};

struct ParseResult {
  NetSpec spec;
  std::vector<ParseIssue> issues;
  bool ok() const { return issues.empty(); }
  std::string issue_text() const {
    std::ostringstream os;
    for (const auto& i : issues) os << "line " << i.line << ": " << i.message << "\n";
    return os.str();
  }
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline bool parse_int(const std::string& s, int& v) {
  try {
    std::size_t pos = 0;
    const long val = std::stol(s, &pos);
    if (pos != s.size()) return false;
    v = static_cast<int>(val);
    return true;
  } catch (...) {
    return false;
  }
}

inline bool parse_double(const std::string& s, double& v) {
  try {
    std::size_t pos = 0;
    v = std::stod(s, &pos);
    return pos == s.size();
  } catch (...) {
    return false;
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace detail

// Channel count of every blob. Needs only the spec (not w0): channel
// propagation is input-size independent.
inline std::map<std::string, int> compute_channels(const NetSpec& spec) {
  std::map<std::string, int> f;
  for (const auto& l : spec.layers) {
    int fin = 0;
    if (l.kind == LayerKind::Data) {
      fin = spec.f0;
    } else if (l.kind == LayerKind::MergeCrop) {
      fin = f.at(l.inputs[0]) + f.at(l.inputs[1]);
    } else {
      fin = f.at(l.inputs[0]);
    }
    int fout = fin;
    if (l.kind == LayerKind::ConvSK && l.f_out > 0) fout = l.f_out;
    f[l.output] = fout;
  }
  return f;
}

// Channels entering a given layer (sum over inputs for mergecrop).
inline int fan_in_channels(const NetSpec& spec, const LayerSpec& layer) {
  if (layer.kind == LayerKind::Data) return spec.f0;
  const auto table = compute_channels(spec);
  int fin = 0;
  for (const auto& b : layer.inputs) fin += table.at(b);
  return fin;
}

// Parses the line-based network description:
//   input w=<int> f=<int> [n=<int>]
//   layer <name> <kind> [k=] [s=] [d=] [p=] [fout=] in=<blob[,blob]> out=<blob>
//         [init=gaussian:<sigma>|he]
// '#' starts a comment. Collects every problem it finds with its line number.
inline ParseResult parse_netspec(const std::string& text) {
  ParseResult res;
  NetSpec& spec = res.spec;
  auto issue = [&res](int line, const std::string& msg) { res.issues.push_back({line, msg}); };

  std::map<std::string, int> producer_line;  // blob -> line that produced it
  std::map<std::string, int> layer_line;     // layer name -> line
  bool have_input = false;

  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.resize(hash);
    const auto toks = detail::split_ws(raw);
    if (toks.empty()) continue;

    if (toks[0] == "input") {
      if (have_input) {
        issue(lineno, "duplicate input directive (exactly one data layer allowed)");
        continue;
      }
      have_input = true;
      LayerSpec data;
      data.name = "data";
      data.kind = LayerKind::Data;
      data.output = "data";
      data.line = lineno;
      bool saw_w = false, saw_f = false;
      for (std::size_t i = 1; i < toks.size(); ++i) {
        const auto eq = toks[i].find('=');
        if (eq == std::string::npos) {
          issue(lineno, "expected key=value, got '" + toks[i] + "'");
          continue;
        }
        const std::string key = toks[i].substr(0, eq);
        const std::string val = toks[i].substr(eq + 1);
        int v = 0;
        if (!detail::parse_int(val, v)) {
          issue(lineno, "key '" + key + "' needs an integer, got '" + val + "'");
          continue;
        }
        if (key == "w") {
          spec.w0 = v;
          saw_w = true;
        } else if (key == "f") {
          spec.f0 = v;
          saw_f = true;
        } else if (key == "n") {
          spec.n = v;
        } else {
          issue(lineno, "unknown input key '" + key + "'");
        }
      }
      if (!saw_w || spec.w0 < 1) issue(lineno, "input needs w >= 1");
      if (!saw_f || spec.f0 < 1) issue(lineno, "input needs f >= 1");
      if (spec.n < 1) issue(lineno, "input n must be >= 1");
      producer_line["data"] = lineno;
      spec.layers.push_back(data);
      continue;
    }

    if (toks[0] != "layer") {
      issue(lineno, "unknown directive '" + toks[0] + "'");
      continue;
    }
    if (toks.size() < 3) {
      issue(lineno, "layer needs a name and a kind");
      continue;
    }
    LayerSpec l;
    l.name = toks[1];
    l.line = lineno;
    const auto kind = kind_from_name(toks[2]);
    if (!kind) {
      issue(lineno, "unknown layer kind '" + toks[2] + "'");
      continue;
    }
    if (*kind == LayerKind::Data) {
      issue(lineno, "data layers are declared with the input directive");
      continue;
    }
    l.kind = *kind;
    if (l.kind == LayerKind::Upconv) {
      l.k = 2;
      l.s = 2;
    }
    bool saw_in = false, saw_out = false;
    for (std::size_t i = 3; i < toks.size(); ++i) {
      const auto eq = toks[i].find('=');
      if (eq == std::string::npos) {
        issue(lineno, "expected key=value, got '" + toks[i] + "'");
        continue;
      }
      const std::string key = toks[i].substr(0, eq);
      const std::string val = toks[i].substr(eq + 1);
      if (key == "in") {
        l.inputs = detail::split_list(val);
        saw_in = true;
      } else if (key == "out") {
        l.output = val;
        saw_out = true;
      } else if (key == "init") {
        if (val == "he") {
          l.init = InitKind::He;
        } else if (val.rfind("gaussian:", 0) == 0) {
          l.init = InitKind::Gaussian;
          if (!detail::parse_double(val.substr(9), l.init_sigma) || l.init_sigma <= 0) {
            issue(lineno, "bad gaussian sigma in '" + val + "'");
          }
        } else {
          issue(lineno, "unknown init '" + val + "' (use gaussian:<sigma> or he)");
        }
      } else {
        int v = 0;
        if (!detail::parse_int(val, v)) {
          issue(lineno, "key '" + key + "' needs an integer, got '" + val + "'");
          continue;
        }
        if (key == "k") l.k = v;
        else if (key == "s") l.s = v;
        else if (key == "d") l.d = v;
        else if (key == "p") l.p = v;
        else if (key == "fout") l.f_out = v;
        else issue(lineno, "unknown layer key '" + key + "'");
      }
    }

    // Structural checks.
    if (layer_line.count(l.name)) {
      issue(lineno, "duplicate layer name '" + l.name + "' (first at line " +
                        std::to_string(layer_line[l.name]) + ")");
    } else {
      layer_line[l.name] = lineno;
    }
    if (!saw_in || l.inputs.empty()) issue(lineno, "layer needs in=<blob[,blob]>");
    if (!saw_out || l.output.empty()) issue(lineno, "layer needs out=<blob>");
    const std::size_t want_inputs = (l.kind == LayerKind::MergeCrop) ? 2 : 1;
    if (saw_in && l.inputs.size() != want_inputs) {
      issue(lineno, std::string(kind_name(l.kind)) + " takes " + std::to_string(want_inputs) +
                        " input(s), got " + std::to_string(l.inputs.size()));
    }
    for (const auto& b : l.inputs) {
      if (!producer_line.count(b)) {
        issue(lineno, "input blob '" + b +
                          "' is not produced by any earlier layer (dangling or cyclic reference)");
      }
    }
    if (saw_out && !l.output.empty()) {
      if (producer_line.count(l.output)) {
        issue(lineno, "blob '" + l.output + "' already produced at line " +
                          std::to_string(producer_line[l.output]));
      } else {
        producer_line[l.output] = lineno;
      }
    }

    // Per-kind parameter invariants.
    if (l.k < 1 || l.s < 1 || l.d < 1) issue(lineno, "k, s, d must all be >= 1");
    if (l.p != 0) issue(lineno, "padding p must be 0 in network specs");
    switch (l.kind) {
      case LayerKind::ConvSK:
        if (l.f_out < 1) issue(lineno, "conv_sk needs fout >= 1");
        if (l.s != 1) issue(lineno, "conv_sk stride must be 1");
        break;
      case LayerKind::PoolMax:
        if (l.s != 1 && l.s != l.k) {
          issue(lineno, "pool_max stride must be 1 (strided-kernel) or equal k (downsampling)");
        }
        if (l.s == l.k && l.k > 1 && l.d != 1) {
          issue(lineno, "downsampling pool_max requires d=1");
        }
        if (l.f_out != 0) issue(lineno, "pool_max cannot change channel count");
        break;
      case LayerKind::Relu:
      case LayerKind::SoftmaxLoss:
        if (l.k != 1 || l.s != 1 || l.d != 1) {
          issue(lineno, std::string(kind_name(l.kind)) + " is elementwise: k=s=d=1");
        }
        if (l.f_out != 0) issue(lineno, std::string(kind_name(l.kind)) + " cannot set fout");
        break;
      case LayerKind::Upconv:
        if (l.k != 2 || l.s != 2) issue(lineno, "upconv is a fixed 2x resize: k=2 s=2");
        if (l.d != 1) issue(lineno, "upconv requires d=1");
        break;
      case LayerKind::MergeCrop:
        if (l.k != 1 || l.s != 1 || l.d != 1) issue(lineno, "mergecrop is parameterless: k=s=d=1");
        if (l.f_out != 0) issue(lineno, "mergecrop cannot set fout (channels concatenate)");
        break;
      case LayerKind::Data:
        break;
    }
    if (l.init != InitKind::None && l.kind != LayerKind::ConvSK) {
      issue(lineno, "init applies only to conv_sk layers");
    }
    if (l.d > 1 && l.kind != LayerKind::ConvSK && l.kind != LayerKind::PoolMax) {
      issue(lineno, "kernel stride d > 1 only applies to conv_sk and pool_max");
    }
    spec.layers.push_back(l);
  }

  if (!have_input) issue(0, "missing input directive");
  return res;
}

// Serializes back to the text format (round-trips through parse_netspec).
inline std::string write_netspec(const NetSpec& spec) {
  std::ostringstream os;
  os << "input w=" << spec.w0 << " f=" << spec.f0;
  if (spec.n != 1) os << " n=" << spec.n;
  os << "\n";
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::Data) continue;
    os << "layer " << l.name << " " << kind_name(l.kind);
    if (l.kind == LayerKind::ConvSK || l.kind == LayerKind::PoolMax ||
        l.kind == LayerKind::Upconv) {
      os << " k=" << l.k << " s=" << l.s << " d=" << l.d;
    }
    if (l.kind == LayerKind::ConvSK) os << " fout=" << l.f_out;
    os << " in=";
    for (std::size_t i = 0; i < l.inputs.size(); ++i) {
      if (i) os << ",";
      os << l.inputs[i];
    }
    os << " out=" << l.output;
    if (l.init == InitKind::Gaussian) {
      std::ostringstream sig;
      sig << l.init_sigma;
      os << " init=gaussian:" << sig.str();
    } else if (l.init == InitKind::He) {
      os << " init=he";
    }
    os << "\n";
  }
  return os.str();
}

// Parse-or-throw convenience for callers that have no use for issue lists.
inline NetSpec parse_netspec_or_throw(const std::string& text) {
  ParseResult r = parse_netspec(text);
  if (!r.ok()) throw SpecError("network spec errors:\n" + r.issue_text());
  return r.spec;
}

}  // namespace pixelseg
