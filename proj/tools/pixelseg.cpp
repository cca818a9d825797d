// Command-line frontend: net conversion, size/cost tables, training, tiled
// inference, benchmarking, and a built-in self test.
//
// Exit codes: 0 success, 1 usage, 2 spec/geometry error, 3 I/O error,
// 4 numeric failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pixelseg/convert.hpp"
#include "pixelseg/image_io.hpp"
#include "pixelseg/malis.hpp"
#include "pixelseg/netgraph.hpp"
#include "pixelseg/netspec.hpp"
#include "pixelseg/pipeline.hpp"
#include "pixelseg/rng.hpp"
#include "pixelseg/weights_io.hpp"

using namespace pixelseg;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

NetSpec load_net(const std::string& path) {
  const ParseResult r = parse_netspec(read_file(path));
  if (!r.ok()) throw SpecError("'" + path + "':\n" + r.issue_text());
  return r.spec;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string fmt_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void print_size_table(const SizeTable& table) {
  std::cout << "# layer\tkind\tk\ts\td\tf_in\tf_out\tw_in\tw_out\n";
  for (const auto& r : table) {
    std::cout << r.name << "\t" << kind_name(r.kind) << "\t" << r.k << "\t" << r.s << "\t" << r.d
              << "\t" << r.f_in << "\t" << r.f_out << "\t" << r.w_in << "\t" << r.w_out << "\n";
  }
  if (!table.empty()) std::cout << "# output extent: " << table.back().w_out << "\n";
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int run_convert(const std::string& net_path, const std::string& out_path, bool fix_sizes) {
  NetSpec sw = load_net(net_path);
  if (fix_sizes) {
    const NetSpec fixed = correct_sw(sw);
    if (fixed.w0 != sw.w0) {
      std::cerr << "size correction: input " << sw.w0 << " -> " << fixed.w0 << "\n";
    }
    sw = fixed;
  }
  const NetSpec sk = sw_to_sk(sw);
  print_size_table(propagate_sizes(sk, sk.w0));
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f.good()) throw IoError("cannot open '" + out_path + "' for writing");
    f << write_netspec(sk);
    if (!f.good()) throw IoError("write failed for '" + out_path + "'");
    std::cerr << "wrote " << out_path << "\n";
  }
  return 0;
}

int run_sizes(const std::string& net_path, int w0) {
  const NetSpec spec = load_net(net_path);
  print_size_table(propagate_sizes(spec, w0 > 0 ? w0 : spec.w0));
  return 0;
}

int run_params(const std::string& net_path) {
  const NetSpec spec = load_net(net_path);
  const ParamTable t = count_params(spec);
  std::cout << "# layer\tweights\tbiases\n";
  for (const auto& r : t.rows) std::cout << r.name << "\t" << r.weights << "\t" << r.biases << "\n";
  std::cout << "total\t" << t.total_weights << "\t" << t.total_biases << "\n";
  std::cout << "# parameters: " << t.total_weights + t.total_biases << "\n";
  return 0;
}

int run_flops(const std::string& net_path, int w0) {
  const NetSpec spec = load_net(net_path);
  const int w = w0 > 0 ? w0 : spec.w0;
  const FlopTable t = flop_estimate(spec, w);
  std::cout << "# layer\tflops (input " << w << ")\n";
  for (const auto& r : t.rows) std::cout << r.name << "\t" << r.flops << "\n";
  std::cout << "total\t" << t.total << "\n";
  return 0;
}

int run_mem(const std::string& net_path, int w0, int n, int q, double budget_gib) {
  const NetSpec spec = load_net(net_path);
  const int w = w0 > 0 ? w0 : spec.w0;
  const MemReport r = buffer_and_memory(spec, w, n, q);
  std::cout << "# layer\tbuffer_elems (input " << w << ", n " << n << ", q " << q << ")\n";
  for (const auto& row : r.rows) std::cout << row.name << "\t" << row.buffer_elems << "\n";
  std::cout << "buffer\telems\t" << r.buffer_elems << "\n";
  std::cout << "buffer\tbytes\t" << r.buffer_bytes << "\n";
  std::cout << "blob_pair\telems\t" << r.blob_pair_elems << "\n";
  std::cout << "total\telems\t" << r.total_elems << "\n";
  std::cout << "total\tbytes\t" << r.total_bytes << "\n";
  if (budget_gib > 0) {
    const auto cap = static_cast<long long>(budget_gib * 1024.0 * 1024.0 * 1024.0);
    std::cout << "max_output\textent\t" << max_output_size(spec, cap) << "\n";
  }
  return 0;
}

int run_train(const std::string& net_path, const std::string& solver_path,
              const std::string& raw_dir, const std::string& label_dir,
              const std::string& out_path, long long seed_override) {
  const NetSpec spec = load_net(net_path);
  SolverConfig cfg = parse_solver_config(read_file(solver_path));
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  const std::vector<LabeledImage> data = load_dataset(raw_dir, label_dir);
  std::cerr << "training on " << data.size() << " images, " << cfg.iterations << " iterations\n";
  const TrainResult<float> result = train<float>(spec, cfg, data);
  std::cout << "# iter\tloss\n";
  for (const auto& [iter, loss] : result.loss_log) {
    std::cout << iter << "\t" << fmt_exact(loss) << "\n";
  }
  if (!out_path.empty()) {
    save_weights(out_path, spec, result.states);
    std::cerr << "wrote " << out_path << "\n";
  }
  return 0;
}

int run_process(const std::string& net_path, const std::string& weights_path,
                const std::string& in_path, const std::string& out_dir, bool want_probs,
                int tile) {
  const NetSpec spec = load_net(net_path);
  const int v = spec.w0 - output_extent(spec, spec.w0);  // context surplus is a net property
  const int w = tile > 0 ? tile : spec.w0 - v;
  NetStates<float> states = load_weights<float>(weights_path, spec);
  const Plane<std::uint8_t> image = read_gray_image(in_path);
  const ProcessResult<float> res = process(spec, states, image, w, v);

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string stem = fs::path(in_path).stem().string();
  const std::string label_path = (fs::path(out_dir) / (stem + "_labels.pgm")).string();
  write_pgm(label_path, res.labels);
  std::cout << "wrote\t" << label_path << "\n";
  if (want_probs) {
    for (std::size_t c = 0; c < res.probs.size(); ++c) {
      Plane<std::uint8_t> map(image.height, image.width);
      for (std::size_t i = 0; i < map.size(); ++i) {
        const double p = std::clamp(static_cast<double>(res.probs[c].pix[i]), 0.0, 1.0);
        map.pix[i] = static_cast<std::uint8_t>(std::lround(p * 255.0));
      }
      const std::string prob_path =
          (fs::path(out_dir) / (stem + "_prob" + std::to_string(c) + ".pgm")).string();
      write_pgm(prob_path, map);
      std::cout << "wrote\t" << prob_path << "\n";
    }
  }
  return 0;
}

int run_bench(const std::string& net_path, int w0, int trials, double peak_gflops, bool backward,
              std::uint64_t seed) {
  const NetSpec spec = load_net(net_path);
  const int w_in = w0 > 0 ? w0 : spec.w0;
  const SizeTable sizes = propagate_sizes(spec, w_in);
  const int w_out = sizes.back().w_out;
  const FlopTable flops = flop_estimate(spec, w_in);
  std::map<std::string, long long> layer_flops;
  for (const auto& r : flops.rows) layer_flops[r.name] = r.flops;

  NetStates<float> states = init_weights<float>(spec, seed);
  NetRunner<float> runner(spec, states);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  Blob<float> input(spec.f0, w_in, w_in);
  for (auto& x : input.data) x = static_cast<float>(rng.uniform(-1.0, 1.0));

  std::vector<std::vector<double>> per_layer(spec.layers.size());
  std::vector<double> fwd_totals, bwd_totals;
  for (int t = 0; t < trials; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    runner.forward(input, /*timed=*/true);
    const auto t1 = std::chrono::steady_clock::now();
    fwd_totals.push_back(std::chrono::duration<double>(t1 - t0).count());
    const auto& secs = runner.layer_seconds();
    for (std::size_t i = 0; i < secs.size(); ++i) per_layer[i].push_back(secs[i]);
    if (backward) {
      runner.zero_blob_diffs();
      Blob<float>& out = runner.blob_mut(spec.layers.back().output);
      for (auto& dv : out.diff) dv = static_cast<float>(rng.uniform(-1.0, 1.0));
      const auto b0 = std::chrono::steady_clock::now();
      runner.backward();
      const auto b1 = std::chrono::steady_clock::now();
      bwd_totals.push_back(std::chrono::duration<double>(b1 - b0).count());
      for (auto& st : states.layers) {  // keep the weights of every trial identical
        std::fill(st.weight_diff.begin(), st.weight_diff.end(), 0.0f);
        std::fill(st.bias_diff.begin(), st.bias_diff.end(), 0.0f);
      }
    }
  }

  std::cout << "# forward timing: input " << w_in << ", output " << w_out << ", " << trials
            << " trials, seed " << seed << "\n";
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string& name = spec.layers[i].name;
    if (spec.layers[i].kind == LayerKind::Data) continue;
    const double sec = median(per_layer[i]);
    std::cout << name << "\tseconds\t" << fmt(sec) << "\n";
    const auto it = layer_flops.find(name);
    if (it != layer_flops.end()) {
      std::cout << name << "\tflops\t" << it->second << "\n";
      if (sec > 0) std::cout << name << "\tgflops\t" << fmt(it->second / sec * 1e-9) << "\n";
      if (peak_gflops > 0 && sec > 0) {
        std::cout << name << "\tefficiency\t" << fmt(it->second / sec * 1e-9 / peak_gflops)
                  << "\n";
      }
    }
  }
  const double fwd = median(fwd_totals);
  std::cout << "total\tflops\t" << flops.total << "\n";
  std::cout << "total\tseconds\t" << fmt(fwd) << "\n";
  if (fwd > 0) std::cout << "total\tgflops\t" << fmt(flops.total / fwd * 1e-9) << "\n";
  if (peak_gflops > 0 && fwd > 0) {
    std::cout << "total\tefficiency\t" << fmt(flops.total / fwd * 1e-9 / peak_gflops) << "\n";
  }
  if (backward) std::cout << "backward\tseconds\t" << fmt(median(bwd_totals)) << "\n";
  std::cout << "output\textent\t" << w_out << "\n";
  if (fwd > 0) {
    std::cout << "throughput\tpx_per_s\t"
              << fmt(static_cast<double>(w_out) * w_out / fwd) << "\n";
  }
  const MemReport mem = buffer_and_memory(spec, w_in);
  std::cout << "memory\tbuffer_bytes\t" << mem.buffer_bytes << "\n";
  std::cout << "memory\ttotal_bytes\t" << mem.total_bytes << "\n";
  return 0;
}

int run_selftest(std::uint64_t seed) {
  int failures = 0;
  auto report = [&](const std::string& name, bool ok, const std::string& detail) {
    std::cout << "selftest " << name << ": " << (ok ? "PASS" : "FAIL");
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << "\n";
    failures += ok ? 0 : 1;
  };

  {  // Sliding-window and strided-kernel routes agree on dense outputs.
    const NetSpec sw = parse_netspec_or_throw(
        "input w=16 f=2\n"
        "layer c1 conv_sk k=3 fout=4 in=data out=c1 init=gaussian:0.2\n"
        "layer r1 relu in=c1 out=r1\n"
        "layer p1 pool_max k=2 s=2 in=r1 out=p1\n"
        "layer c2 conv_sk k=2 fout=3 in=p1 out=c2 init=gaussian:0.2\n"
        "layer ip conv_sk k=6 fout=2 in=c2 out=ip init=gaussian:0.2\n"
        "layer prob softmax_loss in=ip out=prob\n");
    const NetSpec sk = sw_to_sk(sw);
    const EquivalenceReport rep = sk_sw_equivalence_check<double>(sw, sk, seed, 2);
    report("conversion-equivalence", rep.max_abs_dev <= 1e-10,
           "max dev " + fmt(rep.max_abs_dev) + " over " + std::to_string(rep.out_extent) +
               "x" + std::to_string(rep.out_extent) + " outputs");
  }

  {  // Structured loss vanishes on perfect predictions.
    Rng rng(seed + 1);
    bool ok = true;
    double worst = 0.0;
    for (int t = 0; t < 5 && ok; ++t) {
      Plane<std::uint8_t> fg(6, 6);
      for (auto& v : fg.pix) v = rng.coin() ? 1 : 0;
      Plane<double> pred_plane(6, 6);
      for (std::size_t i = 0; i < fg.size(); ++i) pred_plane.pix[i] = fg.pix[i];
      const AffinityGraph<double> pred = affinity_forward(pred_plane);
      const AffinityGraph<double> truth = pred;  // perfect prediction: same graph
      const Plane<int> comp = connected_components(fg);
      const MalisResult<double> res = malis_gradient(pred, truth, comp);
      worst = std::max({worst, std::abs(res.loss)});
      for (const auto& da : {res.da_x, res.da_y}) {
        for (double v : da.pix) worst = std::max(worst, std::abs(v));
      }
      ok = worst == 0.0;
    }
    report("malis-fixpoint", ok, "largest residual " + fmt(worst));
  }

  {  // Softmax loss gradient against central differences.
    Rng rng(seed + 2);
    Blob<double> scores(3, 4, 4);
    for (auto& v : scores.data) v = rng.uniform(-2.0, 2.0);
    Plane<int> labels(4, 4);
    for (auto& v : labels.pix) v = static_cast<int>(rng.uniform_index(3));
    const Plane<std::uint8_t> mask(4, 4, 1);
    scores.ensure_diff();
    scores.zero_diff();
    Blob<double> probe = scores;
    softmax_loss(probe, labels, mask);
    double worst = 0.0;
    const double h = 1e-6;
    for (std::size_t i = 0; i < scores.data.size(); ++i) {
      Blob<double> plus = scores, minus = scores;
      plus.data[i] += h;
      minus.data[i] -= h;
      const double lp = softmax_loss(plus, labels, mask);
      const double lm = softmax_loss(minus, labels, mask);
      const double num = (lp - lm) / (2 * h);
      worst = std::max(worst, std::abs(num - probe.diff[i]));
    }
    report("softmax-gradient", worst < 1e-6, "max abs error " + fmt(worst));
  }

  {  // Weight serialization round-trips bit-exactly.
    const NetSpec spec = parse_netspec_or_throw(
        "input w=8 f=1\n"
        "layer c1 conv_sk k=3 fout=4 in=data out=c1 init=he\n"
        "layer prob softmax_loss in=c1 out=prob\n");
    const NetStates<float> st = init_weights<float>(spec, seed + 3);
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "pixelseg_selftest.pxsg").string();
    save_weights(path, spec, st);
    const NetStates<float> back = load_weights<float>(path, spec);
    fs::remove(path);
    report("weights-roundtrip", back.layers[1].weights == st.layers[1].weights &&
                                    back.layers[1].bias == st.layers[1].bias,
           "");
  }

  {  // Seeded streams and initialization are reproducible.
    Rng a(seed), b(seed);
    bool ok = true;
    for (int i = 0; i < 1000 && ok; ++i) ok = a.next_u64() == b.next_u64();
    const NetSpec spec = parse_netspec_or_throw(
        "input w=8 f=1\n"
        "layer c1 conv_sk k=3 fout=8 in=data out=c1 init=he\n"
        "layer prob softmax_loss in=c1 out=prob\n");
    const NetStates<float> s1 = init_weights<float>(spec, seed);
    const NetStates<float> s2 = init_weights<float>(spec, seed);
    ok = ok && s1.layers[1].weights == s2.layers[1].weights;
    report("determinism", ok, "");
  }

  if (failures > 0) {
    std::cerr << failures << " selftest check(s) failed\n";
    return 4;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pixelwise segmentation nets with strided kernels"};
  app.require_subcommand(1);

  std::string net_path, out_path, solver_path, raw_dir, label_dir, weights_path, in_path, out_dir;
  bool fix_sizes = false, want_probs = false, backward = false;
  int w0 = 0, mem_n = 1, mem_q = 1, trials = 3, tile = 0;
  double budget_gib = 0.0, peak_gflops = 0.0;
  long long seed_override = -1;
  std::uint64_t seed = 1;

  CLI::App* convert = app.add_subcommand(
      "convert", "turn a sliding-window net into its strided-kernel equivalent");
  convert->add_option("--net", net_path, "sliding-window net spec")->required();
  convert->add_option("--out", out_path, "file for the converted spec");
  convert->add_flag("--fix-sizes", fix_sizes, "correct pool-incompatible sizes first");

  CLI::App* sizes = app.add_subcommand("sizes", "per-layer size propagation table");
  sizes->add_option("--net", net_path, "net spec")->required();
  sizes->add_option("--w0", w0, "input extent (default: the spec's)");

  CLI::App* params = app.add_subcommand("params", "per-layer parameter counts");
  params->add_option("--net", net_path, "net spec")->required();

  CLI::App* flops = app.add_subcommand("flops", "per-layer FLOP estimate");
  flops->add_option("--net", net_path, "net spec")->required();
  flops->add_option("--w0", w0, "input extent (default: the spec's)");

  CLI::App* mem = app.add_subcommand("mem", "column buffer and blob memory estimate");
  mem->add_option("--net", net_path, "net spec")->required();
  mem->add_option("--w0", w0, "input extent (default: the spec's)");
  mem->add_option("--n", mem_n, "concurrent images")->check(CLI::PositiveNumber);
  mem->add_option("--q", mem_q, "column buffers")->check(CLI::PositiveNumber);
  mem->add_option("--budget-gib", budget_gib, "also report the largest output under this budget");

  CLI::App* train_cmd = app.add_subcommand("train", "train a net on a raw/label image directory pair");
  train_cmd->add_option("--net", net_path, "net spec")->required();
  train_cmd->add_option("--solver", solver_path, "solver config")->required();
  train_cmd->add_option("--raw-dir", raw_dir, "directory of raw images")->required();
  train_cmd->add_option("--label-dir", label_dir, "directory of label images")->required();
  train_cmd->add_option("--out", out_path, "weights file to write");
  train_cmd->add_option("--seed", seed_override, "override the solver's seed");

  CLI::App* proc = app.add_subcommand("process", "label a whole image with a trained net");
  proc->add_option("--net", net_path, "net spec")->required();
  proc->add_option("--weights", weights_path, "weights file")->required();
  proc->add_option("--in", in_path, "input image (.pgm/.png)")->required();
  proc->add_option("--out", out_dir, "output directory")->required();
  proc->add_flag("--prob", want_probs, "also write per-class probability maps");
  proc->add_option("--tile", tile, "output tile extent (default: net output at its spec size)");

  CLI::App* bench = app.add_subcommand("bench", "time the forward pass and report FLOP efficiency");
  bench->add_option("--net", net_path, "net spec")->required();
  bench->add_option("--w0", w0, "input extent (default: the spec's)");
  bench->add_option("--trials", trials, "timing repetitions")->check(CLI::PositiveNumber);
  bench->add_option("--peak-gflops", peak_gflops, "machine peak for efficiency column");
  bench->add_flag("--backward", backward, "also time the backward pass");
  bench->add_option("--seed", seed, "seed for weights and input");

  CLI::App* selftest = app.add_subcommand("selftest", "run the bundled invariant checks");
  selftest->add_option("--seed", seed, "seed for the randomized checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand(convert)) return run_convert(net_path, out_path, fix_sizes);
    if (app.got_subcommand(sizes)) return run_sizes(net_path, w0);
    if (app.got_subcommand(params)) return run_params(net_path);
    if (app.got_subcommand(flops)) return run_flops(net_path, w0);
    if (app.got_subcommand(mem)) return run_mem(net_path, w0, mem_n, mem_q, budget_gib);
    if (app.got_subcommand(train_cmd)) {
      return run_train(net_path, solver_path, raw_dir, label_dir, out_path, seed_override);
    }
    if (app.got_subcommand(proc)) {
      return run_process(net_path, weights_path, in_path, out_dir, want_probs, tile);
    }
    if (app.got_subcommand(bench)) {
      return run_bench(net_path, w0, trials, peak_gflops, backward, seed);
    }
    if (app.got_subcommand(selftest)) return run_selftest(seed);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {  // spec and size problems
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
