// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Pass criterion numbers as arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pas/cost.hpp"
#include "pas/datasets.hpp"
#include "pas/error.hpp"
#include "pas/gradcheck.hpp"
#include "pas/model_io.hpp"
#include "pas/reparam.hpp"
#include "pas/search.hpp"

using namespace pas;
using namespace pas::test;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename T>
Network<T> seeded(const NetworkGraph& g, std::uint64_t seed) {
  Network<T> net(g);
  net.init(seed);
  randomize_state(net, seed + 1);
  return net;
}

NetworkGraph with_1x1(NetworkGraph g) {
  for (auto& b : g.blocks)
    if (b.kind == BlockKind::RepConv3x3) b.has_1x1_branch = true;
  return g;
}

const InputShape kInput{3, 16, 16};

// ---------------------------------------------------------------- 1

Outcome reparam_equivalence() {
  const auto t0 = Clock::now();
  const NetworkGraph graphs[] = {build_toy_net(16, 6, 10, kInput), with_1x1(build_toy_net(16, 6, 10, kInput)),
                                 build_toy_lightweight_net(8, 6, 10, 2, kInput)};
  std::mt19937_64 rng(101);
  double err32 = 0, err64 = 0, scale = 0;
  for (std::size_t gi = 0; gi < std::size(graphs); ++gi) {
    auto net = seeded<float>(graphs[gi], 200 + gi);
    apply_masks(net, random_masks(site_widths(net), rng, 0.6));
    auto net64 = net.cast<double>();
    auto plain = deploy(net);
    auto plain64 = deploy(net64);
    const auto x = random_tensor<double>({100, 3, 16, 16}, rng);
    const auto x32 = tensor_cast<float>(x);
    const auto ref32 = net.forward(x32, false);
    err32 = std::max(err32, max_abs_diff(ref32, plain.forward(x32, false)));
    err64 = std::max(err64, max_abs_diff(net64.forward(x, false), plain64.forward(x, false)));
    scale = std::max(scale, max_abs(ref32));
  }
  const double secs = seconds_since(t0);
  return {err32 <= 1e-4 && err64 <= 1e-10 && secs < 60,
          fmt("f32 %.2e (<=1e-4), f64 %.2e (<=1e-10), max |logit| %.2f, %.1fs", err32, err64, scale, secs)};
}

// ---------------------------------------------------------------- 2

std::vector<Mask> pattern_masks(const std::vector<std::size_t>& widths, int pattern, std::mt19937_64& rng) {
  std::vector<Mask> masks;
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const std::size_t w = widths[s];
    Mask m(w, 1);
    switch (pattern % 5) {
      case 0:  // interleaved, phase alternating between sites
        for (std::size_t c = 0; c < w; ++c) m[c] = (c + s) % 2;
        break;
      case 1:  // every third channel
        for (std::size_t c = 0; c < w; ++c) m[c] = c % 3 == pattern % 3;
        break;
      case 2:  // a single survivor
        std::fill(m.begin(), m.end(), 0);
        m[(s * 7 + static_cast<std::size_t>(pattern)) % w] = 1;
        break;
      default:
        m = random_masks({w}, rng, pattern % 5 == 3 ? 0.3 : 0.8)[0];
    }
    if (std::count(m.begin(), m.end(), 1) == 0) m[0] = 1;
    masks.push_back(m);
  }
  return masks;
}

Outcome squeeze_equivalence() {
  const NetworkGraph graphs[] = {build_toy_net(16, 6, 10, kInput), build_toy_lightweight_net(8, 6, 10, 2, kInput)};
  std::mt19937_64 rng(202);
  double err = 0;
  std::size_t cases = 0;
  for (std::size_t gi = 0; gi < std::size(graphs); ++gi) {
    const auto net = seeded<float>(graphs[gi], 300 + gi);
    for (int pattern = 0; pattern < 20; ++pattern) {
      auto fused = fuse_network(net);
      const auto masks = pattern_masks(site_widths(fused), pattern, rng);
      apply_masks(fused, masks, false);
      auto sq = squeeze(fused, masks);
      const auto x = random_tensor<float>({100, 3, 16, 16}, rng);
      err = std::max(err, max_abs_diff(fused.forward(x, false), sq.forward(x, false)));
      ++cases;
    }
  }
  return {err <= 1e-5, fmt("max diff %.2e (<=1e-5) over %zu mask patterns x 100 inputs", err, cases)};
}

// ---------------------------------------------------------------- 3

Outcome straight_through() {
  // Exact contract on a float network: the indicator gradient is the mask gradient.
  auto net = seeded<float>(build_toy_lightweight_net(4, 3, 5, 2, {3, 8, 8}), 400);
  std::mt19937_64 rng(401);
  for (auto& d : net.dbc())
    for (auto& v : d.v.data()) v = std::uniform_real_distribution<float>(0.3f, 1.0f)(rng);
  auto masks = net.binarize_sites();
  for (auto& m : masks) m.retain_grad();
  const auto x = random_tensor<float>({6, 3, 8, 8}, rng);
  const MacsBudget budget = MacsBudget::from_fraction(total_macs(net.graph()), 0.4, 1.0);
  total_loss(softmax_cross_entropy(net.forward(x, masks, true), std::vector<int>{0, 1, 2, 3, 4, 0}),
             reg_loss(net.plan(), masks, budget), 1.0)
      .backward();
  bool exact = true;
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    const auto gv = net.dbc()[s].v.grad();
    const auto gb = masks[s].grad();
    exact = exact && gv.size() == gb.size() && std::memcmp(gv.data(), gb.data(), gv.size() * sizeof(float)) == 0;
  }

  // Independent finite differences in double through a masked network.
  auto net64 = seeded<double>(build_toy_net(4, 3, 4, {3, 8, 8}), 402);
  const auto fixed = random_masks(site_widths(net64), rng, 0.7);
  std::vector<Tensor<double>> mt;
  for (const auto& m : fixed) mt.push_back(mask_tensor<double>(m));
  const auto x64 = random_tensor<double>({3, 3, 8, 8}, rng);
  const std::vector<int> labels{0, 1, 3};
  auto loss = [&] { return softmax_cross_entropy(net64.forward(x64, mt, false), labels).item(); };
  softmax_cross_entropy(net64.forward(x64, mt, false), labels).backward();
  double fd_err = 0;
  std::size_t checked = 0;
  for (auto& p : net64.parameters()) {
    if (p.role != ParamRole::Kernel) continue;
    const auto analytic = p.tensor.grad();
    const auto numeric = central_difference(p.tensor, loss, 1e-5);
    double peak = 0;
    for (double g : analytic) peak = std::max(peak, std::abs(g));
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      fd_err = std::max(fd_err, relative_error(analytic[i], numeric[i], std::max(1e-4, 1e-3 * peak)));
      ++checked;
    }
  }

  const auto suite = run_gradcheck(403, 1e-6);
  std::size_t suite_fail = 0;
  for (const auto& r : suite) suite_fail += !r.pass;
  return {exact && fd_err <= 1e-6 && suite_fail == 0,
          fmt("grad_v == grad_b %s; finite differences %.2e (<=1e-6) over %zu kernel entries; gradcheck suite %zu/%zu",
              exact ? "bitwise" : "MISMATCH", fd_err, checked, suite.size() - suite_fail, suite.size())};
}

// ---------------------------------------------------------------- 4

Outcome macs_fixtures() {
  struct Fixture {
    const char* name;
    double giga, tol;
  };
  const Fixture fixtures[] = {
      {"resnet50", 4.1, 0.02}, {"repvgg_b1", 11.8, 0.03}, {"repvgg_a0", 1.4, 0.03}, {"mobilenet_v2_x1", 0.30, 0.03}};
  bool pass = true;
  std::string detail;
  for (const auto& f : fixtures) {
    const double g = static_cast<double>(total_macs(build_reference_graph(f.name))) / 1e9;
    const double rel = std::abs(g - f.giga) / f.giga;
    pass = pass && rel <= f.tol;
    detail += fmt("%s%s %.3fG (%+.1f%%)", detail.empty() ? "" : ", ", f.name, g, 100 * (g - f.giga) / f.giga);
  }
  return {pass, detail};
}

// ---------------------------------------------------------------- 5-8

const BaselineStrategy kBaselines[] = {BaselineStrategy::OneShotMagnitude, BaselineStrategy::IterativeMagnitude,
                                       BaselineStrategy::EqualPenalty};

struct SeedRun {
  std::uint64_t seed = 0;
  double budget_error = 0;  // deployed MACs relative to the target
  std::optional<std::size_t> converged;
  std::size_t final_hamming = 0;
  bool recovered = false;
  bool preserved = true;
  double pas_accuracy = 0;
  std::map<BaselineStrategy, double> baseline_accuracy;
  double pas_seconds = 0;
};

std::vector<std::vector<float>> snapshot(Network<float>& net) {
  std::vector<std::vector<float>> s;
  for (auto& p : net.parameters()) s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return s;
}

// A channel is kept, then dropped, then kept again at some later step.
bool has_recovery(const std::vector<std::vector<Mask>>& steps) {
  if (steps.empty()) return false;
  for (std::size_t s = 0; s < steps[0].size(); ++s)
    for (std::size_t c = 0; c < steps[0][s].size(); ++c) {
      int phase = 0;  // 0: seen 1, 1: then 0, 2: then 1
      for (const auto& m : steps) {
        const bool on = m[s][c];
        if (phase == 0 && !on) phase = 1;
        if (phase == 1 && on) return true;
      }
    }
  return false;
}

SearchConfig search_config(std::uint64_t seed) {
  SearchConfig cfg;
  cfg.seed = seed;
  cfg.beta = 10;
  cfg.indicator_lr_scale = 2;
  cfg.indicator_momentum = 0.5;
  cfg.pretrain_epochs = 5;
  cfg.search_epochs = 10;
  cfg.finetune_epochs = 10;
  cfg.target_macs_fraction = 0.5;
  return cfg;
}

SeedRun run_seed(std::uint64_t seed, bool with_baselines) {
  SeedRun out;
  out.seed = seed;
  auto [train, test] = split_dataset(synthetic_teacher_dataset(seed, 4096, 10, kInput), 0.5, seed);
  train.augment = false;
  const auto graph = build_toy_net(16, 6, 10, kInput);
  const auto cfg = search_config(seed);

  const auto t0 = Clock::now();
  const auto start = pretrain(graph, train, cfg);
  auto pas_start = start.cast<float>();
  std::vector<std::vector<float>> prev = snapshot(pas_start);
  TrainHooks hooks;
  hooks.on_step = [&](std::size_t, const std::vector<Mask>& masks, const Network<float>& cnet) {
    auto& net = const_cast<Network<float>&>(cnet);
    auto now = snapshot(net);
    auto params = net.parameters();
    for (std::size_t i = 0; i < params.size() && out.preserved; ++i) {
      const auto& p = params[i];
      const std::size_t per_row = now[i].size() / p.rows, per_col = per_row / p.cols;
      for (std::size_t e = 0; e < now[i].size(); ++e) {
        const bool off = (p.row_site >= 0 && !masks[p.row_site][e / per_row]) ||
                         (p.col_site >= 0 && !masks[p.col_site][(e % per_row) / per_col]);
        if (off && std::memcmp(&now[i][e], &prev[i][e], sizeof(float)) != 0) {
          out.preserved = false;
          break;
        }
      }
    }
    prev = std::move(now);
  };
  auto r = run_pas(std::move(pas_start), train, &test, cfg, hooks);
  out.pas_seconds = seconds_since(t0);

  const auto deployed = deploy(r.net);
  out.budget_error = (static_cast<double>(total_macs(deployed.graph())) - r.target_macs) / r.target_macs;
  out.converged = r.trajectory.convergence_epoch();
  out.final_hamming = r.trajectory.hamming(r.trajectory.epoch_masks.size() - 1);
  out.recovered = has_recovery(r.trajectory.step_masks);
  out.pas_accuracy = r.test_accuracy;

  if (with_baselines) {
    for (auto s : kBaselines) out.baseline_accuracy[s] = run_baseline(s, start.cast<float>(), train, &test, cfg).test_accuracy;
  }
  std::fprintf(stderr, "seed %llu: budget %+.2f%%, converged %s, final hamming %zu, recovery %d, preserved %d, pas %.4f",
               static_cast<unsigned long long>(seed), 100 * out.budget_error,
               out.converged ? std::to_string(*out.converged).c_str() : "no", out.final_hamming, out.recovered,
               out.preserved, out.pas_accuracy);
  for (const auto& [s, acc] : out.baseline_accuracy)
    std::fprintf(stderr, ", %s %.4f", std::string(to_string(s)).c_str(), acc);
  std::fprintf(stderr, " (pas %.0fs)\n", out.pas_seconds);
  return out;
}

Outcome budget(const std::vector<SeedRun>& runs) {
  std::size_t ok = 0;
  double secs = 0;
  std::string errs;
  for (const auto& r : runs) {
    ok += std::abs(r.budget_error) <= 0.05;
    secs += r.pas_seconds;
    errs += fmt("%s%+.2f%%", errs.empty() ? "" : " ", 100 * r.budget_error);
  }
  const std::size_t params = parameter_count(build_toy_net(16, 6, 10, kInput));
  return {ok >= 4 && secs < 15 * 60 && params <= 500000,
          fmt("%zu/%zu seeds within 5%% of target (%s), %zu parameters, search runtime %.0fs for all seeds", ok,
              runs.size(), errs.c_str(), params, secs)};
}

Outcome convergence(const std::vector<SeedRun>& runs) {
  std::size_t ok = 0;
  std::string per;
  for (const auto& r : runs) {
    ok += r.converged.has_value();
    per += fmt("%s%s", per.empty() ? "" : " ",
               r.converged ? ("e" + std::to_string(*r.converged)).c_str()
                           : ("h" + std::to_string(r.final_hamming)).c_str());
  }
  return {ok >= 4, fmt("%zu/%zu seeds at Hamming 0 by the last search epoch (%s; hN = last-epoch distance)", ok,
                       runs.size(), per.c_str())};
}

Outcome recovery(const std::vector<SeedRun>& runs) {
  std::size_t recovered = 0, preserved = 0;
  for (const auto& r : runs) {
    recovered += r.recovered;
    preserved += r.preserved;
  }
  return {recovered >= 1 && preserved == runs.size(),
          fmt("1->0->1 transitions in %zu/%zu runs, masked weights bit-identical in %zu/%zu runs", recovered,
              runs.size(), preserved, runs.size())};
}

Outcome accuracy(const std::vector<SeedRun>& runs) {
  bool pass = true;
  std::string detail;
  for (auto s : kBaselines) {
    std::size_t wins = 0;
    for (const auto& r : runs) wins += r.pas_accuracy >= r.baseline_accuracy.at(s);
    pass = pass && wins >= 3;
    detail += fmt("%s%s %zu/%zu", detail.empty() ? "PaS >= " : ", ", std::string(to_string(s)).c_str(), wins,
                  runs.size());
  }
  return {pass, detail};
}

// ---------------------------------------------------------------- 9

Outcome width_flexibility() {
  const auto g = build_toy_net(16, 6, 10, kInput);
  auto net = seeded<float>(g, 900);
  const auto sites = prunable_sites(g);
  if (sites.size() < 2 || sites[0].width != sites[1].width) return {false, "toy net has no same-stage pair"};
  auto masks = net.masks();
  masks[0].assign(sites[0].width, 0);
  masks[1].assign(sites[1].width, 0);
  for (std::size_t c : {1, 5, 9}) masks[0][c] = 1;
  for (std::size_t c : {0, 2, 3, 14}) masks[1][c] = 1;
  apply_masks(net, masks);
  const auto plain = deploy(net);
  const std::size_t w0 = plain.blocks()[0].layers[0].kernel.dim(0);
  const std::size_t w1 = plain.blocks()[1].layers[0].kernel.dim(0);

  std::mt19937_64 rng(901);
  const auto x = random_tensor<float>({100, 3, 16, 16}, rng);
  auto supernet = net;
  auto compact = plain;
  const double err = max_abs_diff(supernet.forward(x, false), compact.forward(x, false));

  const fs::path dir = fs::temp_directory_path() / "pas_acceptance_arch";
  fs::create_directories(dir);
  export_arch_report(g, masks, dir / "arch.txt");
  std::ifstream in(dir / "arch.csv");
  std::stringstream csv;
  csv << in.rdbuf();
  fs::remove_all(dir);
  const auto report = arch_report(g, masks);
  const bool recorded = report.rows.size() >= 2 && report.rows[0].kept() == "3/16" && report.rows[1].kept() == "4/16" &&
                        csv.str().find(",3/16,") != std::string::npos && csv.str().find(",4/16,") != std::string::npos;
  return {w0 == 3 && w1 == 4 && recorded && err <= 1e-4,
          fmt("deployed widths %zu and %zu in stage 1, report %s, forward diff %.2e", w0, w1,
              recorded ? "records 3/16 and 4/16" : "MISSING widths", err)};
}

// ---------------------------------------------------------------- 10

template <typename E>
bool rejected_as(const std::vector<std::uint8_t>& bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const E&) {
    return true;
  } catch (const std::exception&) {
    return false;
  }
  return false;
}

Outcome serialization() {
  auto net = seeded<float>(build_toy_net(16, 6, 10, kInput), 1000);
  std::mt19937_64 rng(1001);
  for (auto& d : net.dbc())
    for (auto& v : d.v.data()) v = std::uniform_real_distribution<float>(0, 1)(rng);
  const fs::path path = fs::temp_directory_path() / "pas_acceptance.pasckpt";
  save_checkpoint(path, net);
  auto back = load_checkpoint(path);
  fs::remove(path);
  const auto bytes = serialize_checkpoint(net);
  bool bitwise = serialize_checkpoint(back) == bytes;
  auto pa = net.parameters(), pb = back.parameters();
  bitwise = bitwise && pa.size() == pb.size();
  for (std::size_t i = 0; bitwise && i < pa.size(); ++i)
    bitwise = std::memcmp(pa[i].tensor.data().data(), pb[i].tensor.data().data(), pa[i].tensor.numel() * 4) == 0;
  for (std::size_t s = 0; bitwise && s < net.num_sites(); ++s)
    bitwise = std::memcmp(net.dbc()[s].v.data().data(), back.dbc()[s].v.data().data(), net.dbc()[s].width() * 4) == 0;

  std::size_t truncations = 0, truncation_ok = 0;
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{15}, std::size_t{40}, bytes.size() / 2,
                          bytes.size() - 1}) {
    ++truncations;
    truncation_ok += rejected_as<CorruptCheckpoint>({bytes.begin(), bytes.begin() + static_cast<long>(cut)});
  }
  auto magic = bytes;
  magic[3] ^= 0xff;
  auto header = bytes;
  header[17] = '@';
  const bool corrupt = rejected_as<CorruptCheckpoint>(magic) && rejected_as<CorruptCheckpoint>(header);
  bool version = true;
  for (std::uint32_t v : {0u, kCheckpointVersion + 1, 999u}) {
    auto b = bytes;
    for (int k = 0; k < 4; ++k) b[8 + k] = static_cast<std::uint8_t>(v >> (8 * k));
    version = version && rejected_as<VersionError>(b);
  }
  return {bitwise && truncation_ok == truncations && corrupt && version,
          fmt("round trip %s; truncated %zu/%zu CorruptCheckpoint; corrupt %s; misversioned %s",
              bitwise ? "bitwise" : "DIFFERS", truncation_ok, truncations,
              corrupt ? "CorruptCheckpoint" : "WRONG", version ? "VersionError" : "WRONG")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](int c) { return only.empty() || only.count(c); };

  bool all = true;
  auto report = [&](int number, const char* name, const Outcome& o) {
    std::printf("criterion %2d %-22s %s  %s\n", number, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  };
  auto guarded = [](const std::function<Outcome()>& f) -> Outcome {
    try {
      return f();
    } catch (const std::exception& e) {
      return {false, std::string("threw: ") + e.what()};
    }
  };

  if (wanted(1)) report(1, "reparam-equivalence", guarded(reparam_equivalence));
  if (wanted(2)) report(2, "squeeze-equivalence", guarded(squeeze_equivalence));
  if (wanted(3)) report(3, "straight-through", guarded(straight_through));
  if (wanted(4)) report(4, "macs-fixtures", guarded(macs_fixtures));

  if (wanted(5) || wanted(6) || wanted(7) || wanted(8)) {
    std::vector<SeedRun> runs;
    std::string failure;
    try {
      for (std::uint64_t seed = 0; seed < 5; ++seed) runs.push_back(run_seed(seed, wanted(8)));
    } catch (const std::exception& e) {
      failure = std::string("threw: ") + e.what();
    }
    auto from_runs = [&](auto f) { return failure.empty() ? f(runs) : Outcome{false, failure}; };
    if (wanted(5)) report(5, "budget", from_runs(budget));
    if (wanted(6)) report(6, "convergence", from_runs(convergence));
    if (wanted(7)) report(7, "recovery", from_runs(recovery));
    if (wanted(8)) report(8, "accuracy", from_runs(accuracy));
  }

  if (wanted(9)) report(9, "width-flexibility", guarded(width_flexibility));
  if (wanted(10)) report(10, "serialization", guarded(serialization));
  return all ? 0 : 1;
}
