#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pas/cost.hpp"
#include "pas/datasets.hpp"
#include "pas/error.hpp"
#include "pas/gradcheck.hpp"
#include "pas/model_io.hpp"
#include "pas/reparam.hpp"
#include "pas/search.hpp"

namespace fs = std::filesystem;
using namespace pas;

namespace {

struct Flags {
  std::string config;
  std::string arch;
  std::string checkpoint;
  std::optional<double> target_frac;
  std::optional<double> beta;
  std::optional<std::uint64_t> seed;
  std::string out = "pas-run";
  std::string data;
  std::string strategy;
};

void add_flags(CLI::App* cmd, Flags& f, bool needs_checkpoint) {
  cmd->add_option("--config", f.config, "run configuration file");
  cmd->add_option("--arch", f.arch, "toy, toy_lightweight or a reference graph (resnet50, repvgg_a0, ...)");
  cmd->add_option("--checkpoint", f.checkpoint, "input checkpoint")->required(needs_checkpoint);
  cmd->add_option("--target-frac", f.target_frac, "MACs budget as a fraction of the unpruned network");
  cmd->add_option("--beta", f.beta, "weight of the MACs regularizer");
  cmd->add_option("--seed", f.seed, "seed for data, init and batching");
  cmd->add_option("--out", f.out, "run directory")->capture_default_str();
  cmd->add_option("--data", f.data, "directory with CIFAR-10 binary or MNIST IDX files");
  cmd->add_option("--strategy", f.strategy, "pas, uniform, one_shot_magnitude, iterative_magnitude or equal_penalty");
}

std::string infer_dataset(const fs::path& dir) {
  if (fs::exists(dir / "data_batch_1.bin") || fs::exists(dir / "test_batch.bin")) return "cifar10";
  if (fs::exists(dir / "train-images-idx3-ubyte") || fs::exists(dir / "t10k-images-idx3-ubyte")) return "mnist";
  throw ConfigKeyError("dataset.path", "no CIFAR-10 binary or MNIST IDX files in " + dir.string());
}

// Config file (if any) with command-line flags applied on top.
RunConfig effective_config(const Flags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (!f.arch.empty()) cfg.arch = f.arch;
  if (f.target_frac) cfg.search.target_macs_fraction = *f.target_frac;
  if (f.beta) cfg.search.beta = *f.beta;
  if (f.seed) cfg.search.seed = *f.seed;
  if (!f.data.empty()) {
    cfg.data_dir = f.data;
    cfg.dataset = infer_dataset(f.data);
  }
  cfg.validate();
  return cfg;
}

struct RunData {
  Dataset train, test;
};

// Loads the configured dataset, fixes normalization statistics into `cfg`
// and adapts the toy graphs' input shape and class count to the data.
RunData load_data(RunConfig& cfg) {
  RunData d;
  const std::uint64_t seed = cfg.search.seed;
  if (cfg.dataset == "synthetic") {
    const std::size_t n = cfg.train_samples + cfg.test_samples;
    Dataset all = synthetic_teacher_dataset(seed, n, cfg.num_classes, cfg.input);
    auto [train, test] = split_dataset(all, static_cast<double>(cfg.train_samples) / static_cast<double>(n), seed);
    d.train = std::move(train);
    d.test = std::move(test);
    d.train.augment = false;
    return d;
  }
  const bool cifar = cfg.dataset == "cifar10";
  d.train = cifar ? load_cifar10_binary(cfg.data_dir, true) : load_mnist_idx(cfg.data_dir, true);
  d.test = cifar ? load_cifar10_binary(cfg.data_dir, false) : load_mnist_idx(cfg.data_dir, false);
  auto subsample = [&](Dataset& data, std::size_t keep) {
    if (keep > 0 && keep < data.size()) {
      data = split_dataset(data, static_cast<double>(keep) / static_cast<double>(data.size()), seed).first;
    }
  };
  subsample(d.train, cfg.train_samples);
  subsample(d.test, cfg.test_samples);
  ChannelStats stats;
  if (cfg.norm_mean.empty()) {
    stats = channel_stats(d.train);
    cfg.norm_mean = stats.mean;
    cfg.norm_std = stats.stddev;
  } else {
    if (cfg.norm_mean.size() != d.train.shape.channels) {
      throw ConfigKeyError("dataset.norm_mean", "dataset.norm_mean has " + std::to_string(cfg.norm_mean.size()) +
                                                    " entries for " + std::to_string(d.train.shape.channels) +
                                                    " channels");
    }
    stats = {cfg.norm_mean, cfg.norm_std};
  }
  normalize(d.train, stats);
  normalize(d.test, stats);
  d.train.augment = cfg.search.augment;
  if (cfg.arch == "toy" || cfg.arch == "toy_lightweight") {
    cfg.input = d.train.shape;
    cfg.num_classes = d.train.num_classes;
  } else if (!(cfg.input == d.train.shape)) {
    throw ConfigKeyError("graph.input", "graph input does not match the " + cfg.dataset + " image shape");
  }
  return d;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

fs::path prepare_out(const Flags& f, const RunConfig& cfg) {
  fs::create_directories(f.out);
  write_text(fs::path(f.out) / "config.ini", cfg.to_text());
  return f.out;
}

TrainHooks logging_hooks(const fs::path& out) {
  TrainHooks hooks;
  hooks.on_epoch = [out](Phase phase, std::size_t epoch, const Network<float>& net, const EpochStats& s) {
    std::fprintf(stderr, "[%s] epoch %zu loss %.4f task %.4f reg %.6f train_acc %.4f\n",
                 std::string(to_string(phase)).c_str(), epoch, s.loss, s.task_loss, s.reg_loss, s.train_accuracy);
    char name[64];
    std::snprintf(name, sizeof name, "%s-%03zu.pasckpt", std::string(to_string(phase)).c_str(), epoch);
    fs::create_directories(out / "checkpoints");
    save_checkpoint(out / "checkpoints" / name, net);
  };
  return hooks;
}

void print_result(const std::string& label, const SearchResult& r) {
  std::printf("%s accuracy %.4f macs %s (%.4f of %s, target %s)\n", label.c_str(), r.test_accuracy,
              format_macs(static_cast<double>(r.macs)).c_str(),
              static_cast<double>(r.macs) / static_cast<double>(r.baseline_macs),
              format_macs(static_cast<double>(r.baseline_macs)).c_str(), format_macs(r.target_macs).c_str());
}

int cmd_search(const Flags& f) {
  RunConfig cfg = effective_config(f);
  RunData data = load_data(cfg);
  const fs::path out = prepare_out(f, cfg);
  const TrainHooks hooks = logging_hooks(out);
  Network<float> start =
      f.checkpoint.empty() ? pretrain(cfg.build_graph(), data.train, cfg.search, hooks) : load_checkpoint(f.checkpoint);
  SearchResult r = run_pas(std::move(start), data.train, &data.test, cfg.search, hooks);
  save_checkpoint(out / "model.pasckpt", r.net);
  write_text(out / "trajectory.csv", r.trajectory.to_csv());
  export_arch_report(r.net.graph(), r.masks, out / "arch.txt", {cfg.search.coupled_inputs});
  print_result("pas", r);
  const auto conv = r.trajectory.convergence_epoch();
  std::printf("policy converged: %s\n", conv ? ("after epoch " + std::to_string(*conv)).c_str() : "no");
  return 0;
}

int cmd_finetune(const Flags& f) {
  RunConfig cfg = effective_config(f);
  Network<float> net = load_checkpoint(f.checkpoint);
  RunData data = load_data(cfg);
  const fs::path out = prepare_out(f, cfg);
  SearchResult r = finetune(std::move(net), data.train, &data.test, cfg.search, logging_hooks(out));
  save_checkpoint(out / "model.pasckpt", r.net);
  print_result("finetune", r);
  return 0;
}

int cmd_merge(const Flags& f) {
  Network<float> net = load_checkpoint(f.checkpoint);
  const fs::path out = prepare_out(f, effective_config(f));
  Network<float> fused = fuse_network(net);
  save_checkpoint(out / "merged.pasckpt", fused);
  std::printf("merged %zu blocks, %zu parameters -> %zu\n", fused.graph().blocks.size(), net.num_parameters(),
              fused.num_parameters());
  return 0;
}

int cmd_squeeze(const Flags& f) {
  Network<float> net = load_checkpoint(f.checkpoint);
  if (!net.policy_frozen()) throw ContractError("policy not frozen: squeeze needs frozen indicators");
  const fs::path out = prepare_out(f, effective_config(f));
  Network<float> squeezed = squeeze(net, net.masks());
  save_checkpoint(out / "squeezed.pasckpt", squeezed);
  std::printf("squeezed to %zu parameters, %s MACs\n", squeezed.num_parameters(),
              format_macs(static_cast<double>(total_macs(squeezed.graph()))).c_str());
  return 0;
}

int cmd_deploy(const Flags& f) {
  Network<float> net = load_checkpoint(f.checkpoint);
  RunConfig cfg = effective_config(f);
  Network<float> deployed = deploy(net);
  const fs::path out = prepare_out(f, cfg);
  save_checkpoint(out / "deployed.pasckpt", deployed);
  const CountOptions opts{cfg.search.coupled_inputs};
  export_arch_report(net.graph(), net.masks(), out / "arch.txt", opts);
  std::cout << arch_report(net.graph(), net.masks(), opts).to_text();
  return 0;
}

int cmd_count_macs(const Flags& f) {
  if (!f.checkpoint.empty()) {
    const Network<float> net = load_checkpoint(f.checkpoint);
    std::cout << count_macs(net.graph(), net.masks()).to_table();
    return 0;
  }
  const RunConfig cfg = effective_config(f);
  std::cout << count_macs(cfg.build_graph()).to_table();
  return 0;
}

int cmd_export_arch(const Flags& f) {
  const Network<float> net = load_checkpoint(f.checkpoint);
  const RunConfig cfg = effective_config(f);
  const fs::path out = prepare_out(f, cfg);
  const CountOptions opts{cfg.search.coupled_inputs};
  export_arch_report(net.graph(), net.masks(), out / "arch.txt", opts);
  std::cout << arch_report(net.graph(), net.masks(), opts).to_text();
  return 0;
}

int cmd_eval(const Flags& f) {
  Network<float> net = load_checkpoint(f.checkpoint);
  RunConfig cfg = effective_config(f);
  RunData data = load_data(cfg);
  const Evaluation e = evaluate(net, data.test);
  std::printf("accuracy %.4f loss %.4f samples %zu\n", e.accuracy, e.loss, data.test.size());
  return 0;
}

int cmd_compare(const Flags& f) {
  RunConfig cfg = effective_config(f);
  RunData data = load_data(cfg);
  const fs::path out = prepare_out(f, cfg);
  std::vector<std::string> names = {"pas", "uniform", "one_shot_magnitude", "iterative_magnitude", "equal_penalty"};
  if (!f.strategy.empty()) {
    if (f.strategy != "pas") (void)parse_strategy(f.strategy);
    names = {f.strategy};
  }
  const Network<float> start = f.checkpoint.empty() ? pretrain(cfg.build_graph(), data.train, cfg.search)
                                                    : load_checkpoint(f.checkpoint);
  std::ostringstream csv;
  csv << "strategy,accuracy,macs,fraction\n";
  std::printf("%-22s %9s %12s %9s\n", "strategy", "accuracy", "macs", "fraction");
  for (const auto& name : names) {
    const SearchResult r = name == "pas" ? run_pas(start, data.train, &data.test, cfg.search)
                                         : run_baseline(parse_strategy(name), start, data.train, &data.test, cfg.search);
    const double frac = static_cast<double>(r.macs) / static_cast<double>(r.baseline_macs);
    std::printf("%-22s %9.4f %12s %9.4f\n", name.c_str(), r.test_accuracy,
                format_macs(static_cast<double>(r.macs)).c_str(), frac);
    csv << name << ',' << r.test_accuracy << ',' << r.macs << ',' << frac << '\n';
  }
  write_text(out / "compare.csv", csv.str());
  return 0;
}

int cmd_gradcheck(const Flags& f) {
  const auto results = run_gradcheck(f.seed.value_or(0));
  std::string failed;
  for (const auto& r : results) {
    std::printf("%-28s %s  checked %zu skipped %zu max_err %.3e tol %.0e\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                r.checked, r.skipped, r.max_error, r.tolerance);
    if (!r.pass) failed += (failed.empty() ? "" : ", ") + r.name;
  }
  if (!failed.empty()) throw NumericError("gradcheck failed: " + failed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pruning-as-search: channel pruning for reparameterizable networks"};
  app.require_subcommand(1, 1);
  Flags flags;
  struct Command {
    const char* name;
    bool needs_checkpoint;
    const char* help;
    int (*run)(const Flags&);
  };
  const Command commands[] = {
      {"search", false, "pretrain (or load --checkpoint), search, freeze and fine-tune", cmd_search},
      {"finetune", true, "fine-tune a frozen checkpoint", cmd_finetune},
      {"merge", true, "fold BN, identity and 1x1 branches into plain convs", cmd_merge},
      {"squeeze", true, "drop masked channels from a merged checkpoint", cmd_squeeze},
      {"deploy", true, "merge and squeeze a frozen checkpoint; writes the arch report", cmd_deploy},
      {"count-macs", false, "MACs report of --arch or --checkpoint", cmd_count_macs},
      {"export-arch", true, "per-layer width report of a checkpoint", cmd_export_arch},
      {"eval", true, "test accuracy of a checkpoint", cmd_eval},
      {"compare-baselines", false, "PaS and the magnitude baselines at one budget", cmd_compare},
      {"gradcheck", false, "finite-difference gradient suite", cmd_gradcheck},
  };
  for (const auto& c : commands) add_flags(app.add_subcommand(c.name, c.help), flags, c.needs_checkpoint);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << app.help() << "error: usage: " << e.what() << "\n";
    return 2;
  }

  const Command* chosen = nullptr;
  for (const auto& c : commands) {
    if (app.got_subcommand(c.name)) chosen = &c;
  }
  try {
    return chosen->run(flags);
  } catch (const ConfigKeyError& e) {
    std::cerr << "error: " << e.kind() << ": " << e.key() << ": " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
