#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pas/cost.hpp"
#include "pas/graph.hpp"
#include "pas/network.hpp"
#include "pas/search.hpp"

namespace pas {

// Checkpoint layout (all integers little-endian):
//   "PASCKPT\0" | u32 version | u32 header length | JSON header | zero pad to 64
//   | payload of f32 tensors, each starting on a 64-byte boundary.
// Tensor offsets in the header are relative to the payload start.
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointAlign = 64;

struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t bytes = 0;
};

std::vector<std::uint8_t> serialize_checkpoint(const Network<float>& net);
Network<float> parse_checkpoint(std::span<const std::uint8_t> bytes);
// Tensor directory of a serialized checkpoint, after full validation.
std::vector<TensorEntry> checkpoint_directory(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net);
Network<float> load_checkpoint(const std::filesystem::path& path);

std::string graph_to_json(const NetworkGraph& graph);
NetworkGraph graph_from_json(const std::string& text);

// Run configuration: `[section]` headers and `key = value` lines, `#` comments.
// Sections: graph, budget, schedule, dataset, seed. Unknown keys are errors.
struct RunConfig {
  std::string arch = "toy";  // toy, toy_lightweight or a reference graph name
  std::size_t width_base = 16;
  std::size_t depth = 6;
  std::size_t num_classes = 10;
  InputShape input{3, 16, 16};

  std::string dataset = "synthetic";  // synthetic, cifar10, mnist
  std::string data_dir;
  std::size_t train_samples = 2048;
  std::size_t test_samples = 2048;
  std::vector<double> norm_mean;
  std::vector<double> norm_std;

  SearchConfig search;

  NetworkGraph build_graph() const;
  void validate() const;
  std::string to_text() const;
};

RunConfig parse_run_config(const std::string& text, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);

struct ArchRow {
  std::size_t index = 0;
  std::string layer;
  std::size_t original = 0;
  std::size_t remained = 0;
  std::uint64_t macs = 0;

  double ratio() const { return original ? static_cast<double>(remained) / static_cast<double>(original) : 0.0; }
  std::string kept() const { return std::to_string(remained) + "/" + std::to_string(original); }
};

struct ArchReport {
  std::vector<ArchRow> rows;
  std::uint64_t total_macs = 0;
  std::uint64_t baseline_macs = 0;

  std::string to_text() const;
  std::string to_csv() const;  // index,layer,kept,original,remained,ratio,macs
};

ArchReport arch_report(const NetworkGraph& graph, const std::optional<std::vector<Mask>>& masks = std::nullopt,
                       CountOptions options = {});
// Writes the text table to `path` and its CSV twin next to it (extension .csv).
void export_arch_report(const NetworkGraph& graph, const std::optional<std::vector<Mask>>& masks,
                        const std::filesystem::path& path, CountOptions options = {});

}  // namespace pas
