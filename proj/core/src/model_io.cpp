#include "pas/model_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pas/error.hpp"

namespace pas {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'A', 'S', 'C', 'K', 'P', 'T', '\0'};
constexpr std::size_t kPreamble = 16;  // magic + version + header length

std::size_t align_up(std::size_t n) { return (n + kCheckpointAlign - 1) / kCheckpointAlign * kCheckpointAlign; }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> values, const char* field) {
  for (E e : values) {
    if (to_string(e) == s) return e;
  }
  throw CorruptCheckpoint(std::string(field) + ": unknown value '" + s + "'");
}

std::string_view pool_name(PoolKind k) { return k == PoolKind::GlobalAverage ? "global_average" : "max"; }

std::vector<std::size_t> shape_of(const Tensor<float>& t) { return {t.shape().begin(), t.shape().end()}; }

// Every tensor a checkpoint stores, in payload order.
std::vector<std::pair<std::string, Tensor<float>>> collect_tensors(Network<float>& net) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (auto& p : net.parameters()) out.emplace_back(p.name, p.tensor);
  for (auto& b : net.buffers()) out.emplace_back(b.name, b.tensor);
  for (std::size_t s = 0; s < net.num_sites(); ++s) out.emplace_back("dbc." + std::to_string(s) + ".v", net.dbc()[s].v);
  return out;
}

struct BnMeta {
  std::string layer;
  BatchNormParams<float>* bn;
};

std::vector<BnMeta> bn_layers(Network<float>& net) {
  std::vector<BnMeta> out;
  for (std::size_t b = 0; b < net.blocks().size(); ++b) {
    const auto& names = slot_names(net.graph().blocks[b].kind);
    auto& layers = net.blocks()[b].layers;
    for (std::size_t s = 0; s < layers.size(); ++s) {
      if (layers[s].bn) out.push_back({"b" + std::to_string(b) + "." + names.at(s), &*layers[s].bn});
    }
  }
  return out;
}

json graph_json(const NetworkGraph& g) {
  json blocks = json::array();
  for (const auto& b : g.blocks) {
    json sites = json::array();
    for (auto s : b.dbc_sites) sites.push_back(std::string(to_string(s)));
    blocks.push_back({{"kind", std::string(to_string(b.kind))},
                      {"in_channels", b.in_channels},
                      {"out_channels", b.out_channels},
                      {"mid_channels", b.mid_channels},
                      {"kernel", b.kernel},
                      {"stride", b.stride},
                      {"padding", b.padding},
                      {"has_identity", b.has_identity},
                      {"has_1x1_branch", b.has_1x1_branch},
                      {"has_expand", b.has_expand},
                      {"has_bn", b.has_bn},
                      {"has_bias", b.has_bias},
                      {"relu", b.relu},
                      {"depthwise", b.depthwise},
                      {"pool", std::string(pool_name(b.pool))},
                      {"dbc_sites", sites}});
  }
  return {{"input", {g.input.channels, g.input.height, g.input.width}},
          {"num_classes", g.num_classes},
          {"blocks", blocks}};
}

template <typename V>
V field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw CorruptCheckpoint(where + "." + key + ": missing");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw CorruptCheckpoint(where + "." + key + ": wrong type");
  }
}

NetworkGraph graph_from(const json& j) {
  NetworkGraph g;
  const auto input = field<std::vector<std::size_t>>(j, "input", "graph");
  if (input.size() != 3) throw CorruptCheckpoint("graph.input: expected [channels, height, width]");
  g.input = {input[0], input[1], input[2]};
  g.num_classes = field<std::size_t>(j, "num_classes", "graph");
  if (!j.contains("blocks") || !j["blocks"].is_array()) throw CorruptCheckpoint("graph.blocks: missing");
  for (std::size_t i = 0; i < j["blocks"].size(); ++i) {
    const json& jb = j["blocks"][i];
    const std::string w = "graph.blocks[" + std::to_string(i) + "]";
    BlockSpec b;
    b.kind = parse_enum(field<std::string>(jb, "kind", w),
                        {BlockKind::PlainConv, BlockKind::RepConv3x3, BlockKind::RepLightweight, BlockKind::Bottleneck,
                         BlockKind::Pool, BlockKind::Linear},
                        (w + ".kind").c_str());
    b.in_channels = field<std::size_t>(jb, "in_channels", w);
    b.out_channels = field<std::size_t>(jb, "out_channels", w);
    b.mid_channels = field<std::size_t>(jb, "mid_channels", w);
    b.kernel = field<std::size_t>(jb, "kernel", w);
    b.stride = field<std::size_t>(jb, "stride", w);
    b.padding = field<std::size_t>(jb, "padding", w);
    b.has_identity = field<bool>(jb, "has_identity", w);
    b.has_1x1_branch = field<bool>(jb, "has_1x1_branch", w);
    b.has_expand = field<bool>(jb, "has_expand", w);
    b.has_bn = field<bool>(jb, "has_bn", w);
    b.has_bias = field<bool>(jb, "has_bias", w);
    b.relu = field<bool>(jb, "relu", w);
    b.depthwise = field<bool>(jb, "depthwise", w);
    const auto pool = field<std::string>(jb, "pool", w);
    if (pool != "global_average" && pool != "max") throw CorruptCheckpoint(w + ".pool: unknown value '" + pool + "'");
    b.pool = pool == "max" ? PoolKind::Max : PoolKind::GlobalAverage;
    for (const auto& s : field<std::vector<std::string>>(jb, "dbc_sites", w)) {
      b.dbc_sites.push_back(parse_enum(s, {SiteKind::Expand, SiteKind::Output}, (w + ".dbc_sites").c_str()));
    }
    g.blocks.push_back(std::move(b));
  }
  try {
    g.validate();
  } catch (const Error& e) {
    throw CorruptCheckpoint(std::string("graph: ") + e.what());
  }
  return g;
}

struct Parsed {
  json header;
  std::size_t payload_start = 0;
  std::vector<TensorEntry> entries;
};

Parsed parse_layout(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPreamble) {
    throw CorruptCheckpoint("magic: file is " + std::to_string(bytes.size()) + " bytes, shorter than the preamble");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw CorruptCheckpoint("magic: not a PASCKPT file");
  const std::uint32_t version = get_u32(bytes, 8);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t header_len = get_u32(bytes, 12);
  if (kPreamble + header_len > bytes.size()) {
    throw CorruptCheckpoint("header_length: " + std::to_string(header_len) + " bytes exceed the file");
  }
  Parsed p;
  try {
    p.header = json::parse(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(kPreamble + header_len));
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("header: ") + e.what());
  }
  p.payload_start = align_up(kPreamble + header_len);
  const auto payload_bytes = field<std::uint64_t>(p.header, "payload_bytes", "header");
  const std::size_t available = bytes.size() >= p.payload_start ? bytes.size() - p.payload_start : 0;
  if (bytes.size() < p.payload_start || available != payload_bytes) {
    throw CorruptCheckpoint("payload_bytes: header declares " + std::to_string(payload_bytes) + " bytes, file holds " +
                            std::to_string(available));
  }
  if (!p.header.contains("tensors") || !p.header["tensors"].is_array()) throw CorruptCheckpoint("tensors: missing");
  std::uint64_t end = 0;
  for (std::size_t i = 0; i < p.header["tensors"].size(); ++i) {
    const json& jt = p.header["tensors"][i];
    const std::string w = "tensors[" + std::to_string(i) + "]";
    TensorEntry e;
    e.name = field<std::string>(jt, "name", w);
    e.shape = field<std::vector<std::size_t>>(jt, "shape", w);
    e.offset = field<std::uint64_t>(jt, "offset", w);
    e.bytes = field<std::uint64_t>(jt, "bytes", w);
    std::uint64_t numel = 1;
    for (auto d : e.shape) numel *= d;
    if (e.bytes != numel * 4) throw CorruptCheckpoint(w + ".bytes: " + std::to_string(e.bytes) + " does not match shape");
    if (e.offset % kCheckpointAlign != 0) throw CorruptCheckpoint(w + ".offset: not 64-byte aligned");
    if (i > 0 && e.offset < end) throw CorruptCheckpoint(w + ".offset: overlaps the previous tensor");
    if (e.offset + e.bytes > payload_bytes) throw CorruptCheckpoint(w + ".offset: extends past the payload");
    end = e.offset + std::max<std::uint64_t>(e.bytes, 1);
    p.entries.push_back(std::move(e));
  }
  return p;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::string graph_to_json(const NetworkGraph& graph) { return graph_json(graph).dump(2); }

NetworkGraph graph_from_json(const std::string& text) {
  try {
    return graph_from(json::parse(text));
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("graph: ") + e.what());
  }
}

std::vector<std::uint8_t> serialize_checkpoint(const Network<float>& source) {
  Network<float> net = source;  // shallow: shares tensors
  const auto tensors = collect_tensors(net);
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t bytes = t.numel() * 4;
    dir.push_back({{"name", name}, {"shape", shape_of(t)}, {"offset", offset}, {"bytes", bytes}});
    offset = align_up(offset + bytes);
  }
  json dbc = json::array();
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    const auto& d = net.dbc()[s];
    const auto& site = net.plan().sites[s];
    dbc.push_back({{"site", s},
                   {"block", site.block},
                   {"kind", std::string(to_string(site.site))},
                   {"width", d.width()},
                   {"threshold", static_cast<double>(d.threshold)},
                   {"frozen", d.frozen}});
  }
  json bn = json::array();
  for (const auto& m : bn_layers(net)) {
    bn.push_back({{"layer", m.layer}, {"eps", static_cast<double>(m.bn->eps)}, {"momentum", static_cast<double>(m.bn->momentum)}});
  }
  const json header = {{"format", "pas-checkpoint"},
                       {"endianness", "little"},
                       {"dtype", "f32"},
                       {"graph", graph_json(net.graph())},
                       {"dbc", dbc},
                       {"batch_norm", bn},
                       {"bn_finalized", net.bn_finalized()},
                       {"payload_bytes", offset},
                       {"tensors", dir}};
  const std::string text = header.dump(2);

  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_start = align_up(out.size());
  out.resize(payload_start + offset, 0);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    std::uint8_t* dst = out.data() + payload_start + dir[i]["offset"].get<std::uint64_t>();
    for (float f : tensors[i].second.data()) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      for (int k = 0; k < 4; ++k) *dst++ = static_cast<std::uint8_t>(u >> (8 * k));
    }
  }
  return out;
}

std::vector<TensorEntry> checkpoint_directory(std::span<const std::uint8_t> bytes) {
  return parse_layout(bytes).entries;
}

Network<float> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  const Parsed p = parse_layout(bytes);
  if (!p.header.contains("graph")) throw CorruptCheckpoint("graph: missing");
  Network<float> net(graph_from(p.header["graph"]));

  auto expected = collect_tensors(net);
  std::map<std::string, Tensor<float>> by_name(expected.begin(), expected.end());
  std::set<std::string> seen;
  for (std::size_t i = 0; i < p.entries.size(); ++i) {
    const auto& e = p.entries[i];
    const std::string w = "tensors[" + std::to_string(i) + "]";
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw CorruptCheckpoint(w + ".name: unexpected tensor '" + e.name + "'");
    if (!seen.insert(e.name).second) throw CorruptCheckpoint(w + ".name: duplicate tensor '" + e.name + "'");
    if (e.shape != shape_of(it->second)) throw CorruptCheckpoint(w + ".shape: does not match the graph for '" + e.name + "'");
    const std::uint8_t* src = bytes.data() + p.payload_start + e.offset;
    for (float& f : it->second.data()) {
      std::uint32_t u = 0;
      for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(*src++) << (8 * k);
      f = std::bit_cast<float>(u);
    }
  }
  for (const auto& [name, t] : expected) {
    if (!seen.count(name)) throw CorruptCheckpoint("tensors: missing '" + name + "'");
  }

  if (!p.header.contains("dbc") || !p.header["dbc"].is_array() || p.header["dbc"].size() != net.num_sites()) {
    throw CorruptCheckpoint("dbc: expected " + std::to_string(net.num_sites()) + " entries");
  }
  for (std::size_t s = 0; s < net.num_sites(); ++s) {
    const json& jd = p.header["dbc"][s];
    const std::string w = "dbc[" + std::to_string(s) + "]";
    auto& d = net.dbc()[s];
    if (field<std::size_t>(jd, "width", w) != d.width()) throw CorruptCheckpoint(w + ".width: does not match the graph");
    d.threshold = static_cast<float>(field<double>(jd, "threshold", w));
    d.frozen = field<bool>(jd, "frozen", w);
    d.v.set_requires_grad(!d.frozen);
  }
  auto bns = bn_layers(net);
  if (!p.header.contains("batch_norm") || p.header["batch_norm"].size() != bns.size()) {
    throw CorruptCheckpoint("batch_norm: expected " + std::to_string(bns.size()) + " entries");
  }
  for (std::size_t i = 0; i < bns.size(); ++i) {
    const json& jb = p.header["batch_norm"][i];
    const std::string w = "batch_norm[" + std::to_string(i) + "]";
    if (field<std::string>(jb, "layer", w) != bns[i].layer) throw CorruptCheckpoint(w + ".layer: expected " + bns[i].layer);
    bns[i].bn->eps = static_cast<float>(field<double>(jb, "eps", w));
    bns[i].bn->momentum = static_cast<float>(field<double>(jb, "momentum", w));
  }
  net.set_bn_finalized(field<bool>(p.header, "bn_finalized", "header"));
  return net;
}

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net) {
  const auto bytes = serialize_checkpoint(net);
  write_all(path, bytes.data(), bytes.size());
}

Network<float> load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_all(path)); }

// ---------------------------------------------------------------------------
// Run configuration

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct ValueParser {
  std::string key;
  std::string value;

  [[noreturn]] void fail(const std::string& expected) const {
    throw ConfigKeyError(key, key + ": expected " + expected + ", got '" + value + "'");
  }
  std::size_t size() const {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || p != value.data() + value.size()) fail("a non-negative integer");
    return out;
  }
  double real() const {
    try {
      std::size_t used = 0;
      const double d = std::stod(value, &used);
      if (used != value.size()) fail("a number");
      return d;
    } catch (const std::logic_error&) {
      fail("a number");
    }
  }
  bool boolean() const {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    fail("true or false");
  }
  std::vector<double> reals() const {
    std::vector<double> out;
    for (const auto& item : split_list(value)) out.push_back(ValueParser{key, item}.real());
    return out;
  }
  InputShape shape() const {
    std::vector<std::size_t> dims;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, 'x')) dims.push_back(ValueParser{key, trim(item)}.size());
    if (dims.size() != 3) fail("CxHxW");
    return {dims[0], dims[1], dims[2]};
  }
};

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_reals(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + fmt_real(v[i]);
  return out;
}

}  // namespace

NetworkGraph RunConfig::build_graph() const {
  if (arch == "toy") return build_toy_net(width_base, depth, num_classes, input);
  if (arch == "toy_lightweight") return build_toy_lightweight_net(width_base, depth, num_classes, 2, input);
  return build_reference_graph(arch);
}

void RunConfig::validate() const {
  if (dataset != "synthetic" && dataset != "cifar10" && dataset != "mnist") {
    throw ConfigKeyError("dataset.kind", "dataset.kind must be synthetic, cifar10 or mnist, got '" + dataset + "'");
  }
  if (dataset != "synthetic" && data_dir.empty()) throw ConfigKeyError("dataset.path", "dataset.path is required for " + dataset);
  if (norm_mean.size() != norm_std.size()) {
    throw ConfigKeyError("dataset.norm_std", "dataset.norm_mean and dataset.norm_std differ in length");
  }
  for (double s : norm_std) {
    if (!(s > 0.0)) throw ConfigKeyError("dataset.norm_std", "dataset.norm_std entries must be positive");
  }
  try {
    search.validate();
  } catch (const ConfigKeyError& e) {
    // Report the key as it is spelled in a config file.
    std::string key = "schedule." + e.key();
    if (e.key() == "beta") key = "budget.beta";
    if (e.key() == "target_macs_fraction") key = "budget.target_frac";
    throw ConfigKeyError(key, e.what());
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  const auto b = [](bool v) { return v ? "true" : "false"; };
  o << "[graph]\n"
    << "arch = " << arch << "\nwidth_base = " << width_base << "\ndepth = " << depth << "\nclasses = " << num_classes
    << "\ninput = " << input.channels << "x" << input.height << "x" << input.width << "\n\n";
  o << "[budget]\n"
    << "target_frac = " << fmt_real(search.target_macs_fraction) << "\nbeta = " << fmt_real(search.beta)
    << "\ncoupled_inputs = " << b(search.coupled_inputs) << "\n\n";
  o << "[schedule]\n"
    << "pretrain_epochs = " << search.pretrain_epochs << "\nsearch_epochs = " << search.search_epochs
    << "\nfinetune_epochs = " << search.finetune_epochs << "\nbase_lr = " << fmt_real(search.base_lr)
    << "\nbatch_size = " << search.batch_size << "\nmomentum = " << fmt_real(search.momentum)
    << "\nweight_decay = " << fmt_real(search.weight_decay) << "\ndbc_threshold = " << fmt_real(search.dbc_threshold)
    << "\nindicator_lr_scale = " << fmt_real(search.indicator_lr_scale)
    << "\nindicator_momentum = " << fmt_real(search.indicator_momentum)
    << "\ntask_grad_to_indicators = " << b(search.task_grad_to_indicators)
    << "\nsearch_running_bn = " << b(search.search_running_bn) << "\nsearch_cosine = " << b(search.search_cosine)
    << "\naugment = " << b(search.augment) << "\niterative_l2 = " << fmt_real(search.iterative_l2)
    << "\nequal_penalty_lambda = " << fmt_real(search.equal_penalty_lambda) << "\n\n";
  o << "[dataset]\n"
    << "kind = " << dataset << "\npath = " << data_dir << "\ntrain_samples = " << train_samples
    << "\ntest_samples = " << test_samples << "\nnorm_mean = " << join_reals(norm_mean)
    << "\nnorm_std = " << join_reals(norm_std) << "\n\n";
  o << "[seed]\nseed = " << search.seed << "\n";
  return o.str();
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find_first_of("#;");
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      static const std::set<std::string> sections = {"graph", "budget", "schedule", "dataset", "seed"};
      if (!sections.count(section)) throw ConfigKeyError(section, where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + line + "'");
    if (section.empty()) throw ConfigError(where + ": key outside of any [section]");
    const std::string key = section + "." + trim(line.substr(0, eq));
    const ValueParser v{key, trim(line.substr(eq + 1))};
    if (!seen.insert(key).second) throw ConfigKeyError(key, where + ": duplicate key " + key);
    auto& s = cfg.search;
    if (key == "graph.arch") cfg.arch = v.value;
    else if (key == "graph.width_base") cfg.width_base = v.size();
    else if (key == "graph.depth") cfg.depth = v.size();
    else if (key == "graph.classes") cfg.num_classes = v.size();
    else if (key == "graph.input") cfg.input = v.shape();
    else if (key == "budget.target_frac") s.target_macs_fraction = v.real();
    else if (key == "budget.beta") s.beta = v.real();
    else if (key == "budget.coupled_inputs") s.coupled_inputs = v.boolean();
    else if (key == "schedule.pretrain_epochs") s.pretrain_epochs = v.size();
    else if (key == "schedule.search_epochs") s.search_epochs = v.size();
    else if (key == "schedule.finetune_epochs") s.finetune_epochs = v.size();
    else if (key == "schedule.base_lr") s.base_lr = v.real();
    else if (key == "schedule.batch_size") s.batch_size = v.size();
    else if (key == "schedule.momentum") s.momentum = v.real();
    else if (key == "schedule.weight_decay") s.weight_decay = v.real();
    else if (key == "schedule.dbc_threshold") s.dbc_threshold = v.real();
    else if (key == "schedule.indicator_lr_scale") s.indicator_lr_scale = v.real();
    else if (key == "schedule.indicator_momentum") s.indicator_momentum = v.real();
    else if (key == "schedule.task_grad_to_indicators") s.task_grad_to_indicators = v.boolean();
    else if (key == "schedule.search_running_bn") s.search_running_bn = v.boolean();
    else if (key == "schedule.search_cosine") s.search_cosine = v.boolean();
    else if (key == "schedule.augment") s.augment = v.boolean();
    else if (key == "schedule.iterative_l2") s.iterative_l2 = v.real();
    else if (key == "schedule.equal_penalty_lambda") s.equal_penalty_lambda = v.real();
    else if (key == "dataset.kind") cfg.dataset = v.value;
    else if (key == "dataset.path") cfg.data_dir = v.value;
    else if (key == "dataset.train_samples") cfg.train_samples = v.size();
    else if (key == "dataset.test_samples") cfg.test_samples = v.size();
    else if (key == "dataset.norm_mean") cfg.norm_mean = v.value.empty() ? std::vector<double>{} : v.reals();
    else if (key == "dataset.norm_std") cfg.norm_std = v.value.empty() ? std::vector<double>{} : v.reals();
    else if (key == "seed.seed") s.seed = v.size();
    else throw ConfigKeyError(key, where + ": unknown key " + key);
  }
  for (const char* required : {"graph.arch", "budget.target_frac"}) {
    if (!seen.count(required)) throw ConfigKeyError(required, source + ": missing required key " + required);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Architecture report

ArchReport arch_report(const NetworkGraph& graph, const std::optional<std::vector<Mask>>& masks, CountOptions options) {
  const MacsReport macs = count_macs(graph, masks, options);
  ArchReport r;
  for (std::size_t i = 0; i < macs.layers.size(); ++i) {
    const auto& l = macs.layers[i];
    r.rows.push_back({i, l.name, l.original_width, l.active_width, l.macs});
  }
  r.total_macs = macs.total;
  r.baseline_macs = macs.baseline;
  return r;
}

std::string ArchReport::to_text() const {
  std::ostringstream o;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-5s %-16s %-11s %-7s %s\n", "index", "layer", "kept", "ratio", "macs");
  o << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-5zu %-16s %-11s %-7.3f %llu\n", r.index, r.layer.c_str(), r.kept().c_str(),
                  r.ratio(), static_cast<unsigned long long>(r.macs));
    o << buf;
  }
  std::snprintf(buf, sizeof buf, "total %llu MACs (%s), %.4f of %llu\n", static_cast<unsigned long long>(total_macs),
                format_macs(static_cast<double>(total_macs)).c_str(),
                baseline_macs ? static_cast<double>(total_macs) / static_cast<double>(baseline_macs) : 0.0,
                static_cast<unsigned long long>(baseline_macs));
  o << buf;
  return o.str();
}

std::string ArchReport::to_csv() const {
  std::ostringstream o;
  o << "index,layer,kept,original,remained,ratio,macs\n";
  for (const auto& r : rows) {
    o << r.index << ',' << r.layer << ',' << r.kept() << ',' << r.original << ',' << r.remained << ','
      << fmt_real(r.ratio()) << ',' << r.macs << '\n';
  }
  return o.str();
}

void export_arch_report(const NetworkGraph& graph, const std::optional<std::vector<Mask>>& masks,
                        const std::filesystem::path& path, CountOptions options) {
  const ArchReport r = arch_report(graph, masks, options);
  const std::string text = r.to_text();
  const std::string csv = r.to_csv();
  write_all(path, text.data(), text.size());
  auto csv_path = path;
  csv_path.replace_extension(".csv");
  if (csv_path == path) csv_path += ".csv";
  write_all(csv_path, csv.data(), csv.size());
}

}  // namespace pas
