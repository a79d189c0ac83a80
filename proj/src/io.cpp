#include "han/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "han/error.hpp"

namespace han {

namespace {

constexpr std::uint8_t kVersion = 1;
constexpr char kTensorMagic[4] = {'F', 'T', 'N', 'S'};
constexpr char kParamsMagic[4] = {'F', 'P', 'R', 'M'};

class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}

  void raw(const char* s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(s[i]));
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes& out_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::size_t offset) : bytes_(bytes), pos_(offset) {}

  std::size_t pos() const { return pos_; }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() < pos_ || bytes_.size() - pos_ < n) {
      throw FormatError(pos_, std::string("truncated ") + what);
    }
  }
  void magic(const char (&expected)[4], const char* what) {
    need(4, what);
    for (int i = 0; i < 4; ++i) {
      if (bytes_[pos_ + i] != static_cast<std::uint8_t>(expected[i])) {
        throw FormatError(pos_, std::string("bad magic for ") + what);
      }
    }
    pos_ += 4;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(le(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(le(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(le(4, what)); }
  std::uint64_t u64(const char* what) { return le(8, what); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::uint64_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_;
};

void encode_tensor_into(Bytes& out, const Tensor& t, DType dtype) {
  if (t.rank() < 1 || t.rank() > 3) throw ShapeError("tensor file: rank must be 1..3");
  ByteWriter w(out);
  w.raw(kTensorMagic, 4);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(dtype));
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.dims()) {
    if (d > UINT32_MAX) throw ShapeError("tensor file: dimension exceeds 32 bits");
    w.u32(static_cast<std::uint32_t>(d));
  }
  for (double v : t.values()) {
    if (dtype == DType::Float64) {
      w.u64(std::bit_cast<std::uint64_t>(v));
    } else {
      w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
}

}  // namespace

Bytes encode_tensor(const Tensor& t, DType dtype) {
  Bytes out;
  encode_tensor_into(out, t, dtype);
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  ByteReader r(bytes, offset);
  r.magic(kTensorMagic, "tensor");
  const std::size_t version_at = r.pos();
  if (r.u8("tensor version") != kVersion) throw FormatError(version_at, "unsupported tensor version");
  const std::size_t dtype_at = r.pos();
  const std::uint8_t dtype = r.u8("tensor dtype");
  if (dtype > 1) throw FormatError(dtype_at, "unknown dtype " + std::to_string(dtype));
  const std::size_t rank_at = r.pos();
  const std::uint8_t rank = r.u8("tensor rank");
  if (rank < 1 || rank > 3) throw FormatError(rank_at, "tensor rank must be 1..3, got " + std::to_string(rank));
  std::vector<std::size_t> dims;
  std::uint64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    const std::size_t dim_at = r.pos();
    const std::uint32_t d = r.u32("tensor dims");
    if (d == 0) throw FormatError(dim_at, "zero tensor dimension");
    dims.push_back(d);
    count *= d;
  }
  const std::size_t width = dtype == 1 ? 8 : 4;
  if (count > (bytes.size() - r.pos()) / width) r.need(count * width, "tensor payload");
  std::vector<double> data(count);
  for (auto& v : data) {
    v = dtype == 1 ? std::bit_cast<double>(r.u64("tensor payload"))
                   : static_cast<double>(std::bit_cast<float>(r.u32("tensor payload")));
  }
  offset = r.pos();
  return Tensor(std::move(dims), std::move(data));
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  Tensor t = decode_tensor(bytes, offset);
  if (offset != bytes.size()) throw FormatError(offset, "trailing bytes after tensor");
  return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  write_file_atomic(path, encode_tensor(t, dtype));
}

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

Bytes encode_params(const HanParams& params, DType dtype) {
  Bytes out;
  ByteWriter w(out);
  w.raw(kParamsMagic, 4);
  w.u8(kVersion);
  std::uint32_t count = 0;
  for_each_param(params, [&](const std::string&, const Tensor&) { ++count; });
  w.u32(count);
  for_each_param(params, [&](const std::string& name, const Tensor& t) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    encode_tensor_into(out, t, dtype);
  });
  return out;
}

namespace {

// Number of layers implied by the entry names "layer{l}.*".
std::size_t count_layers(const std::vector<std::string>& names, std::size_t offset) {
  std::size_t layers = 0;
  for (const auto& n : names) {
    if (n.rfind("layer", 0) != 0) throw FormatError(offset, "unexpected parameter name " + n);
    const auto dot = n.find('.');
    std::size_t l = 0;
    try {
      l = std::stoul(n.substr(5, dot - 5));
    } catch (const std::exception&) {
      throw FormatError(offset, "unexpected parameter name " + n);
    }
    layers = std::max(layers, l + 1);
  }
  return layers;
}

}  // namespace

HanParams decode_params(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, 0);
  r.magic(kParamsMagic, "params");
  const std::size_t version_at = r.pos();
  if (r.u8("params version") != kVersion) throw FormatError(version_at, "unsupported params version");
  const std::uint32_t count = r.u32("params entry count");

  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  std::size_t offset = r.pos();
  for (std::uint32_t e = 0; e < count; ++e) {
    ByteReader er(bytes, offset);
    const std::uint16_t len = er.u16("params name length");
    std::string name = er.str(len, "params name");
    offset = er.pos();
    for (const auto& seen : names) {
      if (seen == name) throw FormatError(offset, "duplicate parameter " + name);
    }
    tensors.push_back(decode_tensor(bytes, offset));
    names.push_back(std::move(name));
  }
  if (offset != bytes.size()) throw FormatError(offset, "trailing bytes after params");

  HanParams params;
  params.layers.resize(count_layers(names, offset));
  std::size_t expected = 0;
  for_each_param(params, [&](const std::string&, Tensor&) { ++expected; });
  if (expected != names.size()) {
    throw FormatError(offset, "params file has " + std::to_string(names.size()) + " entries, expected " +
                                  std::to_string(expected));
  }
  for_each_param(params, [&](const std::string& name, Tensor& t) {
    std::size_t found = names.size();
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) found = i;
    }
    if (found == names.size()) throw FormatError(offset, "missing parameter " + name);
    t = std::move(tensors[found]);
  });
  return params;
}

void write_params(const std::filesystem::path& path, const HanParams& params, DType dtype) {
  write_file_atomic(path, encode_params(params, dtype));
}

HanParams read_params(const std::filesystem::path& path) { return decode_params(read_file(path)); }

HanConfig infer_config(const HanParams& params, std::size_t height, std::size_t width) {
  if (params.layers.empty()) throw ShapeError("infer_config: no layers");
  const LayerParams& lp = params.layers.front();
  if (lp.cmeu_r2t.wq.rank() != 2 || lp.routers[0].w1.rank() != 2) throw ShapeError("infer_config: malformed params");
  HanConfig cfg;
  cfg.layers = params.layers.size();
  cfg.channels = lp.cmeu_r2t.wq.dim(0);
  cfg.inner_width = lp.cmeu_r2t.wq.dim(1);
  cfg.groups = lp.seu_rgb.gamma.size();
  cfg.kernel_size = lp.ceu_rgb.kernel.size();
  cfg.router_hidden = lp.routers[0].w1.dim(1);
  cfg.units = lp.routers[0].w2.rank() == 2 ? lp.routers[0].w2.dim(1) : 0;
  cfg.height = height;
  cfg.width = width;
  cfg.validate();
  check_params(params, cfg);
  return cfg;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error("cannot move " + tmp.string() + " to " + path.string());
  }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string read_text(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

nlohmann::json config_to_json(const HanConfig& cfg) {
  return {{"L", cfg.layers},          {"N", cfg.units},          {"C", cfg.channels},
          {"H", cfg.height},          {"W", cfg.width},          {"G", cfg.groups},
          {"k", cfg.kernel_size},     {"c", cfg.cmeu_width()},   {"H_r", cfg.hidden_width()},
          {"seed", cfg.seed}};
}

namespace {

std::size_t size_field(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError(key, key + " must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

void set_field(HanConfig& cfg, const std::string& key, const nlohmann::json& v) {
  if (key == "seed") {
    if (!v.is_number_integer()) throw ConfigError(key, "seed must be an integer");
    cfg.seed = v.get<std::uint64_t>();
    return;
  }
  const std::size_t n = size_field(v, key);
  if (key == "L") cfg.layers = n;
  else if (key == "N") cfg.units = n;
  else if (key == "C") cfg.channels = n;
  else if (key == "H") cfg.height = n;
  else if (key == "W") cfg.width = n;
  else if (key == "G") cfg.groups = n;
  else if (key == "k") cfg.kernel_size = n;
  else if (key == "c") cfg.inner_width = n;
  else if (key == "H_r") cfg.router_hidden = n;
  else throw ConfigError(key, "unknown config field " + key);
}

}  // namespace

HanConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config", "config must be a JSON object");
  HanConfig cfg;
  for (const auto& [key, value] : j.items()) set_field(cfg, key, value);
  return cfg;
}

void apply_override(HanConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  nlohmann::json v;
  try {
    v = nlohmann::json::parse(assignment.substr(eq + 1));
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(key, "override value for " + key + " is not a number");
  }
  set_field(cfg, key, v);
}

nlohmann::json trace_to_json(const TraceFile& trace) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : trace.frames) {
    nlohmann::json gates = nlohmann::json::array();
    for (std::size_t l = 0; l < f.gates.layers(); ++l) {
      nlohmann::json layer = nlohmann::json::array();
      for (std::size_t j = 0; j < f.gates.units(); ++j) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t i = 0; i < f.gates.units(); ++i) row.push_back(f.gates.at(l, j, i));
        layer.push_back(std::move(row));
      }
      gates.push_back(std::move(layer));
    }
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& e : f.active_edges) edges.push_back({e.layer, e.from, e.to});
    nlohmann::json norms = nlohmann::json::array();
    for (const auto& layer : f.unit_norms) {
      nlohmann::json row = nlohmann::json::array();
      for (const auto& u : layer) row.push_back({{"input", u.input}, {"output", u.output}});
      norms.push_back(std::move(row));
    }
    frames.push_back({{"gates", std::move(gates)},
                      {"edge_threshold", f.edge_threshold},
                      {"active_edges", std::move(edges)},
                      {"unit_norms", std::move(norms)}});
  }
  return {{"config", config_to_json(trace.config)}, {"frames", std::move(frames)}};
}

TraceFile trace_from_json(const nlohmann::json& j) {
  TraceFile t;
  try {
    t.config = config_from_json(j.at("config"));
    const std::size_t layers = t.config.layers;
    const std::size_t units = t.config.units;
    std::size_t frame_index = 0;
    auto bad = [&](const std::string& m) { return FormatError(0, "frame " + std::to_string(frame_index) + ": " + m); };
    for (const auto& jf : j.at("frames")) {
      RoutingTrace f;
      f.gates = RouteTensor(layers, units);
      const auto& g = jf.at("gates");
      if (!g.is_array() || g.size() != layers) throw bad("gates must have L layers");
      for (std::size_t l = 0; l < layers; ++l) {
        if (!g[l].is_array() || g[l].size() != units) throw bad("gate layer must be N x N");
        for (std::size_t jj = 0; jj < units; ++jj) {
          if (!g[l][jj].is_array() || g[l][jj].size() != units) {
            throw bad("gate layer must be N x N");
          }
          for (std::size_t i = 0; i < units; ++i) f.gates.at(l, jj, i) = g[l][jj][i].get<double>();
        }
      }
      f.edge_threshold = jf.at("edge_threshold").get<double>();
      for (const auto& e : jf.at("active_edges")) {
        f.active_edges.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(), e.at(2).get<std::size_t>()});
      }
      if (f.active_edges != active_edges(f.gates, f.edge_threshold)) {
        throw bad("active_edges inconsistent with gates and threshold");
      }
      if (jf.contains("unit_norms")) {
        for (const auto& row : jf.at("unit_norms")) {
          std::array<UnitNorms, kUnitsPerLayer> layer{};
          if (row.size() != kUnitsPerLayer) throw bad("unit_norms rows must have N entries");
          for (std::size_t i = 0; i < kUnitsPerLayer; ++i) {
            layer[i] = {row[i].at("input").get<double>(), row[i].at("output").get<double>()};
          }
          f.unit_norms.push_back(layer);
        }
      }
      t.frames.push_back(std::move(f));
      ++frame_index;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, std::string("malformed trace document: ") + e.what());
  }
  return t;
}

void write_trace(const std::filesystem::path& path, const TraceFile& trace) {
  write_text_atomic(path, trace_to_json(trace).dump(2) + "\n");
}

TraceFile read_trace(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(e.byte, "trace is not valid JSON");
  }
  return trace_from_json(j);
}

std::string export_dot(const TraceFile& trace, std::size_t frame) {
  if (frame >= trace.frames.size()) {
    throw UsageError("frame " + std::to_string(frame) + " out of range (" + std::to_string(trace.frames.size()) +
                     " frames)");
  }
  const RoutingTrace& f = trace.frames[frame];
  const std::size_t layers = f.gates.layers();
  const std::size_t units = f.gates.units();

  auto node = [](std::size_t l, std::size_t i) { return "L" + std::to_string(l) + "U" + std::to_string(i); };
  auto label = [](double g) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", g);
    return std::string(buf);
  };

  std::ostringstream out;
  out << "digraph han {\n  rankdir=LR;\n";
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t i = 0; i < units; ++i) {
      out << "  " << node(l, i) << " [label=\"" << node(l, i) << "\\n" << unit_label(i) << "\"];\n";
    }
  }
  bool sink = false;
  for (const auto& e : f.active_edges) sink = sink || e.layer + 1 == layers;
  if (sink) out << "  FUSED [shape=doublecircle];\n";
  for (const auto& e : f.active_edges) {
    const std::string target = e.layer + 1 == layers ? std::string("FUSED") : node(e.layer + 1, e.to);
    out << "  " << node(e.layer, e.from) << " -> " << target << " [label=\"" << label(f.gates.at(e.layer, e.from, e.to))
        << "\"];\n";
  }
  out << "}\n";
  return out.str();
}

}  // namespace han
