#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "han/engine.hpp"
#include "han/tensor.hpp"

namespace han {

enum class DType : std::uint8_t { Float32 = 0, Float64 = 1 };

using Bytes = std::vector<std::uint8_t>;

// TensorFile layout, all little-endian:
//   "FTNS" | version u8 = 1 | dtype u8 | rank u8 | dims u32 x rank | payload
Bytes encode_tensor(const Tensor& t, DType dtype = DType::Float64);
// Decodes one tensor starting at `offset`, advancing it past the record.
// FormatError offsets are absolute positions in `bytes`.
Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::Float64);
Tensor read_tensor(const std::filesystem::path& path);

// ParamsFile layout, little-endian:
//   "FPRM" | version u8 = 1 | entry count u32 |
//   entries { name length u16 | UTF-8 name | complete TensorFile record }
// Entry names and order follow for_each_param.
Bytes encode_params(const HanParams& params, DType dtype = DType::Float64);
HanParams decode_params(std::span<const std::uint8_t> bytes);

void write_params(const std::filesystem::path& path, const HanParams& params, DType dtype = DType::Float64);
HanParams read_params(const std::filesystem::path& path);

// Recovers the shape configuration implied by a parameter set; H and W are
// not encoded in parameters and are taken from the caller.
HanConfig infer_config(const HanParams& params, std::size_t height, std::size_t width);

// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
Bytes read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// HanConfig <-> JSON with keys L, N, C, H, W, G, k, c, H_r, seed.
nlohmann::json config_to_json(const HanConfig& cfg);
HanConfig config_from_json(const nlohmann::json& j);
// Applies a "key=value" override to a config, e.g. "G=4".
void apply_override(HanConfig& cfg, const std::string& assignment);

/// Trace document:
///   {"config": {...}, "frames": [{"gates": [L][N][N], "edge_threshold": t,
///     "active_edges": [[l, j, i], ...], "unit_norms": [[{"input", "output"}]]}]}
struct TraceFile {
  HanConfig config;
  std::vector<RoutingTrace> frames;
};

nlohmann::json trace_to_json(const TraceFile& trace);
// Validates gate dimensions against the config and edge lists against the
// threshold; throws FormatError on mismatch.
TraceFile trace_from_json(const nlohmann::json& j);

void write_trace(const std::filesystem::path& path, const TraceFile& trace);
TraceFile read_trace(const std::filesystem::path& path);

// Graphviz rendering of one frame's active-edge graph. Nodes are "L{l}U{i}"
// for every layer and unit; an edge from the last layer goes to a "FUSED"
// sink that only appears when such an edge is active.
std::string export_dot(const TraceFile& trace, std::size_t frame);

}  // namespace han
