#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "han/error.hpp"
#include "han/io.hpp"
#include "han/rng.hpp"
#include "oracles.hpp"

using namespace han;

namespace {

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / ("han_io_test_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.dims() == b.dims() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("tensor file layout") {
  const Bytes b = encode_tensor(Tensor::vector({42.0}));
  // magic, version, dtype, rank, one u32 dim, one f64
  REQUIRE(b.size() == 4 + 1 + 1 + 1 + 4 + 8);
  CHECK(std::string(b.begin(), b.begin() + 4) == "FTNS");
  CHECK(b[4] == 1);
  CHECK(b[5] == 1);
  CHECK(b[6] == 1);
  CHECK(b[7] == 1);
  CHECK(b[8] == 0);
  // 42.0 = 0x4045000000000000, little-endian.
  CHECK(b[18] == 0x40);
  CHECK(b[17] == 0x45);
  CHECK(decode_tensor(b) == Tensor::vector({42.0}));

  const Bytes f32 = encode_tensor(Tensor::vector({1.5, -2.0}), DType::Float32);
  CHECK(f32.size() == 7 + 4 + 8);
  CHECK(decode_tensor(f32) == Tensor::vector({1.5, -2.0}));
}

TEST_CASE("tensor round trip is bit exact") {
  Rng rng(71);
  const auto dir = temp_dir();
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t = oracle::random_tensor({16, 4, 4}, rng, -1e6, 1e6);
    t[0] = -0.0;
    t[1] = 5e-324;
    t[2] = std::nextafter(1.0, 2.0);
    write_tensor(dir / "t.ftns", t);
    CHECK(bit_identical(read_tensor(dir / "t.ftns"), t));
  }
  CHECK_FALSE(std::filesystem::exists(dir / "t.ftns.tmp"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("tensor decode errors carry byte offsets") {
  Bytes good = encode_tensor(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto offset_of = [](const Bytes& b) -> long {
    try {
      decode_tensor(b);
    } catch (const FormatError& e) {
      return static_cast<long>(e.offset());
    }
    return -1;
  };
  Bytes bad_magic = good;
  bad_magic[1] = 'X';
  CHECK(offset_of(bad_magic) == 0);
  Bytes bad_version = good;
  bad_version[4] = 2;
  CHECK(offset_of(bad_version) == 4);
  Bytes bad_dtype = good;
  bad_dtype[5] = 7;
  CHECK(offset_of(bad_dtype) == 5);
  Bytes rank0 = good;
  rank0[6] = 0;
  CHECK(offset_of(rank0) == 6);
  Bytes truncated(good.begin(), good.end() - 3);
  CHECK(offset_of(truncated) == 15);
  Bytes header_only(good.begin(), good.begin() + 9);
  CHECK(offset_of(header_only) == 7);
  Bytes trailing = good;
  trailing.push_back(0);
  CHECK(offset_of(trailing) == static_cast<long>(good.size()));
}

TEST_CASE("params round trip and reload into a forward pass") {
  HanConfig cfg;
  cfg.layers = 2;
  cfg.channels = 8;
  cfg.height = 3;
  cfg.width = 3;
  cfg.groups = 4;
  cfg.seed = 5;
  const HanParams params = init_params(cfg);
  const auto dir = temp_dir();
  write_params(dir / "p.fprm", params);
  const HanParams back = read_params(dir / "p.fprm");

  std::vector<Tensor> a, b;
  for_each_param(params, [&](const std::string&, const Tensor& t) { a.push_back(t); });
  for_each_param(back, [&](const std::string&, const Tensor& t) { b.push_back(t); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_identical(a[i], b[i]));

  const HanConfig inferred = infer_config(back, 3, 3);
  CHECK(inferred.resolved() == [&] { HanConfig c = cfg.resolved(); c.seed = 0; return c; }());
  Rng rng(72);
  CHECK_NOTHROW(han_forward(oracle::random_pair(8, 3, 3, rng), back, inferred));
  std::filesystem::remove_all(dir);
}

TEST_CASE("params decode rejects bad content") {
  HanConfig cfg;
  cfg.layers = 1;
  cfg.channels = 4;
  cfg.groups = 2;
  const Bytes good = encode_params(make_params(cfg));
  CHECK(std::string(good.begin(), good.begin() + 4) == "FPRM");
  Bytes bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_params(bad), FormatError);
  CHECK_THROWS_AS(decode_params(Bytes(good.begin(), good.end() - 1)), FormatError);
  // Entry count says one more than present.
  Bytes extra = good;
  extra[5] += 1;
  CHECK_THROWS_AS(decode_params(extra), FormatError);
  // Rename the first entry to duplicate the second one's name length/prefix.
  Bytes renamed = good;
  const std::size_t name_at = 4 + 1 + 4 + 2;
  renamed[name_at + std::strlen("layer0.seu_rgb.")] = 'X';
  CHECK_THROWS_AS(decode_params(renamed), FormatError);
}

TEST_CASE("config json") {
  HanConfig cfg;
  cfg.layers = 2;
  cfg.groups = 4;
  cfg.seed = 17;
  const HanConfig back = config_from_json(config_to_json(cfg));
  CHECK(back == cfg.resolved());

  apply_override(cfg, "G=2");
  CHECK(cfg.groups == 2);
  CHECK_THROWS_AS(apply_override(cfg, "G"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "bogus=3"), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"C", -1}}), ConfigError);
}

namespace {

TraceFile sample_trace(double fill = 0.0) {
  TraceFile t;
  t.config.layers = 2;
  RoutingTrace f;
  f.gates = RouteTensor(2, 4, fill);
  f.edge_threshold = 0.1;
  f.active_edges = active_edges(f.gates, 0.1);
  f.unit_norms.resize(2);
  t.frames.push_back(f);
  return t;
}

}  // namespace

TEST_CASE("trace json round trip preserves gates exactly") {
  Rng rng(73);
  TraceFile t = sample_trace();
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 4; ++i) t.frames[0].gates.at(l, j, i) = rng.uniform();
  t.frames[0].active_edges = active_edges(t.frames[0].gates, 0.1);
  const auto dir = temp_dir();
  write_trace(dir / "trace.json", t);
  const TraceFile back = read_trace(dir / "trace.json");
  CHECK(back.frames[0].gates == t.frames[0].gates);
  CHECK(back.frames[0].active_edges == t.frames[0].active_edges);
  std::filesystem::remove_all(dir);

  nlohmann::json j = trace_to_json(t);
  j["frames"][0]["active_edges"].push_back({0, 0, 0});
  t.frames[0].gates.at(0, 0, 0) = 0.0;
  j["frames"][0]["gates"][0][0][0] = 0.0;
  CHECK_THROWS_AS(trace_from_json(j), FormatError);
  nlohmann::json short_gates = trace_to_json(sample_trace());
  short_gates["frames"][0]["gates"].erase(1);
  CHECK_THROWS_AS(trace_from_json(short_gates), FormatError);
}

TEST_CASE("export_dot") {
  const TraceFile empty = sample_trace();
  const std::string dot = export_dot(empty, 0);
  std::size_t nodes = 0, edges = 0;
  for (std::size_t pos = 0; (pos = dot.find("[label=\"L", pos)) != std::string::npos; ++pos) ++nodes;
  for (std::size_t pos = 0; (pos = dot.find("->", pos)) != std::string::npos; ++pos) ++edges;
  CHECK(nodes == 8);
  CHECK(edges == 0);

  TraceFile one = sample_trace();
  one.frames[0].gates.at(0, 1, 2) = 0.9;
  one.frames[0].active_edges = active_edges(one.frames[0].gates, 0.1);
  const std::string d = export_dot(one, 0);
  CHECK(d.find("L0U1 -> L1U2 [label=\"0.90\"];") != std::string::npos);
  CHECK(d.find("->") == d.rfind("->"));
  CHECK(d.find("L1U3 [label=\"L1U3\\nCMEU_t2r\"]") != std::string::npos);
  CHECK(export_dot(one, 0) == d);

  TraceFile last = sample_trace();
  last.frames[0].gates.at(1, 0, 3) = 0.5;
  last.frames[0].active_edges = active_edges(last.frames[0].gates, 0.1);
  CHECK(export_dot(last, 0).find("L1U0 -> FUSED [label=\"0.50\"]") != std::string::npos);

  CHECK_THROWS_AS(export_dot(one, 1), UsageError);
}
