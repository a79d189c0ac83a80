#include "checks.hpp"

#include <chrono>
#include <cstdio>
#include <set>
#include <sstream>

#include "han/engine.hpp"
#include "han/error.hpp"
#include "han/fusion_units.hpp"
#include "han/gradients.hpp"
#include "han/io.hpp"
#include "han/rng.hpp"
#include "han/router.hpp"
#include "han/scenarios.hpp"

namespace han::cli {

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

FeatureMap random_map(std::size_t c, std::size_t h, std::size_t w, Rng& rng, double scale = 1.0) {
  FeatureMap f = make_feature_map(c, h, w);
  for (double& v : f.values()) v = rng.uniform(-scale, scale);
  return f;
}

ModalityPair random_input(const HanConfig& cfg, Rng& rng, double scale = 1.0) {
  return {random_map(cfg.channels, cfg.height, cfg.width, rng, scale),
          random_map(cfg.channels, cfg.height, cfg.width, rng, scale)};
}

HanConfig small_config(std::size_t layers = 2) {
  HanConfig cfg;
  cfg.layers = layers;
  cfg.channels = 8;
  cfg.height = 3;
  cfg.width = 3;
  cfg.groups = 4;
  cfg.kernel_size = 3;
  cfg.inner_width = 4;
  return cfg;
}

void expect(SuiteResult& r, bool ok, const std::string& what) {
  if (!ok) {
    r.passed = false;
    r.failures.push_back(what);
  }
}

SuiteResult gate_range(std::size_t draws) {
  SuiteResult r;
  Rng rng(derive_seed(0x6a7e, draws));
  std::size_t gates = 0;
  double lo = 1.0, hi = 0.0;
  for (std::size_t n = 0; n < draws; ++n) {
    const std::size_t c = 1 + rng.below(8);
    const std::size_t h = 1 + rng.below(4);
    const std::size_t w = 1 + rng.below(4);
    const double scale = n % 4 == 0 ? 50.0 : 2.0;  // every fourth draw saturates
    RouterParams p = make_router_params(c, std::max<std::size_t>(c, kUnitsPerLayer), kUnitsPerLayer);
    for (Tensor* t : {&p.w1, &p.b1, &p.w2, &p.b2}) {
      for (double& v : t->values()) v = rng.uniform(-scale, scale);
    }
    const ModalityPair x{random_map(c, h, w, rng, scale), random_map(c, h, w, rng, scale)};
    const Tensor g = router_forward(x, p);
    for (double v : g.values()) {
      ++gates;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      if (!(v >= 0.0 && v < 1.0)) {
        expect(r, false, "gate " + fmt("%.17g", v) + " outside [0, 1)");
        return r;
      }
    }
  }
  r.notes.push_back(std::to_string(gates) + " gates over " + std::to_string(draws) + " draws, range [" +
                    fmt("%.6g", lo) + ", " + fmt("%.17g", hi) + "]");

  const HanConfig cfg = small_config(3);
  HanParams params = random_params(cfg, 11);
  for (auto& lp : params.layers) {
    for (auto& router : lp.routers) router = zeros_like(router);
  }
  const ForwardTape tape = record_forward(random_input(cfg, rng), params, cfg);
  bool zero_gates = true, zero_inputs = true;
  for (double v : tape.gates.values()) zero_gates = zero_gates && v == 0.0;
  for (std::size_t l = 1; l < cfg.layers; ++l) {
    for (const auto& p : tape.inputs[l]) {
      zero_inputs = zero_inputs && frobenius_norm(p.rgb) == 0.0 && frobenius_norm(p.tir) == 0.0;
    }
  }
  expect(r, zero_gates, "zero router parameters gave a nonzero gate");
  expect(r, zero_inputs, "zero router parameters gave a nonzero input past layer 0");
  return r;
}

SuiteResult unit_identities() {
  SuiteResult r;
  Rng rng(101);
  const FeatureMap f = random_map(8, 3, 3, rng);
  const FeatureMap kv = random_map(8, 3, 3, rng);

  CmeuParams cp = make_cmeu_params(8, 4);
  for (Tensor* t : {&cp.wq, &cp.wk, &cp.wo}) {
    for (double& v : t->values()) v = rng.uniform(-1, 1);
  }
  expect(r, cmeu_forward(f, kv, cp) == f, "cross-modal unit with zero value projection is not a pure residual");

  FeatureMap half = f;
  half *= 0.5;
  expect(r, ceu_forward(f, CeuParams{Tensor({3})}) == half, "channel unit with zero kernel is not 0.5 * input");

  FeatureMap flat = make_feature_map(8, 3, 3);
  flat.fill(1.25);
  FeatureMap flat_half = flat;
  flat_half *= 0.5;
  expect(r, seu_forward(flat, make_seu_params(4), 4) == flat_half,
         "spatial unit on constant input is not 0.5 * input");

  const std::vector<ModalityPair> prev{{f, kv}, {kv, f}, {f, f}, {kv, kv}};
  Tensor eye({kUnitsPerLayer, kUnitsPerLayer});
  for (std::size_t i = 0; i < kUnitsPerLayer; ++i) eye(i, i) = 1.0;
  const auto agg = aggregate_inputs(1, prev, eye);
  bool same = true;
  for (std::size_t i = 0; i < kUnitsPerLayer; ++i) same = same && agg[i].rgb == prev[i].rgb && agg[i].tir == prev[i].tir;
  expect(r, same, "identity gates do not select the matching previous output");
  return r;
}

SuiteResult accounting() {
  SuiteResult r;
  HanConfig cfg;
  std::uint64_t per_layer = 0;
  for (std::size_t l = 1; l <= 4; ++l) {
    cfg.layers = l;
    const std::uint64_t n = param_count(cfg);
    if (l == 1) per_layer = n;
    expect(r, n == l * per_layer, "param_count(L=" + std::to_string(l) + ") = " + std::to_string(n) +
                                      " is not " + std::to_string(l) + " x " + std::to_string(per_layer));
  }
  cfg.layers = 1;
  const std::uint64_t static1 = param_count(cfg, false);
  cfg.layers = 3;
  const std::uint64_t static3 = param_count(cfg, false);
  expect(r, static3 == 3 * static1, "router-free count L=3 : L=1 is not exactly 3");
  r.notes.push_back("C=" + std::to_string(cfg.channels) + " H=" + std::to_string(cfg.height) +
                    " W=" + std::to_string(cfg.width) + ": " + std::to_string(per_layer) +
                    " params per layer, router-free L=3 : L=1 = " + std::to_string(static3) + " : " +
                    std::to_string(static1));
  r.notes.push_back(
      "absolute match to the published 7.89M parameters: out of scope, the fusion-stage C, H, W are unpublished");
  return r;
}

SuiteResult static_edges() {
  SuiteResult r;
  const HanConfig cfg = small_config(3);
  const HanParams params = random_params(cfg, 21);
  Rng rng(22);
  const auto reference = active_edges(static_gates(cfg), kDefaultEdgeThreshold);
  std::set<std::vector<Edge>> dynamic;
  for (int n = 0; n < 20; ++n) {
    const ModalityPair x = random_input(cfg, rng, 1.0 + n);
    const ForwardTape tape = record_forward(x, params, cfg, nullptr);
    RouteTensor forced = static_gates(cfg);
    const ForwardTape fixed = record_forward(x, params, cfg, &forced);
    expect(r, active_edges(fixed.gates, kDefaultEdgeThreshold) == reference, "static edge set changed with the input");
    dynamic.insert(make_trace(tape).active_edges);
    if (!r.passed) break;
  }
  r.notes.push_back(std::to_string(dynamic.size()) + " distinct routed edge sets over 20 inputs");
  return r;
}

SuiteResult replay_and_formats() {
  SuiteResult r;
  const HanConfig cfg = small_config(3);
  const HanParams params = random_params(cfg, 31);
  Rng rng(32);
  for (int n = 0; n < 10; ++n) {
    const ModalityPair x = random_input(cfg, rng);
    const ForwardResult live = han_forward(x, params, cfg);
    const TraceFile doc{cfg, {live.trace}};
    const TraceFile back = trace_from_json(nlohmann::json::parse(trace_to_json(doc).dump()));
    expect(r, back.frames.at(0).gates == live.trace.gates, "trace JSON round trip changed a gate");
    const ForwardResult replayed = han_forward_replay(x, params, cfg, back.frames.at(0).gates);
    expect(r, replayed.fused == live.fused, "replayed fused output differs from the live one");

    const Bytes tb = encode_tensor(live.fused);
    expect(r, decode_tensor(tb) == live.fused, "tensor round trip is not bit-exact");
    if (!r.passed) return r;
  }
  const Bytes pb = encode_params(params);
  expect(r, encode_params(decode_params(pb)) == pb, "params round trip is not byte-identical");
  return r;
}

SuiteResult determinism() {
  SuiteResult r;
  const HanConfig cfg = demo_config();
  expect(r, encode_params(init_params(cfg)) == encode_params(init_params(cfg)), "init is not deterministic");
  const auto a = make_dataset(demo_counts(), cfg, 5);
  const auto b = make_dataset(demo_counts(), cfg, 5);
  bool same = a.size() == b.size();
  for (std::size_t n = 0; same && n < a.size(); ++n) {
    same = a[n].input.rgb == b[n].input.rgb && a[n].input.tir == b[n].input.tir && a[n].target == b[n].target;
  }
  expect(r, same, "datasets from the same seed differ");
  return r;
}

SuiteResult params_file(const std::filesystem::path& path) {
  SuiteResult r;
  try {
    const HanParams params = read_params(path);
    const HanConfig cfg = infer_config(params, 4, 4);
    Rng rng(41);
    const ForwardResult res = han_forward(random_input(cfg, rng), params, cfg);
    r.notes.push_back(path.string() + ": L=" + std::to_string(cfg.layers) + " C=" + std::to_string(cfg.channels) +
                      ", " + std::to_string(param_count(cfg)) + " params");
    expect(r, res.fused.all_finite(), "forward pass produced non-finite values");
  } catch (const FormatError& e) {
    expect(r, false, std::string("format error: ") + e.what());
  } catch (const Error& e) {
    expect(r, false, e.what());
  }
  return r;
}

SuiteResult gradient(unsigned jobs) {
  SuiteResult r;
  HanConfig cfg = demo_config();
  double worst = 0.0, worst_abs = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    cfg.seed = seed;
    const GradientComparison cmp = gradient_check(cfg, seed, 1e-5, jobs);
    worst = std::max(worst, cmp.max_relative_error);
    worst_abs = std::max(worst_abs, cmp.max_absolute_error);
    if (!(cmp.max_relative_error < 1e-5)) {
      std::ostringstream os;
      os << "seed " << seed << ": relative error " << cmp.max_relative_error << " at " << cmp.worst_param << "["
         << cmp.worst_index << "] (analytic " << cmp.analytic << ", numeric " << cmp.numeric << ")";
      expect(r, false, os.str());
    }
  }
  r.notes.push_back("max relative error over 10 seeds " + fmt("%.3g", worst) + " (threshold 1e-5), max absolute error " +
                    fmt("%.3g", worst_abs));
  return r;
}

SuiteResult training() {
  SuiteResult r;
  const HanConfig cfg = demo_config();
  const TrainConfig tcfg;
  const TrainResult res = train_demo(make_dataset(demo_counts(), cfg, tcfg.seed), cfg, tcfg);
  if (res.diverged) {
    expect(r, false, "diverged at step " + std::to_string(res.diverged_at));
    return r;
  }
  const double ratio = res.loss_curve.back() / res.loss_curve.front();
  const double l1 =
      l1_distance(res.mean_gates.at(ScenarioClass::NoisyTir), res.mean_gates.at(ScenarioClass::NoisyRgb));
  r.notes.push_back("loss " + fmt("%.4g", res.loss_curve.front()) + " -> " + fmt("%.4g", res.loss_curve.back()) +
                    ", noisy-tir vs noisy-rgb gate L1 " + fmt("%.4g", l1));
  expect(r, ratio <= 0.5, "final loss above half the initial loss");
  expect(r, l1 > 0.05, "noisy-tir and noisy-rgb gates are not separated");
  return r;
}

}  // namespace

std::vector<SuiteResult> run_checks(const CheckOptions& opts, std::ostream& out) {
  const bool full = opts.level == CheckLevel::Full;
  std::vector<std::pair<std::string, std::function<SuiteResult()>>> suites{
      {"gate-range", [&] { return gate_range(full ? 10000 : 500); }},
      {"unit-identities", unit_identities},
      {"accounting", accounting},
      {"static-edges", static_edges},
      {"replay", replay_and_formats},
      {"determinism", determinism},
  };
  if (opts.params) suites.emplace_back("params-file", [&] { return params_file(*opts.params); });
  if (full) {
    suites.emplace_back("gradient", [&] { return gradient(opts.jobs); });
    suites.emplace_back("training", training);
  }

  std::vector<SuiteResult> results;
  for (const auto& [name, suite] : suites) {
    const auto start = std::chrono::steady_clock::now();
    SuiteResult r;
    try {
      r = suite();
    } catch (const std::exception& e) {
      r.passed = false;
      r.failures.push_back(std::string("exception: ") + e.what());
    }
    r.name = name;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << fmt("%.2f", secs) << " s)\n";
    for (const auto& n : r.notes) out << "  " << n << "\n";
    for (const auto& f : r.failures) out << "  failure: " << f << "\n";
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace han::cli
