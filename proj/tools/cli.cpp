#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "checks.hpp"
#include "han/engine.hpp"
#include "han/error.hpp"
#include "han/gradients.hpp"
#include "han/io.hpp"
#include "han/scenarios.hpp"

namespace han::cli {

namespace fs = std::filesystem;

namespace {

struct ConfigFlags {
  std::string path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", path, "HanConfig JSON (keys L, N, C, H, W, G, k, c, H_r, seed)");
    cmd.add_option("--set", overrides, "override a config field, e.g. --set C=32")->take_all();
    cmd.add_option("--seed", seed, "seed (overrides the config)");
  }

  HanConfig resolve(HanConfig cfg = {}) const {
    if (!path.empty()) cfg = config_from_json(nlohmann::json::parse(read_text(path)));
    for (const auto& o : overrides) apply_override(cfg, o);
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

ModalityPair read_pair(const fs::path& rgb, const fs::path& tir) {
  ModalityPair p{read_tensor(rgb), read_tensor(tir)};
  require_feature_map(p.rgb, "rgb");
  require_same_shape(p.rgb, p.tir, "rgb/tir");
  return p;
}

void print_gate_summary(const RouteTensor& gates, std::ostream& out) {
  for (std::size_t l = 0; l < gates.layers(); ++l) {
    double lo = 1.0, hi = 0.0, sum = 0.0;
    const std::size_t n = gates.units();
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = gates.at(l, j, i);
        lo = std::min(lo, g);
        hi = std::max(hi, g);
        sum += g;
      }
    }
    out << "layer " << l << " gates: min " << fixed(lo) << " mean " << fixed(sum / double(n * n)) << " max "
        << fixed(hi) << "\n";
  }
}

// ---- init ----

struct InitFlags {
  ConfigFlags config;
  std::string out;
};

int cmd_init(const InitFlags& f, std::ostream& out) {
  const HanConfig cfg = f.config.resolve();
  write_params(f.out, init_params(cfg));
  out << "param_count " << param_count(cfg) << "\n";
  out << "flop_count " << flop_count(cfg) << "\n";
  return kExitOk;
}

// ---- forward ----

struct ForwardFlags {
  std::string params, rgb, tir, out, trace, replay;
  double threshold = kDefaultEdgeThreshold;
};

int cmd_forward(const ForwardFlags& f, std::ostream& out) {
  const HanParams params = read_params(f.params);
  const ModalityPair input = read_pair(f.rgb, f.tir);
  const HanConfig cfg = infer_config(params, input.rgb.dim(1), input.rgb.dim(2));
  if (input.rgb.dim(0) != cfg.channels) {
    throw ShapeError("input has " + std::to_string(input.rgb.dim(0)) + " channels, params expect " +
                     std::to_string(cfg.channels));
  }

  ForwardResult res;
  if (f.replay.empty()) {
    res = han_forward(input, params, cfg, f.threshold);
  } else {
    const TraceFile recorded = read_trace(f.replay);
    if (recorded.frames.empty()) throw FormatError(0, "replay trace has no frames");
    const RouteTensor& gates = recorded.frames.front().gates;
    if (gates.layers() != cfg.layers || gates.units() != cfg.units) {
      throw ShapeError("replay trace gates do not match the params' layer count");
    }
    res = han_forward_replay(input, params, cfg, gates, f.threshold);
  }

  write_tensor(f.out, res.fused);
  if (!f.trace.empty()) write_trace(f.trace, TraceFile{cfg, {res.trace}});
  print_gate_summary(res.trace.gates, out);
  out << "active edges " << res.trace.active_edges.size() << " (threshold " << res.trace.edge_threshold << ")\n";
  return kExitOk;
}

// ---- trace ----

struct TraceFlags {
  std::string in, out, format = "summary";
  std::size_t frame = 0;
};

int cmd_trace(const TraceFlags& f, std::ostream& out) {
  const TraceFile trace = read_trace(f.in);
  if (f.frame >= trace.frames.size()) {
    throw UsageError("frame " + std::to_string(f.frame) + " out of range, trace has " +
                     std::to_string(trace.frames.size()));
  }
  std::string text;
  if (f.format == "dot") {
    text = export_dot(trace, f.frame);
  } else {
    std::ostringstream os;
    const RoutingTrace& fr = trace.frames[f.frame];
    os << "frames " << trace.frames.size() << ", L=" << trace.config.layers << " N=" << trace.config.units << "\n";
    print_gate_summary(fr.gates, os);
    os << "active edges " << fr.active_edges.size() << " (threshold " << fr.edge_threshold << ")\n";
    for (const Edge& e : fr.active_edges) {
      os << "  L" << e.layer << "U" << e.from << " -> ";
      if (e.layer + 1 < trace.config.layers) {
        os << "L" << e.layer + 1 << "U" << e.to;
      } else {
        os << "FUSED";
      }
      os << " " << fixed(fr.gates.at(e.layer, e.from, e.to), 2) << "\n";
    }
    text = os.str();
  }
  if (f.out.empty()) {
    out << text;
  } else {
    write_text_atomic(f.out, text);
  }
  return kExitOk;
}

// ---- check ----

struct CheckFlags {
  std::string level = "fast";
  std::string params;
  unsigned jobs = 1;
};

int cmd_check(const CheckFlags& f, std::ostream& out) {
  CheckOptions opts;
  opts.level = f.level == "full" ? CheckLevel::Full : CheckLevel::Fast;
  if (!f.params.empty()) opts.params = f.params;
  opts.jobs = std::max(1u, f.jobs);
  const auto results = run_checks(opts, out);
  std::vector<std::string> failed;
  for (const auto& r : results) {
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) {
    out << "all " << results.size() << " suites passed\n";
    return kExitOk;
  }
  out << failed.size() << " of " << results.size() << " suites failed:";
  for (const auto& n : failed) out << " " << n;
  out << "\n";
  return kExitCheckFailed;
}

// ---- train-demo ----

struct TrainFlags {
  ConfigFlags config;
  TrainConfig train;
  std::size_t per_class = 4;
  std::string out;
};

int cmd_train_demo(const TrainFlags& f, std::ostream& out) {
  HanConfig cfg = f.config.resolve(demo_config());
  ClassCounts counts;
  for (ScenarioClass c : kAllScenarioClasses) counts.emplace_back(c, f.per_class);
  TrainConfig tcfg = f.train;
  if (f.config.seed) tcfg.seed = *f.config.seed;
  cfg.seed = tcfg.seed;

  const TrainResult res = train_demo(make_dataset(counts, cfg, tcfg.seed), cfg, tcfg);

  nlohmann::json doc;
  doc["config"] = config_to_json(cfg);
  doc["step_size"] = tcfg.step_size;
  doc["steps"] = tcfg.steps;
  doc["seed"] = tcfg.seed;
  doc["loss"] = res.loss_curve;
  doc["smoothed_loss"] = res.smoothed_curve;
  doc["diverged"] = res.diverged;
  if (res.diverged) doc["diverged_at"] = res.diverged_at;
  nlohmann::json gates = nlohmann::json::object();
  for (const auto& [cls, g] : res.mean_gates) {
    gates[std::string(scenario_name(cls))] = std::vector<double>(g.values().begin(), g.values().end());
  }
  doc["mean_gates"] = gates;
  if (!f.out.empty()) write_text_atomic(f.out, doc.dump(2) + "\n");

  if (res.diverged) {
    out << "diverged at step " << res.diverged_at << "\n";
    return kExitCheckFailed;
  }
  out << "loss " << fixed(res.loss_curve.front()) << " -> " << fixed(res.loss_curve.back()) << " over "
      << tcfg.steps << " steps\n";
  for (const auto& [cls, g] : res.mean_gates) {
    double sum = 0.0;
    for (double v : g.values()) sum += v;
    out << "  " << scenario_name(cls) << ": mean gate " << fixed(sum / double(g.values().size())) << "\n";
  }
  const auto tir = res.mean_gates.find(ScenarioClass::NoisyTir);
  const auto rgb = res.mean_gates.find(ScenarioClass::NoisyRgb);
  if (tir != res.mean_gates.end() && rgb != res.mean_gates.end()) {
    out << "noisy-tir vs noisy-rgb gate L1 " << fixed(l1_distance(tir->second, rgb->second)) << "\n";
  }
  return kExitOk;
}

// ---- bench ----

struct BenchFlags {
  ConfigFlags config;
  std::size_t runs = 30;
};

int cmd_bench(const BenchFlags& f, std::ostream& out) {
  const HanConfig cfg = f.config.resolve();
  const HanParams params = init_params(cfg);
  const Scenario s = generate(ScenarioClass::CleanBoth, cfg, cfg.seed);
  std::vector<double> ms;
  for (std::size_t n = 0; n < std::max<std::size_t>(1, f.runs); ++n) {
    const auto start = std::chrono::steady_clock::now();
    const ForwardResult r = han_forward(s.input, params, cfg);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
    if (r.fused.empty()) return kExitCheckFailed;
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t m = ms.size();
  const double median = m % 2 ? ms[m / 2] : 0.5 * (ms[m / 2 - 1] + ms[m / 2]);
  out << "forward L=" << cfg.layers << " C=" << cfg.channels << " H=" << cfg.height << " W=" << cfg.width << ": median "
      << fixed(median, 3) << " ms over " << m << " runs (min " << fixed(ms.front(), 3) << ", max "
      << fixed(ms.back(), 3) << ")\n";
  out << "flop_count " << flop_count(cfg) << "\n";
  return kExitOk;
}

// ---- synth ----

struct SynthFlags {
  ConfigFlags config;
  std::vector<std::string> counts;
  std::string out;
};

ClassCounts parse_counts(const std::vector<std::string>& specs) {
  if (specs.empty()) return demo_counts();
  ClassCounts counts;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    const auto cls = parse_scenario_class(s.substr(0, eq));
    if (eq == std::string::npos || !cls) throw UsageError("--count expects class=n, got '" + s + "'");
    std::size_t n = 0;
    try {
      n = std::stoul(s.substr(eq + 1));
    } catch (const std::exception&) {
      throw UsageError("--count expects class=n, got '" + s + "'");
    }
    counts.emplace_back(*cls, n);
  }
  return counts;
}

int cmd_synth(const SynthFlags& f, std::ostream& out) {
  const HanConfig cfg = f.config.resolve();
  const auto data = make_dataset(parse_counts(f.counts), cfg, cfg.seed);
  const fs::path dir = f.out;
  fs::create_directories(dir);

  nlohmann::json items = nlohmann::json::array();
  char stem[64];
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Scenario& s = data[n];
    std::snprintf(stem, sizeof stem, "%04zu_%s", n, std::string(scenario_name(s.cls)).c_str());
    const std::string base(stem);
    write_tensor(dir / (base + ".rgb.ftns"), s.input.rgb);
    write_tensor(dir / (base + ".tir.ftns"), s.input.tir);
    write_tensor(dir / (base + ".target.ftns"), s.target);
    items.push_back({{"class", scenario_name(s.cls)},
                     {"seed", s.seed},
                     {"rgb", base + ".rgb.ftns"},
                     {"tir", base + ".tir.ftns"},
                     {"target", base + ".target.ftns"}});
  }
  nlohmann::json manifest{{"config", config_to_json(cfg)}, {"scenarios", items}};
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  out << "wrote " << data.size() << " scenarios to " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical attention fusion engine"};
  app.name(args.empty() ? "han" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  InitFlags init;
  auto* c_init = app.add_subcommand("init", "write freshly initialized parameters");
  init.config.attach(*c_init);
  c_init->add_option("--out", init.out, "params file to write")->required();

  ForwardFlags fwd;
  auto* c_fwd = app.add_subcommand("forward", "fuse one rgb/tir feature pair");
  c_fwd->add_option("--params", fwd.params, "params file")->required();
  c_fwd->add_option("--rgb", fwd.rgb, "rgb tensor file")->required();
  c_fwd->add_option("--tir", fwd.tir, "tir tensor file")->required();
  c_fwd->add_option("--out", fwd.out, "fused tensor file to write")->required();
  c_fwd->add_option("--trace", fwd.trace, "routing trace JSON to write");
  c_fwd->add_option("--replay", fwd.replay, "reuse the gates of a recorded trace");
  c_fwd->add_option("--threshold", fwd.threshold, "active-edge gate threshold")->check(CLI::Range(0.0, 1.0));

  TraceFlags tr;
  auto* c_trace = app.add_subcommand("trace", "render a routing trace");
  c_trace->add_option("--in", tr.in, "trace JSON")->required();
  c_trace->add_option("--format", tr.format, "dot or summary")->check(CLI::IsMember({"dot", "summary"}));
  c_trace->add_option("--frame", tr.frame, "frame index");
  c_trace->add_option("--out", tr.out, "write here instead of stdout");

  CheckFlags chk;
  auto* c_check = app.add_subcommand("check", "run the invariant and gradient suites");
  c_check->add_option("--level", chk.level, "fast or full")->check(CLI::IsMember({"fast", "full"}));
  c_check->add_option("--params", chk.params, "also validate this params file");
  c_check->add_option("--jobs", chk.jobs, "threads for finite differences");

  TrainFlags trn;
  auto* c_train = app.add_subcommand("train-demo", "train on the synthetic scenario set");
  trn.config.attach(*c_train);
  c_train->add_option("--steps", trn.train.steps, "gradient steps");
  c_train->add_option("--step-size", trn.train.step_size, "learning rate")->check(CLI::NonNegativeNumber);
  c_train->add_option("--per-class", trn.per_class, "scenarios per class");
  c_train->add_option("--out", trn.out, "loss curve and gate report JSON");

  BenchFlags bench;
  auto* c_bench = app.add_subcommand("bench", "time the forward pass");
  bench.config.attach(*c_bench);
  c_bench->add_option("--runs", bench.runs, "timed runs");

  SynthFlags syn;
  auto* c_synth = app.add_subcommand("synth", "emit a synthetic scenario set");
  syn.config.attach(*c_synth);
  c_synth->add_option("--count", syn.counts, "class=n, repeatable (default 4 of each class)")->take_all();
  c_synth->add_option("--out", syn.out, "output directory")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("han");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (c_init->parsed()) return cmd_init(init, out);
    if (c_fwd->parsed()) return cmd_forward(fwd, out);
    if (c_trace->parsed()) return cmd_trace(tr, out);
    if (c_check->parsed()) return cmd_check(chk, out);
    if (c_train->parsed()) return cmd_train_demo(trn, out);
    if (c_bench->parsed()) return cmd_bench(bench, out);
    if (c_synth->parsed()) return cmd_synth(syn, out);
  } catch (const ConfigError& e) {
    err << "error: config field " << e.field() << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: format: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: shape: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "error: numeric: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const nlohmann::json::exception& e) {
    err << "error: json: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace han::cli
