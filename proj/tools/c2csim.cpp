// c2csim: trace generation, profiling, calibration, simulation runs and sweeps.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "c2csim/sim_engine.hpp"

namespace fs = std::filesystem;
using namespace c2c;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kIo = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string default_out_dir() {
  if (const char* env = std::getenv("C2CSIM_OUT"); env && *env) return env;
  return "out";
}

fs::path prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
  return fs::path(dir);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

void close_out(std::ofstream& f, const fs::path& p) {
  f.close();
  if (!f) throw IoError("failed writing " + p.string());
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Options shared by the hardware-facing subcommands.
struct ChipOptions {
  std::string chip = "gh200";
  std::string chip_file;
  std::string repo_file;

  void add(CLI::App* app) {
    app->add_option("--chip", chip, "Superchip profile name (gh200, gb200, rubin or one from --chip-file)");
    app->add_option("--chip-file", chip_file, "INI file with extra chip profiles");
  }
  void add_repo(CLI::App* app) {
    app->add_option("--repo", repo_file, "Kernel repository file written by `calibrate`");
  }
  SuperchipProfile profile() const {
    if (chip_file.empty()) return builtin_profile(chip);
    std::ifstream f(chip_file);
    if (!f) throw IoError("cannot read chip file " + chip_file);
    return resolve_profile(chip, load_profiles(f));
  }
  KernelRepository repository(const SuperchipProfile& p) const {
    return repo_file.empty() ? default_repository(p) : load_repository(repo_file);
  }
  std::string describe() const { return "chip=" + chip + " chip_file=" + chip_file + " repo=" + repo_file; }
};

// Options shared by `run` and `sweep`.
struct SimOptions {
  std::string trace_file;
  std::optional<std::uint64_t> seed;
  double duration_s = 1800;
  ControllerParams controller;
  bool no_controller = false;
  std::vector<int> chunks{256, 512, 1024, 2048, 4096, 8192};

  void add(CLI::App* app) {
    app->add_option("--trace", trace_file, "Trace CSV; without it the contended workload is generated");
    app->add_option("--seed", seed, "Generator seed (required without --trace)");
    app->add_option("--duration", duration_s, "Generated trace length in seconds")->check(CLI::PositiveNumber);
    app->add_option("--controller.tau", controller.tau, "Controller dead band");
    app->add_option("--controller.eta-fast", controller.eta_fast, "Controller step when over budget");
    app->add_option("--controller.eta-slow", controller.eta_slow, "Controller step when within budget");
    app->add_flag("--no-controller", no_controller, "Keep every kernel at its profiled ratio");
    app->add_option("--chunk-candidates", chunks, "Comma-separated prefill chunk sizes")->delimiter(',');
  }

  Workload workload() const {
    if (!trace_file.empty()) {
      Workload w;
      w.trace = load_trace(trace_file);
      w.catalog = resolve_catalog(w.trace, default_catalog());
      return w;
    }
    if (!seed) throw UsageError("either --trace or --seed is required");
    return contended_workload(*seed, duration_s);
  }

  RunConfig config() const {
    RunConfig c;
    c.controller = controller;
    c.controller_enabled = !no_controller;
    c.chunk_candidates = chunks;
    std::sort(c.chunk_candidates.begin(), c.chunk_candidates.end());
    c.seed = seed.value_or(0);
    return c;
  }

  std::string source() const {
    return trace_file.empty() ? "generated duration=" + format_double(duration_s)
                              : "trace=" + fs::path(trace_file).filename().string();
  }
};

int cmd_gen_trace(int models, double days, std::uint64_t seed, const std::string& preset,
                  const std::string& out_dir, const std::string& name) {
  const double duration = days * 86400;
  Trace trace;
  if (preset == "contended") {
    trace = contended_workload(seed, duration).trace;
  } else {
    trace = generate_trace(variant_catalog(models), duration, seed);
  }
  const std::string config = "gen-trace preset=" + preset + " models=" + std::to_string(models) +
                             " days=" + format_double(days) + " seed=" + std::to_string(seed);
  const auto dir = prepare_dir(out_dir);
  save_trace(trace, (dir / name).string(), config);

  const auto stats = trace_stats(trace, 3600, duration);
  nlohmann::json j;
  j["tool"] = std::string("c2csim ") + std::string(kToolVersion);
  j["config_hash"] = hex64(fnv1a(config));
  j["requests"] = trace.size();
  j["bucket_s"] = 3600;
  j["bucket_count"] = stats.bucket_count;
  j["median_idle_fraction"] = stats.median_idle_fraction;
  j["long_tail_fraction"] = stats.long_tail_fraction;
  j["empty"] = stats.empty;
  j["per_model_active_hour_fraction"] = stats.per_model_active_hour_fraction;
  const auto sidecar = dir / (fs::path(name).stem().string() + ".stats.json");
  auto f = open_out(sidecar);
  f << j.dump(2) << '\n';
  close_out(f, sidecar);

  std::cout << trace.size() << " requests -> " << (dir / name).string() << '\n'
            << "median idle fraction " << stats.median_idle_fraction << ", long-tail fraction "
            << stats.long_tail_fraction << '\n';
  return kOk;
}

int cmd_profile(const ChipOptions& co, std::vector<int> migs, std::optional<double> ttft,
                std::vector<int> chunks, const std::string& out_dir) {
  const auto chip = co.profile();
  const auto repo = co.repository(chip);
  if (migs.empty())
    for (const auto& m : chip.mig_table) migs.push_back(m.instance_count);
  std::sort(chunks.begin(), chunks.end());
  ProfilingOptions po;
  po.candidate_chunks = chunks;
  po.ttft_slo = ttft;
  po.per_layer_overhead_s = RunConfig{}.per_layer_overhead_s;
  const auto table = build_profiling_table(default_catalog(), chip, migs, repo, po);
  const std::string config = "profile " + co.describe() + " mig=" + join(migs) + " chunks=" +
                             join(chunks) + " ttft=" + (ttft ? format_double(*ttft) : "model");
  const auto path = prepare_dir(out_dir) / "profiling_table.txt";
  save_profiling_table(table, path.string(), config);

  std::size_t infeasible = 0;
  for (const auto& e : table.entries)
    if (!e.feasible) {
      if (!infeasible++) std::cout << "infeasible (model, MIG instances):\n";
      std::cout << "  " << e.model_id << ", " << e.mig_instances << "  best TTFT "
                << e.predicted_ttft << " s at chunk " << e.chunk_size << '\n';
    }
  std::cout << table.entries.size() << " entries, " << infeasible << " infeasible -> " << path.string()
            << '\n';
  return kOk;
}

int cmd_calibrate(const ChipOptions& co, const std::string& out_dir) {
  const auto target = co.profile();
  const auto res = calibrate(CalibrationAnchors{}, builtin_profile("gh200"), target);
  const auto path = prepare_dir(out_dir) / "kernel_repository.txt";
  save_repository(res.repository, path.string(), "calibrate " + co.describe());
  std::cout << "sym  C2C " << res.sym.c2c_bytes / GB << " GB, HBM " << res.sym.hbm_bytes / GB
            << " GB, " << res.sym_latency_s * 1e3 << " ms\n"
            << "asym C2C " << res.asym.c2c_bytes / GB << " GB, HBM " << res.asym.hbm_bytes / GB
            << " GB, " << res.asym_latency_s * 1e3 << " ms\n"
            << "c2c efficiency " << res.repository.calibration.c2c_efficiency << ", hbm efficiency "
            << res.repository.calibration.hbm_efficiency << '\n'
            << res.repository.variants.size() << " variants -> " << path.string() << '\n';
  return kOk;
}

void write_run(const RunReport& r, const fs::path& dir, const std::string& config) {
  const std::pair<std::string, std::function<void(std::ostream&)>> files[] = {
      {"report.json", [&](std::ostream& o) {
         auto j = to_json(r, config);
         j["config"] = config;
         o << j.dump(2) << '\n';
       }},
      {"summary.txt", [&](std::ostream& o) { write_summary(r, o, config); }},
      {"requests.csv", [&](std::ostream& o) { write_records(r.records, o, config); }},
      {"utilization.csv", [&](std::ostream& o) { write_utilization_series(r.utilization, o, config); }},
      {"trajectory.csv", [&](std::ostream& o) { write_trajectory(r.trajectory, o, config); }},
  };
  for (const auto& [name, write] : files) {
    auto f = open_out(dir / name);
    write(f);
    close_out(f, dir / name);
  }
}

int cmd_run(const ChipOptions& co, const SimOptions& so, int mig, const std::string& policy,
            std::optional<double> alpha, const std::string& out_dir) {
  const auto chip = co.profile();
  const auto repo = co.repository(chip);
  const auto w = so.workload();
  RunConfig cfg = so.config();
  cfg.policy = parse_policy(policy);
  cfg.mig_instances = mig;
  cfg.keep_series = true;
  if (alpha) {
    cfg.fixed_alpha = alpha;
    cfg.controller_enabled = false;
  }
  const auto r = run(w.trace, w.catalog, chip, repo, cfg);
  const std::string config = "run " + describe(cfg, chip.name) + " " + co.describe() + " " + so.source();
  const auto dir = prepare_dir(out_dir);
  write_run(r, dir, config);
  write_summary(r, std::cout, config);
  return kOk;
}

struct SweepPoint {
  Policy policy;
  int mig;
  std::optional<double> alpha;
};

int cmd_sweep(const ChipOptions& co, const SimOptions& so, const std::vector<std::string>& policies,
              const std::vector<int>& migs, const std::vector<double>& alphas, int jobs,
              const std::string& out_dir) {
  const auto chip = co.profile();
  const auto repo = co.repository(chip);
  const auto w = so.workload();
  const RunConfig base = so.config();

  std::vector<SweepPoint> points;
  for (const auto& p : policies) {
    const Policy pol = parse_policy(p);
    for (int mig : migs) {
      mig_profile(chip, mig);
      if (pol == Policy::timeshare && mig != migs.front()) continue;  // always the whole GPU
      if (alphas.empty()) points.push_back({pol, mig, std::nullopt});
      for (double a : alphas) points.push_back({pol, mig, a});
    }
  }

  std::vector<std::optional<RunReport>> results(points.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::optional<std::pair<int, std::string>> failure;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < points.size();) {
      const auto& pt = points[i];
      const std::string ctx = std::string("policy=") + to_string(pt.policy) + " mig=" +
                              std::to_string(pt.mig) +
                              (pt.alpha ? " alpha=" + format_double(*pt.alpha) : "");
      int code = kFailure;
      std::string msg;
      try {
        RunConfig cfg = base;
        cfg.policy = pt.policy;
        cfg.mig_instances = pt.mig;
        if (pt.alpha) {
          cfg.fixed_alpha = pt.alpha;
          cfg.controller_enabled = false;
        }
        auto r = run(w.trace, w.catalog, chip, repo, cfg);
        r.records.clear();
        results[i] = std::move(r);
        continue;
      } catch (const IoError& e) {
        code = kIo;
        msg = e.what();
      } catch (const ConfigError& e) {
        code = kConfig;
        msg = e.what();
      } catch (const CapacityError& e) {
        code = kConfig;
        msg = e.what();
      } catch (const std::exception& e) {
        msg = e.what();
      }
      std::lock_guard lock(err_mu);
      if (!failure) failure = {code, "sweep run " + ctx + ": " + msg};
      next = points.size();
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(points.size())));
  std::vector<std::thread> pool;
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) {
    std::cerr << "c2csim: " << failure->second << '\n';
    return failure->first;
  }

  std::string config = "sweep " + co.describe() + " " + so.source() + " seed=" +
                       std::to_string(base.seed) + " chunks=" + join(base.chunk_candidates) +
                       " policies=";
  for (const auto& p : policies) config += p + ",";
  config += " mig=" + join(migs) + " alphas=";
  for (double a : alphas) config += format_double(a) + ",";

  const auto dir = prepare_dir(out_dir);
  const auto table = dir / "sweep.csv";
  auto f = open_out(table);
  f << file_header("sweep", config) << '\n'
    << "policy,mig,alpha,requests,served,rejected,oom,p95_ttft_s,p95_tpot_s,ttft_attainment,"
       "tpot_attainment,cold_start_mean_s,model_switch_mean_s,cold_starts,model_switches\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& r = *results[i];
    f << to_string(points[i].policy) << ',' << r.mig_instances << ','
      << (points[i].alpha ? format_double(*points[i].alpha) : "auto") << ',' << r.requests << ','
      << r.served << ',' << r.rejected << ',' << r.oom << ',' << format_double(r.p95_ttft) << ','
      << format_double(r.p95_tpot) << ',' << format_double(r.ttft_attainment) << ','
      << format_double(r.tpot_attainment) << ',' << format_double(r.cold_start_latency_mean) << ','
      << format_double(r.model_switch_latency_mean) << ',' << r.cold_starts << ','
      << r.model_switches << '\n';
  }
  close_out(f, table);

  // Pure output-stationary vs pure weight-stationary latency of the reference GEMM on one
  // instance of each partition, with that instance alone on the link.
  const auto kernels = dir / "kernel_latency.csv";
  auto k = open_out(kernels);
  k << file_header("kernel-latency", config) << '\n' << "mig,alpha,latency_s,bottleneck\n";
  const GemmWorkload shape = CalibrationAnchors{}.shape;
  for (int mig : migs)
    for (double a : {1.0, 0.0}) {
      const auto b = repository_latency(shape, a, chip, mig, repo);
      k << mig << ',' << format_double(a) << ',' << format_double(b.total()) << ','
        << to_string(b.bottleneck()) << '\n';
    }
  close_out(k, kernels);

  std::cout << points.size() << " runs -> " << table.string() << ", " << kernels.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"C2C-aware serverless LLM serving simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  std::string out_dir = default_out_dir();
  auto add_out = [&](CLI::App* sub) {
    sub->add_option("--out", out_dir, "Output directory (default $C2CSIM_OUT or ./out)");
  };

  auto* gen = app.add_subcommand("gen-trace", "Generate a synthetic request trace and its statistics");
  int models = 89;
  double days = 21;
  std::uint64_t gen_seed = 1;
  std::string preset = "default", name = "trace.csv";
  gen->add_option("--models", models, "Catalog size (default preset)")->check(CLI::Range(1, 1000000));
  gen->add_option("--days", days, "Trace length in days")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--preset", preset, "default or contended")->check(CLI::IsMember({"default", "contended"}));
  gen->add_option("--name", name, "Trace file name");
  add_out(gen);

  ChipOptions co;
  auto* prof = app.add_subcommand("profile", "Build the offline profiling table for the default catalog");
  co.add(prof);
  co.add_repo(prof);
  std::vector<int> prof_migs;
  std::optional<double> prof_ttft;
  std::vector<int> prof_chunks{256, 512, 1024, 2048, 4096, 8192};
  prof->add_option("--mig", prof_migs, "MIG instance counts (default: all)")->delimiter(',');
  prof->add_option("--ttft-slo", prof_ttft, "Override every model's TTFT target (s)")->check(CLI::PositiveNumber);
  prof->add_option("--chunk-candidates", prof_chunks, "Comma-separated prefill chunk sizes")->delimiter(',');
  add_out(prof);

  auto* cal = app.add_subcommand("calibrate", "Fit kernel constants to the reference GEMM and write the repository");
  co.add(cal);
  add_out(cal);

  SimOptions so;
  auto* runc = app.add_subcommand("run", "Replay one trace under one policy");
  co.add(runc);
  co.add_repo(runc);
  so.add(runc);
  int mig = 3;
  std::string policy = "c2cserve";
  std::optional<double> alpha;
  runc->add_option("--mig", mig, "MIG instance count");
  runc->add_option("--policy", policy, "c2cserve, dedicated, timeshare or mig_resident");
  runc->add_option("--alpha", alpha, "Fixed sym/asym ratio; disables the controller")->check(CLI::Range(0.0, 1.0));
  add_out(runc);

  auto* sw = app.add_subcommand("sweep", "Run the policy x MIG cross product and tabulate");
  co.add(sw);
  co.add_repo(sw);
  so.add(sw);
  std::vector<std::string> policies{"c2cserve", "dedicated", "timeshare", "mig_resident"};
  std::vector<int> migs{1, 3, 7};
  std::vector<double> alphas;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  sw->add_option("--policy", policies, "Comma-separated policies")->delimiter(',');
  sw->add_option("--mig", migs, "Comma-separated MIG instance counts")->delimiter(',');
  sw->add_option("--alpha", alphas, "Comma-separated fixed ratios (each disables the controller)")
      ->delimiter(',')
      ->check(CLI::Range(0.0, 1.0));
  sw->add_option("--jobs", jobs, "Parallel sub-runs")->check(CLI::PositiveNumber);
  add_out(sw);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen_trace(models, days, gen_seed, preset, out_dir, name);
    if (*prof) return cmd_profile(co, prof_migs, prof_ttft, prof_chunks, out_dir);
    if (*cal) return cmd_calibrate(co, out_dir);
    if (*runc) return cmd_run(co, so, mig, policy, alpha, out_dir);
    if (*sw) return cmd_sweep(co, so, policies, migs, alphas, jobs, out_dir);
  } catch (const UsageError& e) {
    std::cerr << "c2csim: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "c2csim: " << e.what() << '\n';
    return kIo;
  } catch (const ConfigError& e) {
    std::cerr << "c2csim: configuration error: " << e.what() << '\n';
    return kConfig;
  } catch (const ParseError& e) {
    std::cerr << "c2csim: malformed input: " << e.what() << '\n';
    return kConfig;
  } catch (const CapacityError& e) {
    std::cerr << "c2csim: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "c2csim: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}
