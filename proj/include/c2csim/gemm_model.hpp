#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "c2csim/common.hpp"
#include "c2csim/error.hpp"
#include "c2csim/hw_model.hpp"

namespace c2c {

enum class WeightLocation { cpu, hbm };
enum class Dataflow { sym, asym };
enum class Bottleneck { compute, hbm, c2c };

inline const char* to_string(Bottleneck b) {
  switch (b) {
    case Bottleneck::compute: return "compute";
    case Bottleneck::hbm: return "hbm";
    case Bottleneck::c2c: return "c2c";
  }
  return "?";
}

// O[m x n] = X[m x k] * W[k x n]. X and O live in HBM.
struct GemmWorkload {
  std::int64_t m = 1;
  std::int64_t k = 1;
  std::int64_t n = 1;
  int elem_bytes = 2;
  WeightLocation weight_location = WeightLocation::cpu;
};

struct KernelConfig {
  double alpha = 0;  // fraction of N on the symmetric path
  int t_m = 256;
  int t_n = 128;
  int t_k = 512;
  // Fraction of SMs on the symmetric path; follows alpha when unset.
  std::optional<double> sm_split;
};

struct TrafficEstimate {
  double c2c_bytes = 0;
  double hbm_bytes = 0;
  double flops = 0;

  TrafficEstimate& operator+=(const TrafficEstimate& o) {
    c2c_bytes += o.c2c_bytes;
    hbm_bytes += o.hbm_bytes;
    flops += o.flops;
    return *this;
  }
  friend TrafficEstimate operator+(TrafficEstimate a, const TrafficEstimate& b) { return a += b; }
  friend TrafficEstimate operator*(TrafficEstimate a, double s) {
    a.c2c_bytes *= s;
    a.hbm_bytes *= s;
    a.flops *= s;
    return a;
  }
  friend bool operator==(const TrafficEstimate&, const TrafficEstimate&) = default;
};

// Effective HBM re-read/re-write counts. gamma_x scales activation reads on the symmetric
// path, gamma_o scales output traffic on the asymmetric path. Each TMA reduction also pays
// a fixed `reduction_overhead_bytes`, which is what makes tall M-tiles cheaper.
struct GammaCoefficients {
  double gamma_x = 1;
  double gamma_o = 1;
  double reduction_overhead_bytes = 0;
};

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

inline void validate(const GemmWorkload& w) {
  if (w.m < 1 || w.k < 1 || w.n < 1) throw ModelError("GEMM dimensions must be >= 1");
  if (w.elem_bytes != 1 && w.elem_bytes != 2 && w.elem_bytes != 4)
    throw ModelError("elem_bytes must be 1, 2 or 4");
}

inline void validate(const KernelConfig& c) {
  if (!(c.alpha >= 0 && c.alpha <= 1)) throw ModelError("alpha must lie in [0, 1]");
  if (c.t_m < 1 || c.t_n < 1 || c.t_k < 1) throw ModelError("tile sizes must be >= 1");
  if (c.sm_split && !(*c.sm_split >= 0 && *c.sm_split <= 1))
    throw ModelError("sm_split must lie in [0, 1]");
}

// Gammas that make the analytic model reproduce the literal tile loop with no cache reuse.
inline GammaCoefficients structural_gammas(const GemmWorkload& w, const KernelConfig& c) {
  return {static_cast<double>(ceil_div(w.n, c.t_n)),
          static_cast<double>(2 * ceil_div(w.k, c.t_k) - 1), 0.0};
}

inline TrafficEstimate traffic_sym(const GemmWorkload& w, const KernelConfig& c,
                                   const GammaCoefficients& g) {
  validate(w);
  validate(c);
  const double e = w.elem_bytes;
  const double m = static_cast<double>(w.m), k = static_cast<double>(w.k), n = static_cast<double>(w.n);
  // Every M-tile row re-streams the whole weight matrix.
  const double weight_stream = static_cast<double>(ceil_div(w.m, c.t_m)) * k * n * e;
  TrafficEstimate t;
  t.flops = 2 * m * k * n;
  t.hbm_bytes = g.gamma_x * m * k * e + m * n * e;
  if (w.weight_location == WeightLocation::cpu) {
    t.c2c_bytes = weight_stream;
  } else {
    t.hbm_bytes += weight_stream;
  }
  return t;
}

inline TrafficEstimate traffic_asym(const GemmWorkload& w, const KernelConfig& c,
                                    const GammaCoefficients& g) {
  validate(w);
  validate(c);
  const double e = w.elem_bytes;
  const double m = static_cast<double>(w.m), k = static_cast<double>(w.k), n = static_cast<double>(w.n);
  const double reductions = static_cast<double>(ceil_div(w.m, c.t_m)) *
                            static_cast<double>(ceil_div(w.n, c.t_n)) *
                            static_cast<double>(ceil_div(w.k, c.t_k));
  TrafficEstimate t;
  t.flops = 2 * m * k * n;
  t.hbm_bytes = m * k * e + g.gamma_o * m * n * e + reductions * g.reduction_overhead_bytes;
  if (w.weight_location == WeightLocation::cpu) {
    t.c2c_bytes = k * n * e;
  } else {
    t.hbm_bytes += k * n * e;
  }
  return t;
}

struct HybridSplit {
  std::int64_t n_sym = 0;
  std::int64_t n_asym = 0;
};

inline HybridSplit split_columns(std::int64_t n, double alpha) {
  HybridSplit s;
  s.n_sym = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(alpha * static_cast<double>(n))), 0, n);
  s.n_asym = n - s.n_sym;
  return s;
}

struct HybridTraffic {
  TrafficEstimate sym;
  TrafficEstimate asym;
  TrafficEstimate total() const { return sym + asym; }
};

inline HybridTraffic traffic_hybrid_paths(const GemmWorkload& w, const KernelConfig& c,
                                          const GammaCoefficients& g) {
  validate(w);
  validate(c);
  const auto split = split_columns(w.n, c.alpha);
  HybridTraffic out;
  if (split.n_sym > 0) {
    GemmWorkload sub = w;
    sub.n = split.n_sym;
    out.sym = traffic_sym(sub, c, g);
  }
  if (split.n_asym > 0) {
    GemmWorkload sub = w;
    sub.n = split.n_asym;
    out.asym = traffic_asym(sub, c, g);
  }
  return out;
}

inline TrafficEstimate traffic_hybrid(const GemmWorkload& w, const KernelConfig& c,
                                      const GammaCoefficients& g) {
  return traffic_hybrid_paths(w, c, g).total();
}

// Resources of one MIG instance as the latency model sees them. hbm_bw is the achievable
// (efficiency-scaled) bandwidth.
struct InstanceResources {
  int sm_count = 1;
  double hbm_bw = kInf;
  double flops_per_sm = kInf;
};

struct LatencyBreakdown {
  double compute_sym = 0;
  double compute_asym = 0;
  double hbm = 0;
  double c2c = 0;
  int sm_sym = 0;
  int sm_asym = 0;
  TrafficEstimate traffic;

  double compute() const { return std::max(compute_sym, compute_asym); }
  // Everything except the C2C term.
  double local() const { return std::max(compute(), hbm); }
  double total() const { return std::max(local(), c2c); }
  Bottleneck bottleneck() const {
    const double c = compute();
    if (c2c > c && c2c > hbm) return Bottleneck::c2c;
    if (hbm > c) return Bottleneck::hbm;
    return Bottleneck::compute;
  }
};

// Both paths run concurrently on disjoint SMs. HBM bandwidth and the C2C share are split
// between the paths in proportion to their demand, so each memory term reduces to
// total bytes / total bandwidth.
inline LatencyBreakdown latency_breakdown(const GemmWorkload& w, const KernelConfig& c,
                                          const InstanceResources& res, double c2c_share,
                                          const GammaCoefficients& g) {
  if (!(c2c_share > 0)) throw ModelError("c2c_share must be positive");
  if (res.sm_count < 1) throw ModelError("instance has no SMs");
  const auto paths = traffic_hybrid_paths(w, c, g);
  const auto split = split_columns(w.n, c.alpha);
  LatencyBreakdown b;
  if (c.sm_split) {
    b.sm_sym = static_cast<int>(std::lround(*c.sm_split * res.sm_count));
    b.sm_asym = res.sm_count - b.sm_sym;
    if ((split.n_sym > 0 && b.sm_sym == 0) || (split.n_asym > 0 && b.sm_asym == 0))
      throw ModelError("sm_split leaves a non-empty GEMM path without SMs");
  } else if (split.n_sym == 0) {
    b.sm_asym = res.sm_count;
  } else if (split.n_asym == 0) {
    b.sm_sym = res.sm_count;
  } else {
    if (res.sm_count < 2) throw ModelError("hybrid GEMM needs at least two SMs");
    b.sm_sym = std::clamp(static_cast<int>(std::lround(c.alpha * res.sm_count)), 1, res.sm_count - 1);
    b.sm_asym = res.sm_count - b.sm_sym;
  }
  if (b.sm_sym > 0) b.compute_sym = paths.sym.flops / (b.sm_sym * res.flops_per_sm);
  if (b.sm_asym > 0) b.compute_asym = paths.asym.flops / (b.sm_asym * res.flops_per_sm);
  b.traffic = paths.total();
  b.hbm = b.traffic.hbm_bytes / res.hbm_bw;
  b.c2c = b.traffic.c2c_bytes / c2c_share;
  return b;
}

inline double latency(const GemmWorkload& w, const KernelConfig& c, const InstanceResources& res,
                      double c2c_share, const GammaCoefficients& g) {
  return latency_breakdown(w, c, res, c2c_share, g).total();
}

inline Bottleneck bottleneck(const GemmWorkload& w, const KernelConfig& c,
                             const InstanceResources& res, double c2c_share,
                             const GammaCoefficients& g) {
  return latency_breakdown(w, c, res, c2c_share, g).bottleneck();
}

// Byte counts from walking the tile loops of the two kernels literally, with reuse only
// inside shared memory and registers.
struct OracleCounts {
  double c2c_bytes = 0;
  double hbm_x_bytes = 0;
  double hbm_w_bytes = 0;
  double hbm_o_bytes = 0;
  double flops = 0;
  std::int64_t tile_visits = 0;

  TrafficEstimate traffic() const {
    return {c2c_bytes, hbm_x_bytes + hbm_w_bytes + hbm_o_bytes, flops};
  }
};

inline OracleCounts tiling_oracle(const GemmWorkload& w, const KernelConfig& c, Dataflow flow,
                                  std::int64_t max_tile_visits = 1'000'000) {
  validate(w);
  validate(c);
  const std::int64_t tm = ceil_div(w.m, c.t_m), tn = ceil_div(w.n, c.t_n), tk = ceil_div(w.k, c.t_k);
  if (tm * tn * tk > max_tile_visits)
    throw ModelError("tiling oracle: " + std::to_string(tm * tn * tk) + " tile visits exceed budget");
  auto extent = [](std::int64_t idx, std::int64_t tile, std::int64_t dim) {
    return static_cast<double>(std::min(tile, dim - idx * tile));
  };
  const double e = w.elem_bytes;
  OracleCounts out;
  auto load_w = [&](double bytes) {
    if (w.weight_location == WeightLocation::cpu) out.c2c_bytes += bytes;
    else out.hbm_w_bytes += bytes;
  };
  if (flow == Dataflow::sym) {
    // One output tile per iteration, accumulated in registers over K.
    for (std::int64_t i = 0; i < tm; ++i) {
      const double rm = extent(i, c.t_m, w.m);
      for (std::int64_t j = 0; j < tn; ++j) {
        const double rn = extent(j, c.t_n, w.n);
        for (std::int64_t l = 0; l < tk; ++l) {
          const double rk = extent(l, c.t_k, w.k);
          out.hbm_x_bytes += rm * rk * e;
          load_w(rk * rn * e);
          out.flops += 2 * rm * rk * rn;
          ++out.tile_visits;
        }
        out.hbm_o_bytes += rm * rn * e;
      }
    }
  } else {
    // One pinned weight tile, swept over all M tiles; partial outputs reduced into HBM.
    std::vector<char> touched(static_cast<std::size_t>(tm * tn), 0);
    for (std::int64_t j = 0; j < tn; ++j) {
      const double rn = extent(j, c.t_n, w.n);
      for (std::int64_t l = 0; l < tk; ++l) {
        const double rk = extent(l, c.t_k, w.k);
        load_w(rk * rn * e);
        for (std::int64_t i = 0; i < tm; ++i) {
          const double rm = extent(i, c.t_m, w.m);
          out.hbm_x_bytes += rm * rk * e;
          out.flops += 2 * rm * rk * rn;
          auto& first = touched[static_cast<std::size_t>(i * tn + j)];
          out.hbm_o_bytes += (first ? 2.0 : 1.0) * rm * rn * e;  // read-modify-write after the first
          first = 1;
          ++out.tile_visits;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernel repository and calibration
// ---------------------------------------------------------------------------

// Achievable fractions of nominal bandwidth for zero-copy C2C streaming and for HBM
// traffic dominated by TMA reductions.
struct KernelCalibration {
  double c2c_efficiency = 1;
  double hbm_efficiency = 1;
};

inline std::string shape_class(std::int64_t k, std::int64_t n) {
  if (n >= 2 * k) return "wide";
  if (k >= 2 * n) return "narrow";
  return "square";
}

struct KernelVariant {
  int precision_bytes = 2;
  std::string shape_class = "wide";
  int mig_instances = 1;
  int t_m = 256;
  int t_n = 128;
  int t_k = 512;
  double gamma_x = 1;        // effective activation re-reads on the sym path
  double gamma_o_scale = 1;  // multiplier on the structural K-tile RMW count
  double reduction_overhead_bytes = 0;

  KernelConfig config(double alpha) const {
    KernelConfig c;
    c.alpha = alpha;
    c.t_m = t_m;
    c.t_n = t_n;
    c.t_k = t_k;
    return c;
  }

  GammaCoefficients gammas_for(const GemmWorkload& w) const {
    const auto s = structural_gammas(w, config(0));
    GammaCoefficients g;
    g.gamma_x = std::clamp(gamma_x, 1.0, s.gamma_x);
    g.gamma_o = std::max(1.0, gamma_o_scale * s.gamma_o);
    g.reduction_overhead_bytes = reduction_overhead_bytes;
    return g;
  }
};

struct KernelRepository {
  KernelCalibration calibration;
  std::vector<KernelVariant> variants;

  const KernelVariant* find(int precision_bytes, const std::string& cls, int mig_instances) const {
    for (const auto& v : variants)
      if (v.precision_bytes == precision_bytes && v.shape_class == cls && v.mig_instances == mig_instances)
        return &v;
    return nullptr;
  }
};

inline InstanceResources make_resources(const SuperchipProfile& chip, const MigProfile& mig,
                                        const KernelCalibration& cal) {
  return {mig.sm_per_instance, mig.hbm_bw_per_instance * cal.hbm_efficiency, chip.flops_per_sm};
}

// Achievable aggregate CPU->GPU bandwidth of the shared link.
inline double effective_link_bandwidth(const SuperchipProfile& chip, const KernelCalibration& cal) {
  return chip.c2c_bandwidth * cal.c2c_efficiency;
}

// Latency of `w` on one instance of a `mig_instances` partition using the repository variant
// for its shape, with `c2c_share` of the link (the whole effective link when omitted).
inline LatencyBreakdown repository_latency(const GemmWorkload& w, double alpha, const SuperchipProfile& chip,
                                           int mig_instances, const KernelRepository& repo,
                                           std::optional<double> c2c_share = std::nullopt) {
  const auto* v = repo.find(w.elem_bytes, shape_class(w.k, w.n), mig_instances);
  if (!v) throw ConfigError("no kernel variant for this shape and MIG configuration");
  const auto res = make_resources(chip, mig_profile(chip, mig_instances), repo.calibration);
  return latency_breakdown(w, v->config(alpha), res,
                           c2c_share.value_or(effective_link_bandwidth(chip, repo.calibration)),
                           v->gammas_for(w));
}

// Measured reference points for one GEMM shape on the full (1-instance) GPU.
struct CalibrationAnchors {
  GemmWorkload shape{10240, 4096, 16384, 2, WeightLocation::cpu};
  double sym_c2c_bytes = 5.37 * GB;
  double asym_c2c_bytes = 0.13 * GB;
  double sym_hbm_bytes = 1.23 * GB;
  double asym_hbm_bytes = 5.18 * GB;
  double sym_latency_s = 16.4e-3;
  double asym_latency_s = 4.0e-3;
  int t_m = 256;
  int t_n = 128;
  int t_k = 512;
  double reduction_overhead_bytes = 512;
};

struct CalibrationResult {
  KernelRepository repository;
  TrafficEstimate sym;
  TrafficEstimate asym;
  double sym_latency_s = 0;
  double asym_latency_s = 0;
};

// Fits gamma_x and gamma_o to the HBM byte anchors, then the C2C efficiency to the sym
// latency anchor (C2C-bound) and the HBM efficiency to the asym latency anchor (HBM-bound).
// flops_per_sm stays at the chip's nominal rate. Variants are emitted for every MIG row of
// `target` and every precision/shape class.
inline CalibrationResult calibrate(const CalibrationAnchors& a, const SuperchipProfile& anchor_chip,
                                   const SuperchipProfile& target) {
  const auto& w = a.shape;
  validate(w);
  const double e = w.elem_bytes;
  const double s_x = static_cast<double>(w.m) * static_cast<double>(w.k) * e;
  const double s_o = static_cast<double>(w.m) * static_cast<double>(w.n) * e;
  KernelVariant v;
  v.precision_bytes = w.elem_bytes;
  v.shape_class = shape_class(w.k, w.n);
  v.t_m = a.t_m;
  v.t_n = a.t_n;
  v.t_k = a.t_k;
  v.reduction_overhead_bytes = a.reduction_overhead_bytes;
  const KernelConfig cfg = v.config(0);
  const auto structural = structural_gammas(w, cfg);
  const double reductions = static_cast<double>(ceil_div(w.m, a.t_m) * ceil_div(w.n, a.t_n) *
                                                ceil_div(w.k, a.t_k));
  v.gamma_x = (a.sym_hbm_bytes - s_o) / s_x;
  v.gamma_o_scale = (a.asym_hbm_bytes - s_x - reductions * a.reduction_overhead_bytes) /
                    (s_o * structural.gamma_o);
  if (!(v.gamma_x >= 1) || v.gamma_x > structural.gamma_x)
    throw ModelError("calibration: gamma_x outside [1, ceil(n/t_n)]");
  if (!(v.gamma_o_scale * structural.gamma_o >= 1))
    throw ModelError("calibration: gamma_o below its floor");

  CalibrationResult r;
  const auto g = v.gammas_for(w);
  KernelConfig sym_cfg = cfg;
  sym_cfg.alpha = 1;
  r.sym = traffic_sym(w, sym_cfg, g);
  r.asym = traffic_asym(w, cfg, g);

  const MigProfile full = mig_profile(anchor_chip, 1);
  KernelCalibration cal;
  cal.c2c_efficiency = r.sym.c2c_bytes / (a.sym_latency_s * anchor_chip.c2c_bandwidth);
  cal.hbm_efficiency = r.asym.hbm_bytes / (a.asym_latency_s * full.hbm_bw_per_instance);
  if (cal.c2c_efficiency > 1 || cal.hbm_efficiency > 1)
    throw ModelError("calibration: anchors imply more than nominal bandwidth");

  const auto res = make_resources(anchor_chip, full, cal);
  const double link = effective_link_bandwidth(anchor_chip, cal);
  const auto sym_b = latency_breakdown(w, sym_cfg, res, link, g);
  const auto asym_b = latency_breakdown(w, cfg, res, link, g);
  if (sym_b.bottleneck() != Bottleneck::c2c || asym_b.bottleneck() != Bottleneck::hbm)
    throw ModelError("calibration: anchors are not C2C-bound (sym) and HBM-bound (asym) "
                     "at the chip's nominal compute rate");
  r.sym_latency_s = sym_b.total();
  r.asym_latency_s = asym_b.total();

  r.repository.calibration = cal;
  for (int prec : {1, 2, 4})
    for (const char* cls : {"wide", "square", "narrow"})
      for (const auto& mig : target.mig_table) {
        KernelVariant out = v;
        out.precision_bytes = prec;
        out.shape_class = cls;
        out.mig_instances = mig.instance_count;
        r.repository.variants.push_back(out);
      }
  return r;
}

inline KernelRepository default_repository(const SuperchipProfile& target) {
  return calibrate(CalibrationAnchors{}, builtin_profile("gh200"), target).repository;
}

inline void dump_repository(const KernelRepository& repo, std::ostream& out,
                            std::string_view config = {}) {
  out << file_header("kernel-repository", config) << '\n';
  out << "calibration c2c_efficiency " << format_double(repo.calibration.c2c_efficiency) << '\n';
  out << "calibration hbm_efficiency " << format_double(repo.calibration.hbm_efficiency) << '\n';
  out << "# variant precision shape_class mig t_m t_n t_k gamma_x gamma_o_scale reduction_overhead\n";
  for (const auto& v : repo.variants)
    out << "variant " << v.precision_bytes << ' ' << v.shape_class << ' ' << v.mig_instances << ' '
        << v.t_m << ' ' << v.t_n << ' ' << v.t_k << ' ' << format_double(v.gamma_x) << ' '
        << format_double(v.gamma_o_scale) << ' ' << format_double(v.reduction_overhead_bytes) << '\n';
}

inline KernelRepository load_repository(std::istream& in) {
  KernelRepository repo;
  std::string line;
  std::size_t lineno = 0;
  bool have_c2c = false, have_hbm = false;
  while (std::getline(in, line)) {
    ++lineno;
    auto view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    std::istringstream ss{std::string(view)};
    std::string tag;
    ss >> tag;
    if (tag == "calibration") {
      std::string key, value;
      double v = 0;
      if (!(ss >> key >> value) || !parse_double(value, v)) throw ParseError("bad calibration row", lineno);
      if (key == "c2c_efficiency") { repo.calibration.c2c_efficiency = v; have_c2c = true; }
      else if (key == "hbm_efficiency") { repo.calibration.hbm_efficiency = v; have_hbm = true; }
      else throw ParseError("unknown calibration key '" + key + "'", lineno);
    } else if (tag == "variant") {
      KernelVariant v;
      std::string gx, go, ov;
      if (!(ss >> v.precision_bytes >> v.shape_class >> v.mig_instances >> v.t_m >> v.t_n >> v.t_k >>
            gx >> go >> ov) ||
          !parse_double(gx, v.gamma_x) || !parse_double(go, v.gamma_o_scale) ||
          !parse_double(ov, v.reduction_overhead_bytes))
        throw ParseError("bad variant row", lineno);
      std::string rest;
      if (ss >> rest) throw ParseError("trailing fields in variant row", lineno);
      repo.variants.push_back(v);
    } else {
      throw ParseError("unknown row type '" + tag + "'", lineno);
    }
  }
  if (!have_c2c || !have_hbm) throw ParseError("missing calibration rows", lineno);
  return repo;
}

inline void save_repository(const KernelRepository& repo, const std::string& path,
                            std::string_view config = {}) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write kernel repository " + path);
  dump_repository(repo, f, config);
}

inline KernelRepository load_repository(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read kernel repository " + path);
  return load_repository(f);
}

}  // namespace c2c
