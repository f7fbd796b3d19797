#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "c2csim/common.hpp"
#include "c2csim/error.hpp"

namespace c2c {

enum class ModelKind { dense, moe };

inline const char* to_string(ModelKind k) { return k == ModelKind::dense ? "dense" : "moe"; }

// One parameter-bearing projection of a transformer layer. Expert groups hold `experts`
// weight matrices of shape (k, n) of which `active` are used by each token.
struct LayerGemm {
  std::string name;
  int k = 0;
  int n = 0;
  int experts = 1;
  int active = 1;

  double weight_bytes(int precision_bytes) const {
    return static_cast<double>(k) * n * experts * precision_bytes;
  }
};

struct ModelSpec {
  std::string id;
  ModelKind kind = ModelKind::dense;
  double param_footprint_total = 0;      // bytes of CPU-resident weights
  double param_footprint_per_token = 0;  // activated bytes per decode token
  int layer_count = 0;
  std::vector<LayerGemm> gemms;          // per layer
  double extra_weight_bytes = 0;         // embeddings and LM head, streamed once per forward
  int precision_bytes = 2;
  double kv_bytes_per_token = 0;
  double ttft_slo = 1.0;
  double tpot_slo = 0.1;

  double layer_weight_bytes() const {
    double sum = 0;
    for (const auto& g : gemms) sum += g.weight_bytes(precision_bytes);
    return sum;
  }
};

// Architecture hyper-parameters from which a ModelSpec is derived.
struct ModelArch {
  std::string id;
  int hidden = 0;
  int intermediate = 0;
  int layers = 0;
  int q_heads = 0;
  int kv_heads = 0;
  int head_dim = 128;
  int vocab = 0;
  bool tied_embeddings = false;
  int experts = 0;  // 0 for dense
  int experts_active = 0;
  int expert_intermediate = 0;
  int precision_bytes = 2;
};

inline void validate(const ModelSpec& m) {
  if (m.id.empty()) throw ConfigError("model id must not be empty");
  if (m.layer_count < 1 || m.gemms.empty()) throw ConfigError(m.id + ": needs layers and GEMMs");
  if (m.precision_bytes != 1 && m.precision_bytes != 2 && m.precision_bytes != 4)
    throw ConfigError(m.id + ": precision_bytes must be 1, 2 or 4");
  if (!(m.param_footprint_per_token > 0) || m.param_footprint_per_token > m.param_footprint_total)
    throw ConfigError(m.id + ": per-token footprint must be in (0, total]");
  if (m.kind == ModelKind::dense && m.param_footprint_per_token != m.param_footprint_total)
    throw ConfigError(m.id + ": dense models activate their full footprint per token");
  if (!(m.ttft_slo > 0) || !(m.tpot_slo > 0)) throw ConfigError(m.id + ": SLOs must be positive");
  for (const auto& g : m.gemms)
    if (g.k < 1 || g.n < 1 || g.experts < 1 || g.active < 1 || g.active > g.experts)
      throw ConfigError(m.id + ": bad GEMM shape " + g.name);
  const double gemm_total = m.layer_weight_bytes() * m.layer_count;
  if (std::abs(gemm_total + m.extra_weight_bytes - m.param_footprint_total) >
      0.05 * m.param_footprint_total)
    throw ConfigError(m.id + ": GEMM shapes do not account for the parameter footprint");
}

inline ModelSpec make_model(const ModelArch& a, double ttft_slo = 1.0, double tpot_slo = 0.1) {
  ModelSpec m;
  m.id = a.id;
  m.kind = a.experts > 0 ? ModelKind::moe : ModelKind::dense;
  m.layer_count = a.layers;
  m.precision_bytes = a.precision_bytes;
  m.ttft_slo = ttft_slo;
  m.tpot_slo = tpot_slo;
  const int q_dim = a.q_heads * a.head_dim;
  const int kv_dim = a.kv_heads * a.head_dim;
  m.gemms.push_back({"qkv", a.hidden, q_dim + 2 * kv_dim, 1, 1});
  m.gemms.push_back({"o_proj", q_dim, a.hidden, 1, 1});
  if (m.kind == ModelKind::dense) {
    m.gemms.push_back({"gate_up", a.hidden, 2 * a.intermediate, 1, 1});
    m.gemms.push_back({"down", a.intermediate, a.hidden, 1, 1});
  } else {
    m.gemms.push_back({"expert_gate_up", a.hidden, 2 * a.expert_intermediate, a.experts, a.experts_active});
    m.gemms.push_back({"expert_down", a.expert_intermediate, a.hidden, a.experts, a.experts_active});
  }
  const double embed = static_cast<double>(a.vocab) * a.hidden * a.precision_bytes;
  m.extra_weight_bytes = a.tied_embeddings ? embed : 2 * embed;
  m.param_footprint_total = m.layer_weight_bytes() * a.layers + m.extra_weight_bytes;
  if (m.kind == ModelKind::dense) {
    m.param_footprint_per_token = m.param_footprint_total;
  } else {
    double active = 0;
    for (const auto& g : m.gemms)
      active += static_cast<double>(g.k) * g.n * g.active * a.precision_bytes;
    m.param_footprint_per_token = active * a.layers + m.extra_weight_bytes;
  }
  m.kv_bytes_per_token = 2.0 * a.layers * kv_dim * a.precision_bytes;
  validate(m);
  return m;
}

inline std::vector<ModelArch> builtin_architectures() {
  return {
      {"llama-3b", 3072, 8192, 28, 24, 8, 128, 128256, true, 0, 0, 0, 2},
      {"llama-8b", 4096, 14336, 32, 32, 8, 128, 128256, false, 0, 0, 0, 2},
      {"llama-70b", 8192, 28672, 80, 64, 8, 128, 128256, false, 0, 0, 0, 2},
      {"mixtral-8x7b", 4096, 0, 32, 32, 8, 128, 32000, false, 8, 2, 14336, 2},
      {"qwen3-30b-a3b", 2048, 0, 48, 32, 4, 128, 151936, false, 128, 8, 768, 2},
  };
}

// The five evaluation models. The 70B model cannot reach a 100 ms TPOT over any single
// C2C link, so it carries a relaxed decode target.
inline std::vector<ModelSpec> default_catalog() {
  std::vector<ModelSpec> out;
  for (const auto& a : builtin_architectures())
    out.push_back(make_model(a, 1.0, a.id == "llama-70b" ? 0.5 : 0.1));
  return out;
}

inline const ModelSpec& find_model(const std::vector<ModelSpec>& catalog, const std::string& id) {
  for (const auto& m : catalog)
    if (m.id == id) return m;
  throw ConfigError("unknown model '" + id + "'");
}

// A catalog of `count` fine-tuned variants cycling over the base architectures.
inline std::vector<ModelSpec> variant_catalog(int count) {
  if (count < 1) throw ConfigError("model count must be >= 1");
  const auto base = default_catalog();
  std::vector<ModelSpec> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    ModelSpec m = base[static_cast<std::size_t>(i) % base.size()];
    m.id += "-v" + std::to_string(i);
    out.push_back(std::move(m));
  }
  return out;
}

struct Request {
  double arrival_ms = 0;
  std::string model_id;
  int prompt_tokens = 1;
  int output_tokens = 1;

  double arrival_s() const { return arrival_ms / 1000.0; }
  friend bool operator==(const Request&, const Request&) = default;
};

using Trace = std::vector<Request>;

// Prompt/output length source: log-normal by default, or an empirical histogram of
// (value, weight) bins when `prompt_hist` / `output_hist` are non-empty.
struct LengthDistribution {
  double prompt_median = 512;
  double prompt_sigma = 0.9;
  double output_median = 256;
  double output_sigma = 0.8;
  int prompt_max = 8192;
  int output_max = 2048;
  std::vector<std::pair<int, double>> prompt_hist;
  std::vector<std::pair<int, double>> output_hist;
};

namespace detail {

inline int draw_length(std::mt19937_64& rng, double median, double sigma, int max_len,
                       const std::vector<std::pair<int, double>>& hist) {
  if (!hist.empty()) {
    std::vector<double> w;
    w.reserve(hist.size());
    for (const auto& [v, wt] : hist) w.push_back(wt);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    return std::max(1, hist[pick(rng)].first);
  }
  std::lognormal_distribution<double> d(std::log(median), sigma);
  const double v = std::round(d(rng));
  return static_cast<int>(std::clamp(v, 1.0, static_cast<double>(max_len)));
}

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x9e3779b9u};
  return std::mt19937_64(seq);
}

// Inverse standard-normal CDF (Acklam's rational approximation, |error| < 1.2e-9).
inline double normal_quantile(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00, 2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double lo = 0.02425;
  if (p < lo) {
    const double q = std::sqrt(-2 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  if (p > 1 - lo) {
    const double q = std::sqrt(-2 * std::log(1 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

}  // namespace detail

inline std::vector<std::pair<int, int>> sample_lengths(std::uint64_t seed, std::size_t count,
                                                       const LengthDistribution& dist = {}) {
  auto rng = detail::stream_rng(seed, 0x5eedULL);
  std::vector<std::pair<int, int>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int p = detail::draw_length(rng, dist.prompt_median, dist.prompt_sigma, dist.prompt_max,
                                      dist.prompt_hist);
    const int o = detail::draw_length(rng, dist.output_median, dist.output_sigma, dist.output_max,
                                      dist.output_hist);
    out.emplace_back(p, o);
  }
  return out;
}

// ON-OFF arrival process per model. Burst (ON) and idle (OFF) durations are exponential;
// arrivals inside a burst are Poisson. Per-model idle means and burst rates are spread over
// log-normal / log-uniform ranges at stratified quantiles, so catalog-level statistics are
// stable across seeds while which model is popular is seed-dependent.
struct BurstParams {
  double mean_burst_s = 900;
  double median_idle_s = 40 * 3600.0;  // 0 means always on
  double idle_sigma = 1.6;
  double rate_min = 0.02;  // requests/s inside a burst
  double rate_max = 0.5;
  LengthDistribution lengths;
};

inline Trace generate_trace(const std::vector<ModelSpec>& catalog, double duration_s,
                            std::uint64_t seed, const BurstParams& params = {}) {
  if (catalog.empty()) throw ConfigError("generate_trace: empty model catalog");
  if (!(duration_s > 0)) throw ConfigError("generate_trace: duration must be positive");
  if (!(params.mean_burst_s > 0)) throw ConfigError("generate_trace: burst duration must be positive");
  if (!(params.rate_min > 0) || !(params.rate_max >= params.rate_min))
    throw ConfigError("generate_trace: burst arrival rates must be positive and ordered");
  if (params.median_idle_s < 0 || params.idle_sigma < 0)
    throw ConfigError("generate_trace: idle parameters must be non-negative");

  const std::size_t n = catalog.size();
  // Seeded assignment of stratified quantile slots to models.
  std::vector<std::size_t> idle_slot(n), rate_slot(n);
  std::iota(idle_slot.begin(), idle_slot.end(), 0);
  std::iota(rate_slot.begin(), rate_slot.end(), 0);
  auto perm_rng = detail::stream_rng(seed, 0xa11ceULL);
  std::shuffle(idle_slot.begin(), idle_slot.end(), perm_rng);
  std::shuffle(rate_slot.begin(), rate_slot.end(), perm_rng);

  struct Tagged {
    Request r;
    std::size_t model;
  };
  std::vector<Tagged> all;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = detail::stream_rng(seed, i + 1);
    const double q_idle = (static_cast<double>(idle_slot[i]) + 0.5) / static_cast<double>(n);
    const double q_rate = (static_cast<double>(rate_slot[i]) + 0.5) / static_cast<double>(n);
    const double mean_idle =
        params.median_idle_s * std::exp(params.idle_sigma * detail::normal_quantile(q_idle));
    const double rate = params.rate_min * std::pow(params.rate_max / params.rate_min, q_rate);
    const bool always_on = mean_idle <= 0;

    std::exponential_distribution<double> burst_len(1.0 / params.mean_burst_s);
    std::exponential_distribution<double> gap(rate);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    double t = 0;
    bool on = always_on || unit(rng) < params.mean_burst_s / (params.mean_burst_s + mean_idle);
    while (t < duration_s) {
      if (!on) {
        std::exponential_distribution<double> idle_len(1.0 / mean_idle);
        t += idle_len(rng);
        on = true;
        continue;
      }
      const double end = always_on ? duration_s : std::min(duration_s, t + burst_len(rng));
      double a = t + gap(rng);
      while (a < end) {
        Request r;
        r.arrival_ms = std::round(a * 1e6) / 1e3;  // microsecond resolution
        r.model_id = catalog[i].id;
        r.prompt_tokens = detail::draw_length(rng, params.lengths.prompt_median,
                                              params.lengths.prompt_sigma, params.lengths.prompt_max,
                                              params.lengths.prompt_hist);
        r.output_tokens = detail::draw_length(rng, params.lengths.output_median,
                                              params.lengths.output_sigma, params.lengths.output_max,
                                              params.lengths.output_hist);
        all.push_back({std::move(r), i});
        a += gap(rng);
      }
      t = end;
      on = false;
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) {
    if (a.r.arrival_ms != b.r.arrival_ms) return a.r.arrival_ms < b.r.arrival_ms;
    return a.model < b.model;
  });
  Trace out;
  out.reserve(all.size());
  for (auto& t : all) out.push_back(std::move(t.r));
  return out;
}

struct TraceStats {
  std::map<std::string, double> per_model_active_hour_fraction;
  double median_idle_fraction = 0;
  double long_tail_fraction = 0;
  std::size_t bucket_count = 0;
  bool empty = false;
};

// Fraction of models whose active-bucket fraction is below `threshold`.
inline double long_tail_fraction(const TraceStats& s, double threshold) {
  if (s.per_model_active_hour_fraction.empty()) return 0;
  std::size_t below = 0;
  for (const auto& [id, f] : s.per_model_active_hour_fraction)
    if (f < threshold) ++below;
  return static_cast<double>(below) / static_cast<double>(s.per_model_active_hour_fraction.size());
}

// `duration_s` fixes the observation window; when zero it spans up to the last arrival.
inline TraceStats trace_stats(const Trace& trace, double bucket_s = 3600, double duration_s = 0) {
  if (!(bucket_s > 0)) throw ConfigError("trace_stats: bucket must be positive");
  TraceStats s;
  if (trace.empty()) {
    s.empty = true;
    return s;
  }
  s.bucket_count =
      duration_s > 0
          ? std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(duration_s / bucket_s)))
          : static_cast<std::size_t>(std::floor(trace.back().arrival_s() / bucket_s)) + 1;
  std::map<std::string, std::set<std::size_t>> active;
  for (const auto& r : trace) {
    auto b = static_cast<std::size_t>(std::floor(r.arrival_s() / bucket_s));
    if (b >= s.bucket_count) b = s.bucket_count - 1;
    active[r.model_id].insert(b);
  }
  std::vector<double> idle;
  for (const auto& [id, buckets] : active) {
    const double f = static_cast<double>(buckets.size()) / static_cast<double>(s.bucket_count);
    s.per_model_active_hour_fraction[id] = f;
    idle.push_back(1.0 - f);
  }
  std::sort(idle.begin(), idle.end());
  const std::size_t m = idle.size();
  s.median_idle_fraction = m % 2 ? idle[m / 2] : 0.5 * (idle[m / 2 - 1] + idle[m / 2]);
  s.long_tail_fraction = long_tail_fraction(s, 0.2);
  return s;
}

inline constexpr const char* kTraceColumns = "arrival_ms,model_id,prompt_tokens,output_tokens";

inline void save_trace(const Trace& trace, std::ostream& out, std::string_view config = {}) {
  out << file_header("trace", config) << '\n' << kTraceColumns << '\n';
  for (const auto& r : trace)
    out << format_double(r.arrival_ms) << ',' << r.model_id << ',' << r.prompt_tokens << ','
        << r.output_tokens << '\n';
}

// Accepts '#' comment lines anywhere and requires the column header before any record.
inline Trace load_trace(std::istream& in) {
  Trace out;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    auto view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    if (!header_seen) {
      if (view != kTraceColumns) throw ParseError("expected header '" + std::string(kTraceColumns) + "'", lineno);
      header_seen = true;
      continue;
    }
    std::string_view fields[4];
    std::size_t count = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= view.size(); ++i) {
      if (i == view.size() || view[i] == ',') {
        if (count == 4) throw ParseError("too many fields", lineno);
        fields[count++] = trim(view.substr(start, i - start));
        start = i + 1;
      }
    }
    if (count != 4) throw ParseError("expected 4 fields", lineno);
    Request r;
    if (!parse_double(fields[0], r.arrival_ms) || !std::isfinite(r.arrival_ms) || r.arrival_ms < 0)
      throw ParseError("bad arrival_ms '" + std::string(fields[0]) + "'", lineno);
    if (fields[1].empty()) throw ParseError("empty model_id", lineno);
    r.model_id = std::string(fields[1]);
    if (!parse_int(fields[2], r.prompt_tokens) || r.prompt_tokens < 1)
      throw ParseError("prompt_tokens must be an integer >= 1", lineno);
    if (!parse_int(fields[3], r.output_tokens) || r.output_tokens < 1)
      throw ParseError("output_tokens must be an integer >= 1", lineno);
    if (!out.empty() && r.arrival_ms < out.back().arrival_ms)
      throw ParseError("records must be sorted by arrival_ms", lineno);
    out.push_back(std::move(r));
  }
  return out;
}

inline void save_trace(const Trace& trace, const std::string& path, std::string_view config = {}) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write trace file " + path);
  save_trace(trace, f, config);
  if (!f) throw IoError("failed writing trace file " + path);
}

inline Trace load_trace(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read trace file " + path);
  return load_trace(f);
}

// Three dense models (two of them fine-tunes of one base) with short, frequent bursts that
// overlap in time. Used for policy comparisons under link contention.
struct Workload {
  std::vector<ModelSpec> catalog;
  Trace trace;
};

inline BurstParams contended_burst_params() {
  BurstParams p;
  p.mean_burst_s = 60;
  p.median_idle_s = 120;
  p.idle_sigma = 0.5;
  p.rate_min = 0.1;
  p.rate_max = 0.5;
  return p;
}

inline std::vector<ModelSpec> contended_catalog() {
  const auto base = default_catalog();
  ModelSpec ft = find_model(base, "llama-3b");
  ft.id = "llama-3b-ft";
  return {find_model(base, "llama-3b"), ft, find_model(base, "llama-8b")};
}

inline Workload contended_workload(std::uint64_t seed, double duration_s = 1800) {
  Workload w;
  w.catalog = contended_catalog();
  w.trace = generate_trace(w.catalog, duration_s, seed, contended_burst_params());
  return w;
}

// Specs for every model named in `trace`. Ids are matched exactly against `known`, then by
// the longest id of `known` that prefixes them (fine-tune suffixes such as "-v12" or "-ft").
inline std::vector<ModelSpec> resolve_catalog(const Trace& trace, const std::vector<ModelSpec>& known) {
  std::vector<ModelSpec> out;
  std::set<std::string> seen;
  for (const auto& r : trace) {
    if (!seen.insert(r.model_id).second) continue;
    const ModelSpec* best = nullptr;
    for (const auto& m : known) {
      if (m.id == r.model_id) {
        best = &m;
        break;
      }
      if (r.model_id.rfind(m.id + "-", 0) == 0 && (!best || m.id.size() > best->id.size())) best = &m;
    }
    if (!best) throw ConfigError("trace references unknown model '" + r.model_id + "'");
    ModelSpec m = *best;
    m.id = r.model_id;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace c2c
