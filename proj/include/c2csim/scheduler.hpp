#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "c2csim/common.hpp"
#include "c2csim/error.hpp"
#include "c2csim/forward.hpp"
#include "c2csim/gemm_model.hpp"
#include "c2csim/hw_model.hpp"
#include "c2csim/workload.hpp"

namespace c2c {

// Link bandwidth a model needs to stream its activated weights once per output token.
inline double required_c2c_bw(const ModelSpec& m) {
  if (!(m.tpot_slo > 0)) throw ConfigError(m.id + ": tpot_slo must be positive");
  return m.param_footprint_per_token / m.tpot_slo;
}

struct PlacementState {
  double c2c_avail = 0;
  double c2c_budget_used = 0;
  std::map<int, std::string> active_set;  // instance -> model
  std::map<int, double> demand;           // instance -> charged bytes/s

  bool invariant_holds() const { return c2c_budget_used <= c2c_avail * (1 + 1e-12); }
};

enum class Admission { feasible, infeasible };

inline Admission admit(const ModelSpec& m, const PlacementState& s) {
  return s.c2c_budget_used + required_c2c_bw(m) <= s.c2c_avail ? Admission::feasible
                                                                : Admission::infeasible;
}

inline void release(PlacementState& s, int instance) {
  auto it = s.demand.find(instance);
  if (it == s.demand.end()) return;
  s.c2c_budget_used = std::max(0.0, s.c2c_budget_used - it->second);
  s.demand.erase(it);
  s.active_set.erase(instance);
  // Recompute from scratch to keep rounding drift out of the running total.
  s.c2c_budget_used = 0;
  for (const auto& [id, d] : s.demand) s.c2c_budget_used += d;
}

// Charges the model to the link budget. `charge` is false for policies whose weights do not
// stream over C2C.
inline void place(PlacementState& s, int instance, const ModelSpec& m, bool charge = true) {
  release(s, instance);
  const double d = charge ? required_c2c_bw(m) : 0.0;
  if (charge && admit(m, s) == Admission::infeasible)
    throw CapacityError("placing " + m.id + " would oversubscribe the C2C link");
  s.active_set[instance] = m.id;
  s.demand[instance] = d;
  s.c2c_budget_used += d;
}

// HybridGEMM at ratio alpha reads activations and writes outputs with a mix of both paths'
// reuse factors.
inline GammaCoefficients effective_gammas(double alpha, const GammaCoefficients& g) {
  GammaCoefficients out = g;
  out.gamma_x = alpha * g.gamma_x + (1 - alpha);
  out.gamma_o = alpha + (1 - alpha) * g.gamma_o;
  return out;
}

// HBM bandwidth needed to move one chunk's activations and outputs through every
// parameter-bearing GEMM within `ttft_budget`.
inline double chunk_hbm_demand(std::int64_t chunk_tokens, const std::vector<LayerGemm>& gemms,
                               int layers, int elem_bytes, const GammaCoefficients& g,
                               double ttft_budget) {
  if (!(ttft_budget > 0)) throw ModelError("chunk_hbm_demand: TTFT budget must be positive");
  if (chunk_tokens <= 0) return 0;
  double bytes = 0;
  for (const auto& s : gemms) {
    const double c = static_cast<double>(chunk_tokens) * s.active * elem_bytes;
    bytes += g.gamma_x * c * s.k + g.gamma_o * c * s.n;
  }
  return bytes * layers / ttft_budget;
}

inline double switch_constant(const SuperchipProfile& chip, const ModelSpec& m) {
  return m.kind == ModelKind::moe ? chip.switch_latency_moe : chip.switch_latency_dense;
}

inline double engine_init(const SuperchipProfile& chip, const ModelSpec& m) {
  return m.kind == ModelKind::moe ? chip.engine_init_latency_moe : chip.engine_init_latency_dense;
}

inline const LayerGemm& heaviest_gemm(const ModelSpec& m) {
  if (m.gemms.empty()) throw ConfigError(m.id + ": no GEMMs");
  const LayerGemm* best = &m.gemms.front();
  for (const auto& g : m.gemms)
    if (g.weight_bytes(m.precision_bytes) > best->weight_bytes(m.precision_bytes)) best = &g;
  return *best;
}

// Kernel family for the model's heaviest GEMM, starting on the C2C-frugal dataflow.
inline KernelConfig select_kernel(const ModelSpec& m, int mig_instances, const KernelRepository& repo) {
  const auto& g = heaviest_gemm(m);
  return variant_for(repo, m.precision_bytes, g.k, g.n, mig_instances).config(0);
}

struct ProfileEntry {
  std::string model_id;
  int mig_instances = 1;
  bool feasible = false;
  int chunk_size = 0;  // best effort when infeasible
  KernelConfig kernel;
  double predicted_ttft = 0;
  double hbm_demand = 0;
};

struct ProfilingTable {
  std::vector<ProfileEntry> entries;

  const ProfileEntry* find(const std::string& model, int mig_instances) const {
    for (const auto& e : entries)
      if (e.model_id == model && e.mig_instances == mig_instances) return &e;
    return nullptr;
  }
};

struct ProfilingOptions {
  std::vector<int> candidate_chunks{256, 512, 1024, 2048, 4096, 8192};
  int reference_prompt = 2048;
  WeightLocation weights = WeightLocation::cpu;
  double per_layer_overhead_s = 0;
  // Replaces each model's own TTFT target when set.
  std::optional<double> ttft_slo;
};

inline double predicted_prefill(const ForwardContext& ctx, int prompt, int chunk, double link) {
  double t = 0;
  for (int done = 0; done < prompt; done += chunk) {
    const int m = std::min(chunk, prompt - done);
    t += forward_latency(forward_segments(ctx, m, nullptr), link);
  }
  return t;
}

// Smallest candidate chunk whose uncontended prefill of the reference prompt fits the TTFT
// target less the switch constant, and whose HBM demand fits the slice.
inline ProfilingTable build_profiling_table(const std::vector<ModelSpec>& catalog,
                                            const SuperchipProfile& chip,
                                            const std::vector<int>& mig_counts,
                                            const KernelRepository& repo,
                                            const ProfilingOptions& opt = {}) {
  if (opt.candidate_chunks.empty()) throw ConfigError("no candidate chunk sizes");
  if (!std::is_sorted(opt.candidate_chunks.begin(), opt.candidate_chunks.end()) ||
      opt.candidate_chunks.front() < 1)
    throw ConfigError("candidate chunk sizes must be positive and ascending");
  ProfilingTable table;
  const double link = effective_link_bandwidth(chip, repo.calibration);
  for (const auto& m : catalog) {
    for (int count : mig_counts) {
      const MigProfile mig = mig_profile(chip, count);
      ForwardContext ctx;
      ctx.model = &m;
      ctx.resources = make_resources(chip, mig, repo.calibration);
      ctx.repo = &repo;
      ctx.mig_instances = count;
      ctx.weights = opt.weights;
      ctx.per_layer_overhead_s = opt.per_layer_overhead_s;

      ProfileEntry e;
      e.model_id = m.id;
      e.mig_instances = count;
      e.kernel = select_kernel(m, count, repo);
      const double budget = opt.ttft_slo.value_or(m.ttft_slo) - switch_constant(chip, m);
      const auto& hg = heaviest_gemm(m);
      const auto& variant = variant_for(repo, m.precision_bytes, hg.k, hg.n, count);
      double best = kInf;
      for (int chunk : opt.candidate_chunks) {
        const double ttft = predicted_prefill(ctx, opt.reference_prompt, chunk, link);
        GemmWorkload probe{chunk, hg.k, hg.n, m.precision_bytes, opt.weights};
        const auto g = effective_gammas(e.kernel.alpha, variant.gammas_for(probe));
        const double demand = budget > 0 ? chunk_hbm_demand(chunk, m.gemms, m.layer_count,
                                                            m.precision_bytes, g, budget)
                                         : kInf;
        if (ttft < best) {
          best = ttft;
          e.chunk_size = chunk;
          e.predicted_ttft = ttft;
          e.hbm_demand = demand;
        }
        if (budget > 0 && ttft <= budget && demand <= ctx.resources.hbm_bw) {
          e.feasible = true;
          e.chunk_size = chunk;
          e.predicted_ttft = ttft;
          e.hbm_demand = demand;
          break;
        }
      }
      table.entries.push_back(std::move(e));
    }
  }
  return table;
}

inline void dump_profiling_table(const ProfilingTable& t, std::ostream& out, std::string_view config = {}) {
  out << file_header("profiling-table", config) << '\n';
  out << "# model mig feasible chunk t_m t_n t_k alpha predicted_ttft_s hbm_demand_Bps\n";
  for (const auto& e : t.entries)
    out << e.model_id << ' ' << e.mig_instances << ' ' << (e.feasible ? 1 : 0) << ' ' << e.chunk_size
        << ' ' << e.kernel.t_m << ' ' << e.kernel.t_n << ' ' << e.kernel.t_k << ' '
        << format_double(e.kernel.alpha) << ' ' << format_double(e.predicted_ttft) << ' '
        << format_double(e.hbm_demand) << '\n';
}

inline ProfilingTable load_profiling_table(std::istream& in) {
  ProfilingTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    std::istringstream ss{std::string(view)};
    ProfileEntry e;
    int feasible = 0;
    std::string alpha, ttft, demand, rest;
    if (!(ss >> e.model_id >> e.mig_instances >> feasible >> e.chunk_size >> e.kernel.t_m >>
          e.kernel.t_n >> e.kernel.t_k >> alpha >> ttft >> demand) ||
        !parse_double(alpha, e.kernel.alpha) || !parse_double(ttft, e.predicted_ttft) ||
        !parse_double(demand, e.hbm_demand) || (feasible != 0 && feasible != 1) || (ss >> rest))
      throw ParseError("bad profiling table row", lineno);
    e.feasible = feasible == 1;
    t.entries.push_back(std::move(e));
  }
  return t;
}

inline void save_profiling_table(const ProfilingTable& t, const std::string& path, std::string_view config = {}) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write profiling table " + path);
  dump_profiling_table(t, f, config);
}

inline ProfilingTable load_profiling_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read profiling table " + path);
  return load_profiling_table(f);
}

// ---------------------------------------------------------------------------
// Request placement
// ---------------------------------------------------------------------------

enum class Action { route_warm, cold_start, model_switch };

inline const char* to_string(Action a) {
  switch (a) {
    case Action::route_warm: return "route_warm";
    case Action::cold_start: return "cold_start";
    case Action::model_switch: return "model_switch";
  }
  return "?";
}

// What the scheduler needs to know about one MIG instance.
struct SlotView {
  int id = 0;
  std::optional<std::string> resident;
  bool busy = false;     // requests in flight
  bool loading = false;  // engine init or model switch in progress
  double last_used = -kInf;
  double priority = 0;   // higher survives eviction longer; ties fall back to LRU
};

struct ScheduleDecision {
  int instance = 0;
  Action action = Action::route_warm;
  int chunk_size = 0;
  KernelConfig kernel;
  std::optional<std::string> evicted;
  // Further inactive instances to vacate when one eviction does not free enough link budget.
  std::vector<int> unload;
  bool waits_for_load = false;
};

struct SchedulerOptions {
  bool enforce_c2c_budget = true;
  bool allow_switch = true;
  int mig_instances = 1;
  double cpu_mem_capacity = kInf;
};

// The four-step placement workflow. Returns nullopt when the request has to wait.
inline std::optional<ScheduleDecision> schedule(const Request& req, const ModelSpec& model,
                                                const std::vector<SlotView>& slots,
                                                const PlacementState& state,
                                                const ProfilingTable& table,
                                                const SchedulerOptions& opt) {
  if (req.model_id != model.id) throw ModelError("schedule: request/model mismatch");
  if (model.param_footprint_total > opt.cpu_mem_capacity)
    throw CapacityError(model.id + " does not fit in CPU memory");
  auto attach = [&](ScheduleDecision d) {
    if (const auto* e = table.find(model.id, opt.mig_instances)) {
      d.chunk_size = e->chunk_size;
      d.kernel = e->kernel;
    }
    return d;
  };

  for (const auto& s : slots)
    if (s.resident == model.id) {
      ScheduleDecision d;
      d.instance = s.id;
      d.action = Action::route_warm;
      d.waits_for_load = s.loading;
      return attach(d);
    }

  const bool fits = !opt.enforce_c2c_budget || admit(model, state) == Admission::feasible;
  if (fits)
    for (const auto& s : slots)
      if (!s.resident && !s.busy && !s.loading) {
        ScheduleDecision d;
        d.instance = s.id;
        d.action = Action::cold_start;
        return attach(d);
      }

  if (!opt.allow_switch) return std::nullopt;
  std::vector<const SlotView*> victims;
  for (const auto& s : slots)
    if (s.resident && !s.busy && !s.loading) victims.push_back(&s);
  std::sort(victims.begin(), victims.end(), [](const SlotView* a, const SlotView* b) {
    if (a->priority != b->priority) return a->priority < b->priority;
    if (a->last_used != b->last_used) return a->last_used < b->last_used;
    return a->id < b->id;
  });
  for (const auto* v : victims) {
    if (opt.enforce_c2c_budget) {
      PlacementState after = state;
      release(after, v->id);
      if (admit(model, after) == Admission::infeasible) continue;
    }
    ScheduleDecision d;
    d.instance = v->id;
    d.action = Action::model_switch;
    d.evicted = v->resident;
    return attach(d);
  }
  if (!opt.enforce_c2c_budget || victims.size() < 2) return std::nullopt;
  PlacementState after = state;
  for (std::size_t i = 0; i < victims.size(); ++i) {
    release(after, victims[i]->id);
    if (i == 0 || admit(model, after) == Admission::infeasible) continue;
    ScheduleDecision d;
    d.instance = victims.front()->id;
    d.action = Action::model_switch;
    d.evicted = victims.front()->resident;
    for (std::size_t j = 1; j <= i; ++j) d.unload.push_back(victims[j]->id);
    return attach(d);
  }
  return std::nullopt;
}

// Per-model FIFO queues of request indices, served oldest head first.
class RequestQueues {
 public:
  void push(const std::string& model, std::size_t req, double arrival) {
    queues_[model].push_back({req, arrival});
  }
  bool empty() const {
    for (const auto& [m, q] : queues_)
      if (!q.empty()) return false;
    return true;
  }
  // Models with waiting requests, ordered by the arrival of their head request.
  std::vector<std::string> models_by_head_age() const {
    std::vector<std::pair<double, std::string>> heads;
    for (const auto& [m, q] : queues_)
      if (!q.empty()) heads.emplace_back(q.front().second, m);
    std::stable_sort(heads.begin(), heads.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::string> out;
    for (auto& h : heads) out.push_back(std::move(h.second));
    return out;
  }
  std::size_t head(const std::string& model) const { return queues_.at(model).front().first; }
  void pop(const std::string& model) { queues_.at(model).pop_front(); }
  std::vector<std::size_t> drain() {
    std::vector<std::size_t> out;
    for (auto& [m, q] : queues_) {
      for (const auto& e : q) out.push_back(e.first);
      q.clear();
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::map<std::string, std::deque<std::pair<std::size_t, double>>> queues_;
};

}  // namespace c2c
