#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <queue>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c2csim/common.hpp"
#include "c2csim/contention.hpp"
#include "c2csim/controller.hpp"
#include "c2csim/error.hpp"
#include "c2csim/forward.hpp"
#include "c2csim/gemm_model.hpp"
#include "c2csim/hw_model.hpp"
#include "c2csim/scheduler.hpp"
#include "c2csim/workload.hpp"

namespace c2c {

enum class Policy { c2cserve, dedicated, timeshare, mig_resident };

inline const char* to_string(Policy p) {
  switch (p) {
    case Policy::c2cserve: return "c2cserve";
    case Policy::dedicated: return "dedicated";
    case Policy::timeshare: return "timeshare";
    case Policy::mig_resident: return "mig_resident";
  }
  return "?";
}

inline Policy parse_policy(const std::string& s) {
  if (s == "c2cserve") return Policy::c2cserve;
  if (s == "dedicated") return Policy::dedicated;
  if (s == "timeshare") return Policy::timeshare;
  if (s == "mig_resident") return Policy::mig_resident;
  throw ConfigError("unknown policy '" + s + "' (expected c2cserve, dedicated, timeshare or mig_resident)");
}

enum class StartClass { warm, cold, model_switch };

inline const char* to_string(StartClass c) {
  switch (c) {
    case StartClass::warm: return "warm";
    case StartClass::cold: return "cold";
    case StartClass::model_switch: return "switch";
  }
  return "?";
}

enum class Outcome { served, rejected, oom };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::served: return "served";
    case Outcome::rejected: return "rejected";
    case Outcome::oom: return "oom";
  }
  return "?";
}

struct RunConfig {
  Policy policy = Policy::c2cserve;
  int mig_instances = 3;  // timeshare always runs on the whole GPU
  ControllerParams controller;
  bool controller_enabled = true;
  std::optional<double> fixed_alpha;  // initial (or, without the controller, permanent) ratio
  std::vector<int> chunk_candidates{256, 512, 1024, 2048, 4096, 8192};
  int reference_prompt = 2048;
  double per_layer_overhead_s = 1e-4;  // attention, norms, launch gaps
  double activation_reserve = 2 * GB;  // HBM held back for activations and a minimum KV pool
  // c2cserve streams decode weights no faster than needed to finish a step in this fraction of
  // the TPOT target, leaving the rest of the link to neighbours. 0 disables pacing.
  double decode_pacing = 0.8;
  int max_batch = 64;
  double utilization_window = 0.010;
  bool keep_series = false;
  std::uint64_t seed = 0;
};

inline void validate(const RunConfig& c) {
  validate(c.controller);
  if (c.mig_instances < 1) throw ConfigError("mig instance count must be >= 1");
  if (c.chunk_candidates.empty()) throw ConfigError("no candidate chunk sizes");
  if (c.reference_prompt < 1) throw ConfigError("reference prompt must be >= 1 token");
  if (c.per_layer_overhead_s < 0 || c.activation_reserve < 0 || c.decode_pacing < 0)
    throw ConfigError("overheads and reserves must be non-negative");
  if (c.max_batch < 1) throw ConfigError("max_batch must be >= 1");
  if (!(c.utilization_window > 0)) throw ConfigError("utilization window must be positive");
  if (c.fixed_alpha && !(*c.fixed_alpha >= 0 && *c.fixed_alpha <= 1))
    throw ConfigError("alpha must lie in [0, 1]");
}

inline std::string describe(const RunConfig& c, const std::string& chip) {
  std::string s = "chip=" + chip + " policy=" + to_string(c.policy) +
                  " mig=" + std::to_string(c.mig_instances) + " seed=" + std::to_string(c.seed) +
                  " tau=" + format_double(c.controller.tau) +
                  " eta_fast=" + format_double(c.controller.eta_fast) +
                  " eta_slow=" + format_double(c.controller.eta_slow) +
                  " controller=" + (c.controller_enabled ? "on" : "off") + " chunks=";
  for (int x : c.chunk_candidates) s += std::to_string(x) + ",";
  if (c.fixed_alpha) s += " alpha=" + format_double(*c.fixed_alpha);
  return s;
}

struct RequestRecord {
  Request request;
  double ttft = 0;
  double tpot_mean = 0;
  std::vector<double> token_latencies;
  StartClass start_class = StartClass::warm;
  bool slo_met_ttft = false;
  bool slo_met_tpot = false;
  Outcome outcome = Outcome::served;
  int instance = -1;
  double finish_time = 0;
  bool triggered_load = false;  // this request caused the engine init / switch
  double load_latency = 0;
};

struct RunReport {
  std::string policy;
  int mig_instances = 0;
  std::size_t requests = 0;
  std::size_t served = 0;
  std::size_t rejected = 0;
  std::size_t oom = 0;
  double p95_ttft = 0;
  double p95_tpot = 0;
  double ttft_attainment = 0;
  double tpot_attainment = 0;
  double cold_start_latency_mean = 0;  // TTFT of requests that found no active engine
  double model_switch_latency_mean = 0;
  std::size_t cold_starts = 0;
  std::size_t model_switches = 0;
  double c2c_bytes_charged = 0;
  double c2c_bytes_granted = 0;
  double makespan = 0;
  std::vector<UtilizationRow> utilization;
  std::vector<TrajectoryPoint> trajectory;
  std::vector<RequestRecord> records;
};

inline double percentile_nearest_rank(std::vector<double> v, double p) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline RunReport report(std::vector<RequestRecord> records, std::vector<UtilizationRow> windows = {}) {
  RunReport r;
  r.requests = records.size();
  std::vector<double> ttft, tpot;
  double cold_sum = 0, switch_sum = 0;
  std::size_t cold_n = 0, ttft_ok = 0, tpot_ok = 0;
  for (const auto& rec : records) {
    if (rec.slo_met_ttft) ++ttft_ok;
    if (rec.slo_met_tpot) ++tpot_ok;
    if (rec.outcome == Outcome::rejected) ++r.rejected;
    if (rec.outcome == Outcome::oom) ++r.oom;
    if (rec.outcome != Outcome::served) continue;
    ++r.served;
    ttft.push_back(rec.ttft);
    tpot.push_back(rec.tpot_mean);
    r.makespan = std::max(r.makespan, rec.finish_time);
    if (rec.start_class != StartClass::warm) {
      cold_sum += rec.ttft;
      ++cold_n;
    }
    if (rec.triggered_load) {
      if (rec.start_class == StartClass::model_switch) {
        ++r.model_switches;
        switch_sum += rec.load_latency;
      } else {
        ++r.cold_starts;
      }
    }
  }
  r.p95_ttft = percentile_nearest_rank(ttft, 0.95);
  r.p95_tpot = percentile_nearest_rank(tpot, 0.95);
  if (r.requests) {
    r.ttft_attainment = static_cast<double>(ttft_ok) / static_cast<double>(r.requests);
    r.tpot_attainment = static_cast<double>(tpot_ok) / static_cast<double>(r.requests);
  }
  if (cold_n) r.cold_start_latency_mean = cold_sum / static_cast<double>(cold_n);
  if (r.model_switches) r.model_switch_latency_mean = switch_sum / static_cast<double>(r.model_switches);
  r.utilization = std::move(windows);
  r.records = std::move(records);
  return r;
}

// ---------------------------------------------------------------------------
// Start-up costs
// ---------------------------------------------------------------------------

struct StartupCost {
  double seconds = 0;
  bool oom = false;
};

inline bool weights_stream(Policy p) { return p == Policy::c2cserve; }

// Whether a policy that stages weights into HBM can hold `m` in a slice of `hbm` bytes.
inline bool fits_hbm(const ModelSpec& m, double hbm, double reserve) {
  return m.param_footprint_total <= hbm - reserve;
}

inline StartupCost cold_start_timeline(StartClass cls, const ModelSpec& m, const SuperchipProfile& chip,
                                       Policy policy, const MigProfile& slice,
                                       double activation_reserve = 2 * GB,
                                       const KernelCalibration& cal = {}) {
  if (cls == StartClass::warm) return {};
  if (policy == Policy::c2cserve)
    return {cls == StartClass::cold ? engine_init(chip, m) : switch_constant(chip, m), false};
  if (!fits_hbm(m, slice.hbm_per_instance, activation_reserve)) return {0, true};
  // Staged policies re-create the engine and copy the weights into HBM either way.
  const double staging = policy == Policy::mig_resident ? effective_link_bandwidth(chip, cal)
                                                        : chip.pcie_bandwidth;
  return {engine_init(chip, m) + m.param_footprint_total / staging, false};
}

// ---------------------------------------------------------------------------
// Analytic single-request timelines
// ---------------------------------------------------------------------------

struct PrefillTimeline {
  double ttft = 0;
  std::vector<TrafficEstimate> ledger;  // one entry per chunk
};

inline PrefillTimeline prefill_timeline(const Request& req, int chunk_size, const ForwardContext& ctx,
                                        double c2c_share, double alpha = 0) {
  if (chunk_size < 1) throw ModelError("chunk size must be >= 1");
  PrefillTimeline out;
  const AlphaFn a = [alpha](const std::string&) { return alpha; };
  for (int done = 0; done < req.prompt_tokens; done += chunk_size) {
    const auto segs = forward_segments(ctx, std::min(chunk_size, req.prompt_tokens - done), a);
    out.ttft += forward_latency(segs, c2c_share);
    out.ledger.push_back(forward_traffic(segs));
  }
  return out;
}

inline double decode_step(const ForwardContext& ctx, double c2c_share, int batch = 1, double alpha = 0) {
  const AlphaFn a = [alpha](const std::string&) { return alpha; };
  return forward_latency(forward_segments(ctx, batch, a), c2c_share);
}

// ---------------------------------------------------------------------------
// Fluid link: segments progress at min(1/local, grant/c2c_bytes); grants are max-min fair.
// ---------------------------------------------------------------------------

class FluidLink {
 public:
  struct Flow {
    ForwardSegment seg;
    double remaining = 1;  // fraction of the segment still to run
    double cap = kInf;     // extra ceiling on the C2C demand
    double grant = 0;
    double avail = 0;
    double rate = 0;  // fraction per second
    double start = 0;
  };

  explicit FluidLink(double capacity) : capacity_(capacity) {
    if (!(capacity > 0)) throw ModelError("link capacity must be positive");
  }

  void start(int id, ForwardSegment seg, double demand_cap = kInf) {
    Flow f;
    f.seg = std::move(seg);
    f.cap = demand_cap;
    f.start = now_;
    flows_[id] = std::move(f);
  }
  void finish(int id) { flows_.erase(id); }
  bool active(int id) const { return flows_.count(id) != 0; }
  const Flow& flow(int id) const { return flows_.at(id); }
  double now() const { return now_; }
  double capacity() const { return capacity_; }

  // Moves every flow to time t. Returns the C2C bytes moved.
  double advance(double t, UtilizationTracker* tracker = nullptr) {
    const double dt = t - now_;
    double moved = 0;
    if (dt > 0) {
      for (auto& [id, f] : flows_) {
        f.remaining = t >= completion_time(id) ? 0.0 : std::max(0.0, f.remaining - f.rate * dt);
        moved += f.grant * dt;
        if (tracker) tracker->record(id, now_, t, f.grant, f.avail, f.rate * f.seg.hbm_bytes);
      }
    }
    now_ = std::max(now_, t);
    return moved;
  }

  // Recomputes grants and rates. Returns the ids whose rate changed.
  std::vector<int> rebalance() {
    C2cLinkState link;
    link.total_bandwidth = capacity_;
    link.epoch = now_;
    for (const auto& [id, f] : flows_)
      if (f.seg.c2c_bytes > 0) link.active_streams[id] = demand(f);
    const auto grants = allocate(link);
    std::vector<int> changed;
    for (auto& [id, f] : flows_) {
      f.avail = available_share(link, id);
      double rate;
      if (f.seg.c2c_bytes > 0) {
        f.grant = grants.at(id);
        rate = f.grant / f.seg.c2c_bytes;
      } else {
        f.grant = 0;
        rate = f.seg.local_s > 0 ? 1 / f.seg.local_s : kInf;
      }
      if (rate != f.rate) {
        f.rate = rate;
        changed.push_back(id);
      }
    }
    return changed;
  }

  double completion_time(int id) const {
    const auto& f = flows_.at(id);
    if (f.remaining <= 0) return now_;
    return f.rate > 0 ? now_ + f.remaining / f.rate : kInf;
  }

 private:
  static double demand(const Flow& f) {
    const double d = f.seg.local_s > 0 ? f.seg.c2c_bytes / f.seg.local_s : kInf;
    return std::min(d, f.cap);
  }

  double capacity_;
  double now_ = 0;
  std::map<int, Flow> flows_;
};

// ---------------------------------------------------------------------------
// Discrete-event simulator
// ---------------------------------------------------------------------------

enum class EventKind { arrival, placement_done, segment_done, instance_released };

struct SimEvent {
  double time = 0;
  std::uint64_t seq = 0;  // insertion order breaks ties
  EventKind kind = EventKind::arrival;
  int instance = -1;
  std::size_t request = 0;
  std::uint64_t generation = 0;
};

class EventQueue {
 public:
  void push(SimEvent e) {
    e.seq = next_seq_++;
    heap_.push(e);
  }
  SimEvent pop() {
    SimEvent e = heap_.top();
    heap_.pop();
    return e;
  }
  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }

 private:
  struct Later {
    bool operator()(const SimEvent& a, const SimEvent& b) const {
      return a.time > b.time || (a.time == b.time && a.seq > b.seq);
    }
  };
  std::priority_queue<SimEvent, std::vector<SimEvent>, Later> heap_;
  std::uint64_t next_seq_ = 0;
};

namespace detail {

class Simulator {
 public:
  Simulator(const Trace& trace, const std::vector<ModelSpec>& catalog, const SuperchipProfile& chip,
            const KernelRepository& repo, const RunConfig& cfg)
      : trace_(trace), chip_(chip), repo_(repo), cfg_(cfg),
        link_(effective_link_bandwidth(chip, repo.calibration)),
        tracker_(cfg.utilization_window, cfg.keep_series) {
    validate(cfg);
    for (const auto& m : catalog) models_[m.id] = &m;
    for (std::size_t i = 0; i < trace.size(); ++i) {
      const auto& r = trace[i];
      if (!models_.count(r.model_id)) throw ConfigError("trace references unknown model '" + r.model_id + "'");
      if (r.prompt_tokens < 1 || r.output_tokens < 1) throw ConfigError("request with empty prompt or output");
      if (i && r.arrival_ms < trace[i - 1].arrival_ms) throw ConfigError("trace is not sorted by arrival");
      if (models_.at(r.model_id)->param_footprint_total > chip.cpu_mem_capacity)
        throw CapacityError(r.model_id + " exceeds CPU memory");
    }
    mig_count_ = cfg.policy == Policy::timeshare ? 1 : cfg.mig_instances;
    slice_ = mig_profile(chip, mig_count_);
    placement_.c2c_avail = link_.capacity();

    std::vector<ModelSpec> used;
    for (const auto& m : catalog)
      for (const auto& r : trace)
        if (r.model_id == m.id) {
          used.push_back(m);
          break;
        }
    ProfilingOptions po;
    po.candidate_chunks = cfg.chunk_candidates;
    po.reference_prompt = cfg.reference_prompt;
    po.weights = weights_stream(cfg.policy) ? WeightLocation::cpu : WeightLocation::hbm;
    po.per_layer_overhead_s = cfg.per_layer_overhead_s;
    table_ = build_profiling_table(used, chip, {mig_count_}, repo, po);

    for (int i = 0; i < mig_count_; ++i) {
      Inst in;
      in.id = i;
      in.res = make_resources(chip, slice_, repo.calibration);
      tracker_.set_hbm_bandwidth(i, in.res.hbm_bw);
      insts_.push_back(std::move(in));
    }
    if (cfg.policy == Policy::dedicated) {
      std::size_t next = 0;
      for (const auto& m : used) {
        if (next >= insts_.size()) break;
        if (!fits_hbm(m, slice_.hbm_per_instance, cfg.activation_reserve)) continue;
        auto& in = insts_[next++];
        bind_model(in, *models_.at(m.id), 0);
        in.initialized = true;
        in.pinned = true;
      }
    }
    reqs_.resize(trace.size());
    for (std::size_t i = 0; i < trace.size(); ++i) {
      reqs_[i].req = &trace[i];
      reqs_[i].model = models_.at(trace[i].model_id);
      reqs_[i].tokens.reserve(static_cast<std::size_t>(trace[i].output_tokens));
      SimEvent e;
      e.time = trace[i].arrival_s();
      e.kind = EventKind::arrival;
      e.request = i;
      events_.push(e);
    }
  }

  RunReport run() {
    while (!events_.empty()) {
      const SimEvent e = events_.pop();
      granted_ += link_.advance(e.time, &tracker_);
      now_ = e.time;
      switch (e.kind) {
        case EventKind::arrival: on_arrival(e.request); break;
        case EventKind::placement_done: on_placement_done(e.instance, e.generation); break;
        case EventKind::segment_done: on_segment_done(e.instance, e.generation); break;
        case EventKind::instance_released: retry_queues(); break;
      }
      rebalance();
      if (!placement_.invariant_holds()) throw ModelError("C2C placement budget exceeded");
      if (++processed_ % 4096 == 0) tracker_.prune(now_ - 1.0);
    }
    for (std::size_t idx : queues_.drain()) reqs_[idx].outcome = Outcome::rejected;

    std::vector<RequestRecord> recs;
    recs.reserve(reqs_.size());
    for (auto& r : reqs_) recs.push_back(make_record(r));
    RunReport rep = report(std::move(recs), cfg_.keep_series ? tracker_.series() : std::vector<UtilizationRow>{});
    rep.policy = to_string(cfg_.policy);
    rep.mig_instances = mig_count_;
    rep.c2c_bytes_charged = charged_;
    rep.c2c_bytes_granted = granted_;
    rep.trajectory = std::move(trajectory_);
    return rep;
  }

 private:
  struct Req {
    const Request* req = nullptr;
    const ModelSpec* model = nullptr;
    int prefilled = 0;
    int generated = 0;
    double last_token = 0;
    double ttft = 0;
    double finish = 0;
    std::vector<double> tokens;
    StartClass cls = StartClass::warm;
    Outcome outcome = Outcome::served;
    bool done = false;
    int instance = -1;
    bool triggered_load = false;
    double load_latency = 0;
    double kv = 0;
  };

  struct Inst {
    int id = 0;
    InstanceResources res;
    const ModelSpec* model = nullptr;
    bool initialized = false;
    bool pinned = false;
    bool loading = false;
    StartClass loading_class = StartClass::warm;
    std::uint64_t load_gen = 0;
    double last_used = -kInf;
    int chunk = 256;
    double kv_capacity = 0;
    double kv_used = 0;
    std::deque<std::size_t> waiting;
    std::vector<std::size_t> batch;
    // Current iteration.
    bool running = false;
    std::vector<ForwardSegment> segs;
    std::size_t seg = 0;
    std::string phase;
    std::optional<std::size_t> prefill_req;
    int prefill_tokens = 0;
    std::vector<std::size_t> decode_reqs;
    double demand_cap = kInf;
    std::uint64_t gen = 0;
    std::map<std::string, ControllerState> ctrl;
    std::map<std::string, double> budgets;
  };

  ForwardContext context(const Inst& in) const {
    ForwardContext ctx;
    ctx.model = in.model;
    ctx.resources = in.res;
    ctx.repo = &repo_;
    ctx.mig_instances = mig_count_;
    ctx.weights = weights_stream(cfg_.policy) ? WeightLocation::cpu : WeightLocation::hbm;
    ctx.per_layer_overhead_s = cfg_.per_layer_overhead_s;
    return ctx;
  }

  bool controlled() const { return cfg_.policy == Policy::c2cserve && cfg_.controller_enabled; }

  double alpha_for(Inst& in, const std::string& phase, const std::string& cls) {
    if (!controlled() || cls == "other") return cfg_.fixed_alpha.value_or(0.0);
    return quantize_alpha(controller(in, phase, cls).alpha);
  }

  ControllerState& controller(Inst& in, const std::string& phase, const std::string& cls) {
    const std::string key = phase + ":" + cls;
    auto it = in.ctrl.find(key);
    if (it != in.ctrl.end()) return it->second;
    ControllerState s;
    s.params = cfg_.controller;
    s.alpha = cfg_.fixed_alpha.value_or(select_kernel(*in.model, mig_count_, repo_).alpha);
    if (auto b = in.budgets.find(key); b != in.budgets.end()) s.l_budget = b->second;
    return in.ctrl.emplace(key, s).first->second;
  }

  // Per-operator latency budgets: the TPOT target spread over a decode step and the TTFT
  // target (less the switch constant) spread over the chunks of the reference prompt.
  void assign_operator_budgets(Inst& in) {
    in.budgets.clear();
    const auto ctx = context(in);
    const ModelSpec& m = *in.model;
    const double chunks = std::ceil(static_cast<double>(cfg_.reference_prompt) / in.chunk);
    const double prefill_slo =
        std::max(m.ttft_slo - switch_constant(chip_, m), 0.1 * m.ttft_slo) / chunks;
    for (const auto& [phase, tokens, slo] :
         {std::tuple{std::string("decode"), 1, m.tpot_slo},
          std::tuple{std::string("prefill"), in.chunk, prefill_slo}}) {
      const auto segs = forward_segments(ctx, tokens, nullptr);
      std::vector<double> lat;
      for (const auto& s : segs) lat.push_back(std::max(s.duration(link_.capacity()), 1e-12));
      const auto budgets = assign_budgets(slo, lat);
      for (std::size_t i = 0; i < segs.size(); ++i)
        if (segs[i].op_class != "other") in.budgets[phase + ":" + segs[i].op_class] += budgets[i];
    }
  }

  void bind_model(Inst& in, const ModelSpec& m, int chunk) {
    in.model = &m;
    in.ctrl.clear();
    const auto* e = table_.find(m.id, mig_count_);
    in.chunk = chunk > 0 ? chunk : (e ? e->chunk_size : cfg_.chunk_candidates.front());
    const double weights_in_hbm = weights_stream(cfg_.policy) ? 0.0 : m.param_footprint_total;
    in.kv_capacity = std::max(0.0, slice_.hbm_per_instance - weights_in_hbm - cfg_.activation_reserve);
    in.kv_used = 0;
    assign_operator_budgets(in);
  }

  std::vector<SlotView> slots() const {
    std::vector<SlotView> out;
    for (const auto& in : insts_) {
      SlotView s;
      s.id = in.id;
      if (in.model) s.resident = in.model->id;
      s.busy = in.running || !in.waiting.empty() || !in.batch.empty();
      s.loading = in.loading;
      s.last_used = in.last_used;
      s.priority = in.pinned ? 1 : 0;
      out.push_back(s);
    }
    return out;
  }

  void on_arrival(std::size_t idx) {
    Req& r = reqs_[idx];
    const ModelSpec& m = *r.model;
    if (cfg_.policy == Policy::dedicated) {
      for (auto& in : insts_)
        if (in.model == &m) {
          route(in, idx, StartClass::warm);
          return;
        }
      r.outcome = Outcome::rejected;
      return;
    }
    if (!weights_stream(cfg_.policy) && !fits_hbm(m, slice_.hbm_per_instance, cfg_.activation_reserve)) {
      r.outcome = Outcome::oom;
      return;
    }
    if (weights_stream(cfg_.policy) && required_c2c_bw(m) > placement_.c2c_avail) {
      r.outcome = Outcome::rejected;
      return;
    }
    // Per-model FIFO: never overtake requests already waiting for the same model.
    const auto waiting = queues_.models_by_head_age();
    if (std::find(waiting.begin(), waiting.end(), m.id) != waiting.end() || !try_schedule(idx))
      queues_.push(m.id, idx, r.req->arrival_s());
  }

  bool try_schedule(std::size_t idx) {
    Req& r = reqs_[idx];
    SchedulerOptions opt;
    opt.enforce_c2c_budget = weights_stream(cfg_.policy);
    opt.allow_switch = cfg_.policy != Policy::dedicated;
    opt.mig_instances = mig_count_;
    opt.cpu_mem_capacity = chip_.cpu_mem_capacity;
    const auto d = schedule(*r.req, *r.model, slots(), placement_, table_, opt);
    if (!d) return false;
    Inst& in = insts_[static_cast<std::size_t>(d->instance)];
    if (d->action == Action::route_warm) {
      route(in, idx, d->waits_for_load ? in.loading_class : StartClass::warm);
      return true;
    }
    const StartClass cls = d->action == Action::cold_start ? StartClass::cold : StartClass::model_switch;
    for (int id : d->unload) {
      Inst& other = insts_[static_cast<std::size_t>(id)];
      release(placement_, id);
      other.model = nullptr;
      other.initialized = false;
      other.ctrl.clear();
      other.budgets.clear();
    }
    release(placement_, in.id);
    place(placement_, in.id, *r.model, weights_stream(cfg_.policy));
    bind_model(in, *r.model, d->chunk_size);
    const auto cost = cold_start_timeline(cls, *r.model, chip_, cfg_.policy, slice_,
                                          cfg_.activation_reserve, repo_.calibration);
    in.initialized = true;
    in.loading = true;
    in.loading_class = cls;
    r.triggered_load = true;
    r.load_latency = cost.seconds;
    SimEvent e;
    e.time = now_ + cost.seconds;
    e.kind = EventKind::placement_done;
    e.instance = in.id;
    e.generation = ++in.load_gen;
    events_.push(e);
    route(in, idx, cls);
    return true;
  }

  void route(Inst& in, std::size_t idx, StartClass cls) {
    Req& r = reqs_[idx];
    r.cls = cls;
    r.instance = in.id;
    r.kv = in.model->kv_bytes_per_token * (r.req->prompt_tokens + r.req->output_tokens);
    in.waiting.push_back(idx);
    if (!in.running && !in.loading) start_iteration(in);
  }

  void on_placement_done(int id, std::uint64_t gen) {
    Inst& in = insts_[static_cast<std::size_t>(id)];
    if (gen != in.load_gen || !in.loading) return;
    in.loading = false;
    in.last_used = now_;
    if (!in.running) start_iteration(in);
  }

  void start_iteration(Inst& in) {
    while (!in.waiting.empty() && static_cast<int>(in.batch.size()) < cfg_.max_batch) {
      const Req& r = reqs_[in.waiting.front()];
      if (!in.batch.empty() && in.kv_used + r.kv > in.kv_capacity) break;
      in.kv_used += r.kv;
      in.batch.push_back(in.waiting.front());
      in.waiting.pop_front();
    }
    in.decode_reqs.clear();
    in.prefill_req.reset();
    in.prefill_tokens = 0;
    for (std::size_t idx : in.batch) {
      const Req& r = reqs_[idx];
      if (r.prefilled < r.req->prompt_tokens) {
        if (!in.prefill_req) {
          in.prefill_req = idx;
          in.prefill_tokens = std::min(in.chunk, r.req->prompt_tokens - r.prefilled);
        }
      } else {
        in.decode_reqs.push_back(idx);
      }
    }
    const int tokens = static_cast<int>(in.decode_reqs.size()) + in.prefill_tokens;
    if (tokens == 0) {
      in.running = false;
      in.last_used = now_;
      SimEvent e;
      e.time = now_;
      e.kind = EventKind::instance_released;
      e.instance = in.id;
      events_.push(e);
      return;
    }
    in.phase = in.prefill_req ? "prefill" : "decode";
    in.segs = forward_segments(context(in), tokens,
                               [&](const std::string& cls) { return alpha_for(in, in.phase, cls); });
    in.demand_cap = kInf;
    if (in.phase == "decode" && weights_stream(cfg_.policy) && cfg_.decode_pacing > 0) {
      const double bytes = forward_traffic(in.segs).c2c_bytes;
      in.demand_cap = bytes / (cfg_.decode_pacing * in.model->tpot_slo);
    }
    in.running = true;
    in.seg = 0;
    begin_segment(in);
  }

  void begin_segment(Inst& in) {
    // Zero-length segments finish on the spot.
    while (in.seg < in.segs.size() && in.segs[in.seg].c2c_bytes <= 0 && in.segs[in.seg].local_s <= 0)
      ++in.seg;
    if (in.seg == in.segs.size()) {
      finish_iteration(in);
      return;
    }
    link_.start(in.id, in.segs[in.seg], in.demand_cap);
    ++in.gen;
    dirty_ = true;
  }

  void on_segment_done(int id, std::uint64_t gen) {
    Inst& in = insts_[static_cast<std::size_t>(id)];
    if (gen != in.gen || !link_.active(id)) return;
    const auto flow = link_.flow(id);
    link_.finish(id);
    charged_ += flow.seg.c2c_bytes;
    observe_segment(in, flow);
    ++in.seg;
    begin_segment(in);
  }

  void observe_segment(Inst& in, const FluidLink::Flow& f) {
    if (!controlled() || f.seg.op_class == "other") return;
    const double latency = now_ - f.start;
    if (!(latency > 0)) return;
    auto& st = controller(in, in.phase, f.seg.op_class);
    const auto u = tracker_.sample_utilization(in.id, now_, latency);
    ControlObservation o{latency, u.u_hbm, u.u_c2c, now_};
    observe(st, o);
    apply_boundary_rule(st, false);
    if (cfg_.keep_series)
      trajectory_.push_back({now_, in.id, in.phase + ":" + f.seg.op_class, st.alpha, st.last_delta, latency});
  }

  void finish_iteration(Inst& in) {
    for (std::size_t idx : in.decode_reqs) {
      Req& r = reqs_[idx];
      r.tokens.push_back(now_ - r.last_token);
      r.last_token = now_;
      if (++r.generated >= r.req->output_tokens) complete(in, idx);
    }
    if (in.prefill_req) {
      Req& r = reqs_[*in.prefill_req];
      r.prefilled += in.prefill_tokens;
      if (r.prefilled >= r.req->prompt_tokens) {
        r.ttft = now_ - r.req->arrival_s();
        r.tokens.push_back(r.ttft);
        r.last_token = now_;
        r.generated = 1;
        if (r.generated >= r.req->output_tokens) complete(in, *in.prefill_req);
      }
    }
    in.batch.erase(std::remove_if(in.batch.begin(), in.batch.end(),
                                  [&](std::size_t idx) { return reqs_[idx].done; }),
                   in.batch.end());
    in.running = false;
    in.last_used = now_;
    start_iteration(in);
  }

  void complete(Inst& in, std::size_t idx) {
    Req& r = reqs_[idx];
    r.done = true;
    r.finish = now_;
    in.kv_used = std::max(0.0, in.kv_used - r.kv);
  }

  void retry_queues() {
    for (bool progress = true; progress;) {
      progress = false;
      for (const auto& m : queues_.models_by_head_age()) {
        const std::size_t idx = queues_.head(m);
        if (try_schedule(idx)) {
          queues_.pop(m);
          progress = true;
          break;
        }
      }
    }
  }

  void rebalance() {
    if (!dirty_) return;
    dirty_ = false;
    const auto changed = link_.rebalance();
    for (int id : changed) {
      Inst& in = insts_[static_cast<std::size_t>(id)];
      SimEvent e;
      e.time = link_.completion_time(id);
      if (!std::isfinite(e.time)) continue;
      e.kind = EventKind::segment_done;
      e.instance = id;
      e.generation = ++in.gen;
      events_.push(e);
    }
  }

  RequestRecord make_record(const Req& r) const {
    RequestRecord rec;
    rec.request = *r.req;
    rec.outcome = r.done ? Outcome::served : (r.outcome == Outcome::served ? Outcome::rejected : r.outcome);
    rec.start_class = r.cls;
    rec.instance = r.instance;
    rec.triggered_load = r.triggered_load;
    rec.load_latency = r.load_latency;
    if (rec.outcome != Outcome::served) return rec;
    rec.ttft = r.ttft;
    rec.token_latencies = r.tokens;
    rec.finish_time = r.finish;
    if (r.tokens.size() > 1) {
      double sum = 0;
      for (std::size_t i = 1; i < r.tokens.size(); ++i) sum += r.tokens[i];
      rec.tpot_mean = sum / static_cast<double>(r.tokens.size() - 1);
    }
    rec.slo_met_ttft = rec.ttft <= r.model->ttft_slo;
    rec.slo_met_tpot = rec.tpot_mean <= r.model->tpot_slo;
    return rec;
  }

  const Trace& trace_;
  SuperchipProfile chip_;
  const KernelRepository& repo_;
  RunConfig cfg_;
  std::map<std::string, const ModelSpec*> models_;
  int mig_count_ = 1;
  MigProfile slice_;
  ProfilingTable table_;
  FluidLink link_;
  UtilizationTracker tracker_;
  PlacementState placement_;
  RequestQueues queues_;
  EventQueue events_;
  std::vector<Inst> insts_;
  std::vector<Req> reqs_;
  std::vector<TrajectoryPoint> trajectory_;
  double now_ = 0;
  double charged_ = 0;
  double granted_ = 0;
  bool dirty_ = false;
  std::uint64_t processed_ = 0;
};

}  // namespace detail

inline RunReport run(const Trace& trace, const std::vector<ModelSpec>& catalog,
                     const SuperchipProfile& chip, const KernelRepository& repo, const RunConfig& cfg) {
  return detail::Simulator(trace, catalog, chip, repo, cfg).run();
}

// ---------------------------------------------------------------------------
// Two-instance co-run microbenchmark: each instance loops forward passes over one prompt
// chunk with a fixed host-side step overhead between them.
// ---------------------------------------------------------------------------

struct CorunSpec {
  std::vector<ModelSpec> models;  // one per instance
  int mig_instances = 2;
  int chunk = 512;
  double alpha = 1;  // conventional output-stationary kernel
  double step_overhead_s = 0.05;
  double stagger = 0.5;  // start offset between instances, in solo periods
  int forwards = 40;
};

struct CorunResult {
  std::vector<double> solo;   // tokens/s
  std::vector<double> corun;  // tokens/s
  double gap = 0;
};

namespace detail {

inline std::vector<double> loop_forwards(const std::vector<std::vector<ForwardSegment>>& work,
                                         const std::vector<double>& offsets, double capacity,
                                         double horizon, int chunk) {
  const std::size_t n = work.size();
  FluidLink link(capacity);
  std::vector<std::size_t> seg(n, 0);
  std::vector<bool> started(n, false);
  std::vector<std::vector<double>> done(n);
  auto begin = [&](std::size_t i) { link.start(static_cast<int>(i), work[i][seg[i]]); };
  for (;;) {
    double next = kInf;
    for (std::size_t i = 0; i < n; ++i) {
      if (!started[i]) next = std::min(next, offsets[i]);
      else next = std::min(next, link.completion_time(static_cast<int>(i)));
    }
    if (!(next < horizon)) break;
    link.advance(next);
    for (std::size_t i = 0; i < n; ++i) {
      const int id = static_cast<int>(i);
      if (!started[i]) {
        if (offsets[i] <= next) {
          started[i] = true;
          begin(i);
        }
        continue;
      }
      if (link.completion_time(id) > next) continue;
      link.finish(id);
      if (++seg[i] == work[i].size()) {
        seg[i] = 0;
        done[i].push_back(next);
      }
      begin(i);
    }
    link.rebalance();
  }
  // Average period over whole forwards completed after every instance has started.
  const double warm = *std::max_element(offsets.begin(), offsets.end());
  std::vector<double> tput(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> t;
    for (double x : done[i])
      if (x > warm) t.push_back(x);
    if (t.size() >= 3) {
      // Skip the first completion, which may straddle the start of the overlap.
      tput[i] = chunk * static_cast<double>(t.size() - 2) / (t.back() - t[1]);
    }
  }
  return tput;
}

}  // namespace detail

inline CorunResult corun_experiment(const SuperchipProfile& chip, const KernelRepository& repo,
                                    const CorunSpec& spec) {
  if (spec.models.empty()) throw ConfigError("corun needs at least one model");
  if (static_cast<int>(spec.models.size()) > spec.mig_instances)
    throw ConfigError("more co-run models than MIG instances");
  if (spec.chunk < 1 || spec.forwards < 4) throw ConfigError("corun needs chunk >= 1 and >= 4 forwards");
  const MigProfile slice = mig_profile(chip, spec.mig_instances);
  const double capacity = effective_link_bandwidth(chip, repo.calibration);
  std::vector<std::vector<ForwardSegment>> work;
  std::vector<double> period;
  for (const auto& m : spec.models) {
    ForwardContext ctx;
    ctx.model = &m;
    ctx.resources = make_resources(chip, slice, repo.calibration);
    ctx.repo = &repo;
    ctx.mig_instances = spec.mig_instances;
    const double a = spec.alpha;
    auto segs = forward_segments(ctx, spec.chunk, [a](const std::string&) { return a; });
    ForwardSegment step;
    step.op = "step_overhead";
    step.op_class = "other";
    step.local_s = spec.step_overhead_s;
    if (step.local_s > 0) segs.push_back(step);
    period.push_back(forward_latency(segs, capacity));
    work.push_back(std::move(segs));
  }
  CorunResult r;
  const double longest = *std::max_element(period.begin(), period.end());
  for (std::size_t i = 0; i < work.size(); ++i) {
    const double h = period[i] * (spec.forwards + 2);
    r.solo.push_back(detail::loop_forwards({work[i]}, {0.0}, capacity, h, spec.chunk)[0]);
  }
  std::vector<double> offsets;
  for (std::size_t i = 0; i < work.size(); ++i)
    offsets.push_back(static_cast<double>(i) * spec.stagger * period[0]);
  const double horizon = offsets.back() + longest * (2.0 * work.size()) * (spec.forwards + 2);
  r.corun = detail::loop_forwards(work, offsets, capacity, horizon, spec.chunk);
  double total = 0;
  for (double x : r.corun) total += x;
  r.gap = interference_gap(r.solo, total);
  return r;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const RunReport& r, std::string_view config = {}) {
  nlohmann::json j;
  j["tool"] = std::string("c2csim ") + std::string(kToolVersion);
  j["config_hash"] = hex64(fnv1a(config));
  j["policy"] = r.policy;
  j["mig_instances"] = r.mig_instances;
  j["requests"] = r.requests;
  j["served"] = r.served;
  j["rejected"] = r.rejected;
  j["oom"] = r.oom;
  j["p95_ttft_s"] = r.p95_ttft;
  j["p95_tpot_s"] = r.p95_tpot;
  j["ttft_attainment"] = r.ttft_attainment;
  j["tpot_attainment"] = r.tpot_attainment;
  j["cold_start_latency_mean_s"] = r.cold_start_latency_mean;
  j["model_switch_latency_mean_s"] = r.model_switch_latency_mean;
  j["cold_starts"] = r.cold_starts;
  j["model_switches"] = r.model_switches;
  j["c2c_bytes_charged"] = r.c2c_bytes_charged;
  j["c2c_bytes_granted"] = r.c2c_bytes_granted;
  j["makespan_s"] = r.makespan;
  return j;
}

inline void write_summary(const RunReport& r, std::ostream& out, std::string_view config = {}) {
  out << file_header("run-summary", config) << '\n';
  out << "policy                 " << r.policy << " (" << r.mig_instances << " MIG instance"
      << (r.mig_instances == 1 ? "" : "s") << ")\n";
  out << "requests               " << r.requests << " served " << r.served << ", rejected "
      << r.rejected << ", oom " << r.oom << '\n';
  out << "p95 TTFT / TPOT        " << r.p95_ttft << " s / " << r.p95_tpot << " s\n";
  out << "TTFT / TPOT attainment " << r.ttft_attainment << " / " << r.tpot_attainment << '\n';
  out << "cold-start mean        " << r.cold_start_latency_mean << " s (" << r.cold_starts
      << " cold starts)\n";
  out << "model-switch mean      " << r.model_switch_latency_mean << " s (" << r.model_switches
      << " switches)\n";
  out << "C2C bytes              " << r.c2c_bytes_charged << '\n';
}

inline void write_records(const std::vector<RequestRecord>& recs, std::ostream& out,
                          std::string_view config = {}) {
  out << file_header("requests", config) << '\n';
  out << "arrival_ms,model_id,prompt_tokens,output_tokens,outcome,start_class,instance,ttft_s,"
         "tpot_mean_s,slo_ttft,slo_tpot,finish_s\n";
  for (const auto& r : recs)
    out << format_double(r.request.arrival_ms) << ',' << r.request.model_id << ','
        << r.request.prompt_tokens << ',' << r.request.output_tokens << ',' << to_string(r.outcome)
        << ',' << to_string(r.start_class) << ',' << r.instance << ',' << format_double(r.ttft) << ','
        << format_double(r.tpot_mean) << ',' << (r.slo_met_ttft ? 1 : 0) << ','
        << (r.slo_met_tpot ? 1 : 0) << ',' << format_double(r.finish_time) << '\n';
}

}  // namespace c2c
