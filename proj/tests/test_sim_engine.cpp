#include "catch_amalgamated.hpp"

#include <sstream>

#include "c2csim/sim_engine.hpp"

using namespace c2c;
using Catch::Approx;

namespace {

const SuperchipProfile& gh200() {
  static const auto chip = builtin_profile("gh200");
  return chip;
}

const KernelRepository& repo() {
  static const auto r = default_repository(gh200());
  return r;
}

const std::vector<ModelSpec>& catalog() {
  static const auto c = default_catalog();
  return c;
}

const Workload& contended() {
  static const auto w = contended_workload(1, 300);
  return w;
}

ForwardContext context(const ModelSpec& m, int mig, WeightLocation where = WeightLocation::cpu,
                       double overhead = 0) {
  ForwardContext ctx;
  ctx.model = &m;
  ctx.resources = make_resources(gh200(), mig_profile(gh200(), mig), repo().calibration);
  ctx.repo = &repo();
  ctx.mig_instances = mig;
  ctx.weights = where;
  ctx.per_layer_overhead_s = overhead;
  return ctx;
}

RequestRecord record(bool ttft_ok, double ttft = 0.5) {
  RequestRecord r;
  r.slo_met_ttft = ttft_ok;
  r.slo_met_tpot = true;
  r.ttft = ttft;
  r.tpot_mean = 0.05;
  return r;
}

void check_causal(const RunReport& rep) {
  for (const auto& r : rep.records) {
    if (r.outcome != Outcome::served) continue;
    CAPTURE(r.request.model_id, r.request.arrival_ms);
    REQUIRE(r.token_latencies.size() == static_cast<std::size_t>(r.request.output_tokens));
    REQUIRE(r.ttft > 0);
    REQUIRE(r.token_latencies.front() == r.ttft);
    double t = r.request.arrival_s();
    for (double x : r.token_latencies) {
      REQUIRE(x > 0);
      t += x;
    }
    REQUIRE(r.finish_time == Approx(t).epsilon(1e-9));
    REQUIRE(r.instance >= 0);
  }
}

}  // namespace

TEST_CASE("policy names") {
  for (auto p : {Policy::c2cserve, Policy::dedicated, Policy::timeshare, Policy::mig_resident})
    CHECK(parse_policy(to_string(p)) == p);
  CHECK_THROWS_AS(parse_policy("fastest"), ConfigError);
  CHECK(std::string(to_string(StartClass::model_switch)) == "switch");
}

TEST_CASE("run configuration validation") {
  RunConfig c;
  CHECK_NOTHROW(validate(c));
  c.mig_instances = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.chunk_candidates.clear();
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.fixed_alpha = 1.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.controller.eta_slow = 0.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.mig_instances = 5;
  CHECK_THROWS_AS(run({{0, "llama-3b", 16, 4}}, catalog(), gh200(), repo(), c), ConfigError);
}

TEST_CASE("report aggregation") {
  std::vector<RequestRecord> recs(20, record(true));
  recs[7] = record(false, 3.0);
  const auto r = report(recs);
  CHECK(r.requests == 20);
  CHECK(r.ttft_attainment == Approx(0.95));
  CHECK(r.tpot_attainment == 1.0);
  CHECK(r.p95_ttft == 0.5);
  CHECK(r.p95_tpot == 0.05);
  CHECK(percentile_nearest_rank(std::vector<double>(10, 2.5), 0.95) == 2.5);
  CHECK(percentile_nearest_rank({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.95) == 10);
  CHECK(percentile_nearest_rank({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.5) == 5);
  CHECK(percentile_nearest_rank({}, 0.95) == 0);
  recs[3].outcome = Outcome::rejected;
  recs[3].slo_met_ttft = recs[3].slo_met_tpot = false;
  const auto r2 = report(recs);
  CHECK(r2.rejected == 1);
  CHECK(r2.served == 19);
  CHECK(r2.ttft_attainment == Approx(0.9));
}

TEST_CASE("start-up costs") {
  const auto& chip = gh200();
  const auto& l3 = find_model(catalog(), "llama-3b");
  const auto& l8 = find_model(catalog(), "llama-8b");
  const auto& l70 = find_model(catalog(), "llama-70b");
  const auto& qwen = find_model(catalog(), "qwen3-30b-a3b");
  const auto slice3 = mig_profile(chip, 3);
  const auto whole = mig_profile(chip, 1);

  CHECK(cold_start_timeline(StartClass::warm, l8, chip, Policy::timeshare, whole).seconds == 0);
  CHECK(cold_start_timeline(StartClass::model_switch, l3, chip, Policy::c2cserve, slice3).seconds == 0.050);
  CHECK(cold_start_timeline(StartClass::model_switch, qwen, chip, Policy::c2cserve, slice3).seconds == 0.318);
  CHECK(cold_start_timeline(StartClass::cold, l3, chip, Policy::c2cserve, slice3).seconds == 0.45);
  const auto l70_stream = cold_start_timeline(StartClass::model_switch, l70, chip, Policy::c2cserve, slice3);
  CHECK_FALSE(l70_stream.oom);

  const auto staged = cold_start_timeline(StartClass::model_switch, l8, chip, Policy::timeshare, whole);
  CHECK_FALSE(staged.oom);
  CHECK(staged.seconds >= 16 * GB / chip.pcie_bandwidth);
  CHECK(staged.seconds == Approx(0.45 + l8.param_footprint_total / chip.pcie_bandwidth));
  CHECK(cold_start_timeline(StartClass::cold, l70, chip, Policy::timeshare, whole).oom);
  CHECK(cold_start_timeline(StartClass::cold, l70, chip, Policy::mig_resident, slice3).oom);
  const auto resident = cold_start_timeline(StartClass::cold, l3, chip, Policy::mig_resident, slice3);
  CHECK(resident.seconds < cold_start_timeline(StartClass::cold, l3, chip, Policy::timeshare, whole).seconds);
}

TEST_CASE("decode is bound by streaming the activated weights") {
  const auto& l70 = find_model(catalog(), "llama-70b");
  const double link = effective_link_bandwidth(gh200(), repo().calibration);
  const auto ctx = context(l70, 1);
  const double step = decode_step(ctx, link);
  CHECK(step == Approx(l70.param_footprint_per_token / link).epsilon(0.05));
  CHECK(decode_step(ctx, link / 2) == Approx(2 * step).epsilon(0.05));
  CHECK(decode_step(context(l70, 1, WeightLocation::hbm), link) < step / 2);
}

TEST_CASE("chunked prefill accounting") {
  const auto& l8 = find_model(catalog(), "llama-8b");
  const auto ctx = context(l8, 3);
  const double link = effective_link_bandwidth(gh200(), repo().calibration) / 3;
  const Request r{0, "llama-8b", 2000, 8};
  const auto t = prefill_timeline(r, 512, ctx, link);
  CHECK(t.ledger.size() == 4);
  const auto whole = prefill_timeline(r, 4096, ctx, link);
  CHECK(whole.ledger.size() == 1);
  double c2c = 0;
  for (const auto& e : t.ledger) c2c += e.c2c_bytes;
  CHECK(c2c == Approx(4 * whole.ledger[0].c2c_bytes).epsilon(0.01));
  CHECK(t.ttft > whole.ttft);
  CHECK_THROWS_AS(prefill_timeline(r, 0, ctx, link), ModelError);
}

TEST_CASE("fluid link shares capacity max-min fairly") {
  FluidLink link(100);
  ForwardSegment bound;
  bound.c2c_bytes = 100;
  ForwardSegment slow;
  slow.c2c_bytes = 10;
  slow.local_s = 1;  // wants 10 B/s
  link.start(0, bound);
  link.start(1, bound);
  link.start(2, slow);
  link.rebalance();
  CHECK(link.flow(2).grant == Approx(10));
  CHECK(link.flow(0).grant == Approx(45));
  CHECK(link.completion_time(0) == Approx(100.0 / 45));
  CHECK(link.advance(1.0) == Approx(100));
  link.finish(1);
  link.rebalance();
  CHECK(link.flow(0).grant == Approx(90));
  CHECK(link.completion_time(0) == Approx(1.0 + 55.0 / 90));
  link.start(3, bound, 20);
  link.rebalance();
  CHECK(link.flow(3).grant == Approx(20));
  CHECK(link.flow(0).grant == Approx(70));
  CHECK_THROWS_AS(FluidLink(0), ModelError);
}

TEST_CASE("empty trace") {
  const auto rep = run({}, catalog(), gh200(), repo(), RunConfig{});
  CHECK(rep.requests == 0);
  CHECK(rep.served == 0);
  CHECK(rep.c2c_bytes_charged == 0);
  CHECK(rep.ttft_attainment == 0);
}

TEST_CASE("a lone request follows the analytic timeline") {
  const auto& l8 = find_model(catalog(), "llama-8b");
  RunConfig cfg;
  cfg.controller_enabled = false;
  cfg.fixed_alpha = 0.0;
  cfg.chunk_candidates = {512};
  cfg.decode_pacing = 0;
  const Trace trace{{1000, "llama-8b", 1500, 6}};
  const auto rep = run(trace, catalog(), gh200(), repo(), cfg);
  REQUIRE(rep.served == 1);
  const auto& rec = rep.records[0];
  CHECK(rec.start_class == StartClass::cold);
  CHECK(rec.triggered_load);

  const double link = effective_link_bandwidth(gh200(), repo().calibration);
  const auto ctx = context(l8, cfg.mig_instances, WeightLocation::cpu, cfg.per_layer_overhead_s);
  const double expect = engine_init(gh200(), l8) + prefill_timeline(trace[0], 512, ctx, link).ttft;
  CHECK(rec.ttft == Approx(expect).epsilon(1e-9));
  const double step = decode_step(ctx, link);
  REQUIRE(rec.token_latencies.size() == 6);
  for (std::size_t i = 1; i < 6; ++i) CHECK(rec.token_latencies[i] == Approx(step).epsilon(1e-9));
  CHECK(rec.tpot_mean == Approx(step).epsilon(1e-9));
  CHECK(rep.c2c_bytes_charged == Approx(rep.c2c_bytes_granted).epsilon(1e-9));
  check_causal(rep);
}

TEST_CASE("a second request reuses the warm engine") {
  RunConfig cfg;
  const Trace trace{{0, "llama-3b", 256, 4}, {5000, "llama-3b", 256, 4}};
  const auto rep = run(trace, catalog(), gh200(), repo(), cfg);
  REQUIRE(rep.served == 2);
  CHECK(rep.records[0].start_class == StartClass::cold);
  CHECK(rep.records[1].start_class == StartClass::warm);
  CHECK(rep.records[1].ttft < rep.records[0].ttft);
  CHECK(rep.cold_starts == 1);
}

TEST_CASE("runs are deterministic and conserve link bytes") {
  const auto& w = contended();
  REQUIRE(w.trace.size() > 20);
  for (auto policy : {Policy::c2cserve, Policy::timeshare, Policy::mig_resident, Policy::dedicated}) {
    CAPTURE(to_string(policy));
    RunConfig cfg;
    cfg.policy = policy;
    const auto a = run(w.trace, w.catalog, gh200(), repo(), cfg);
    const auto b = run(w.trace, w.catalog, gh200(), repo(), cfg);
    REQUIRE(a.records.size() == w.trace.size());
    CHECK(a.served + a.rejected + a.oom == a.requests);
    CHECK(a.c2c_bytes_charged == Approx(a.c2c_bytes_granted).epsilon(1e-6));
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      REQUIRE(a.records[i].ttft == b.records[i].ttft);
      REQUIRE(a.records[i].finish_time == b.records[i].finish_time);
      REQUIRE(a.records[i].instance == b.records[i].instance);
    }
    check_causal(a);
    if (policy != Policy::c2cserve) CHECK(a.c2c_bytes_charged == 0);
    else CHECK(a.c2c_bytes_charged > 0);
  }
}

TEST_CASE("streaming start-up beats staged start-up") {
  const auto& w = contended();
  RunConfig c2c_cfg, ts_cfg;
  ts_cfg.policy = Policy::timeshare;
  const auto ours = run(w.trace, w.catalog, gh200(), repo(), c2c_cfg);
  const auto ts = run(w.trace, w.catalog, gh200(), repo(), ts_cfg);
  REQUIRE(ours.cold_starts + ours.model_switches > 0);
  CHECK(ours.cold_start_latency_mean < ts.cold_start_latency_mean);
  CHECK(ours.ttft_attainment >= ts.ttft_attainment);
}

TEST_CASE("policy-specific outcomes") {
  const Trace trace{{0, "llama-3b", 128, 4}, {10, "llama-70b", 128, 4}, {20, "llama-8b", 128, 4}};
  RunConfig cfg;
  cfg.policy = Policy::mig_resident;
  const auto mr = run(trace, catalog(), gh200(), repo(), cfg);
  CHECK(mr.records[1].outcome == Outcome::oom);
  CHECK(mr.records[0].outcome == Outcome::served);

  cfg.policy = Policy::timeshare;
  const auto ts = run(trace, catalog(), gh200(), repo(), cfg);
  CHECK(ts.mig_instances == 1);
  CHECK(ts.records[1].outcome == Outcome::oom);

  cfg.policy = Policy::dedicated;
  cfg.mig_instances = 2;
  const auto dd = run(trace, catalog(), gh200(), repo(), cfg);
  // Two slices go to the two models that fit; everything else is turned away.
  CHECK(dd.records[0].outcome == Outcome::served);
  CHECK(dd.records[0].start_class == StartClass::warm);
  CHECK(dd.records[1].outcome == Outcome::rejected);
  CHECK(dd.records[2].outcome == Outcome::served);

  cfg.policy = Policy::c2cserve;
  cfg.mig_instances = 3;
  const auto ours = run(trace, catalog(), gh200(), repo(), cfg);
  CHECK(ours.records[1].outcome == Outcome::served);
}

TEST_CASE("trace validation") {
  RunConfig cfg;
  CHECK_THROWS_AS(run({{0, "unknown", 16, 4}}, catalog(), gh200(), repo(), cfg), ConfigError);
  CHECK_THROWS_AS(run({{10, "llama-3b", 16, 4}, {5, "llama-3b", 16, 4}}, catalog(), gh200(), repo(), cfg),
                  ConfigError);
  CHECK_THROWS_AS(run({{0, "llama-3b", 0, 4}}, catalog(), gh200(), repo(), cfg), ConfigError);
}

TEST_CASE("controller trajectory is recorded when asked") {
  RunConfig cfg;
  cfg.keep_series = true;
  const Trace trace{{0, "llama-8b", 4096, 32}};
  const auto rep = run(trace, catalog(), gh200(), repo(), cfg);
  REQUIRE(rep.served == 1);
  CHECK_FALSE(rep.trajectory.empty());
  CHECK_FALSE(rep.utilization.empty());
  for (const auto& p : rep.trajectory) {
    CHECK(p.alpha >= 0);
    CHECK(p.alpha <= 1);
  }
  cfg.controller_enabled = false;
  CHECK(run(trace, catalog(), gh200(), repo(), cfg).trajectory.empty());
}

TEST_CASE("co-run interference grows with chunk size and footprint") {
  CorunSpec spec;
  const auto& l3 = find_model(catalog(), "llama-3b");
  const auto& l70 = find_model(catalog(), "llama-70b");
  spec.models = {l3, l3};
  spec.chunk = 256;
  const auto small = corun_experiment(gh200(), repo(), spec);
  spec.chunk = 8192;
  const auto large = corun_experiment(gh200(), repo(), spec);
  REQUIRE(small.solo.size() == 2);
  CHECK(small.solo[0] > 0);
  CHECK(small.gap < large.gap);
  spec.chunk = 2048;
  const auto light = corun_experiment(gh200(), repo(), spec);
  spec.models = {l70, l70};
  const auto heavy = corun_experiment(gh200(), repo(), spec);
  CHECK(light.gap < heavy.gap);
  spec.models = {l3, l3, l3};
  CHECK_THROWS_AS(corun_experiment(gh200(), repo(), spec), ConfigError);
}

TEST_CASE("report serialization") {
  const Trace trace{{0, "llama-3b", 64, 3}, {1, "llama-8b", 64, 3}};
  const auto rep = run(trace, catalog(), gh200(), repo(), RunConfig{});
  const auto j = to_json(rep, "cfg");
  CHECK(j["requests"] == 2);
  CHECK(j["policy"] == "c2cserve");
  CHECK(j.contains("p95_ttft_s"));
  CHECK(j["config_hash"] == hex64(fnv1a("cfg")));
  std::stringstream ss;
  write_records(rep.records, ss, "cfg");
  std::string line;
  int lines = 0;
  while (std::getline(ss, line)) ++lines;
  CHECK(lines == 4);
  std::stringstream sum;
  write_summary(rep, sum);
  CHECK(sum.str().find("attainment") != std::string::npos);
}
