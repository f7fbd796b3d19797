#include "catch_amalgamated.hpp"

#include <array>
#include <random>
#include <sstream>

#include "c2csim/gemm_model.hpp"

using namespace c2c;
using Catch::Approx;

namespace {

const GemmWorkload kRef{10240, 4096, 16384, 2, WeightLocation::cpu};

KernelConfig cfg(double alpha) {
  KernelConfig c;
  c.alpha = alpha;
  return c;
}

GemmWorkload random_shape(std::mt19937_64& rng, std::int64_t max_dim) {
  std::uniform_int_distribution<std::int64_t> dim(1, max_dim);
  std::uniform_int_distribution<int> prec(0, 2);
  std::bernoulli_distribution cpu(0.8);
  return {dim(rng), dim(rng), dim(rng), std::array{1, 2, 4}[static_cast<std::size_t>(prec(rng))],
          cpu(rng) ? WeightLocation::cpu : WeightLocation::hbm};
}

KernelConfig random_tiles(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> t(1, 8);
  KernelConfig c;
  c.t_m = 32 * t(rng);
  c.t_n = 32 * t(rng);
  c.t_k = 64 * t(rng);
  return c;
}

}  // namespace

TEST_CASE("symmetric traffic on the reference shape") {
  const GammaCoefficients g{1, 1, 0};
  const auto t = traffic_sym(kRef, cfg(1), g);
  CHECK(t.c2c_bytes == 40.0 * 4096 * 16384 * 2);
  CHECK(t.c2c_bytes == Approx(5.37e9).epsilon(0.001));
  CHECK(t.flops == 2.0 * 10240 * 4096 * 16384);

  GemmWorkload one_row = kRef;
  one_row.m = 256;
  CHECK(traffic_sym(one_row, cfg(1), g).c2c_bytes == 4096.0 * 16384 * 2);

  GemmWorkload hbm = kRef;
  hbm.weight_location = WeightLocation::hbm;
  const auto th = traffic_sym(hbm, cfg(1), g);
  CHECK(th.c2c_bytes == 0);
  CHECK(th.hbm_bytes == t.hbm_bytes + t.c2c_bytes);
}

TEST_CASE("asymmetric traffic on the reference shape") {
  const GammaCoefficients g{1, 1, 0};
  const auto t = traffic_asym(kRef, cfg(0), g);
  CHECK(t.c2c_bytes == 4096.0 * 16384 * 2);
  CHECK(t.c2c_bytes == Approx(0.134e9).epsilon(0.01));

  GemmWorkload single_k{512, 512, 256, 2, WeightLocation::cpu};
  const auto s = traffic_asym(single_k, cfg(0), g);
  CHECK(s.hbm_bytes == 512.0 * 512 * 2 + 512.0 * 256 * 2);
}

TEST_CASE("hybrid split at one half lies strictly between the extremes") {
  const GammaCoefficients g{10, 2, 0};
  const auto sym = traffic_sym(kRef, cfg(1), g);
  const auto asym = traffic_asym(kRef, cfg(0), g);
  const auto half = traffic_hybrid(kRef, cfg(0.5), g);
  GemmWorkload h = kRef;
  h.n = 8192;
  CHECK(half.c2c_bytes == traffic_sym(h, cfg(1), g).c2c_bytes + traffic_asym(h, cfg(0), g).c2c_bytes);
  CHECK(half.c2c_bytes > asym.c2c_bytes);
  CHECK(half.c2c_bytes < sym.c2c_bytes);
  CHECK(split_columns(10, 0.55).n_sym == 5);
  CHECK(split_columns(10, 1.0).n_asym == 0);
}

TEST_CASE("hybrid boundaries, monotonicity and FLOP conservation over random shapes") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> gx(1, 12), go(1, 20), ov(0, 1024);
  for (int i = 0; i < 1000; ++i) {
    const auto w = random_shape(rng, 20000);
    auto c = random_tiles(rng);
    const GammaCoefficients g{gx(rng), go(rng), ov(rng)};
    c.alpha = 1;
    REQUIRE(traffic_hybrid(w, c, g) == traffic_sym(w, c, g));
    c.alpha = 0;
    REQUIRE(traffic_hybrid(w, c, g) == traffic_asym(w, c, g));
    double prev_c2c = -1, prev_out = kInf;
    const double flops = traffic_sym(w, c, g).flops;
    for (int s = 0; s <= 16; ++s) {
      c.alpha = s / 16.0;
      const auto p = traffic_hybrid_paths(w, c, g);
      const auto t = p.total();
      REQUIRE(t.c2c_bytes >= prev_c2c);
      REQUIRE(p.asym.hbm_bytes <= prev_out);
      REQUIRE(t.flops == Approx(flops).epsilon(1e-12));
      prev_c2c = t.c2c_bytes;
      prev_out = p.asym.hbm_bytes;
    }
  }
}

TEST_CASE("asymmetric HBM traffic does not grow with taller M tiles") {
  const GammaCoefficients g{1, 3, 512};
  double prev = kInf;
  for (int tm : {32, 64, 128, 256, 512, 1024}) {
    KernelConfig c = cfg(0);
    c.t_m = tm;
    const double h = traffic_asym(kRef, c, g).hbm_bytes;
    CHECK(h <= prev);
    prev = h;
  }
}

TEST_CASE("invalid workloads and configs are rejected") {
  GemmWorkload w = kRef;
  w.elem_bytes = 3;
  CHECK_THROWS_AS(traffic_sym(w, cfg(1), {}), ModelError);
  w = kRef;
  w.m = 0;
  CHECK_THROWS_AS(traffic_asym(w, cfg(0), {}), ModelError);
  CHECK_THROWS_AS(traffic_hybrid(kRef, cfg(1.5), {}), ModelError);
  KernelConfig bad = cfg(0);
  bad.t_k = 0;
  CHECK_THROWS_AS(traffic_asym(kRef, bad, {}), ModelError);
}

TEST_CASE("tiling oracle single-tile and scaling cases") {
  KernelConfig c;
  c.t_m = c.t_n = c.t_k = 64;
  const GemmWorkload one{64, 64, 64, 2, WeightLocation::cpu};
  for (auto flow : {Dataflow::sym, Dataflow::asym}) {
    const auto o = tiling_oracle(one, c, flow).traffic();
    CHECK(o.c2c_bytes == 64.0 * 64 * 2);
    CHECK(o.hbm_bytes == 64.0 * 64 * 2 + 64.0 * 64 * 2);
  }
  GemmWorkload tall = one;
  tall.m = 256;
  CHECK(tiling_oracle(tall, c, Dataflow::sym).c2c_bytes == 4 * 64.0 * 64 * 2);

  GemmWorkload deep = one;
  deep.k = 256;
  // One write, then a read-modify-write per further K tile.
  CHECK(tiling_oracle(deep, c, Dataflow::asym).hbm_o_bytes == 7 * 64.0 * 64 * 2);

  const GemmWorkload huge{1 << 20, 1 << 20, 1 << 20, 2, WeightLocation::cpu};
  CHECK_THROWS_AS(tiling_oracle(huge, c, Dataflow::sym), ModelError);
}

TEST_CASE("analytic model matches the oracle with structural gammas") {
  std::mt19937_64 rng(5);
  int checked = 0;
  for (int i = 0; i < 300; ++i) {
    auto c = random_tiles(rng);
    std::uniform_int_distribution<std::int64_t> tiles(1, 64);
    const GemmWorkload w{tiles(rng) * c.t_m - (i % 3), tiles(rng) * c.t_k - (i % 5),
                         tiles(rng) * c.t_n - (i % 7), 2, WeightLocation::cpu};
    if (ceil_div(w.m, c.t_m) * ceil_div(w.n, c.t_n) * ceil_div(w.k, c.t_k) > 300000) continue;
    const auto g = structural_gammas(w, c);
    const auto os = tiling_oracle(w, c, Dataflow::sym);
    const auto oa = tiling_oracle(w, c, Dataflow::asym);
    c.alpha = 1;
    const auto s = traffic_sym(w, c, g);
    c.alpha = 0;
    const auto a = traffic_asym(w, c, g);
    REQUIRE(s.c2c_bytes == os.c2c_bytes);
    REQUIRE(a.c2c_bytes == oa.c2c_bytes);
    REQUIRE(s.hbm_bytes == os.hbm_x_bytes + os.hbm_o_bytes);
    REQUIRE(a.hbm_bytes - static_cast<double>(w.m * w.k * 2) == Approx(oa.hbm_o_bytes));
    REQUIRE(s.flops == os.flops);
    ++checked;
  }
  CHECK(checked >= 200);
}

TEST_CASE("latency roofline terms and bottlenecks") {
  const InstanceResources res{132, 4.0 * TB, 7.5 * TB};
  const GammaCoefficients g{10.66, 1, 0};
  const auto sym = latency_breakdown(kRef, cfg(1), res, 450 * GB, g);
  CHECK(sym.bottleneck() == Bottleneck::c2c);
  CHECK(sym.total() == Approx(sym.traffic.c2c_bytes / (450 * GB)));

  const InstanceResources fast{132, kInf, 1e12};
  GemmWorkload hbm = kRef;
  hbm.weight_location = WeightLocation::hbm;
  const auto b = latency_breakdown(hbm, cfg(1), fast, kInf, g);
  CHECK(b.bottleneck() == Bottleneck::compute);
  CHECK(b.total() == Approx(2.0 * 10240 * 4096 * 16384 / (132 * 1e12)));

  GemmWorkload decode = kRef;
  decode.m = 16;
  CHECK(bottleneck(decode, cfg(1), res, 450 * GB, g) == Bottleneck::c2c);
  GemmWorkload big = kRef;
  big.m = 1 << 18;
  CHECK(bottleneck(big, cfg(0), res, 450 * GB, {1, 2, 0}) != Bottleneck::c2c);

  KernelConfig split = cfg(0.5);
  split.sm_split = 0.0;
  CHECK_THROWS_AS(latency_breakdown(kRef, split, res, 450 * GB, g), ModelError);
  CHECK_THROWS_AS(latency_breakdown(kRef, cfg(0), res, 0, g), ModelError);
  split.sm_split = 0.25;
  const auto sb = latency_breakdown(kRef, split, res, 450 * GB, g);
  CHECK(sb.sm_sym == 33);
  CHECK(sb.sm_asym == 99);
}

TEST_CASE("calibration reproduces the reference anchors") {
  const auto gh = builtin_profile("gh200");
  const auto r = calibrate(CalibrationAnchors{}, gh, gh);
  CHECK(r.sym.c2c_bytes == Approx(5.37e9).epsilon(0.02));
  CHECK(r.asym.c2c_bytes == Approx(0.13e9).epsilon(0.05));
  CHECK(r.sym.hbm_bytes == Approx(1.23e9).epsilon(0.01));
  CHECK(r.asym.hbm_bytes == Approx(5.18e9).epsilon(0.01));
  CHECK(r.sym_latency_s == Approx(16.4e-3).epsilon(0.01));
  CHECK(r.asym_latency_s == Approx(4.0e-3).epsilon(0.01));
  CHECK(r.repository.variants.size() == 3 * 3 * gh.mig_table.size());
  CHECK(r.repository.find(2, "wide", 7) != nullptr);
  CHECK(r.repository.find(3, "wide", 7) == nullptr);

  CalibrationAnchors bad;
  bad.sym_hbm_bytes = 0.1e9;
  CHECK_THROWS_AS(calibrate(bad, gh, gh), ModelError);
}

TEST_CASE("sym/asym ordering flips between one and seven instances") {
  const auto gh = builtin_profile("gh200");
  const auto repo = default_repository(gh);
  CHECK(repository_latency(kRef, 1, gh, 1, repo).total() >
        repository_latency(kRef, 0, gh, 1, repo).total());
  CHECK(repository_latency(kRef, 1, gh, 7, repo).total() <=
        repository_latency(kRef, 0, gh, 7, repo).total());
}

TEST_CASE("kernel repository round-trips through text") {
  const auto repo = default_repository(builtin_profile("gb200"));
  std::stringstream ss;
  dump_repository(repo, ss, "cfg");
  const auto back = load_repository(ss);
  CHECK(back.calibration.c2c_efficiency == repo.calibration.c2c_efficiency);
  CHECK(back.calibration.hbm_efficiency == repo.calibration.hbm_efficiency);
  REQUIRE(back.variants.size() == repo.variants.size());
  for (std::size_t i = 0; i < repo.variants.size(); ++i) {
    CHECK(back.variants[i].gamma_x == repo.variants[i].gamma_x);
    CHECK(back.variants[i].shape_class == repo.variants[i].shape_class);
    CHECK(back.variants[i].mig_instances == repo.variants[i].mig_instances);
  }
  std::istringstream bad("calibration c2c_efficiency 0.7\ncalibration hbm_efficiency 0.3\nvariant 2 wide x\n");
  try {
    load_repository(bad);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("shape classes") {
  CHECK(shape_class(4096, 16384) == "wide");
  CHECK(shape_class(14336, 4096) == "narrow");
  CHECK(shape_class(4096, 6144) == "square");
}
