#include "catch_amalgamated.hpp"

#include <random>
#include <sstream>

#include "c2csim/contention.hpp"

using namespace c2c;
using Catch::Approx;

namespace {

C2cLinkState link(double total, std::map<int, double> demands) {
  C2cLinkState l;
  l.total_bandwidth = total;
  l.active_streams = std::move(demands);
  return l;
}

}  // namespace

TEST_CASE("max-min fair allocation examples") {
  auto g = allocate(link(450 * GB, {{0, 200 * GB}}));
  CHECK(g.at(0) == 200 * GB);
  g = allocate(link(450 * GB, {{0, 300 * GB}, {1, 300 * GB}, {2, 300 * GB}}));
  for (int i = 0; i < 3; ++i) CHECK(g.at(i) == Approx(150 * GB));
  g = allocate(link(450 * GB, {{0, 400 * GB}, {1, 50 * GB}}));
  CHECK(g.at(0) == Approx(400 * GB));
  CHECK(g.at(1) == Approx(50 * GB));
  g = allocate(link(450 * GB, {{0, 500 * GB}, {1, 500 * GB}}));
  CHECK(g.at(0) == Approx(225 * GB));
  CHECK(g.at(1) == Approx(225 * GB));
  g = allocate(link(450 * GB, {{0, 1000 * GB}}));
  CHECK(g.at(0) == 450 * GB);
  CHECK(allocate(link(450 * GB, {})).empty());
  CHECK_THROWS_AS(allocate(link(450 * GB, {{0, -1}})), ModelError);
}

TEST_CASE("allocation is feasible, Pareto efficient and monotone under contention") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(0, 300 * GB);
  std::uniform_int_distribution<int> n(1, 7);
  for (int trial = 0; trial < 500; ++trial) {
    std::map<int, double> demands;
    const int count = n(rng);
    for (int i = 0; i < count; ++i) demands[i] = d(rng);
    const auto l = link(450 * GB, demands);
    const auto g = allocate(l);
    double sum = 0;
    bool short_changed = false;
    for (const auto& [id, grant] : g) {
      REQUIRE(grant <= demands.at(id) + 1e-6);
      REQUIRE(grant >= 0);
      sum += grant;
      if (grant < demands.at(id) - 1) short_changed = true;
    }
    REQUIRE(sum <= 450 * GB * (1 + 1e-12));
    if (short_changed) REQUIRE(sum == Approx(450 * GB));

    auto more = demands;
    more[count] = d(rng);
    const auto g2 = allocate(link(450 * GB, more));
    for (const auto& [id, grant] : g) REQUIRE(g2.at(id) <= grant + 1e-6);
  }
}

TEST_CASE("available share assumes the stream asks for everything") {
  const auto l = link(450 * GB, {{0, 100 * GB}, {1, 400 * GB}});
  CHECK(available_share(l, 0) == Approx(225 * GB));
  CHECK(available_share(l, 2) == Approx(175 * GB));
}

TEST_CASE("interference gap definition") {
  CHECK(interference_gap({100, 100}, 200) == 0);
  CHECK(interference_gap({100, 100}, 144) == Approx(0.28));
  CHECK(interference_gap({100, 100}, 116) == Approx(0.42));
  bool clamped = false;
  CHECK(interference_gap({100, 100}, 250, &clamped) == 0);
  CHECK(clamped);
  CHECK_THROWS_AS(interference_gap({}, 1), ModelError);
  CHECK_THROWS_AS(interference_gap({0, 1}, 1), ModelError);
}

TEST_CASE("windowed utilization samples") {
  UtilizationTracker t(0.010);
  t.set_hbm_bandwidth(0, 1 * TB);
  t.set_hbm_bandwidth(1, 1 * TB);
  auto idle = t.sample_utilization(0, 1.0, 0.01);
  CHECK(idle.u_c2c == 0);
  CHECK(idle.u_hbm == 0);

  // Granted 150 GB/s but moving 75 GB/s on average over the window.
  t.record(0, 0.0, 0.5, 150 * GB, 150 * GB, 1 * TB);
  t.record(0, 0.5, 1.0, 0.0, 150 * GB, 1 * TB);
  const auto s = t.sample_utilization(0, 1.0, 1.0);
  CHECK(s.u_c2c == Approx(0.5));
  CHECK(s.u_hbm == Approx(1.0));
  CHECK(s.window == 1.0);
  const auto late = t.sample_utilization(0, 1.0, 0.25);
  CHECK(late.u_c2c == 0);
  CHECK_THROWS_AS(t.sample_utilization(0, 1.0, 0), ModelError);
}

TEST_CASE("utilization series export") {
  UtilizationTracker t(0.010, true);
  t.set_hbm_bandwidth(0, 1 * TB);
  t.record(0, 0.0, 0.025, 100 * GB, 200 * GB, 0.5 * TB);
  const auto rows = t.series();
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].u_c2c == Approx(0.5));
  CHECK(rows[0].u_hbm == Approx(0.5));
  CHECK(rows[2].c2c_bytes == Approx(100 * GB * 0.005));
  t.prune(1.0);
  CHECK(t.series().size() == 3);
  std::stringstream ss;
  write_utilization_series(rows, ss, "x");
  std::string header, columns;
  std::getline(ss, header);
  std::getline(ss, columns);
  CHECK(header.rfind("# c2csim", 0) == 0);
  CHECK(columns == "t_start_s,instance,u_hbm,u_c2c,c2c_bytes,hbm_bytes");
}
