#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "c2csim/common.hpp"
#include "c2csim/error.hpp"

namespace c2c {

struct ControllerParams {
  double tau = 0.1;
  double eta_fast = 0.1;
  double eta_slow = 0.02;
  double ema_beta = 0.3;  // weight of the newest observation
};

inline void validate(const ControllerParams& p) {
  if (!(p.tau > 0)) throw ConfigError("controller tau must be positive");
  if (!(p.eta_slow > 0) || !(p.eta_fast >= p.eta_slow) || p.eta_fast > 1)
    throw ConfigError("controller steps must satisfy 0 < eta_slow <= eta_fast <= 1");
  if (!(p.ema_beta > 0 && p.ema_beta <= 1))
    throw ConfigError("controller ema_beta must lie in (0, 1]");
}

struct ControlObservation {
  double latency = 0;
  double u_hbm = 0;
  double u_c2c = 0;
  double timestamp = 0;
};

struct ControllerState {
  double alpha = 0;
  double ema_latency = 0;
  double ema_u_hbm = 0;
  double ema_u_c2c = 0;
  ControllerParams params;
  double l_budget = kInf;
  bool primed = false;  // EMA seeded by the first observation
  double last_timestamp = -kInf;
  double last_delta = 0;
  std::vector<ControlObservation> pending;

  double delta() const { return ema_u_c2c - ema_u_hbm; }
};

namespace detail {

inline void smooth(ControllerState& s, const ControlObservation& o) {
  if (o.timestamp < s.last_timestamp) throw ModelError("controller observations out of order");
  s.last_timestamp = o.timestamp;
  const double uh = std::clamp(o.u_hbm, 0.0, 1.0), uc = std::clamp(o.u_c2c, 0.0, 1.0);
  if (!s.primed) {
    s.ema_latency = o.latency;
    s.ema_u_hbm = uh;
    s.ema_u_c2c = uc;
    s.primed = true;
    return;
  }
  const double b = s.params.ema_beta;
  s.ema_latency = b * o.latency + (1 - b) * s.ema_latency;
  s.ema_u_hbm = b * uh + (1 - b) * s.ema_u_hbm;
  s.ema_u_c2c = b * uc + (1 - b) * s.ema_u_c2c;
}

inline void step(ControllerState& s) {
  const double d = s.delta();
  s.last_delta = d;
  if (std::abs(d) < s.params.tau) return;
  const double eta = s.ema_latency > s.l_budget ? s.params.eta_fast : s.params.eta_slow;
  // C2C busier than HBM: move work to the asymmetric path.
  s.alpha = std::clamp(s.alpha - eta * (d > 0 ? 1.0 : -1.0), 0.0, 1.0);
}

}  // namespace detail

inline ControllerState update(ControllerState s, const ControlObservation& obs) {
  detail::smooth(s, obs);
  detail::step(s);
  return s;
}

// Queues an observation until the next kernel boundary.
inline void observe(ControllerState& s, const ControlObservation& obs) { s.pending.push_back(obs); }

// At a boundary all buffered observations are folded into the EMA in order, then alpha
// takes at most one step. Inside a kernel nothing changes.
inline bool apply_boundary_rule(ControllerState& s, bool in_flight) {
  if (in_flight || s.pending.empty()) return false;
  for (const auto& o : s.pending) detail::smooth(s, o);
  s.pending.clear();
  detail::step(s);
  return true;
}

// Nearest prebuilt variant; repository variants exist at 1/steps granularity.
inline double quantize_alpha(double alpha, int steps = 16) {
  return std::clamp(std::round(alpha * steps) / steps, 0.0, 1.0);
}

inline std::vector<double> assign_budgets(double slo, const std::vector<double>& profiled) {
  if (profiled.empty()) throw ModelError("assign_budgets: no operators");
  double sum = 0;
  for (double p : profiled) {
    if (!(p > 0)) throw ModelError("assign_budgets: profiled latencies must be positive");
    sum += p;
  }
  std::vector<double> out;
  out.reserve(profiled.size());
  for (double p : profiled) out.push_back(slo * (p / sum));
  return out;
}

struct TrajectoryPoint {
  double t = 0;
  int instance = 0;
  std::string op_class;
  double alpha = 0;
  double delta = 0;
  double latency = 0;
};

inline void write_trajectory(const std::vector<TrajectoryPoint>& pts, std::ostream& out,
                             std::string_view config = {}) {
  out << file_header("controller-trajectory", config) << '\n';
  out << "t_s,instance,op_class,alpha,delta,latency_s\n";
  for (const auto& p : pts)
    out << format_double(p.t) << ',' << p.instance << ',' << p.op_class << ','
        << format_double(p.alpha) << ',' << format_double(p.delta) << ','
        << format_double(p.latency) << '\n';
}

}  // namespace c2c
