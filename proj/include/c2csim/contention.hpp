#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <ostream>
#include <vector>

#include "c2csim/common.hpp"
#include "c2csim/error.hpp"

namespace c2c {

struct C2cLinkState {
  double total_bandwidth = 0;
  std::map<int, double> active_streams;  // instance id -> demanded bytes/s
  double epoch = 0;
};

// Max-min fair water-filling. Streams are visited in ascending demand (ties by id) and each
// takes min(demand, remaining / streams_left).
inline std::map<int, double> allocate(const C2cLinkState& link) {
  std::vector<std::pair<double, int>> order;
  order.reserve(link.active_streams.size());
  for (const auto& [id, demand] : link.active_streams) {
    if (demand < 0) throw ModelError("negative bandwidth demand");
    order.emplace_back(demand, id);
  }
  std::sort(order.begin(), order.end());
  std::map<int, double> grants;
  double remaining = link.total_bandwidth;
  std::size_t left = order.size();
  for (const auto& [demand, id] : order) {
    const double fair = remaining / static_cast<double>(left);
    const double g = std::min(demand, fair);
    grants[id] = g;
    remaining = std::max(0.0, remaining - g);
    --left;
  }
  return grants;
}

// What `id` would be granted if it asked for everything, given the other streams' demands.
inline double available_share(const C2cLinkState& link, int id) {
  C2cLinkState probe = link;
  probe.active_streams[id] = kInf;
  return allocate(probe).at(id);
}

inline double interference_gap(const std::vector<double>& solo, double corun, bool* clamped = nullptr) {
  if (solo.empty()) throw ModelError("interference_gap: no solo throughputs");
  double sum = 0;
  for (double s : solo) {
    if (!(s > 0)) throw ModelError("interference_gap: solo throughputs must be positive");
    sum += s;
  }
  const double gap = 1 - corun / sum;
  if (clamped) *clamped = gap < 0;
  return std::max(0.0, gap);
}

struct BandwidthSample {
  double u_hbm = 0;
  double u_c2c = 0;
  double window = 0;
};

struct UtilizationRow {
  double t_start = 0;
  int instance = 0;
  double u_hbm = 0;
  double u_c2c = 0;
  double c2c_bytes = 0;
  double hbm_bytes = 0;
};

// Per-instance record of piecewise-constant transfer rates. Keeps raw intervals for windowed
// sampling and, optionally, fixed-width bins for series export.
class UtilizationTracker {
 public:
  explicit UtilizationTracker(double bin_width = 0.010, bool keep_series = false)
      : bin_width_(bin_width), keep_series_(keep_series) {
    if (!(bin_width > 0)) throw ModelError("utilization window must be positive");
  }

  void set_hbm_bandwidth(int id, double bw) { hbm_bw_[id] = bw; }

  // Over [t0, t1) instance `id` moved C2C bytes at c2c_rate while `available` was its
  // uncapped share, and HBM bytes at hbm_rate.
  void record(int id, double t0, double t1, double c2c_rate, double available, double hbm_rate) {
    if (!(t1 > t0)) return;
    auto& q = intervals_[id];
    q.push_back({t0, t1, c2c_rate, available, hbm_rate});
    if (keep_series_) bin(id, q.back());
  }

  BandwidthSample sample_utilization(int id, double t_end, double window) const {
    if (!(window > 0)) throw ModelError("sample_utilization: zero window");
    BandwidthSample s;
    s.window = window;
    auto it = intervals_.find(id);
    if (it == intervals_.end()) return s;
    const double t0 = t_end - window;
    double c2c = 0, avail = 0, hbm = 0;
    for (auto iv = it->second.rbegin(); iv != it->second.rend(); ++iv) {
      if (iv->t1 <= t0) break;
      const double lo = std::max(t0, iv->t0), hi = std::min(t_end, iv->t1);
      if (hi <= lo) continue;
      c2c += iv->c2c_rate * (hi - lo);
      avail += iv->available * (hi - lo);
      hbm += iv->hbm_rate * (hi - lo);
    }
    if (avail > 0) s.u_c2c = std::clamp(c2c / avail, 0.0, 1.0);
    if (auto bw = hbm_bw_.find(id); bw != hbm_bw_.end() && bw->second > 0)
      s.u_hbm = std::clamp(hbm / (window * bw->second), 0.0, 1.0);
    return s;
  }

  // Drops raw intervals that end before `t`. Series bins are kept.
  void prune(double t) {
    for (auto& [id, q] : intervals_)
      while (!q.empty() && q.front().t1 < t) q.pop_front();
  }

  std::vector<UtilizationRow> series() const {
    std::vector<UtilizationRow> rows;
    for (const auto& [id, bins] : bins_) {
      const double bw = hbm_bw_.count(id) ? hbm_bw_.at(id) : 0;
      for (const auto& [idx, b] : bins) {
        UtilizationRow r;
        r.t_start = static_cast<double>(idx) * bin_width_;
        r.instance = id;
        r.c2c_bytes = b.c2c;
        r.hbm_bytes = b.hbm;
        r.u_c2c = b.avail > 0 ? std::clamp(b.c2c / b.avail, 0.0, 1.0) : 0.0;
        r.u_hbm = bw > 0 ? std::clamp(b.hbm / (bin_width_ * bw), 0.0, 1.0) : 0.0;
        rows.push_back(r);
      }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
      return a.t_start < b.t_start || (a.t_start == b.t_start && a.instance < b.instance);
    });
    return rows;
  }

  double bin_width() const { return bin_width_; }

 private:
  struct Interval {
    double t0, t1, c2c_rate, available, hbm_rate;
  };
  struct Bin {
    double c2c = 0, avail = 0, hbm = 0;
  };

  void bin(int id, const Interval& iv) {
    auto& bins = bins_[id];
    auto idx = static_cast<std::int64_t>(std::floor(iv.t0 / bin_width_));
    for (;; ++idx) {
      const double b0 = static_cast<double>(idx) * bin_width_, b1 = b0 + bin_width_;
      const double lo = std::max(b0, iv.t0), hi = std::min(b1, iv.t1);
      if (hi > lo) {
        auto& b = bins[idx];
        b.c2c += iv.c2c_rate * (hi - lo);
        b.avail += iv.available * (hi - lo);
        b.hbm += iv.hbm_rate * (hi - lo);
      }
      if (b1 >= iv.t1) break;
    }
  }

  double bin_width_;
  bool keep_series_;
  std::map<int, std::deque<Interval>> intervals_;
  std::map<int, std::map<std::int64_t, Bin>> bins_;
  std::map<int, double> hbm_bw_;
};

inline void write_utilization_series(const std::vector<UtilizationRow>& rows, std::ostream& out,
                                     std::string_view config = {}) {
  out << file_header("utilization", config) << '\n';
  out << "t_start_s,instance,u_hbm,u_c2c,c2c_bytes,hbm_bytes\n";
  for (const auto& r : rows)
    out << format_double(r.t_start) << ',' << r.instance << ',' << format_double(r.u_hbm) << ','
        << format_double(r.u_c2c) << ',' << format_double(r.c2c_bytes) << ','
        << format_double(r.hbm_bytes) << '\n';
}

}  // namespace c2c
