#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "c2csim/common.hpp"
#include "c2csim/error.hpp"

namespace c2c {

// One row of a chip's MIG partition table.
struct MigProfile {
  int instance_count = 1;
  double hbm_per_instance = 0;     // bytes
  double hbm_bw_per_instance = 0;  // bytes/s
  int sm_per_instance = 0;

  friend bool operator==(const MigProfile&, const MigProfile&) = default;
};

// A CPU-GPU Superchip. Bandwidths in bytes/s, capacities in bytes, latencies in seconds.
struct SuperchipProfile {
  std::string name;
  double cpu_mem_capacity = 0;
  double hbm_capacity = 0;
  double hbm_bandwidth_total = 0;
  // Aggregate link figure as vendors quote it (both directions).
  double c2c_bandwidth_peak = 0;
  // Per-direction CPU->GPU bandwidth. Only weight fetches consume it.
  double c2c_bandwidth = 0;
  int sm_count_total = 0;
  double flops_per_sm = 0;  // dense BF16 tensor-core rate
  double pcie_bandwidth = 64 * GB;
  double engine_init_latency_dense = 0;
  double engine_init_latency_moe = 0;
  double switch_latency_dense = 0;
  double switch_latency_moe = 0;
  std::vector<MigProfile> mig_table;
};

enum class InstanceState { idle, active, switching };

struct MigInstance {
  int id = 0;
  MigProfile profile;
  std::optional<std::string> resident_model;
  double hbm_reserved = 0;
  InstanceState state = InstanceState::idle;
};

inline void validate(const SuperchipProfile& chip) {
  auto positive = [&](double v, const char* what) {
    if (!(v > 0) || !std::isfinite(v))
      throw ConfigError(chip.name + ": " + what + " must be positive and finite");
  };
  positive(chip.cpu_mem_capacity, "cpu_mem_capacity");
  positive(chip.hbm_capacity, "hbm_capacity");
  positive(chip.hbm_bandwidth_total, "hbm_bandwidth_total");
  positive(chip.c2c_bandwidth_peak, "c2c_bandwidth_peak");
  positive(chip.c2c_bandwidth, "c2c_bandwidth");
  positive(chip.flops_per_sm, "flops_per_sm");
  positive(chip.pcie_bandwidth, "pcie_bandwidth");
  positive(chip.engine_init_latency_dense, "engine_init_latency_dense");
  positive(chip.engine_init_latency_moe, "engine_init_latency_moe");
  positive(chip.switch_latency_dense, "switch_latency_dense");
  positive(chip.switch_latency_moe, "switch_latency_moe");
  if (chip.sm_count_total <= 0) throw ConfigError(chip.name + ": sm_count_total must be positive");
  if (chip.c2c_bandwidth >= chip.hbm_bandwidth_total)
    throw ConfigError(chip.name + ": c2c_bandwidth must be below hbm_bandwidth_total");
  if (chip.mig_table.empty()) throw ConfigError(chip.name + ": empty MIG table");
  for (const auto& p : chip.mig_table) {
    const std::string row = chip.name + " mig " + std::to_string(p.instance_count) + ": ";
    if (p.instance_count < 1) throw ConfigError(row + "instance_count must be >= 1");
    if (!(p.hbm_per_instance > 0) || !(p.hbm_bw_per_instance > 0) || p.sm_per_instance <= 0)
      throw ConfigError(row + "capacities must be positive");
    if (p.instance_count * p.sm_per_instance > chip.sm_count_total)
      throw ConfigError(row + "SMs exceed chip total");
    // Small relative slack: bandwidth rows are quoted to one decimal.
    if (p.instance_count * p.hbm_bw_per_instance > chip.hbm_bandwidth_total * (1 + 1e-9))
      throw ConfigError(row + "HBM bandwidth exceeds chip total");
    if (p.instance_count * p.hbm_per_instance > chip.hbm_capacity * (1 + 1e-9))
      throw ConfigError(row + "HBM capacity exceeds chip total");
  }
}

namespace detail {

// GH200 partition table, used verbatim for gh200 and as fractions for other chips.
inline const std::vector<MigProfile>& gh200_mig_table() {
  static const std::vector<MigProfile> table = {
      {1, 96 * GB, 4.0 * TB, 132},
      {2, 48 * GB, 2.0 * TB, 56},
      {3, 24 * GB, 1.0 * TB, 28},
      {4, 24 * GB, 1.0 * TB, 16},
      {7, 12 * GB, 0.5 * TB, 16},
  };
  return table;
}

inline std::vector<MigProfile> scaled_mig_table(double hbm, double hbm_bw, int sms) {
  std::vector<MigProfile> out;
  for (const auto& row : gh200_mig_table()) {
    MigProfile p;
    p.instance_count = row.instance_count;
    p.hbm_per_instance = row.hbm_per_instance / (96 * GB) * hbm;
    p.hbm_bw_per_instance = row.hbm_bw_per_instance / (4.0 * TB) * hbm_bw;
    p.sm_per_instance =
        std::max(1, static_cast<int>(std::floor(row.sm_per_instance / 132.0 * sms)));
    out.push_back(p);
  }
  return out;
}

}  // namespace detail

inline SuperchipProfile builtin_profile(const std::string& name) {
  SuperchipProfile chip;
  chip.name = name;
  chip.pcie_bandwidth = 64 * GB;
  chip.engine_init_latency_dense = 0.45;
  chip.engine_init_latency_moe = 2.4;
  chip.switch_latency_dense = 0.050;
  chip.switch_latency_moe = 0.318;
  if (name == "gh200") {
    chip.cpu_mem_capacity = 480 * GB;
    chip.hbm_capacity = 96 * GB;
    chip.hbm_bandwidth_total = 4.0 * TB;
    chip.c2c_bandwidth_peak = 900 * GB;
    chip.sm_count_total = 132;
    chip.flops_per_sm = 989.4 * TB / 132;
    chip.mig_table = detail::gh200_mig_table();
  } else if (name == "gb200") {
    chip.cpu_mem_capacity = 480 * GB;
    chip.hbm_capacity = 192 * GB;
    chip.hbm_bandwidth_total = 8.0 * TB;
    chip.c2c_bandwidth_peak = 900 * GB;
    chip.sm_count_total = 148;
    chip.flops_per_sm = 2250 * TB / 148;
    chip.mig_table = detail::scaled_mig_table(chip.hbm_capacity, chip.hbm_bandwidth_total,
                                              chip.sm_count_total);
  } else if (name == "rubin") {
    chip.cpu_mem_capacity = 1.5 * TB;
    chip.hbm_capacity = 288 * GB;
    chip.hbm_bandwidth_total = 22 * TB;
    chip.c2c_bandwidth_peak = 1.8 * TB;
    chip.sm_count_total = 224;
    chip.flops_per_sm = 4000 * TB / 224;
    chip.mig_table = detail::scaled_mig_table(chip.hbm_capacity, chip.hbm_bandwidth_total,
                                              chip.sm_count_total);
  } else {
    throw ConfigError("unknown chip profile '" + name + "' (expected gh200, gb200 or rubin)");
  }
  chip.c2c_bandwidth = chip.c2c_bandwidth_peak / 2;
  validate(chip);
  return chip;
}

inline MigProfile mig_profile(const SuperchipProfile& chip, int instance_count) {
  for (const auto& p : chip.mig_table)
    if (p.instance_count == instance_count) return p;
  throw ConfigError(chip.name + " does not support a " + std::to_string(instance_count) +
                    "-instance MIG configuration");
}

// Profiles from a key = value file with one [section] per chip. A section may start from a
// built-in with `base = gh200` and override individual keys. MIG rows are written as
// `mig.<count> = <hbm bytes>, <hbm bytes/s>, <sms>`.
inline std::map<std::string, SuperchipProfile> load_profiles(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(e.message(), e.line());
  }
  std::map<std::string, SuperchipProfile> out;
  for (const auto& [section, body] : tree) {
    SuperchipProfile chip;
    if (auto base = body.get_optional<std::string>("base")) {
      chip = builtin_profile(*base);
    } else {
      chip.pcie_bandwidth = 64 * GB;
    }
    chip.name = section;
    bool c2c_set = false;
    bool peak_set = false;
    std::vector<MigProfile> migs;
    for (const auto& [key, node] : body) {
      const std::string value = node.get_value<std::string>();
      if (key == "base") continue;
      if (key.rfind("mig.", 0) == 0) {
        MigProfile p;
        if (!parse_int(std::string_view(key).substr(4), p.instance_count))
          throw ConfigError(section + ": bad MIG key '" + key + "'");
        std::stringstream ss(value);
        std::string a, b, c;
        std::getline(ss, a, ',');
        std::getline(ss, b, ',');
        std::getline(ss, c, ',');
        if (!parse_double(trim(a), p.hbm_per_instance) ||
            !parse_double(trim(b), p.hbm_bw_per_instance) || !parse_int(trim(c), p.sm_per_instance))
          throw ConfigError(section + ": bad MIG row '" + value + "'");
        migs.push_back(p);
        continue;
      }
      if (key == "sm_count_total") {
        if (!parse_int(trim(value), chip.sm_count_total))
          throw ConfigError(section + ": bad integer for " + key);
        continue;
      }
      double v = 0;
      if (!parse_double(trim(value), v)) throw ConfigError(section + ": bad number for " + key);
      if (key == "cpu_mem_capacity") chip.cpu_mem_capacity = v;
      else if (key == "hbm_capacity") chip.hbm_capacity = v;
      else if (key == "hbm_bandwidth_total") chip.hbm_bandwidth_total = v;
      else if (key == "c2c_bandwidth_peak") { chip.c2c_bandwidth_peak = v; peak_set = true; }
      else if (key == "c2c_bandwidth") { chip.c2c_bandwidth = v; c2c_set = true; }
      else if (key == "flops_per_sm") chip.flops_per_sm = v;
      else if (key == "pcie_bandwidth") chip.pcie_bandwidth = v;
      else if (key == "engine_init_latency_dense") chip.engine_init_latency_dense = v;
      else if (key == "engine_init_latency_moe") chip.engine_init_latency_moe = v;
      else if (key == "switch_latency_dense") chip.switch_latency_dense = v;
      else if (key == "switch_latency_moe") chip.switch_latency_moe = v;
      else throw ConfigError(section + ": unknown key '" + key + "'");
    }
    if (peak_set && !c2c_set) chip.c2c_bandwidth = chip.c2c_bandwidth_peak / 2;
    if (c2c_set && !peak_set && chip.c2c_bandwidth_peak <= 0)
      chip.c2c_bandwidth_peak = chip.c2c_bandwidth * 2;
    if (!migs.empty()) {
      std::sort(migs.begin(), migs.end(),
                [](const MigProfile& a, const MigProfile& b) { return a.instance_count < b.instance_count; });
      chip.mig_table = std::move(migs);
    }
    validate(chip);
    out.emplace(section, std::move(chip));
  }
  return out;
}

// Resolves a name against loaded profiles first, then the built-ins.
inline SuperchipProfile resolve_profile(const std::string& name,
                                        const std::map<std::string, SuperchipProfile>& loaded = {}) {
  if (auto it = loaded.find(name); it != loaded.end()) return it->second;
  return builtin_profile(name);
}

}  // namespace c2c
