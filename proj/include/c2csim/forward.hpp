#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "c2csim/error.hpp"
#include "c2csim/gemm_model.hpp"
#include "c2csim/workload.hpp"

namespace c2c {

// One operator of a forward pass, summed over all layers. `local_s` is the time it would take
// with unlimited C2C bandwidth; the C2C bytes stretch it when the link share is short.
struct ForwardSegment {
  std::string op;
  std::string op_class;  // GEMM shape class, or "other"
  double c2c_bytes = 0;
  double hbm_bytes = 0;
  double flops = 0;
  double local_s = 0;
  double alpha = 0;

  double duration(double c2c_share) const {
    return std::max(local_s, c2c_bytes > 0 ? c2c_bytes / c2c_share : 0.0);
  }
};

struct ForwardContext {
  const ModelSpec* model = nullptr;
  InstanceResources resources;
  const KernelRepository* repo = nullptr;
  int mig_instances = 1;
  WeightLocation weights = WeightLocation::cpu;
  double per_layer_overhead_s = 0;
};

using AlphaFn = std::function<double(const std::string& op_class)>;

inline const KernelVariant& variant_for(const KernelRepository& repo, int precision, int k, int n,
                                        int mig_instances) {
  const auto cls = shape_class(k, n);
  if (const auto* v = repo.find(precision, cls, mig_instances)) return *v;
  throw ConfigError("no kernel variant for precision " + std::to_string(precision) + ", shape " +
                    cls + ", " + std::to_string(mig_instances) + "-instance MIG");
}

// Expected number of distinct experts hit by `tokens` tokens routing to `active` of `experts`.
inline double touched_experts(int experts, int active, int tokens) {
  if (experts <= 1) return 1;
  const double p = static_cast<double>(active) / experts;
  const double t = experts * (1 - std::pow(1 - p, tokens));
  return std::clamp(t, static_cast<double>(std::min(active, experts)), static_cast<double>(experts));
}

inline std::vector<ForwardSegment> forward_segments(const ForwardContext& ctx, int tokens,
                                                    const AlphaFn& alpha_for) {
  if (!ctx.model || !ctx.repo) throw ModelError("forward context incomplete");
  if (tokens < 1) throw ModelError("forward pass needs at least one token");
  const ModelSpec& m = *ctx.model;
  const double layers = m.layer_count;
  std::vector<ForwardSegment> out;
  for (const auto& g : m.gemms) {
    const auto& v = variant_for(*ctx.repo, m.precision_bytes, g.k, g.n, ctx.mig_instances);
    ForwardSegment s;
    s.op = g.name;
    s.op_class = v.shape_class;
    s.alpha = alpha_for ? alpha_for(s.op_class) : 0.0;
    double copies = 1;
    std::int64_t rows = tokens;
    if (g.experts > 1) {
      copies = touched_experts(g.experts, g.active, tokens);
      rows = static_cast<std::int64_t>(std::ceil(static_cast<double>(tokens) * g.active / copies));
    }
    GemmWorkload w{rows, g.k, g.n, m.precision_bytes, ctx.weights};
    const auto b = latency_breakdown(w, v.config(s.alpha), ctx.resources, kInf, v.gammas_for(w));
    const double scale = layers * copies;
    s.c2c_bytes = b.traffic.c2c_bytes * scale;
    s.hbm_bytes = b.traffic.hbm_bytes * scale;
    s.flops = b.traffic.flops * scale;
    s.local_s = b.local() * scale;
    out.push_back(std::move(s));
  }
  if (m.extra_weight_bytes > 0) {
    // Embedding lookup plus LM head, read once per forward.
    ForwardSegment s;
    s.op = "embed_head";
    s.op_class = "other";
    s.flops = 2.0 * tokens * m.extra_weight_bytes / m.precision_bytes;
    if (ctx.weights == WeightLocation::cpu) s.c2c_bytes = m.extra_weight_bytes;
    else s.hbm_bytes = m.extra_weight_bytes;
    s.local_s = std::max(s.flops / (ctx.resources.sm_count * ctx.resources.flops_per_sm),
                         s.hbm_bytes / ctx.resources.hbm_bw);
    out.push_back(std::move(s));
  }
  if (ctx.per_layer_overhead_s > 0) {
    ForwardSegment s;
    s.op = "layer_overhead";
    s.op_class = "other";
    s.local_s = ctx.per_layer_overhead_s * layers;
    out.push_back(std::move(s));
  }
  return out;
}

inline double forward_latency(const std::vector<ForwardSegment>& segs, double c2c_share) {
  double t = 0;
  for (const auto& s : segs) t += s.duration(c2c_share);
  return t;
}

inline TrafficEstimate forward_traffic(const std::vector<ForwardSegment>& segs) {
  TrafficEstimate t;
  for (const auto& s : segs) t += {s.c2c_bytes, s.hbm_bytes, s.flops};
  return t;
}

}  // namespace c2c
