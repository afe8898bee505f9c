#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "banditd/context.hpp"
#include "banditd/linucb.hpp"
#include "banditd/records.hpp"

namespace banditd {

/// Arm-pull counts of one context (over some time span).
struct ServingDistribution {
  std::map<ArmId, std::uint64_t> counts;
  std::uint64_t total = 0;

  void add(const ArmId& arm, std::uint64_t n = 1) {
    counts[arm] += n;
    total += n;
  }

  std::uint64_t count(const ArmId& arm) const {
    auto it = counts.find(arm);
    return it == counts.end() ? 0 : it->second;
  }

  /// Probabilities over `support` (which must cover every counted arm).
  std::vector<double> probabilities(const std::vector<ArmId>& support, bool add_one) const {
    const double extra = add_one ? 1.0 : 0.0;
    const double denom = static_cast<double>(total) + extra * static_cast<double>(support.size());
    std::vector<double> p;
    p.reserve(support.size());
    for (const auto& a : support) p.push_back((static_cast<double>(count(a)) + extra) / denom);
    return p;
  }
};

inline std::vector<ArmId> union_support(const ServingDistribution& p, const ServingDistribution& q) {
  std::set<ArmId> s;
  for (const auto& [a, _] : p.counts) s.insert(a);
  for (const auto& [a, _] : q.counts) s.insert(a);
  return {s.begin(), s.end()};
}

/// KL(p || q) in bits over `support`. Add-one smoothing is applied when
/// requested, and always when q has a zero where p does not.
inline double kl_divergence(const ServingDistribution& p, const ServingDistribution& q,
                            const std::vector<ArmId>& support, bool smoothing = true) {
  if (support.empty()) fail(ErrorCode::InvalidValue, "kl_divergence: empty support");
  bool add_one = smoothing || p.total == 0 || q.total == 0;
  if (!add_one)
    for (const auto& a : support)
      if (p.count(a) > 0 && q.count(a) == 0) add_one = true;
  const auto pp = p.probabilities(support, add_one);
  const auto qq = q.probabilities(support, add_one);
  double kl = 0.0;
  for (std::size_t i = 0; i < support.size(); ++i)
    if (pp[i] > 0.0) kl += pp[i] * std::log2(pp[i] / qq[i]);
  return std::max(0.0, kl);
}

inline double kl_divergence(const ServingDistribution& p, const ServingDistribution& q, bool smoothing = true) {
  return kl_divergence(p, q, union_support(p, q), smoothing);
}

struct HealthParams {
  TimestampMs epsilon_ms = 10 * 60 * 1000;
  TimestampMs delta_ms = 60 * 60 * 1000;
  std::uint64_t min_support = 50;
  bool smoothing = true;
  TimestampMs grid_step_ms = 0;  // 0: epsilon

  void validate() const {
    if (epsilon_ms <= 0 || delta_ms <= 0) fail(ErrorCode::InvalidValue, "epsilon and delta must be > 0");
    if (min_support < 1) fail(ErrorCode::InvalidValue, "min_support must be >= 1");
    if (grid_step_ms < 0) fail(ErrorCode::InvalidValue, "grid step must be >= 0");
  }
};

struct ContinuityRow {
  std::size_t hamming_distance = 0;
  double mean_kl = 0.0;
  std::uint64_t pair_count = 0;
};

namespace detail {

inline std::vector<ArmId> arm_universe(const std::vector<DecisionRecord>& logs) {
  std::set<ArmId> s;
  for (const auto& d : logs) s.insert(d.arm_id);
  return {s.begin(), s.end()};
}

}  // namespace detail

/// Mean KL between the serving distributions of every ordered pair of
/// sufficiently supported contexts (self-pairs included), bucketed by the
/// Hamming distance of the contexts.
inline std::vector<ContinuityRow> continuity_report(const std::vector<DecisionRecord>& logs,
                                                    const FeatureSchema& schema, const HealthParams& params) {
  params.validate();
  std::map<std::string, std::pair<ContextVector, ServingDistribution>> by_context;
  for (const auto& d : logs) {
    if (d.context.dimension() != schema.dimension())
      fail(ErrorCode::DimensionError, "decision " + d.decision_id + " does not match the schema dimension");
    auto [it, _] = by_context.try_emplace(d.context.key(), d.context, ServingDistribution{});
    it->second.second.add(d.arm_id);
  }
  std::vector<const std::pair<ContextVector, ServingDistribution>*> qualified;
  for (const auto& [_, v] : by_context)
    if (v.second.total >= params.min_support) qualified.push_back(&v);
  if (qualified.empty()) fail(ErrorCode::EmptyReport, "no context reaches min_support");

  const auto support = detail::arm_universe(logs);
  std::map<std::size_t, std::pair<double, std::uint64_t>> buckets;
  for (const auto* a : qualified)
    for (const auto* b : qualified) {
      const auto dist = hamming(a->first, b->first);
      auto& bucket = buckets[dist];
      bucket.first += kl_divergence(a->second, b->second, support, params.smoothing);
      ++bucket.second;
    }
  std::vector<ContinuityRow> out;
  for (const auto& [dist, acc] : buckets)
    out.push_back({dist, acc.first / static_cast<double>(acc.second), acc.second});
  return out;
}

struct StabilityPoint {
  TimestampMs t_ms = 0;  // instance age at the start of the first window
  double mean_kl = 0.0;
  std::size_t contexts = 0;
};

/// Per grid time t: mean over contexts of KL(D_c(t, t+eps) || D_c(t+delta, t+delta+eps)).
inline std::vector<StabilityPoint> stability_report(std::vector<DecisionRecord> logs, const HealthParams& params) {
  params.validate();
  if (logs.empty()) fail(ErrorCode::InsufficientSpan, "no decisions");
  std::stable_sort(logs.begin(), logs.end(),
                   [](const DecisionRecord& a, const DecisionRecord& b) { return a.timestamp < b.timestamp; });
  const TimestampMs t0 = logs.front().timestamp;
  const TimestampMs span = logs.back().timestamp - t0 + 1;
  if (span < params.delta_ms + params.epsilon_ms)
    fail(ErrorCode::InsufficientSpan, "log span " + std::to_string(span) + " ms is shorter than delta + epsilon");
  const TimestampMs step = params.grid_step_ms > 0 ? params.grid_step_ms : params.epsilon_ms;
  const auto support = detail::arm_universe(logs);

  auto window = [&](TimestampMs from) {
    std::unordered_map<std::string, ServingDistribution> dists;
    auto lo = std::lower_bound(logs.begin(), logs.end(), from,
                               [](const DecisionRecord& d, TimestampMs t) { return d.timestamp < t; });
    for (auto it = lo; it != logs.end() && it->timestamp < from + params.epsilon_ms; ++it)
      dists[it->context.key()].add(it->arm_id);
    return dists;
  };

  std::vector<StabilityPoint> out;
  for (TimestampMs t = 0; t + params.delta_ms + params.epsilon_ms <= span; t += step) {
    const auto first = window(t0 + t);
    const auto second = window(t0 + t + params.delta_ms);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [key, p] : first) {
      if (p.total < params.min_support) continue;
      auto it = second.find(key);
      if (it == second.end() || it->second.total < params.min_support) continue;
      sum += kl_divergence(p, it->second, support, params.smoothing);
      ++n;
    }
    if (n > 0) out.push_back({t, sum / static_cast<double>(n), n});
  }
  return out;
}

struct ExploitationPoint {
  TimestampMs t_ms = 0;
  double ratio = 0.0;
  std::uint64_t decisions = 0;
};

struct ExploitationReport {
  std::vector<ExploitationPoint> series;
  std::uint64_t excluded = 0;  // decisions whose snapshot could not be resolved
};

/// Whether a logged decision coincides with the greedy (mean-only) choice of
/// the snapshot that served it, over the same eligible set.
inline bool agrees_with_greedy(const DecisionRecord& d, const BanditModel& model) {
  std::set<ArmId> eligible(d.eligible.begin(), d.eligible.end());
  if (eligible.empty()) eligible = model.arm_ids();
  return greedy_arm(model, d.context, eligible) == d.arm_id;
}

/// Fraction of decisions per time bucket that agree with the greedy choice.
inline ExploitationReport exploitation_ratio(std::vector<DecisionRecord> logs,
                                             const std::map<std::uint64_t, ModelSnapshot>& snapshots,
                                             TimestampMs bucket_ms) {
  if (bucket_ms <= 0) fail(ErrorCode::InvalidValue, "bucket must be > 0");
  ExploitationReport out;
  if (logs.empty()) return out;
  std::stable_sort(logs.begin(), logs.end(),
                   [](const DecisionRecord& a, const DecisionRecord& b) { return a.timestamp < b.timestamp; });
  const TimestampMs t0 = logs.front().timestamp;
  std::map<TimestampMs, std::pair<std::uint64_t, std::uint64_t>> buckets;  // agree, total
  for (const auto& d : logs) {
    auto it = snapshots.find(d.model_version);
    if (it == snapshots.end() || !it->second) {
      ++out.excluded;
      continue;
    }
    bool agree = false;
    try {
      agree = agrees_with_greedy(d, *it->second);
    } catch (const Error&) {
      ++out.excluded;
      continue;
    }
    auto& b = buckets[(d.timestamp - t0) / bucket_ms * bucket_ms];
    b.first += agree;
    ++b.second;
  }
  for (const auto& [t, b] : buckets)
    out.series.push_back({t, static_cast<double>(b.first) / static_cast<double>(b.second), b.second});
  return out;
}

}  // namespace banditd
