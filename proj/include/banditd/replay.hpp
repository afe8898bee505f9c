#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "banditd/context.hpp"
#include "banditd/linucb.hpp"
#include "banditd/rng.hpp"

namespace banditd {

/// One uniformly-random logged pull.
struct LoggedEvent {
  TimestampMs timestamp = 0;
  ContextVector context;
  ArmId arm_id;
  double reward = 0.0;

  json to_json() const {
    return {{"timestamp", timestamp}, {"context", context.to_json()}, {"arm_id", arm_id}, {"reward", reward}};
  }
  static LoggedEvent from_json(const json& j) {
    try {
      return {j.at("timestamp").get<TimestampMs>(), ContextVector::from_json(j.at("context")),
              j.at("arm_id").get<std::string>(), j.at("reward").get<double>()};
    } catch (const json::exception& e) {
      fail(ErrorCode::CorruptData, std::string("logged event: ") + e.what());
    }
  }
};

/// Uniform-logging traffic: header {k, arm_set, schema_version} + events.
struct ReplayLog {
  static constexpr int kSchemaVersion = 1;

  std::size_t k = 0;
  std::vector<ArmId> arm_set;
  std::vector<LoggedEvent> events;

  void validate() const {
    if (k == 0 || k != arm_set.size()) fail(ErrorCode::InvalidValue, "declared k does not match the arm set");
    const std::set<ArmId> arms(arm_set.begin(), arm_set.end());
    if (arms.size() != arm_set.size()) fail(ErrorCode::InvalidValue, "duplicate arm in arm_set");
    for (std::size_t i = 0; i < events.size(); ++i) {
      if (!arms.count(events[i].arm_id)) fail(ErrorCode::InvalidValue, "event arm " + events[i].arm_id + " not in arm_set");
      if (!std::isfinite(events[i].reward)) fail(ErrorCode::InvalidValue, "non-finite logged reward");
      if (i > 0 && events[i].timestamp < events[i - 1].timestamp)
        fail(ErrorCode::InvalidValue, "logged events are not time-ordered");
    }
  }

  json header() const {
    return {{"type", "header"}, {"k", k}, {"arm_set", arm_set}, {"schema_version", kSchemaVersion}};
  }

  std::string to_jsonl() const {
    std::string out = header().dump() + "\n";
    for (const auto& e : events) out += e.to_json().dump() + "\n";
    return out;
  }

  static ReplayLog read(const fs::path& path) {
    ReplayLog log;
    bool have_header = false;
    for_each_jsonl(path, [&](const json& j) {
      if (!have_header) {
        if (j.value("type", std::string{}) != "header") fail(ErrorCode::CorruptData, "replay log must start with a header");
        if (j.value("schema_version", 0) != kSchemaVersion) fail(ErrorCode::CorruptData, "unsupported replay log version");
        log.k = j.at("k").get<std::size_t>();
        log.arm_set = j.at("arm_set").get<std::vector<ArmId>>();
        have_header = true;
        return;
      }
      log.events.push_back(LoggedEvent::from_json(j));
    });
    if (!have_header) fail(ErrorCode::CorruptData, "empty replay log");
    log.validate();
    return log;
  }
};

/// A bandit policy under offline evaluation.
class ReplayPolicy {
 public:
  virtual ~ReplayPolicy() = default;
  virtual ArmId choose(const ContextVector& x) = 0;
  virtual void learn(const ContextVector& /*x*/, const ArmId& /*arm*/, double /*reward*/) {}
};

class FixedArmPolicy : public ReplayPolicy {
 public:
  explicit FixedArmPolicy(ArmId arm) : arm_(std::move(arm)) {}
  ArmId choose(const ContextVector&) override { return arm_; }

 private:
  ArmId arm_;
};

/// Deterministic per-context lookup with a default arm.
class ContextTablePolicy : public ReplayPolicy {
 public:
  ContextTablePolicy(std::map<std::string, ArmId> table, ArmId fallback)
      : table_(std::move(table)), fallback_(std::move(fallback)) {}
  ArmId choose(const ContextVector& x) override {
    auto it = table_.find(x.key());
    return it == table_.end() ? fallback_ : it->second;
  }

 private:
  std::map<std::string, ArmId> table_;
  ArmId fallback_;
};

/// LinUCB learning one pull at a time.
class LinUcbPolicy : public ReplayPolicy {
 public:
  LinUcbPolicy(const ModelConfig& cfg, const std::vector<ArmId>& arms) : model_("replay", cfg) {
    for (const auto& a : arms) model_.insert_arm(a);
    arms_ = model_.arm_ids();
  }

  ArmId choose(const ContextVector& x) override { return ucb_arm(model_, x, arms_); }

  void learn(const ContextVector& x, const ArmId& arm, double reward) override {
    const AggregateTuple t{{}, x, arm, 1, reward, 0};
    model_.apply(std::span<const AggregateTuple>(&t, 1));
  }

  const BanditModel& model() const { return model_; }

 private:
  BanditModel model_;
  std::set<ArmId> arms_;
};

enum class ReplayMode { Classic, Windowed };

struct ReplayParams {
  ReplayMode mode = ReplayMode::Classic;
  double t1_ms = 0.0;  // may be +infinity
  double t2_ms = 0.0;
  bool with_repetitions = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(t1_ms >= 0.0) || !(t2_ms >= 0.0)) fail(ErrorCode::InvalidValue, "t1 and t2 must be >= 0");
    if (mode == ReplayMode::Windowed && !(t1_ms + t2_ms > 0.0))
      fail(ErrorCode::InvalidValue, "windowed replay needs t1 + t2 > 0");
  }
};

struct ReplayReport {
  ReplayMode mode = ReplayMode::Classic;
  std::uint64_t matched = 0;
  std::uint64_t total = 0;
  double reward_sum = 0.0;
  std::optional<double> mean_reward;  // empty: NoMatches
  std::uint64_t exhausted_steps = 0;
  std::uint64_t seed = 0;

  json to_json() const {
    json j = {{"mode", mode == ReplayMode::Classic ? "classic" : "windowed"},
              {"matched", matched},
              {"total", total},
              {"reward_sum", reward_sum},
              {"mean_reward", mean_reward ? json(*mean_reward) : json(nullptr)},
              {"seed", seed}};
    if (mode == ReplayMode::Windowed) j["exhausted_steps"] = exhausted_steps;
    if (!mean_reward) j["status"] = "NoMatches";
    return j;
  }
};

/// Classic replay: credit a logged reward (and learn from it) only when the
/// policy picks the arm that was logged.
inline ReplayReport replay_classic(const ReplayLog& log, ReplayPolicy& policy) {
  log.validate();
  ReplayReport r;
  r.mode = ReplayMode::Classic;
  for (const auto& e : log.events) {
    ++r.total;
    if (policy.choose(e.context) != e.arm_id) continue;
    ++r.matched;
    r.reward_sum += e.reward;
    policy.learn(e.context, e.arm_id, e.reward);
  }
  if (r.matched > 0) r.mean_reward = r.reward_sum / static_cast<double>(r.matched);
  return r;
}

namespace detail {

/// Fenwick tree over 0/1 availability flags with k-th-available lookup.
class AvailabilityTree {
 public:
  explicit AvailabilityTree(std::size_t n) : tree_(n + 1, 0) {
    for (std::size_t i = 1; i <= n; ++i) {
      tree_[i] += 1;
      const std::size_t j = i + (i & (~i + 1));
      if (j <= n) tree_[j] += tree_[i];
    }
  }

  void remove(std::size_t pos) {
    for (std::size_t i = pos + 1; i < tree_.size(); i += i & (~i + 1)) --tree_[i];
  }

  /// Available count in [0, pos).
  std::int64_t prefix(std::size_t pos) const {
    std::int64_t s = 0;
    for (std::size_t i = pos; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

  /// Position of the k-th (0-based) available slot.
  std::size_t find(std::int64_t k) const {
    std::size_t pos = 0;
    std::size_t step = 1;
    while (step * 2 < tree_.size()) step *= 2;
    for (; step > 0; step /= 2) {
      if (pos + step < tree_.size() && tree_[pos + step] <= k) {
        pos += step;
        k -= tree_[pos];
      }
    }
    return pos;
  }

 private:
  std::vector<std::int64_t> tree_;
};

}  // namespace detail

/// Windowed replay: at each logged time t the policy's choice a in context c
/// is rewarded by a uniformly sampled logged pull of (a, c) with timestamp in
/// the open interval (t - t1, t + t2).
inline ReplayReport replay_windowed(const ReplayLog& log, ReplayPolicy& policy, const ReplayParams& params) {
  log.validate();
  params.validate();
  if (params.mode != ReplayMode::Windowed) fail(ErrorCode::InvalidValue, "replay_windowed needs windowed mode");

  struct Bucket {
    std::vector<std::size_t> events;  // indices into log.events, time-ordered
    std::optional<detail::AvailabilityTree> available;
  };
  std::unordered_map<std::string, Bucket> buckets;
  for (std::size_t i = 0; i < log.events.size(); ++i) {
    const auto& e = log.events[i];
    buckets[e.arm_id + '\0' + e.context.key()].events.push_back(i);
  }
  if (!params.with_repetitions)
    for (auto& [_, b] : buckets) b.available.emplace(b.events.size());

  Rng rng(params.seed);
  ReplayReport r;
  r.mode = ReplayMode::Windowed;
  r.seed = params.seed;
  for (const auto& step : log.events) {
    ++r.total;
    const auto arm = policy.choose(step.context);
    auto it = buckets.find(arm + '\0' + step.context.key());
    if (it == buckets.end()) {
      ++r.exhausted_steps;
      continue;
    }
    auto& b = it->second;
    const double t = static_cast<double>(step.timestamp);
    const double lo_t = t - params.t1_ms;
    const double hi_t = t + params.t2_ms;
    const auto ts = [&](std::size_t idx) { return static_cast<double>(log.events[idx].timestamp); };
    const auto lo = static_cast<std::size_t>(
        std::upper_bound(b.events.begin(), b.events.end(), lo_t, [&](double v, std::size_t idx) { return v < ts(idx); }) -
        b.events.begin());
    const auto hi = static_cast<std::size_t>(
        std::lower_bound(b.events.begin(), b.events.end(), hi_t, [&](std::size_t idx, double v) { return ts(idx) < v; }) -
        b.events.begin());

    std::optional<std::size_t> pick;
    if (lo < hi) {
      if (params.with_repetitions) {
        pick = lo + rng.index(hi - lo);
      } else {
        const auto before = b.available->prefix(lo);
        const auto count = b.available->prefix(hi) - before;
        if (count > 0) {
          pick = b.available->find(before + static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(count))));
          b.available->remove(*pick);
        }
      }
    }
    if (!pick) {
      ++r.exhausted_steps;
      continue;
    }
    const double reward = log.events[b.events[*pick]].reward;
    ++r.matched;
    r.reward_sum += reward;
    policy.learn(step.context, arm, reward);
  }
  if (r.matched > 0) r.mean_reward = r.reward_sum / static_cast<double>(r.matched);
  return r;
}

inline ReplayReport replay(const ReplayLog& log, ReplayPolicy& policy, const ReplayParams& params) {
  if (params.mode == ReplayMode::Classic) {
    auto r = replay_classic(log, policy);
    r.seed = params.seed;
    return r;
  }
  return replay_windowed(log, policy, params);
}

struct LambdaResult {
  double lambda = 0.0;
  ReplayReport report;
};

struct TuneResult {
  double best_lambda = 0.0;
  std::vector<LambdaResult> per_lambda;

  json to_json() const {
    json rows = json::array();
    for (const auto& r : per_lambda) {
      json row = r.report.to_json();
      row["lambda"] = r.lambda;
      rows.push_back(row);
    }
    return {{"best_lambda", best_lambda}, {"per_lambda", rows}};
  }
};

/// Replays a LinUCB policy per grid value on identical logs and seeds and
/// picks the best mean reward (ties: smaller lambda).
inline TuneResult tune_lambda(const ReplayLog& log, std::vector<double> grid, const ReplayParams& params,
                              double alpha = 1.0) {
  if (grid.empty()) fail(ErrorCode::InvalidValue, "lambda grid is empty");
  if (log.events.empty()) fail(ErrorCode::TuningInconclusive, "empty log");
  std::sort(grid.begin(), grid.end());
  TuneResult out;
  std::optional<double> best_value;
  for (double lambda : grid) {
    ModelConfig cfg{lambda, alpha, log.events.front().context.dimension()};
    cfg.validate();
    LinUcbPolicy policy(cfg, log.arm_set);
    auto rep = replay(log, policy, params);
    if (rep.mean_reward && (!best_value || *rep.mean_reward > *best_value)) {
      best_value = rep.mean_reward;
      out.best_lambda = lambda;
    }
    out.per_lambda.push_back({lambda, rep});
  }
  if (!best_value) fail(ErrorCode::TuningInconclusive, "no grid value produced matches");
  return out;
}

}  // namespace banditd
