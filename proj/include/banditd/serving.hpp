#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "banditd/context.hpp"
#include "banditd/linucb.hpp"
#include "banditd/model_holder.hpp"
#include "banditd/records.hpp"

namespace banditd {

enum class RuleKind { MaxConsecutive, MinWithinPrefix };

/// Declarative eligibility rule over the feed served so far.
///  - MaxConsecutive(T, j): never serve more than j consecutive type-T arms.
///  - MinWithinPrefix(T, n): at least one type-T arm within the first n cards.
struct ConstraintRule {
  RuleKind kind = RuleKind::MaxConsecutive;
  std::string arm_type;
  std::size_t j = 1;
  std::size_t n = 1;

  static ConstraintRule max_consecutive(std::string type, std::size_t j) {
    return {RuleKind::MaxConsecutive, std::move(type), j, 1};
  }
  static ConstraintRule min_within_prefix(std::string type, std::size_t n) {
    return {RuleKind::MinWithinPrefix, std::move(type), 1, n};
  }

  void validate() const {
    if (j < 1 || n < 1) fail(ErrorCode::ConfigError, "rule limits must be >= 1");
    if (arm_type.empty()) fail(ErrorCode::ConfigError, "rule needs an arm_type");
  }

  json to_json() const {
    if (kind == RuleKind::MaxConsecutive) return {{"kind", "MaxConsecutive"}, {"arm_type", arm_type}, {"j", j}};
    return {{"kind", "MinWithinPrefix"}, {"arm_type", arm_type}, {"n", n}};
  }

  static ConstraintRule from_json(const json& j) {
    try {
      const auto kind = j.at("kind").get<std::string>();
      ConstraintRule r;
      r.arm_type = j.at("arm_type").get<std::string>();
      if (kind == "MaxConsecutive") {
        r.kind = RuleKind::MaxConsecutive;
        r.j = j.at("j").get<std::size_t>();
      } else if (kind == "MinWithinPrefix") {
        r.kind = RuleKind::MinWithinPrefix;
        r.n = j.at("n").get<std::size_t>();
      } else {
        fail(ErrorCode::ConfigError, "unknown rule kind " + kind);
      }
      r.validate();
      return r;
    } catch (const json::exception& e) {
      fail(ErrorCode::ConfigError, std::string("rule: ") + e.what());
    }
  }
};

/// Arm id -> arm type. Arms without an entry are their own type.
class ArmCatalog {
 public:
  ArmCatalog() = default;
  explicit ArmCatalog(std::map<ArmId, std::string> types) : types_(std::move(types)) {}

  const std::string& type_of(const ArmId& id) const {
    auto it = types_.find(id);
    return it == types_.end() ? id : it->second;
  }
  void set(const ArmId& id, std::string type) { types_[id] = std::move(type); }
  const std::map<ArmId, std::string>& types() const { return types_; }

  void validate_rules(const std::vector<ConstraintRule>& rules) const {
    std::set<std::string> declared;
    for (const auto& [id, t] : types_) declared.insert(t);
    for (const auto& r : rules) {
      r.validate();
      if (!declared.count(r.arm_type)) fail(ErrorCode::ConfigError, "rule references undeclared arm type " + r.arm_type);
    }
  }

 private:
  std::map<ArmId, std::string> types_;
};

struct FeedState {
  std::string session_id;
  std::vector<std::string> served_types;

  std::size_t position() const { return served_types.size(); }
  void push(std::string type) { served_types.push_back(std::move(type)); }
};

/// Arms that pass every rule given the feed so far; rules compose by intersection.
inline std::set<ArmId> eligible_arms(const std::set<ArmId>& arms, const ArmCatalog& catalog,
                                     const std::vector<ConstraintRule>& rules, const FeedState& feed) {
  std::set<ArmId> out;
  const auto& served = feed.served_types;
  for (const auto& arm : arms) {
    const auto& type = catalog.type_of(arm);
    bool ok = true;
    for (const auto& r : rules) {
      if (r.kind == RuleKind::MaxConsecutive) {
        if (type != r.arm_type || served.size() < r.j) continue;
        ok = !std::all_of(served.end() - static_cast<std::ptrdiff_t>(r.j), served.end(),
                          [&](const std::string& t) { return t == r.arm_type; });
      } else {
        if (feed.position() + 1 != r.n) continue;
        const bool seen = std::find(served.begin(), served.end(), r.arm_type) != served.end();
        ok = seen || type == r.arm_type;
      }
      if (!ok) break;
    }
    if (ok) out.insert(arm);
  }
  return out;
}

struct ServingOptions {
  /// When every arm is ineligible: false -> NoEligibleArm, true -> serve the
  /// unconstrained best and flag the decision.
  bool fallback_on_empty = false;
  std::string decision_prefix;  // empty: random per server
};

struct ServeRequest {
  json attributes = json::object();
  Keyspace keyspace;
  std::optional<std::string> decision_id;
  std::optional<TimestampMs> timestamp;
};

struct ServeResult {
  std::string decision_id;
  ArmId arm_id;
  ScoreMap scores;
  std::uint64_t model_version = 0;
  bool fallback = false;

  json to_json() const {
    json s = json::object();
    for (const auto& [id, sc] : scores) s[id] = {{"mean", sc.mean}, {"ucb", sc.ucb}};
    json j = {{"decision_id", decision_id}, {"arm_id", arm_id}, {"scores", s}, {"model_version", model_version}};
    if (fallback) j["fallback"] = true;
    return j;
  }
};

using DecisionSink = std::function<void(const DecisionRecord&)>;
using RewardSink = std::function<void(const RewardRecord&)>;

inline TimestampMs wall_clock_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

/// Online layer. Reads the latest published snapshot per request, filters by
/// constraints, serves the argmax-ucb eligible arm and logs the decision.
class Server {
 public:
  Server(FeatureSchema schema, const ModelHolder& holder, ArmCatalog catalog, ServingOptions opts,
         DecisionSink decisions, RewardSink rewards)
      : schema_(std::move(schema)),
        holder_(holder),
        catalog_(std::move(catalog)),
        opts_(std::move(opts)),
        decisions_(std::move(decisions)),
        rewards_(std::move(rewards)) {
    if (opts_.decision_prefix.empty()) {
      std::random_device rd;
      opts_.decision_prefix = hex64((static_cast<std::uint64_t>(rd()) << 32) ^ rd()).substr(0, 10);
    }
  }

  const FeatureSchema& schema() const { return schema_; }
  const ArmCatalog& catalog() const { return catalog_; }

  ServeResult serve(const ServeRequest& req, const std::vector<ConstraintRule>& rules, FeedState& feed) {
    if (req.keyspace.test_id.empty() || req.keyspace.variant_id.empty())
      fail(ErrorCode::InvalidValue, "serve requires test_id and variant_id");
    const auto entry = holder_.get(req.keyspace);
    const BanditModel& model = *entry->model;
    const auto x = encode(req.attributes, schema_);

    ServeResult out;
    out.scores = score(model, x);
    out.model_version = model.version();

    const auto arms = model.arm_ids();
    auto eligible = eligible_arms(arms, catalog_, rules, feed);
    if (eligible.empty()) {
      if (!opts_.fallback_on_empty) fail(ErrorCode::NoEligibleArm, "constraints exclude every arm");
      eligible = arms;
      out.fallback = true;
    }
    out.arm_id = argmax_ucb(out.scores, eligible);
    out.decision_id = req.decision_id ? *req.decision_id : next_decision_id(req.keyspace.instance_id);

    DecisionRecord rec;
    rec.decision_id = out.decision_id;
    rec.keyspace = req.keyspace;
    rec.context = x;
    rec.arm_id = out.arm_id;
    rec.timestamp = req.timestamp ? *req.timestamp : wall_clock_ms();
    rec.model_version = out.model_version;
    rec.eligible.assign(eligible.begin(), eligible.end());
    rec.fallback = out.fallback;
    if (decisions_) decisions_(rec);

    feed.push(catalog_.type_of(out.arm_id));
    return out;
  }

  void record_reward(const std::string& decision_id, double reward, std::optional<TimestampMs> timestamp = {}) {
    if (!std::isfinite(reward)) fail(ErrorCode::InvalidValue, "reward is not finite");
    RewardRecord r{decision_id, reward, timestamp ? *timestamp : wall_clock_ms()};
    if (rewards_) rewards_(r);
  }

 private:
  static ArmId argmax_ucb(const ScoreMap& scores, const std::set<ArmId>& eligible) {
    const ArmId* best = nullptr;
    double best_ucb = 0.0;
    for (const auto& id : eligible) {
      const double u = scores.at(id).ucb;
      if (!best || u > best_ucb) {
        best = &id;
        best_ucb = u;
      }
    }
    return *best;
  }

  std::string next_decision_id(const std::string& instance) {
    return instance + "-" + opts_.decision_prefix + "-" + std::to_string(counter_.fetch_add(1));
  }

  FeatureSchema schema_;
  const ModelHolder& holder_;
  ArmCatalog catalog_;
  ServingOptions opts_;
  DecisionSink decisions_;
  RewardSink rewards_;
  std::atomic<std::uint64_t> counter_{0};
};

}  // namespace banditd
