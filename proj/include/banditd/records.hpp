#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "banditd/context.hpp"

namespace banditd {

using ArmId = std::string;
using TimestampMs = std::int64_t;

/// (instance, test, variant): the partition that isolates one experiment
/// variant's learning data.
struct Keyspace {
  std::string instance_id;
  std::string test_id;
  std::string variant_id;

  auto tie() const { return std::tie(instance_id, test_id, variant_id); }
  friend bool operator<(const Keyspace& a, const Keyspace& b) { return a.tie() < b.tie(); }
  friend bool operator==(const Keyspace& a, const Keyspace& b) { return a.tie() == b.tie(); }

  std::string str() const { return instance_id + "/" + test_id + "/" + variant_id; }
  fs::path relative_dir() const { return fs::path(instance_id) / test_id / variant_id; }

  json to_json() const { return {{"instance_id", instance_id}, {"test_id", test_id}, {"variant_id", variant_id}}; }
  static Keyspace from_json(const json& j) {
    return {j.at("instance_id").get<std::string>(), j.at("test_id").get<std::string>(),
            j.at("variant_id").get<std::string>()};
  }
};

struct DecisionRecord {
  std::string decision_id;
  Keyspace keyspace;
  ContextVector context;
  ArmId arm_id;
  TimestampMs timestamp = 0;
  // Serving metadata used by health analytics.
  std::uint64_t model_version = 0;
  std::vector<ArmId> eligible;
  bool fallback = false;

  json to_json() const {
    json j = {{"decision_id", decision_id},
              {"instance_id", keyspace.instance_id},
              {"test_id", keyspace.test_id},
              {"variant_id", keyspace.variant_id},
              {"context", context.to_json()},
              {"arm_id", arm_id},
              {"timestamp", timestamp},
              {"model_version", model_version},
              {"eligible", eligible}};
    if (fallback) j["fallback"] = true;
    return j;
  }

  static DecisionRecord from_json(const json& j) {
    try {
      DecisionRecord r;
      r.decision_id = j.at("decision_id").get<std::string>();
      r.keyspace = Keyspace::from_json(j);
      r.context = ContextVector::from_json(j.at("context"));
      r.arm_id = j.at("arm_id").get<std::string>();
      r.timestamp = j.at("timestamp").get<TimestampMs>();
      r.model_version = j.value("model_version", std::uint64_t{0});
      r.eligible = j.value("eligible", std::vector<ArmId>{});
      r.fallback = j.value("fallback", false);
      return r;
    } catch (const json::exception& e) {
      fail(ErrorCode::CorruptData, std::string("decision record: ") + e.what());
    }
  }
};

struct RewardRecord {
  std::string decision_id;
  double reward = 0.0;
  TimestampMs timestamp = 0;

  json to_json() const { return {{"decision_id", decision_id}, {"reward", reward}, {"timestamp", timestamp}}; }
  static RewardRecord from_json(const json& j) {
    try {
      return {j.at("decision_id").get<std::string>(), j.at("reward").get<double>(), j.at("timestamp").get<TimestampMs>()};
    } catch (const json::exception& e) {
      fail(ErrorCode::CorruptData, std::string("reward record: ") + e.what());
    }
  }
};

/// One mini-batch cell: `pulls` decisions of `arm_id` in `context`, and the
/// rewards credited to that cell while the window was open. A cell may carry
/// only late rewards (pulls == 0) for decisions made in an earlier window.
struct AggregateTuple {
  Keyspace keyspace;
  ContextVector context;
  ArmId arm_id;
  std::uint64_t pulls = 0;
  double reward_sum = 0.0;
  std::uint64_t window_id = 0;

  json to_json() const {
    json j = keyspace.to_json();
    j["window_id"] = window_id;
    j["arm_id"] = arm_id;
    j["pulls"] = pulls;
    j["reward_sum"] = reward_sum;
    j["context"] = context.to_json();
    return j;
  }

  static AggregateTuple from_json(const json& j) {
    try {
      AggregateTuple t;
      t.keyspace = Keyspace::from_json(j);
      t.window_id = j.at("window_id").get<std::uint64_t>();
      t.arm_id = j.at("arm_id").get<std::string>();
      t.pulls = j.at("pulls").get<std::uint64_t>();
      t.reward_sum = j.at("reward_sum").get<double>();
      t.context = ContextVector::from_json(j.at("context"));
      if (!std::isfinite(t.reward_sum)) fail(ErrorCode::CorruptData, "non-finite reward_sum");
      return t;
    } catch (const json::exception& e) {
      fail(ErrorCode::CorruptData, std::string("aggregate tuple: ") + e.what());
    }
  }
};

}  // namespace banditd
