#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "banditd/context.hpp"
#include "banditd/linucb.hpp"
#include "banditd/orchestrator.hpp"
#include "banditd/serving.hpp"

namespace banditd {

struct KeyspaceWeight {
  std::string test_id;
  std::string variant_id;
  double weight = 1.0;
};

/// One bandit instance as configured by the operator.
struct InstanceConfig {
  std::string instance_id;
  FeatureSchema schema;
  ModelConfig model;
  std::vector<ConstraintRule> rules;
  ArmCatalog catalog;
  std::vector<ArmId> arms;  // static arm list (used when no arm_source)
  json arm_source;          // {"kind": "file", "path": ...} | {"kind": "http", "url": ...}
  TimestampMs cycle_period_ms = 120'000;
  std::vector<KeyspaceWeight> keyspaces;
  bool fallback_on_empty_eligible = false;
  TimestampMs reward_ttl_ms = 6LL * 3600 * 1000;
  std::size_t session_length = 0;  // simulated feed length; 0 = one card per feed

  std::vector<Keyspace> keyspace_list() const {
    std::vector<Keyspace> out;
    for (const auto& k : keyspaces) out.push_back({instance_id, k.test_id, k.variant_id});
    return out;
  }

  InstanceSpec spec() const { return {instance_id, model, keyspace_list()}; }

  void validate() const {
    if (instance_id.empty()) fail(ErrorCode::ConfigError, "instance_id is required");
    if (keyspaces.empty()) fail(ErrorCode::ConfigError, instance_id + ": at least one keyspace is required");
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& k : keyspaces) {
      if (k.test_id.empty() || k.variant_id.empty()) fail(ErrorCode::ConfigError, "test_id/variant_id must be non-empty");
      if (!(k.weight > 0.0)) fail(ErrorCode::ConfigError, "keyspace weight must be > 0");
      if (!seen.emplace(k.test_id, k.variant_id).second) fail(ErrorCode::ConfigError, "duplicate keyspace");
    }
    if (cycle_period_ms <= 0) fail(ErrorCode::ConfigError, "cycle_period_ms must be > 0");
    if (model.dimension != schema.dimension()) fail(ErrorCode::ConfigError, "model dimension must match the schema");
    model.validate();
    catalog.validate_rules(rules);
    if (arms.empty() && arm_source.is_null()) fail(ErrorCode::ConfigError, instance_id + ": no arms and no arm_source");
  }

  /// `base` resolves relative schema paths.
  static InstanceConfig from_json(const json& j, const fs::path& base = {}) {
    try {
      InstanceConfig c;
      c.instance_id = j.at("instance_id").get<std::string>();
      if (j.contains("schema")) {
        c.schema = FeatureSchema::from_json(j.at("schema"));
      } else if (j.contains("schema_ref")) {
        fs::path p = j.at("schema_ref").get<std::string>();
        if (p.is_relative()) p = base / p;
        c.schema = FeatureSchema::from_json(read_json_file(p));
      } else {
        fail(ErrorCode::ConfigError, c.instance_id + ": schema or schema_ref is required");
      }
      const auto mj = j.value("model", json::object());
      c.model.lambda = mj.value("lambda", 1.0);
      c.model.alpha = mj.value("alpha", 1.0);
      c.model.dimension = c.schema.dimension();
      for (const auto& r : j.value("rules", json::array())) c.rules.push_back(ConstraintRule::from_json(r));
      if (j.contains("arm_types")) c.catalog = ArmCatalog(j.at("arm_types").get<std::map<ArmId, std::string>>());
      c.arms = j.value("arms", std::vector<ArmId>{});
      for (const auto& a : c.arms)
        if (!c.catalog.types().count(a)) c.catalog.set(a, a);
      c.arm_source = j.value("arm_source", json(nullptr));
      c.cycle_period_ms = j.value("cycle_period_ms", c.cycle_period_ms);
      for (const auto& kj : j.at("keyspaces"))
        c.keyspaces.push_back(
            {kj.at("test_id").get<std::string>(), kj.at("variant_id").get<std::string>(), kj.value("weight", 1.0)});
      c.fallback_on_empty_eligible = j.value("fallback_on_empty_eligible", false);
      c.reward_ttl_ms = j.value("reward_ttl_ms", c.reward_ttl_ms);
      c.session_length = j.value("session_length", std::size_t{0});
      c.validate();
      return c;
    } catch (const json::exception& e) {
      fail(ErrorCode::ConfigError, std::string("instance config: ") + e.what());
    }
  }

  json to_json() const {
    json ks = json::array();
    for (const auto& k : keyspaces) ks.push_back({{"test_id", k.test_id}, {"variant_id", k.variant_id}, {"weight", k.weight}});
    json rules_j = json::array();
    for (const auto& r : rules) rules_j.push_back(r.to_json());
    json j = {{"instance_id", instance_id},
              {"schema", schema.to_json()},
              {"model", {{"lambda", model.lambda}, {"alpha", model.alpha}}},
              {"rules", rules_j},
              {"arm_types", catalog.types()},
              {"arms", arms},
              {"cycle_period_ms", cycle_period_ms},
              {"keyspaces", ks},
              {"fallback_on_empty_eligible", fallback_on_empty_eligible},
              {"reward_ttl_ms", reward_ttl_ms},
              {"session_length", session_length}};
    if (!arm_source.is_null()) j["arm_source"] = arm_source;
    return j;
  }
};

/// A config file holds either one instance object or {"instances": [...]}.
inline std::vector<InstanceConfig> load_instances(const fs::path& path) {
  const auto j = read_json_file(path);
  const auto base = path.parent_path();
  std::vector<InstanceConfig> out;
  if (j.contains("instances")) {
    for (const auto& ij : j.at("instances")) out.push_back(InstanceConfig::from_json(ij, base));
  } else {
    out.push_back(InstanceConfig::from_json(j, base));
  }
  std::set<std::string> ids;
  for (const auto& c : out)
    if (!ids.insert(c.instance_id).second) fail(ErrorCode::ConfigError, "duplicate instance " + c.instance_id);
  if (out.empty()) fail(ErrorCode::ConfigError, "no instances configured");
  return out;
}

}  // namespace banditd
