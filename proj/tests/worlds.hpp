#pragma once

#include <string>
#include <vector>

#include "banditd/config.hpp"
#include "banditd/replay.hpp"
#include "banditd/rng.hpp"
#include "banditd/world.hpp"

// Synthetic worlds shared by the unit and acceptance tests.
namespace worlds {

using namespace banditd;

/// One categorical feature with 8 values, merged into two coarse groups.
inline json grid_schema_json() {
  json cats = json::array(), merge = json::object();
  for (int c = 0; c < 8; ++c) {
    cats.push_back("c" + std::to_string(c));
    merge["c" + std::to_string(c)] = c < 4 ? "lo" : "hi";
  }
  return {{"features",
           {{{"name", "ctx"}, {"kind", "categorical"}, {"categories", cats}, {"coarse_merge_map", merge},
             {"other_slot", false}}}}};
}

// Click probability per context (rows) and arm (columns a, b, c, d).
inline constexpr double kGridMeans[8][4] = {
    {0.50, 0.40, 0.30, 0.20}, {0.20, 0.45, 0.30, 0.35}, {0.30, 0.25, 0.55, 0.40}, {0.15, 0.30, 0.25, 0.42},
    {0.60, 0.50, 0.45, 0.30}, {0.25, 0.35, 0.48, 0.38}, {0.40, 0.52, 0.30, 0.42}, {0.20, 0.30, 0.36, 0.46}};

/// 4 arms x 8 equally likely contexts, linear Bernoulli rewards, one request per second.
inline WorldSpec grid_world(std::uint64_t seed = 0) {
  json arms = json::array(), contexts = json::array();
  const std::vector<std::string> ids{"a", "b", "c", "d"};
  for (std::size_t a = 0; a < ids.size(); ++a) {
    json w = json::object();
    for (int c = 0; c < 8; ++c) w["ctx=c" + std::to_string(c)] = kGridMeans[c][a];
    arms.push_back({{"arm_id", ids[a]}, {"weights", w}});
  }
  for (int c = 0; c < 8; ++c) contexts.push_back({{"attributes", {{"ctx", "c" + std::to_string(c)}}}});
  return WorldSpec::from_json({{"schema", grid_schema_json()},
                               {"arms", arms},
                               {"traffic", {{"contexts", contexts}, {"interval_ms", 1000}}},
                               {"seed", seed}});
}

/// Nine binary features with a constant coarse block; arms are smooth
/// (linear) functions of the bits, so nearby contexts have similar rewards.
inline WorldSpec lipschitz_world(std::uint64_t seed = 0, std::size_t n_arms = 4) {
  json features = json::array(), samplers = json::object();
  for (int i = 0; i < 9; ++i) {
    const auto name = "f" + std::to_string(i);
    features.push_back({{"name", name}, {"kind", "categorical"}, {"categories", {"0", "1"}},
                        {"coarse_merge_map", {{"0", "any"}, {"1", "any"}}}, {"other_slot", false}});
    samplers[name] = {{"values", {"0", "1"}}};
  }
  const json schema = {{"features", features}};
  Rng rng(derive_seed(seed, 0, 99));
  json arms = json::array();
  for (std::size_t a = 0; a < n_arms; ++a) {
    json w = json::object();
    for (int i = 0; i < 9; ++i) {
      const auto name = "f" + std::to_string(i);
      const double s = (rng.uniform() * 2.0 - 1.0) * 0.09;
      w[name + "=1"] = s / 2.0;
      w[name + "=0"] = -s / 2.0;
      w[name + "~any"] = 0.5 / 9.0;
    }
    arms.push_back({{"arm_id", "arm" + std::to_string(a)}, {"weights", w}});
  }
  return WorldSpec::from_json(
      {{"schema", schema}, {"arms", arms}, {"traffic", {{"features", samplers}, {"interval_ms", 1000}}}, {"seed", seed}});
}

/// Single-keyspace instance serving every arm of `w`.
inline InstanceConfig instance_for(const WorldSpec& w, std::vector<KeyspaceWeight> keyspaces = {{"t", "v", 1.0}},
                                   TimestampMs cycle_ms = 120'000) {
  InstanceConfig c;
  c.instance_id = "feed";
  c.schema = w.schema;
  c.model = ModelConfig{1.0, 1.0, w.schema.dimension()};
  c.arms = w.arm_ids();
  for (const auto& [id, type] : w.arm_types()) c.catalog.set(id, type);
  c.keyspaces = std::move(keyspaces);
  c.cycle_period_ms = cycle_ms;
  c.validate();
  return c;
}

/// `n` uniformly-random logged pulls from `w`.
inline ReplayLog uniform_log(const WorldSpec& w, std::uint64_t n, std::uint64_t seed) {
  ReplayLog log;
  log.arm_set = w.arm_ids();
  log.k = log.arm_set.size();
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto req = request_at(w, i, seed);
    const auto x = encode(req.attributes, w.schema);
    auto pick = request_rng(seed, i, Stream::Policy);
    const auto& arm = log.arm_set[pick.index(log.k)];
    auto rr = request_rng(seed, i, Stream::Reward);
    log.events.push_back({req.timestamp, x, arm, realize_reward(w, x, arm, rr, i).reward});
  }
  return log;
}

}  // namespace worlds
