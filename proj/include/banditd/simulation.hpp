#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include "banditd/config.hpp"
#include "banditd/model_holder.hpp"
#include "banditd/orchestrator.hpp"
#include "banditd/pipeline.hpp"
#include "banditd/replay.hpp"
#include "banditd/serving.hpp"
#include "banditd/world.hpp"

namespace banditd {

enum class SimPolicy { LinUcb, Uniform };

struct SimulationOptions {
  std::uint64_t seed = 0;
  std::uint64_t rounds = 1000;
  SimPolicy policy = SimPolicy::LinUcb;
  fs::path out_dir;  // empty: keep everything in memory
  /// Active arm set from a given round on (e.g. adding an arm mid-run).
  std::map<std::uint64_t, std::vector<ArmId>> arm_schedule;
  /// When set, requests assigned to other variants are dropped before serving.
  std::optional<std::set<std::string>> only_variants;
};

struct SimulationResult {
  std::vector<DecisionRecord> decisions;
  std::vector<RewardRecord> rewards;
  std::vector<LoggedEvent> uniform_log;  // Uniform policy only
  std::map<Keyspace, EntryPtr> final_entries;
  std::map<Keyspace, std::map<std::uint64_t, ModelSnapshot>> snapshots;
  double realized_reward = 0.0;
  double expected_reward = 0.0;  // sum of ground-truth means of served arms
  std::uint64_t served = 0;
  std::uint64_t fallbacks = 0;
  PipelineStats pipeline;
  json manifest;
};

/// Drives world traffic through serving, delayed rewards, the aggregation
/// pipeline and periodic training, all on the world's simulated clock.
class Simulation {
 public:
  Simulation(InstanceConfig config, WorldSpec world, SimulationOptions opts)
      : config_(std::move(config)), world_(std::move(world)), opts_(std::move(opts)) {
    config_.validate();
    world_.validate();
    if (world_.schema.dimension() != config_.schema.dimension())
      fail(ErrorCode::ConfigError, "world schema dimension differs from the instance schema");
  }

  SimulationResult run() {
    const bool disk = !opts_.out_dir.empty();
    WindowStore windows = disk ? WindowStore(opts_.out_dir / "aggregations") : WindowStore();
    ModelHolder holder = disk ? ModelHolder(opts_.out_dir / "models") : ModelHolder();
    PipelineOptions popts;
    popts.reward_ttl_ms = config_.reward_ttl_ms;
    if (disk) {
      fs::create_directories(opts_.out_dir);
      popts.journal = opts_.out_dir / "pipeline.journal.jsonl";
      fs::remove(popts.journal);
    }
    AggregationPipeline pipeline(windows, popts);
    const auto keyspaces = config_.keyspace_list();
    for (const auto& ks : keyspaces) pipeline.register_keyspace(ks);

    TimestampMs sim_now = world_.start_ms;
    TrainerOptions topts;
    topts.clock = [&] { return sim_now; };
    Trainer trainer({config_.spec()}, windows, holder, topts);
    TaskQueue queue;
    StaticArmSource arm_source;

    SimulationResult res;
    JsonlAppender decision_log, reward_log;
    if (disk) {
      fs::remove(opts_.out_dir / "decisions.jsonl");
      fs::remove(opts_.out_dir / "rewards.jsonl");
      decision_log.open(opts_.out_dir / "decisions.jsonl");
      reward_log.open(opts_.out_dir / "rewards.jsonl");
    }

    ArmCatalog catalog = config_.catalog;
    for (const auto& [id, type] : world_.arm_types())
      if (!config_.catalog.types().count(id)) catalog.set(id, type);

    ServingOptions sopts;
    sopts.fallback_on_empty = config_.fallback_on_empty_eligible;
    sopts.decision_prefix = "sim";
    DecisionRecord served;
    Server server(config_.schema, holder, catalog, sopts, [&](const DecisionRecord& r) { served = r; }, {});

    auto active_arms_at = [&](std::uint64_t round) {
      std::vector<ArmId> arms = config_.arms.empty() ? world_.arm_ids() : config_.arms;
      for (const auto& [from, set] : opts_.arm_schedule)
        if (from <= round) arms = set;
      return arms;
    };

    std::uint64_t round = 0;
    auto cycle = [&](TimestampMs now) {
      sim_now = now;
      for (const auto& ks : keyspaces) pipeline.close_window(ks, *pipeline.open_window(ks));
      arm_source.set(config_.instance_id, active_arms_at(round));
      enqueue_cycle({config_.spec()}, arm_source, queue, now);
      trainer.drain(queue);
    };

    struct PendingReward {
      TimestampMs arrival;
      std::uint64_t seq;
      RewardRecord rec;
      bool operator>(const PendingReward& o) const { return std::tie(arrival, seq) > std::tie(o.arrival, o.seq); }
    };
    std::priority_queue<PendingReward, std::vector<PendingReward>, std::greater<>> in_flight;
    auto deliver_until = [&](TimestampMs t) {
      while (!in_flight.empty() && in_flight.top().arrival <= t) {
        const auto r = in_flight.top().rec;
        in_flight.pop();
        pipeline.ingest_reward(r);
        if (reward_log.is_open()) reward_log.append(r.to_json());
        res.rewards.push_back(r);
      }
    };

    std::vector<double> variant_weights;
    for (const auto& k : config_.keyspaces) variant_weights.push_back(k.weight);
    std::map<Keyspace, FeedState> feeds;

    TimestampMs next_cycle = world_.start_ms;
    TimestampMs last_arrival = world_.start_ms;
    for (round = 0; round < opts_.rounds; ++round) {
      const auto req = request_at(world_, round, opts_.seed);
      deliver_until(req.timestamp);
      while (req.timestamp >= next_cycle) {
        cycle(next_cycle);
        next_cycle += config_.cycle_period_ms;
      }
      sim_now = req.timestamp;

      auto assign = request_rng(opts_.seed, round, Stream::Assignment);
      const auto& kw = config_.keyspaces[detail::weighted_pick(assign, variant_weights)];
      if (opts_.only_variants && !opts_.only_variants->count(kw.variant_id)) continue;
      const Keyspace ks{config_.instance_id, kw.test_id, kw.variant_id};

      auto& feed = feeds[ks];
      if (config_.session_length == 0 || feed.position() >= config_.session_length) feed = FeedState{};

      DecisionRecord rec;
      const std::string decision_id = "r" + std::to_string(round);
      if (opts_.policy == SimPolicy::LinUcb) {
        ServeRequest sreq{req.attributes, ks, decision_id, req.timestamp};
        const auto out = server.serve(sreq, config_.rules, feed);
        rec = std::move(served);
        res.fallbacks += out.fallback;
      } else {
        const auto arms = active_arms_at(round);
        const std::set<ArmId> arm_set(arms.begin(), arms.end());
        auto eligible = eligible_arms(arm_set, catalog, config_.rules, feed);
        if (eligible.empty()) eligible = arm_set;
        auto pick = request_rng(opts_.seed, round, Stream::Policy);
        auto it = eligible.begin();
        std::advance(it, static_cast<std::ptrdiff_t>(pick.index(eligible.size())));
        rec = DecisionRecord{decision_id, ks, encode(req.attributes, config_.schema), *it, req.timestamp, 0,
                             std::vector<ArmId>(eligible.begin(), eligible.end()), false};
        feed.push(catalog.type_of(*it));
      }
      pipeline.ingest_decision(rec);
      if (decision_log.is_open()) decision_log.append(rec.to_json());

      auto reward_rng = request_rng(opts_.seed, round, Stream::Reward);
      const auto realized = realize_reward(world_, rec.context, rec.arm_id, reward_rng, round);
      res.expected_reward += true_mean(world_, rec.context, rec.arm_id, round);
      res.realized_reward += realized.reward;
      ++res.served;
      if (opts_.policy == SimPolicy::Uniform)
        res.uniform_log.push_back({rec.timestamp, rec.context, rec.arm_id, realized.reward});
      if (realized.reward != 0.0) {
        const TimestampMs arrival = req.timestamp + realized.arrival_delay_ms;
        in_flight.push({arrival, round, RewardRecord{decision_id, realized.reward, arrival}});
        last_arrival = std::max(last_arrival, arrival);
      }
      res.decisions.push_back(std::move(rec));
    }

    // Flush outstanding rewards and fold everything into a final snapshot.
    const TimestampMs end =
        std::max(last_arrival, world_.start_ms + static_cast<TimestampMs>(opts_.rounds) * world_.interval_ms);
    deliver_until(end);
    cycle(std::max(end, next_cycle));

    for (const auto& ks : keyspaces) {
      res.final_entries[ks] = holder.get(ks);
      res.snapshots[ks] = holder.snapshots(ks);
    }
    res.pipeline = pipeline.stats();
    res.manifest = manifest(res);
    if (disk) {
      atomic_write_file(opts_.out_dir / "manifest.json", res.manifest.dump(2) + "\n");
      if (opts_.policy == SimPolicy::Uniform) {
        ReplayLog log;
        log.arm_set = active_arms_at(0);
        log.k = log.arm_set.size();
        log.events = res.uniform_log;
        atomic_write_file(opts_.out_dir / "replay.jsonl", log.to_jsonl());
      }
    }
    return res;
  }

 private:
  json manifest(const SimulationResult& res) const {
    json snaps = json::object();
    for (const auto& [ks, e] : res.final_entries)
      snaps[ks.str()] = {{"model_version", e->model_version}, {"model_hash", hex64(fnv1a64(e->model_bytes))}};
    return {{"seed", opts_.seed},
            {"rounds", opts_.rounds},
            {"policy", opts_.policy == SimPolicy::LinUcb ? "linucb" : "uniform"},
            {"config_hash", hex64(fnv1a64(config_.to_json().dump()))},
            {"decisions", res.served},
            {"realized_reward", res.realized_reward},
            {"expected_reward", res.expected_reward},
            {"fallbacks", res.fallbacks},
            {"pipeline", res.pipeline.to_json()},
            {"snapshots", snaps}};
  }

  InstanceConfig config_;
  WorldSpec world_;
  SimulationOptions opts_;
};

}  // namespace banditd
