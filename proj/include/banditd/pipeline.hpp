#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "banditd/json_io.hpp"
#include "banditd/records.hpp"

namespace banditd {

/// Closed mini-batches. With a root directory every window is one file,
/// `{instance}/{test}/{variant}/{window_id}.agg.jsonl`, written atomically;
/// without one the store is in-memory.
class WindowStore {
 public:
  WindowStore() = default;
  explicit WindowStore(fs::path root) : root_(std::move(root)) {}

  bool on_disk() const { return !root_.empty(); }
  const fs::path& root() const { return root_; }

  fs::path window_path(const Keyspace& ks, std::uint64_t window_id) const {
    return root_ / ks.relative_dir() / (std::to_string(window_id) + ".agg.jsonl");
  }

  void put(const Keyspace& ks, std::uint64_t window_id, const std::vector<AggregateTuple>& tuples) {
    std::lock_guard lock(mu_);
    if (on_disk()) {
      std::string body;
      for (const auto& t : tuples) body += t.to_json().dump() + "\n";
      atomic_write_file(window_path(ks, window_id), body);
    } else {
      memory_[ks][window_id] = tuples;
    }
  }

  bool contains(const Keyspace& ks, std::uint64_t window_id) const {
    std::lock_guard lock(mu_);
    if (on_disk()) return fs::exists(window_path(ks, window_id));
    auto it = memory_.find(ks);
    return it != memory_.end() && it->second.count(window_id);
  }

  /// Closed window ids of a keyspace, ascending.
  std::vector<std::uint64_t> closed_windows(const Keyspace& ks) const {
    std::lock_guard lock(mu_);
    std::vector<std::uint64_t> ids;
    if (on_disk()) {
      const auto dir = root_ / ks.relative_dir();
      if (!fs::exists(dir)) return ids;
      for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        const std::string suffix = ".agg.jsonl";
        if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
          continue;
        const auto stem = name.substr(0, name.size() - suffix.size());
        if (stem.empty() || !std::all_of(stem.begin(), stem.end(), ::isdigit)) continue;
        ids.push_back(std::stoull(stem));
      }
      std::sort(ids.begin(), ids.end());
    } else if (auto it = memory_.find(ks); it != memory_.end()) {
      for (const auto& [id, _] : it->second) ids.push_back(id);
    }
    return ids;
  }

  std::vector<AggregateTuple> load(const Keyspace& ks, std::uint64_t window_id) const {
    std::lock_guard lock(mu_);
    if (!on_disk()) {
      auto it = memory_.find(ks);
      if (it == memory_.end() || !it->second.count(window_id)) fail(ErrorCode::UnknownWindow, ks.str());
      return it->second.at(window_id);
    }
    const auto path = window_path(ks, window_id);
    if (!fs::exists(path)) fail(ErrorCode::UnknownWindow, path.string());
    std::vector<AggregateTuple> out;
    for_each_jsonl(path, [&](const json& j) {
      auto t = AggregateTuple::from_json(j);
      if (!(t.keyspace == ks) || t.window_id != window_id)
        fail(ErrorCode::CorruptData, path.string() + ": tuple does not belong to this window");
      out.push_back(std::move(t));
    });
    return out;
  }

 private:
  fs::path root_;
  mutable std::mutex mu_;
  std::map<Keyspace, std::map<std::uint64_t, std::vector<AggregateTuple>>> memory_;
};

struct PipelineOptions {
  TimestampMs reward_ttl_ms = 6LL * 3600 * 1000;
  fs::path journal;  // empty: no durability
};

struct PipelineStats {
  std::uint64_t unique_decisions = 0;
  std::uint64_t duplicate_decisions = 0;
  std::uint64_t matched_rewards = 0;
  double matched_reward_sum = 0.0;
  std::uint64_t late_rewards = 0;
  std::uint64_t orphans_dropped = 0;
  std::uint64_t pending_rewards = 0;
  std::uint64_t windows_closed = 0;

  json to_json() const {
    return {{"unique_decisions", unique_decisions}, {"duplicate_decisions", duplicate_decisions},
            {"matched_rewards", matched_rewards},   {"matched_reward_sum", matched_reward_sum},
            {"late_rewards", late_rewards},         {"orphans_dropped", orphans_dropped},
            {"pending_rewards", pending_rewards},   {"windows_closed", windows_closed}};
  }
};

enum class Ack { Accepted, Duplicate, Pending };

/// Joins decisions and asynchronous rewards by decision id and aggregates them
/// into per-keyspace mini-batch windows.
class AggregationPipeline {
 public:
  AggregationPipeline(WindowStore& store, PipelineOptions opts = {}) : store_(store), opts_(std::move(opts)) {
    if (!opts_.journal.empty()) {
      if (fs::exists(opts_.journal)) replay_journal();
      journal_.open(opts_.journal);
    }
  }

  void register_keyspace(const Keyspace& ks) {
    std::lock_guard lock(mu_);
    state_for(ks);
  }

  Ack ingest_decision(const DecisionRecord& rec) {
    std::lock_guard lock(mu_);
    auto ack = apply_decision(rec);
    if (ack != Ack::Duplicate && journal_.is_open()) {
      json j = rec.to_json();
      j["type"] = "decision";
      journal_.append(j);
    }
    return ack;
  }

  Ack ingest_reward(const RewardRecord& rec) {
    if (!std::isfinite(rec.reward)) fail(ErrorCode::InvalidValue, "reward for " + rec.decision_id + " is not finite");
    std::lock_guard lock(mu_);
    auto ack = apply_reward(rec);
    if (journal_.is_open()) {
      json j = rec.to_json();
      j["type"] = "reward";
      journal_.append(j);
    }
    return ack;
  }

  /// Emits one tuple per non-empty cell, ordered by (context bytes, arm).
  std::vector<AggregateTuple> close_window(const Keyspace& ks, std::uint64_t window_id) {
    std::lock_guard lock(mu_);
    auto out = apply_close(ks, window_id);
    // Journal first: a window file never exists without its close marker.
    if (journal_.is_open()) {
      json j = ks.to_json();
      j["type"] = "close";
      j["window_id"] = window_id;
      journal_.append(j);
    }
    store_.put(ks, window_id, out);
    return out;
  }

  std::optional<std::uint64_t> open_window(const Keyspace& ks) const {
    std::lock_guard lock(mu_);
    auto it = keyspaces_.find(ks);
    if (it == keyspaces_.end()) return std::nullopt;
    return it->second.open_window;
  }

  std::vector<Keyspace> keyspaces() const {
    std::lock_guard lock(mu_);
    std::vector<Keyspace> out;
    for (const auto& [ks, _] : keyspaces_) out.push_back(ks);
    return out;
  }

  /// Drops buffered orphans older than the TTL relative to `now`.
  void expire_orphans(TimestampMs now) {
    std::lock_guard lock(mu_);
    expire(now);
    if (journal_.is_open()) journal_.append({{"type", "expire"}, {"now", now}});
  }

  PipelineStats stats() const {
    std::lock_guard lock(mu_);
    auto s = stats_;
    s.pending_rewards = 0;
    for (const auto& [_, v] : pending_) s.pending_rewards += v.size();
    return s;
  }

 private:
  struct CellKey {
    std::string context_key;
    ArmId arm;
    friend bool operator<(const CellKey& a, const CellKey& b) {
      return std::tie(a.context_key, a.arm) < std::tie(b.context_key, b.arm);
    }
  };
  struct Cell {
    ContextVector context;
    std::uint64_t pulls = 0;
    double reward_sum = 0.0;
  };
  struct KeyspaceState {
    std::uint64_t open_window = 0;
    std::map<CellKey, Cell> cells;
  };
  struct DecisionRef {
    Keyspace keyspace;
    ContextVector context;
    ArmId arm;
    std::uint64_t window_id = 0;
  };

  KeyspaceState& state_for(const Keyspace& ks) {
    if (ks.instance_id.empty() || ks.test_id.empty() || ks.variant_id.empty())
      fail(ErrorCode::InvalidValue, "keyspace ids must be non-empty");
    return keyspaces_[ks];
  }

  Cell& cell_for(KeyspaceState& st, const ContextVector& ctx, const ArmId& arm) {
    auto [it, inserted] = st.cells.try_emplace(CellKey{ctx.key(), arm});
    if (inserted) it->second.context = ctx;
    return it->second;
  }

  void watermark(TimestampMs t) { watermark_ = std::max(watermark_, t); }

  Ack apply_decision(const DecisionRecord& rec) {
    if (decisions_.count(rec.decision_id)) {
      ++stats_.duplicate_decisions;
      return Ack::Duplicate;
    }
    auto& st = state_for(rec.keyspace);
    auto& cell = cell_for(st, rec.context, rec.arm_id);
    ++cell.pulls;
    ++stats_.unique_decisions;
    decisions_.emplace(rec.decision_id, DecisionRef{rec.keyspace, rec.context, rec.arm_id, st.open_window});
    watermark(rec.timestamp);
    if (auto it = pending_.find(rec.decision_id); it != pending_.end()) {
      for (const auto& r : it->second) credit(cell, r.reward);
      pending_.erase(it);
    }
    return Ack::Accepted;
  }

  void credit(Cell& cell, double reward) {
    cell.reward_sum += reward;
    ++stats_.matched_rewards;
    stats_.matched_reward_sum += reward;
  }

  Ack apply_reward(const RewardRecord& rec) {
    watermark(rec.timestamp);
    auto it = decisions_.find(rec.decision_id);
    if (it == decisions_.end()) {
      pending_[rec.decision_id].push_back(rec);
      return Ack::Pending;
    }
    const auto& ref = it->second;
    auto& st = keyspaces_.at(ref.keyspace);
    if (ref.window_id != st.open_window) ++stats_.late_rewards;
    credit(cell_for(st, ref.context, ref.arm), rec.reward);
    return Ack::Accepted;
  }

  void expire(TimestampMs now) {
    for (auto it = pending_.begin(); it != pending_.end();) {
      auto& rewards = it->second;
      const auto before = rewards.size();
      std::erase_if(rewards, [&](const RewardRecord& r) { return r.timestamp < now - opts_.reward_ttl_ms; });
      stats_.orphans_dropped += before - rewards.size();
      it = rewards.empty() ? pending_.erase(it) : std::next(it);
    }
  }

  std::vector<AggregateTuple> apply_close(const Keyspace& ks, std::uint64_t window_id) {
    auto kit = keyspaces_.find(ks);
    if (kit == keyspaces_.end() || kit->second.open_window != window_id)
      fail(ErrorCode::UnknownWindow, ks.str() + " window " + std::to_string(window_id) + " is not open");
    auto& st = kit->second;
    expire(watermark_);
    std::vector<AggregateTuple> out;
    out.reserve(st.cells.size());
    for (auto& [key, cell] : st.cells) {
      out.push_back(AggregateTuple{ks, cell.context, key.arm, cell.pulls, cell.reward_sum, window_id});
    }
    st.cells.clear();
    ++st.open_window;
    ++stats_.windows_closed;
    return out;
  }

  void replay_journal() {
    // A crash mid-append leaves a partial last line; it was never acknowledged.
    const auto text = read_file(opts_.journal);
    const auto last_newline = text.rfind('\n');
    const std::size_t keep = last_newline == std::string::npos ? 0 : last_newline + 1;
    if (keep != text.size()) fs::resize_file(opts_.journal, keep);
    for_each_jsonl(opts_.journal, [&](const json& j) {
      const auto type = j.value("type", std::string{});
      if (type == "decision") {
        apply_decision(DecisionRecord::from_json(j));
      } else if (type == "reward") {
        apply_reward(RewardRecord::from_json(j));
      } else if (type == "close") {
        const auto ks = Keyspace::from_json(j);
        const auto id = j.at("window_id").get<std::uint64_t>();
        state_for(ks);
        auto tuples = apply_close(ks, id);
        if (!store_.contains(ks, id)) store_.put(ks, id, tuples);
      } else if (type == "expire") {
        expire(j.at("now").get<TimestampMs>());
      } else {
        fail(ErrorCode::CorruptData, "journal: unknown record type " + type);
      }
    });
  }

  WindowStore& store_;
  PipelineOptions opts_;
  mutable std::mutex mu_;
  JsonlAppender journal_;
  std::map<Keyspace, KeyspaceState> keyspaces_;
  std::unordered_map<std::string, DecisionRef> decisions_;
  std::map<std::string, std::vector<RewardRecord>> pending_;
  TimestampMs watermark_ = std::numeric_limits<TimestampMs>::min() / 2;
  PipelineStats stats_;
};

}  // namespace banditd
