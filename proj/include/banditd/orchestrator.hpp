#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "banditd/linucb.hpp"
#include "banditd/model_holder.hpp"
#include "banditd/pipeline.hpp"

namespace banditd {

/// Everything the trainer needs to know about one bandit instance.
struct InstanceSpec {
  std::string instance_id;
  ModelConfig model;
  std::vector<Keyspace> keyspaces;
};

/// Supplies the currently active arms of an instance.
class ArmSource {
 public:
  virtual ~ArmSource() = default;
  /// Throws Error{SourceUnavailable} when the list cannot be fetched.
  virtual std::vector<ArmId> fetch(const std::string& instance_id) = 0;
};

class StaticArmSource : public ArmSource {
 public:
  StaticArmSource() = default;
  explicit StaticArmSource(std::map<std::string, std::vector<ArmId>> arms) : arms_(std::move(arms)) {}

  void set(const std::string& instance_id, std::vector<ArmId> arms) {
    std::lock_guard lock(mu_);
    arms_[instance_id] = std::move(arms);
  }
  void set_available(bool up) {
    std::lock_guard lock(mu_);
    available_ = up;
  }

  std::vector<ArmId> fetch(const std::string& instance_id) override {
    std::lock_guard lock(mu_);
    if (!available_) fail(ErrorCode::SourceUnavailable, "static arm source marked down");
    auto it = arms_.find(instance_id);
    if (it == arms_.end()) fail(ErrorCode::SourceUnavailable, "no arms for " + instance_id);
    return it->second;
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::vector<ArmId>> arms_;
  bool available_ = true;
};

inline std::vector<ArmId> parse_arm_list(const json& j) {
  std::vector<ArmId> out;
  if (!j.is_array()) fail(ErrorCode::SourceUnavailable, "arm list must be a JSON array");
  for (const auto& a : j) {
    if (a.is_string()) out.push_back(a.get<std::string>());
    else if (a.is_object() && a.contains("arm_id")) out.push_back(a.at("arm_id").get<std::string>());
    else fail(ErrorCode::SourceUnavailable, "bad arm entry " + a.dump());
  }
  return out;
}

/// Reads `{instance: [arms...]}` or a bare array (shared by all instances)
/// from a file on every fetch.
class FileArmSource : public ArmSource {
 public:
  explicit FileArmSource(fs::path path) : path_(std::move(path)) {}

  std::vector<ArmId> fetch(const std::string& instance_id) override {
    json j;
    try {
      j = read_json_file(path_);
    } catch (const Error& e) {
      fail(ErrorCode::SourceUnavailable, e.what());
    }
    if (j.is_object()) {
      if (!j.contains(instance_id)) fail(ErrorCode::SourceUnavailable, "no arms for " + instance_id);
      return parse_arm_list(j.at(instance_id));
    }
    return parse_arm_list(j);
  }

 private:
  fs::path path_;
};

struct UpdateTask {
  std::string instance_id;
  Keyspace keyspace;
  std::set<ArmId> active_arms;
  TimestampMs enqueue_time = 0;
};

/// Many-producer / many-consumer queue that holds at most one pending task per
/// keyspace; a task stays pending until its worker calls `complete`.
class TaskQueue {
 public:
  bool push(UpdateTask task) {
    std::lock_guard lock(mu_);
    if (!pending_.insert(task.keyspace).second) return false;
    queue_.push_back(std::move(task));
    cv_.notify_one();
    return true;
  }

  std::optional<UpdateTask> try_pop() {
    std::lock_guard lock(mu_);
    if (queue_.empty()) return std::nullopt;
    auto t = std::move(queue_.front());
    queue_.pop_front();
    return t;
  }

  std::optional<UpdateTask> pop_for(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return !queue_.empty(); })) return std::nullopt;
    auto t = std::move(queue_.front());
    queue_.pop_front();
    return t;
  }

  void complete(const UpdateTask& task) {
    std::lock_guard lock(mu_);
    pending_.erase(task.keyspace);
  }

  bool is_pending(const Keyspace& ks) const {
    std::lock_guard lock(mu_);
    return pending_.count(ks) > 0;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return queue_.size();
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<UpdateTask> queue_;
  std::set<Keyspace> pending_;
};

struct CycleResult {
  std::vector<UpdateTask> enqueued;
  std::vector<std::string> skipped_instances;  // arm source unavailable
  std::vector<Keyspace> coalesced;
};

/// One scheduling round: fetch each instance's arms and enqueue a task per
/// keyspace that is not already pending.
inline CycleResult enqueue_cycle(const std::vector<InstanceSpec>& registry, ArmSource& arms, TaskQueue& queue,
                                 TimestampMs now) {
  if (registry.empty()) fail(ErrorCode::ConfigError, "instance registry is empty");
  CycleResult out;
  for (const auto& inst : registry) {
    std::vector<ArmId> fetched;
    try {
      fetched = arms.fetch(inst.instance_id);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::SourceUnavailable) throw;
      out.skipped_instances.push_back(inst.instance_id);
      continue;
    }
    std::set<ArmId> active(fetched.begin(), fetched.end());
    if (active.empty()) {
      out.skipped_instances.push_back(inst.instance_id);
      continue;
    }
    for (const auto& ks : inst.keyspaces) {
      UpdateTask task{inst.instance_id, ks, active, now};
      if (queue.push(task)) out.enqueued.push_back(std::move(task));
      else out.coalesced.push_back(ks);
    }
  }
  return out;
}

enum class TrainStage { Loaded, ArmsSynced, WindowApplied, EntryWritten, Published };

struct TrainerOptions {
  std::function<TimestampMs()> clock = [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
  std::function<void(const std::string&)> alert = [](const std::string& msg) {
    std::cerr << "[banditd] ALERT " << msg << std::endl;
  };
  /// Test hook invoked at each stage of run_task (crash injection).
  std::function<void(TrainStage)> stage_hook;
};

/// Training service: applies closed windows to a keyspace's model and
/// publishes the successor snapshot. One writer per keyspace at a time.
class Trainer {
 public:
  Trainer(std::vector<InstanceSpec> registry, WindowStore& windows, ModelHolder& holder, TrainerOptions opts = {})
      : windows_(windows), holder_(holder), opts_(std::move(opts)) {
    for (auto& inst : registry) instances_.emplace(inst.instance_id, std::move(inst));
  }

  ModelHolderEntry run_task(const UpdateTask& task) {
    auto lease = lease_for(task.keyspace);
    std::lock_guard hold(*lease);

    const auto inst_it = instances_.find(task.instance_id);
    if (inst_it == instances_.end()) fail(ErrorCode::ConfigError, "unknown instance " + task.instance_id);
    if (task.active_arms.empty()) fail(ErrorCode::InvalidValue, "task has no active arms");

    auto current = holder_.try_get(task.keyspace);
    BanditModel model = current ? *current->model : BanditModel(task.instance_id, inst_it->second.model);
    std::vector<std::uint64_t> consumed = current ? current->consumed_windows : std::vector<std::uint64_t>{};
    std::uint64_t dropped = current ? current->dropped_tuples : 0;
    stage(TrainStage::Loaded);

    // Read every pending window before touching the model: all-or-nothing.
    const std::set<std::uint64_t> done(consumed.begin(), consumed.end());
    std::vector<std::pair<std::uint64_t, std::vector<AggregateTuple>>> pending;
    try {
      for (auto id : windows_.closed_windows(task.keyspace))
        if (!done.count(id)) pending.emplace_back(id, windows_.load(task.keyspace, id));
    } catch (const Error& e) {
      opts_.alert("training " + task.keyspace.str() + " aborted: " + e.what());
      throw;
    }

    for (const auto& id : task.active_arms)
      if (!model.has_arm(id)) model.insert_arm(id);
    for (const auto& id : model.arm_ids())
      if (!task.active_arms.count(id)) model.erase_arm(id);
    stage(TrainStage::ArmsSynced);

    if (pending.empty()) {
      model.apply({});
    }
    for (auto& [id, tuples] : pending) {
      const auto before = tuples.size();
      std::erase_if(tuples, [&](const AggregateTuple& t) { return !model.has_arm(t.arm_id); });
      dropped += before - tuples.size();
      try {
        model.apply(tuples);
      } catch (const Error& e) {
        opts_.alert("training " + task.keyspace.str() + " window " + std::to_string(id) + " rejected: " + e.what());
        throw;
      }
      consumed.push_back(id);
      stage(TrainStage::WindowApplied);
    }

    auto entry = ModelHolderEntry::make(task.keyspace, std::move(model), opts_.clock(), std::move(consumed), dropped);
    holder_.publish(entry, [&](PublishStage s) {
      stage(s == PublishStage::EntryWritten ? TrainStage::EntryWritten : TrainStage::Published);
    });
    return entry;
  }

  /// Drains the queue on the calling thread.
  std::vector<ModelHolderEntry> drain(TaskQueue& queue) {
    std::vector<ModelHolderEntry> out;
    while (auto task = queue.try_pop()) {
      try {
        out.push_back(run_task(*task));
      } catch (...) {
        queue.complete(*task);
        throw;
      }
      queue.complete(*task);
    }
    return out;
  }

  const std::map<std::string, InstanceSpec>& instances() const { return instances_; }

 private:
  void stage(TrainStage s) {
    if (opts_.stage_hook) opts_.stage_hook(s);
  }

  std::shared_ptr<std::mutex> lease_for(const Keyspace& ks) {
    std::lock_guard lock(lease_mu_);
    auto& m = leases_[ks];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
  }

  WindowStore& windows_;
  ModelHolder& holder_;
  TrainerOptions opts_;
  std::map<std::string, InstanceSpec> instances_;
  std::mutex lease_mu_;
  std::map<Keyspace, std::shared_ptr<std::mutex>> leases_;
};

/// Model Holder read path used by serving and health tooling.
inline EntryPtr get_model(const ModelHolder& holder, const Keyspace& ks) { return holder.get(ks); }

}  // namespace banditd
