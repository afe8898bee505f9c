#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "banditd/json_io.hpp"
#include "banditd/linucb.hpp"
#include "banditd/records.hpp"

namespace banditd {

/// A published model plus the lineage bookkeeping that makes publishing and
/// marking windows consumed a single atomic write.
struct ModelHolderEntry {
  Keyspace keyspace;
  std::string model_bytes;
  std::uint64_t model_version = 0;
  TimestampMs publish_time = 0;
  std::vector<std::uint64_t> consumed_windows;
  std::uint64_t dropped_tuples = 0;  // tuples for arms no longer active
  ModelSnapshot model;               // parsed form of model_bytes

  json to_json() const {
    return {{"keyspace", keyspace.to_json()},
            {"model_version", model_version},
            {"publish_time", publish_time},
            {"consumed_windows", consumed_windows},
            {"dropped_tuples", dropped_tuples},
            {"model", parse_json(model_bytes, "model")}};
  }

  static ModelHolderEntry from_json(const json& j) {
    try {
      ModelHolderEntry e;
      e.keyspace = Keyspace::from_json(j.at("keyspace"));
      e.model_version = j.at("model_version").get<std::uint64_t>();
      e.publish_time = j.at("publish_time").get<TimestampMs>();
      e.consumed_windows = j.at("consumed_windows").get<std::vector<std::uint64_t>>();
      e.dropped_tuples = j.value("dropped_tuples", std::uint64_t{0});
      auto model = BanditModel::from_json(j.at("model"));
      if (model.version() != e.model_version) fail(ErrorCode::CorruptData, "entry/model version mismatch");
      e.model_bytes = model.serialize();
      e.model = std::make_shared<const BanditModel>(std::move(model));
      return e;
    } catch (const json::exception& ex) {
      fail(ErrorCode::CorruptData, std::string("model holder entry: ") + ex.what());
    }
  }

  static ModelHolderEntry make(const Keyspace& ks, BanditModel model, TimestampMs publish_time,
                               std::vector<std::uint64_t> consumed, std::uint64_t dropped = 0) {
    ModelHolderEntry e;
    e.keyspace = ks;
    e.model_version = model.version();
    e.publish_time = publish_time;
    e.consumed_windows = std::move(consumed);
    e.dropped_tuples = dropped;
    e.model_bytes = model.serialize();
    e.model = std::make_shared<const BanditModel>(std::move(model));
    return e;
  }
};

using EntryPtr = std::shared_ptr<const ModelHolderEntry>;

enum class PublishStage { EntryWritten, PointerSwapped };

/// Model Holder: on disk, one directory per keyspace holding `model.v{N}`
/// files and a `CURRENT` pointer replaced by rename. In memory when no root
/// is given. Readers never observe a partially published entry.
class ModelHolder {
 public:
  ModelHolder() = default;
  explicit ModelHolder(fs::path root, bool keep_history = true)
      : root_(std::move(root)), keep_history_(keep_history) {}

  bool on_disk() const { return !root_.empty(); }
  void set_keep_history(bool keep) { keep_history_ = keep; }

  fs::path keyspace_dir(const Keyspace& ks) const { return root_ / ks.relative_dir(); }

  void publish(const ModelHolderEntry& entry, const std::function<void(PublishStage)>& hook = {}) {
    std::lock_guard lock(write_mu_);
    auto current = try_get(entry.keyspace);
    if (current && entry.model_version <= current->model_version)
      fail(ErrorCode::InvalidValue, "model_version must increase: " + std::to_string(entry.model_version) +
                                        " <= " + std::to_string(current->model_version));
    auto ptr = std::make_shared<const ModelHolderEntry>(entry);
    if (on_disk()) {
      const auto dir = keyspace_dir(entry.keyspace);
      atomic_write_file(dir / ("model.v" + std::to_string(entry.model_version)), entry.to_json().dump());
      if (hook) hook(PublishStage::EntryWritten);
      atomic_write_file(dir / "CURRENT", std::to_string(entry.model_version) + "\n");
    }
    {
      std::lock_guard slot_lock(slot_mu_);
      latest_[entry.keyspace] = ptr;
      if (keep_history_) history_[entry.keyspace][entry.model_version] = ptr;
    }
    if (hook) hook(PublishStage::PointerSwapped);
  }

  EntryPtr get(const Keyspace& ks) const {
    auto e = try_get(ks);
    if (!e) fail(ErrorCode::ModelNotFound, ks.str());
    return e;
  }

  EntryPtr try_get(const Keyspace& ks) const {
    if (on_disk()) {
      const auto pointer = keyspace_dir(ks) / "CURRENT";
      if (!fs::exists(pointer)) return nullptr;
      const auto version = std::stoull(read_file(pointer));
      {
        std::lock_guard slot_lock(slot_mu_);
        auto it = latest_.find(ks);
        if (it != latest_.end() && it->second->model_version == version) return it->second;
      }
      auto e = load_version(ks, version);
      std::lock_guard slot_lock(slot_mu_);
      auto& slot = latest_[ks];
      if (!slot || slot->model_version < e->model_version) slot = e;
      return slot;
    }
    std::lock_guard slot_lock(slot_mu_);
    auto it = latest_.find(ks);
    return it == latest_.end() ? nullptr : it->second;
  }

  /// A specific published version (needed to resolve which snapshot served a
  /// logged decision).
  EntryPtr get_version(const Keyspace& ks, std::uint64_t version) const {
    {
      std::lock_guard slot_lock(slot_mu_);
      if (auto it = history_.find(ks); it != history_.end())
        if (auto v = it->second.find(version); v != it->second.end()) return v->second;
    }
    if (on_disk()) {
      const auto path = keyspace_dir(ks) / ("model.v" + std::to_string(version));
      if (fs::exists(path)) return load_version(ks, version);
    }
    fail(ErrorCode::ModelNotFound, ks.str() + " v" + std::to_string(version));
  }

  std::map<std::uint64_t, ModelSnapshot> snapshots(const Keyspace& ks) const {
    std::map<std::uint64_t, ModelSnapshot> out;
    if (on_disk()) {
      const auto dir = keyspace_dir(ks);
      if (fs::exists(dir))
        for (const auto& entry : fs::directory_iterator(dir)) {
          const auto name = entry.path().filename().string();
          if (name.rfind("model.v", 0) != 0 || name.find(".tmp") != std::string::npos) continue;
          const auto v = std::stoull(name.substr(7));
          out[v] = load_version(ks, v)->model;
        }
      return out;
    }
    std::lock_guard slot_lock(slot_mu_);
    if (auto it = history_.find(ks); it != history_.end())
      for (const auto& [v, e] : it->second) out[v] = e->model;
    return out;
  }

 private:
  EntryPtr load_version(const Keyspace& ks, std::uint64_t version) const {
    const auto path = keyspace_dir(ks) / ("model.v" + std::to_string(version));
    auto e = std::make_shared<const ModelHolderEntry>(ModelHolderEntry::from_json(read_json_file(path)));
    if (!(e->keyspace == ks)) fail(ErrorCode::CorruptData, path.string() + ": keyspace mismatch");
    return e;
  }

  fs::path root_;
  bool keep_history_ = true;
  std::mutex write_mu_;
  mutable std::mutex slot_mu_;
  mutable std::map<Keyspace, EntryPtr> latest_;
  std::map<Keyspace, std::map<std::uint64_t, EntryPtr>> history_;
};

}  // namespace banditd
