#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "banditd/context.hpp"
#include "banditd/records.hpp"

namespace banditd {

struct ModelConfig {
  double lambda = 1.0;
  double alpha = 1.0;
  std::size_t dimension = 1;

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) fail(ErrorCode::InvalidValue, "lambda must be > 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail(ErrorCode::InvalidValue, "alpha must be >= 0");
    if (dimension < 1) fail(ErrorCode::InvalidValue, "dimension must be >= 1");
  }

  json to_json() const { return {{"lambda", lambda}, {"alpha", alpha}, {"dimension", dimension}}; }
  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.lambda = j.value("lambda", 1.0);
    c.alpha = j.value("alpha", 1.0);
    c.dimension = j.at("dimension").get<std::size_t>();
    c.validate();
    return c;
  }
};

/// Ridge state of one arm. `A` and `b` are the source of truth; `theta` and
/// `A_inv` are re-derived from them by `refresh()`.
struct ArmModel {
  ArmId arm_id;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd theta;
  Eigen::MatrixXd A_inv;
  std::uint64_t update_count = 0;

  static ArmModel fresh(ArmId id, const ModelConfig& cfg) {
    const auto d = static_cast<Eigen::Index>(cfg.dimension);
    ArmModel arm;
    arm.arm_id = std::move(id);
    arm.A = cfg.lambda * Eigen::MatrixXd::Identity(d, d);
    arm.b = Eigen::VectorXd::Zero(d);
    arm.refresh();
    return arm;
  }

  void refresh() {
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) fail(ErrorCode::InvalidValue, "arm " + arm_id + ": design matrix not positive definite");
    theta = llt.solve(b);
    A_inv = llt.solve(Eigen::MatrixXd::Identity(A.rows(), A.cols()));
    A_inv = (0.5 * (A_inv + A_inv.transpose())).eval();
  }
};

struct ArmScore {
  double mean = 0.0;
  double ucb = 0.0;
};

using ScoreMap = std::map<ArmId, ArmScore>;

/// Disjoint-arms LinUCB model of one instance. Treat published instances as
/// immutable snapshots; mutation happens on private copies.
class BanditModel {
 public:
  static constexpr int kFormatVersion = 1;

  BanditModel() = default;
  BanditModel(std::string instance_id, ModelConfig config) : instance_id_(std::move(instance_id)), config_(config) {
    config_.validate();
  }

  const std::string& instance_id() const { return instance_id_; }
  const ModelConfig& config() const { return config_; }
  std::uint64_t version() const { return version_; }
  const std::map<ArmId, ArmModel>& arms() const { return arms_; }
  bool has_arm(const ArmId& id) const { return arms_.count(id) > 0; }
  std::set<ArmId> arm_ids() const {
    std::set<ArmId> out;
    for (const auto& [id, _] : arms_) out.insert(id);
    return out;
  }

  const ArmModel& arm(const ArmId& id) const {
    auto it = arms_.find(id);
    if (it == arms_.end()) fail(ErrorCode::UnknownArm, id);
    return it->second;
  }

  ArmScore score_arm(const ArmId& id, const Eigen::VectorXd& x) const {
    const auto& a = arm(id);
    ArmScore s;
    s.mean = a.theta.dot(x);
    const double width = std::max(0.0, x.dot(a.A_inv * x));
    s.ucb = s.mean + config_.alpha * std::sqrt(width);
    return s;
  }

  Eigen::VectorXd as_vector(const ContextVector& x) const {
    if (x.dimension() != config_.dimension)
      fail(ErrorCode::DimensionError, "context dimension " + std::to_string(x.dimension()) + " != model dimension " +
                                          std::to_string(config_.dimension));
    return Eigen::Map<const Eigen::VectorXd>(x.unified().data(), static_cast<Eigen::Index>(x.dimension()));
  }

  // In-place mutators. Each committed call bumps the version once.

  void apply(std::span<const AggregateTuple> tuples) {
    std::set<ArmId> touched;
    for (const auto& t : tuples) {
      if (!has_arm(t.arm_id)) fail(ErrorCode::UnknownArm, t.arm_id);
      if (!std::isfinite(t.reward_sum)) fail(ErrorCode::InvalidValue, "non-finite reward_sum");
      as_vector(t.context);
    }
    for (const auto& t : tuples) {
      auto& a = arms_.at(t.arm_id);
      const Eigen::VectorXd x = as_vector(t.context);
      if (t.pulls > 0) {
        const Eigen::MatrixXd outer = x * x.transpose();  // materialized so A stays exactly symmetric
        a.A += static_cast<double>(t.pulls) * outer;
      }
      a.b.noalias() += t.reward_sum * x;
      ++a.update_count;
      touched.insert(t.arm_id);
    }
    for (const auto& id : touched) arms_.at(id).refresh();
    ++version_;
  }

  void insert_arm(const ArmId& id) {
    if (has_arm(id)) fail(ErrorCode::DuplicateArm, id);
    arms_.emplace(id, ArmModel::fresh(id, config_));
    ++version_;
  }

  void erase_arm(const ArmId& id) {
    if (arms_.erase(id) == 0) fail(ErrorCode::UnknownArm, id);
    ++version_;
  }

  void set_version(std::uint64_t v) { version_ = v; }

  json to_json() const {
    json arms = json::array();
    for (const auto& [id, a] : arms_) {
      std::vector<double> A(a.A.data(), a.A.data() + a.A.size());
      std::vector<double> b(a.b.data(), a.b.data() + a.b.size());
      arms.push_back({{"arm_id", id}, {"update_count", a.update_count}, {"A", A}, {"b", b}});
    }
    return {{"format", "banditd.model"},
            {"format_version", kFormatVersion},
            {"instance_id", instance_id_},
            {"config", config_.to_json()},
            {"model_version", version_},
            {"arms", arms}};
  }

  /// Canonical byte form (round-trips every double bit-exactly).
  std::string serialize() const { return to_json().dump(); }

  static BanditModel from_json(const json& j) {
    try {
      if (j.at("format").get<std::string>() != "banditd.model" || j.at("format_version").get<int>() != kFormatVersion)
        fail(ErrorCode::CorruptData, "unsupported model format");
      BanditModel m(j.at("instance_id").get<std::string>(), ModelConfig::from_json(j.at("config")));
      m.version_ = j.at("model_version").get<std::uint64_t>();
      const auto d = static_cast<Eigen::Index>(m.config_.dimension);
      for (const auto& aj : j.at("arms")) {
        ArmModel a;
        a.arm_id = aj.at("arm_id").get<std::string>();
        a.update_count = aj.at("update_count").get<std::uint64_t>();
        auto A = aj.at("A").get<std::vector<double>>();
        auto b = aj.at("b").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(A.size()) != d * d || static_cast<Eigen::Index>(b.size()) != d)
          fail(ErrorCode::CorruptData, "arm " + a.arm_id + ": wrong matrix size");
        a.A = Eigen::Map<Eigen::MatrixXd>(A.data(), d, d);
        a.b = Eigen::Map<Eigen::VectorXd>(b.data(), d);
        a.refresh();
        if (!m.arms_.emplace(a.arm_id, std::move(a)).second) fail(ErrorCode::CorruptData, "duplicate arm");
      }
      return m;
    } catch (const json::exception& e) {
      fail(ErrorCode::CorruptData, std::string("model: ") + e.what());
    }
  }

  static BanditModel deserialize(std::string_view bytes) { return from_json(parse_json(bytes, "model")); }

 private:
  std::string instance_id_;
  ModelConfig config_;
  std::map<ArmId, ArmModel> arms_;
  std::uint64_t version_ = 0;
};

using ModelSnapshot = std::shared_ptr<const BanditModel>;

inline ScoreMap score(const BanditModel& model, const ContextVector& x) {
  const Eigen::VectorXd v = model.as_vector(x);
  if (model.arms().empty()) fail(ErrorCode::NoArms, "model " + model.instance_id() + " has no arms");
  ScoreMap out;
  for (const auto& [id, _] : model.arms()) out.emplace(id, model.score_arm(id, v));
  return out;
}

inline BanditModel update_batch(const BanditModel& model, std::span<const AggregateTuple> tuples) {
  BanditModel next = model;
  next.apply(tuples);
  return next;
}

inline BanditModel add_arm(const BanditModel& model, const ArmId& id) {
  BanditModel next = model;
  next.insert_arm(id);
  return next;
}

inline BanditModel remove_arm(const BanditModel& model, const ArmId& id) {
  BanditModel next = model;
  next.erase_arm(id);
  return next;
}

namespace detail {

template <typename Key>
ArmId argmax_over(const BanditModel& model, const ContextVector& x, const std::set<ArmId>& eligible, Key key) {
  if (eligible.empty()) fail(ErrorCode::NoEligibleArm, "empty eligible set");
  const Eigen::VectorXd v = model.as_vector(x);
  const ArmId* best = nullptr;
  double best_value = 0.0;
  for (const auto& id : eligible) {  // ascending ids: strict '>' keeps the smallest on ties
    const double value = key(model.score_arm(id, v));
    if (!best || value > best_value) {
      best = &id;
      best_value = value;
    }
  }
  return *best;
}

}  // namespace detail

/// Exploit-only choice: highest mean among `eligible`, ties to the smallest id.
inline ArmId greedy_arm(const BanditModel& model, const ContextVector& x, const std::set<ArmId>& eligible) {
  return detail::argmax_over(model, x, eligible, [](const ArmScore& s) { return s.mean; });
}

/// LinUCB choice: highest upper bound among `eligible`, ties to the smallest id.
inline ArmId ucb_arm(const BanditModel& model, const ContextVector& x, const std::set<ArmId>& eligible) {
  return detail::argmax_over(model, x, eligible, [](const ArmScore& s) { return s.ucb; });
}

}  // namespace banditd
