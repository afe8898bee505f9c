#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "banditd/context.hpp"
#include "banditd/records.hpp"
#include "banditd/rng.hpp"

namespace banditd {

enum class RewardKind { Linear, Logistic };
enum class DelayKind { None, Fixed, Exponential };

struct WorldArm {
  ArmId arm_id;
  std::string arm_type;
  std::vector<double> weights;  // over the unified encoding
};

/// Per-feature sampling rule of the traffic generator.
struct FeatureSampler {
  enum class Kind { Categorical, Normal, Uniform } kind = Kind::Categorical;
  std::vector<json> values;  // categorical
  std::vector<double> probs;
  double a = 0.0, b = 1.0;   // normal(mean, sd) / uniform(lo, hi)
};

struct WeightedContext {
  json attributes;
  double weight = 1.0;
};

/// Synthetic environment with known ground truth.
struct WorldSpec {
  FeatureSchema schema;
  std::vector<WorldArm> arms;
  RewardKind reward_kind = RewardKind::Linear;
  // Traffic: either an explicit finite list or independent per-feature samplers.
  std::vector<WeightedContext> contexts;
  std::vector<std::pair<std::string, FeatureSampler>> samplers;
  TimestampMs start_ms = 1'700'000'000'000;
  TimestampMs interval_ms = 1000;
  DelayKind delay_kind = DelayKind::None;
  double delay_ms = 0.0;
  // Step change: from `drift_round` on, listed arms use the drift weights.
  std::optional<std::uint64_t> drift_round;
  std::map<ArmId, std::vector<double>> drift_weights;
  std::uint64_t seed = 0;

  const WorldArm& arm(const ArmId& id) const {
    for (const auto& a : arms)
      if (a.arm_id == id) return a;
    fail(ErrorCode::UnknownArm, id);
  }

  std::vector<ArmId> arm_ids() const {
    std::vector<ArmId> out;
    for (const auto& a : arms) out.push_back(a.arm_id);
    return out;
  }

  std::map<ArmId, std::string> arm_types() const {
    std::map<ArmId, std::string> out;
    for (const auto& a : arms) out[a.arm_id] = a.arm_type.empty() ? a.arm_id : a.arm_type;
    return out;
  }

  void validate() const {
    const auto d = schema.dimension();
    if (arms.empty()) fail(ErrorCode::InvalidValue, "world has no arms");
    auto check = [&](const std::vector<double>& w, const std::string& who) {
      if (w.size() != d) fail(ErrorCode::DimensionError, who + ": weights must have dimension " + std::to_string(d));
      for (double v : w)
        if (!std::isfinite(v)) fail(ErrorCode::InvalidValue, who + ": non-finite weight");
    };
    for (const auto& a : arms) check(a.weights, a.arm_id);
    for (const auto& [id, w] : drift_weights) {
      arm(id);
      check(w, id + " (drift)");
    }
    if (contexts.empty() && samplers.empty()) fail(ErrorCode::InvalidValue, "world has no traffic model");
    for (const auto& c : contexts)
      if (!(c.weight > 0.0) || !std::isfinite(c.weight)) fail(ErrorCode::InvalidValue, "context weight must be > 0");
    for (const auto& [name, s] : samplers)
      if (s.kind == FeatureSampler::Kind::Categorical) {
        if (s.values.empty() || s.values.size() != s.probs.size())
          fail(ErrorCode::InvalidValue, name + ": values/probs mismatch");
        for (double p : s.probs)
          if (!(p >= 0.0) || !std::isfinite(p)) fail(ErrorCode::InvalidValue, name + ": bad probability");
      }
    if (interval_ms <= 0) fail(ErrorCode::InvalidValue, "interval_ms must be > 0");
    if (!(delay_ms >= 0.0) || !std::isfinite(delay_ms)) fail(ErrorCode::InvalidValue, "bad reward delay");
  }

  /// True whenever the context space is finite (exact oracle available).
  bool finite_contexts() const {
    if (!contexts.empty()) return true;
    for (const auto& [_, s] : samplers)
      if (s.kind != FeatureSampler::Kind::Categorical) return false;
    return true;
  }

  static std::vector<double> parse_weights(const json& w, const FeatureSchema& schema) {
    if (w.is_array()) return w.get<std::vector<double>>();
    // Object form keyed by dimension name; unnamed dims weigh 0.
    const auto names = schema.dimension_names();
    std::vector<double> out(names.size(), 0.0);
    for (const auto& [k, v] : w.items()) {
      auto it = std::find(names.begin(), names.end(), k);
      if (it == names.end()) fail(ErrorCode::InvalidValue, "unknown weight dimension " + k);
      out[static_cast<std::size_t>(it - names.begin())] = v.get<double>();
    }
    return out;
  }

  static WorldSpec from_json(const json& j) {
    try {
      WorldSpec w;
      w.schema = FeatureSchema::from_json(j.at("schema"));
      for (const auto& aj : j.at("arms")) {
        WorldArm a;
        a.arm_id = aj.at("arm_id").get<std::string>();
        a.arm_type = aj.value("arm_type", a.arm_id);
        a.weights = parse_weights(aj.at("weights"), w.schema);
        w.arms.push_back(std::move(a));
      }
      const auto rm = j.value("reward_model", json::object()).value("kind", std::string("linear"));
      if (rm == "linear") w.reward_kind = RewardKind::Linear;
      else if (rm == "logistic") w.reward_kind = RewardKind::Logistic;
      else fail(ErrorCode::InvalidValue, "unknown reward model " + rm);

      const auto& t = j.at("traffic");
      w.interval_ms = t.value("interval_ms", TimestampMs{1000});
      w.start_ms = t.value("start_ms", w.start_ms);
      if (t.contains("contexts"))
        for (const auto& cj : t.at("contexts")) w.contexts.push_back({cj.at("attributes"), cj.value("weight", 1.0)});
      if (t.contains("features"))
        for (const auto& [name, fj] : t.at("features").items()) {
          FeatureSampler s;
          if (fj.contains("values")) {
            s.kind = FeatureSampler::Kind::Categorical;
            s.values = fj.at("values").get<std::vector<json>>();
            s.probs = fj.contains("probs") ? fj.at("probs").get<std::vector<double>>()
                                           : std::vector<double>(s.values.size(), 1.0);
          } else if (fj.contains("normal")) {
            s.kind = FeatureSampler::Kind::Normal;
            s.a = fj.at("normal").at(0).get<double>();
            s.b = fj.at("normal").at(1).get<double>();
          } else if (fj.contains("uniform")) {
            s.kind = FeatureSampler::Kind::Uniform;
            s.a = fj.at("uniform").at(0).get<double>();
            s.b = fj.at("uniform").at(1).get<double>();
          } else {
            fail(ErrorCode::InvalidValue, "feature sampler " + name + " has no distribution");
          }
          w.samplers.emplace_back(name, std::move(s));
        }

      if (j.contains("reward_delay")) {
        const auto& dj = j.at("reward_delay");
        const auto kind = dj.value("kind", std::string("none"));
        if (kind == "none") w.delay_kind = DelayKind::None;
        else if (kind == "fixed") w.delay_kind = DelayKind::Fixed;
        else if (kind == "exponential") w.delay_kind = DelayKind::Exponential;
        else fail(ErrorCode::InvalidValue, "unknown delay kind " + kind);
        w.delay_ms = dj.value("mean_ms", dj.value("ms", 0.0));
      }
      if (j.contains("drift")) {
        const auto& dj = j.at("drift");
        w.drift_round = dj.at("at_round").get<std::uint64_t>();
        for (const auto& aj : dj.at("arms"))
          w.drift_weights[aj.at("arm_id").get<std::string>()] = parse_weights(aj.at("weights"), w.schema);
      }
      w.seed = j.value("seed", std::uint64_t{0});
      w.validate();
      return w;
    } catch (const json::exception& e) {
      fail(ErrorCode::ConfigError, std::string("world spec: ") + e.what());
    }
  }
};

/// Ground-truth click probability of `arm` in context `x` at round `round`.
inline double true_mean(const WorldSpec& w, const ContextVector& x, const ArmId& arm, std::uint64_t round = 0) {
  const std::vector<double>* weights = &w.arm(arm).weights;
  if (w.drift_round && round >= *w.drift_round)
    if (auto it = w.drift_weights.find(arm); it != w.drift_weights.end()) weights = &it->second;
  const auto& u = x.unified();
  if (u.size() != weights->size()) fail(ErrorCode::DimensionError, "context does not match world schema");
  double z = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) z += (*weights)[i] * u[i];
  const double p = w.reward_kind == RewardKind::Linear ? z : 1.0 / (1.0 + std::exp(-z));
  return std::clamp(p, 0.0, 1.0);
}

struct RawRequest {
  std::uint64_t seq = 0;
  TimestampMs timestamp = 0;
  json attributes;
};

enum class Stream : std::uint64_t { Traffic = 1, Reward = 2, Assignment = 3, Policy = 4 };

/// Independent generator for one (seed, request, purpose) coordinate, so a
/// request's randomness never depends on other requests.
inline Rng request_rng(std::uint64_t seed, std::uint64_t seq, Stream stream) {
  return Rng(derive_seed(seed, seq, static_cast<std::uint64_t>(stream)));
}

namespace detail {

inline std::size_t weighted_pick(Rng& rng, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

}  // namespace detail

inline RawRequest request_at(const WorldSpec& w, std::uint64_t seq, std::uint64_t seed) {
  RawRequest r;
  r.seq = seq;
  r.timestamp = w.start_ms + static_cast<TimestampMs>(seq) * w.interval_ms;
  auto rng = request_rng(seed, seq, Stream::Traffic);
  if (!w.contexts.empty()) {
    std::vector<double> weights;
    for (const auto& c : w.contexts) weights.push_back(c.weight);
    r.attributes = w.contexts[detail::weighted_pick(rng, weights)].attributes;
    return r;
  }
  r.attributes = json::object();
  for (const auto& [name, s] : w.samplers) {
    switch (s.kind) {
      case FeatureSampler::Kind::Categorical: r.attributes[name] = s.values[detail::weighted_pick(rng, s.probs)]; break;
      case FeatureSampler::Kind::Normal: r.attributes[name] = rng.normal(s.a, s.b); break;
      case FeatureSampler::Kind::Uniform: r.attributes[name] = s.a + (s.b - s.a) * rng.uniform(); break;
    }
  }
  return r;
}

/// Seeded, reproducible request stream of `rounds` requests.
inline std::vector<RawRequest> generate_traffic(const WorldSpec& w, std::uint64_t rounds, std::uint64_t seed) {
  std::vector<RawRequest> out;
  out.reserve(rounds);
  for (std::uint64_t i = 0; i < rounds; ++i) out.push_back(request_at(w, i, seed));
  return out;
}

struct RealizedReward {
  double reward = 0.0;
  TimestampMs arrival_delay_ms = 0;
};

inline RealizedReward realize_reward(const WorldSpec& w, const ContextVector& x, const ArmId& arm, Rng& rng,
                                     std::uint64_t round = 0) {
  const double p = true_mean(w, x, arm, round);
  RealizedReward out;
  out.reward = rng.bernoulli(p) ? 1.0 : 0.0;
  switch (w.delay_kind) {
    case DelayKind::None: break;
    case DelayKind::Fixed: out.arrival_delay_ms = static_cast<TimestampMs>(w.delay_ms); break;
    case DelayKind::Exponential: out.arrival_delay_ms = static_cast<TimestampMs>(rng.exponential(w.delay_ms)); break;
  }
  return out;
}

struct ContextMass {
  json attributes;
  ContextVector context;
  double probability = 0.0;
};

/// The finite context distribution, merged by encoded context.
inline std::vector<ContextMass> context_distribution(const WorldSpec& w) {
  if (!w.finite_contexts()) fail(ErrorCode::InvalidValue, "context space is not finite");
  std::map<std::string, ContextMass> merged;
  auto add = [&](const json& attrs, double p) {
    auto x = encode(attrs, w.schema);
    auto [it, inserted] = merged.try_emplace(x.key(), ContextMass{attrs, x, 0.0});
    it->second.probability += p;
  };
  if (!w.contexts.empty()) {
    double total = 0.0;
    for (const auto& c : w.contexts) total += c.weight;
    for (const auto& c : w.contexts) add(c.attributes, c.weight / total);
  } else {
    std::function<void(std::size_t, json, double)> rec = [&](std::size_t i, json attrs, double p) {
      if (i == w.samplers.size()) {
        add(attrs, p);
        return;
      }
      const auto& [name, s] = w.samplers[i];
      double total = 0.0;
      for (double q : s.probs) total += q;
      for (std::size_t v = 0; v < s.values.size(); ++v) {
        if (s.probs[v] <= 0.0) continue;
        attrs[name] = s.values[v];
        rec(i + 1, attrs, p * s.probs[v] / total);
      }
    };
    rec(0, json::object(), 1.0);
  }
  std::vector<ContextMass> out;
  for (auto& [_, m] : merged) out.push_back(std::move(m));
  return out;
}

/// Distribution over arms a policy plays in a context.
using PolicyFn = std::function<std::map<ArmId, double>(const ContextVector&)>;

inline PolicyFn deterministic_policy(std::function<ArmId(const ContextVector&)> pick) {
  return [pick = std::move(pick)](const ContextVector& x) { return std::map<ArmId, double>{{pick(x), 1.0}}; };
}

inline PolicyFn uniform_policy(const WorldSpec& w) {
  return [arms = w.arm_ids()](const ContextVector&) {
    std::map<ArmId, double> out;
    for (const auto& a : arms) out[a] = 1.0 / static_cast<double>(arms.size());
    return out;
  };
}

/// Per-context best arm under the ground truth (ties: smallest id).
inline PolicyFn best_policy(const WorldSpec& w, std::uint64_t round = 0) {
  return deterministic_policy([&w, round](const ContextVector& x) {
    auto ids = w.arm_ids();
    std::sort(ids.begin(), ids.end());
    ArmId best = ids.front();
    double best_p = -1.0;
    for (const auto& a : ids) {
      const double p = true_mean(w, x, a, round);
      if (p > best_p) {
        best_p = p;
        best = a;
      }
    }
    return best;
  });
}

/// Expected reward per round of `policy`: exact over a finite context space,
/// Monte-Carlo (`mc_rounds` draws) otherwise.
inline double oracle_value(const WorldSpec& w, const PolicyFn& policy, std::uint64_t round = 0,
                           std::uint64_t mc_rounds = 200000) {
  w.validate();
  auto value_at = [&](const ContextVector& x) {
    double v = 0.0;
    for (const auto& [arm, p] : policy(x)) v += p * true_mean(w, x, arm, round);
    return v;
  };
  if (w.finite_contexts()) {
    double total = 0.0;
    for (const auto& m : context_distribution(w)) total += m.probability * value_at(m.context);
    return total;
  }
  double total = 0.0;
  for (std::uint64_t i = 0; i < mc_rounds; ++i) total += value_at(encode(request_at(w, i, w.seed ^ 0x5eedULL).attributes, w.schema));
  return total / static_cast<double>(mc_rounds);
}

}  // namespace banditd
