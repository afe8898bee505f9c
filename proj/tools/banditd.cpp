#include <atomic>
#include <charconv>
#include <csignal>
#include <iostream>
#include <thread>

#include "banditd/config.hpp"
#include "banditd/health.hpp"
#include "banditd/simulation.hpp"

// After Eigen: <resolv.h> defines a `_res` macro.
#include <CLI11.hpp>
#include <httplib.h>

using namespace banditd;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }

struct Globals {
  std::string config;
  std::string out;
  std::string data;
  std::string world;
  std::uint64_t seed = 0;
};

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

fs::path need(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError(flag + " is required");
  return value;
}

fs::path input(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorCode::IoError, "missing input " + path.string());
  return path;
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") std::cout << text << std::flush;
  else atomic_write_file(out, text);
}

std::vector<InstanceConfig> load_config(const Globals& g) {
  return load_instances(input(need(g.config, "--config")));
}

const InstanceConfig& pick_instance(const std::vector<InstanceConfig>& all, const std::string& id) {
  if (id.empty()) {
    if (all.size() != 1) throw UsageError("config has several instances; choose one with --instance");
    return all.front();
  }
  for (const auto& c : all)
    if (c.instance_id == id) return c;
  fail(ErrorCode::ConfigError, "no instance " + id + " in the config");
}

WorldSpec load_world(const std::string& path) { return WorldSpec::from_json(read_json_file(input(need(path, "--world")))); }

std::vector<DecisionRecord> read_decisions(const fs::path& path) {
  std::vector<DecisionRecord> out;
  for_each_jsonl(input(path), [&](const json& j) { out.push_back(DecisionRecord::from_json(j)); });
  return out;
}

// Arms per instance from the config: a static list, a JSON file or an HTTP endpoint.
class ConfigArmSource : public ArmSource {
 public:
  ConfigArmSource(const std::vector<InstanceConfig>& configs, fs::path base) : base_(std::move(base)) {
    for (const auto& c : configs) configs_.emplace(c.instance_id, c);
  }

  std::vector<ArmId> fetch(const std::string& instance_id) override {
    const auto& c = configs_.at(instance_id);
    if (c.arm_source.is_null()) return c.arms;
    const auto kind = c.arm_source.value("kind", std::string{});
    if (kind == "file") {
      fs::path p = c.arm_source.at("path").get<std::string>();
      if (p.is_relative()) p = base_ / p;
      return FileArmSource(p).fetch(instance_id);
    }
    if (kind == "http") {
      const auto url = c.arm_source.at("url").get<std::string>();
      const auto scheme_end = url.find("://");
      const auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
      httplib::Client client(url.substr(0, path_start));
      client.set_connection_timeout(2);
      client.set_read_timeout(5);
      auto res = client.Get(path_start == std::string::npos ? "/" : url.substr(path_start));
      if (!res || res->status != 200) fail(ErrorCode::SourceUnavailable, "arm source " + url + " unreachable");
      try {
        const auto j = json::parse(res->body);
        return parse_arm_list(j.is_object() && j.contains(instance_id) ? j.at(instance_id) : j);
      } catch (const json::exception& e) {
        fail(ErrorCode::SourceUnavailable, std::string("arm source: ") + e.what());
      }
    }
    fail(ErrorCode::ConfigError, instance_id + ": unknown arm_source kind " + kind);
  }

 private:
  fs::path base_;
  std::map<std::string, InstanceConfig> configs_;
};

PipelineOptions pipeline_options(const std::vector<InstanceConfig>& configs, const fs::path& root) {
  PipelineOptions o;
  o.reward_ttl_ms = 0;
  for (const auto& c : configs) o.reward_ttl_ms = std::max(o.reward_ttl_ms, c.reward_ttl_ms);
  o.journal = root / "pipeline.journal.jsonl";
  return o;
}

// Serving, pipeline and trainer state of a deployment rooted at one directory.
class Deployment {
 public:
  Deployment(std::vector<InstanceConfig> configs, const fs::path& root, const fs::path& config_dir, std::uint64_t seed)
      : configs_(std::move(configs)),
        windows_(root / "aggregations"),
        holder_(root / "models", false),
        pipeline_(windows_, pipeline_options(configs_, root)),
        arms_(configs_, config_dir) {
    for (const auto& c : configs_) {
      registry_.push_back(c.spec());
      for (const auto& ks : c.keyspace_list()) pipeline_.register_keyspace(ks);
    }
    TrainerOptions topts;
    topts.clock = [this] { return now_.load(); };
    trainer_ = std::make_unique<Trainer>(registry_, windows_, holder_, topts);

    decision_log_.open(root / "decisions.jsonl");
    reward_log_.open(root / "rewards.jsonl");
    const auto s = pipeline_.stats();
    for (const auto& c : configs_) {
      ServingOptions sopts;
      sopts.fallback_on_empty = c.fallback_on_empty_eligible;
      sopts.decision_prefix = "s" + std::to_string(seed) + "n" + std::to_string(s.unique_decisions + s.duplicate_decisions);
      servers_.emplace(c.instance_id, std::make_unique<Server>(
                                          c.schema, holder_, c.catalog, sopts,
                                          [this](const DecisionRecord& r) { log_decision(r); }, RewardSink{}));
    }
  }

  const std::vector<InstanceConfig>& configs() const { return configs_; }

  std::vector<json> close_windows(TimestampMs now) {
    pipeline_.expire_orphans(now);
    std::vector<json> out;
    for (const auto& c : configs_)
      for (const auto& ks : c.keyspace_list()) {
        const auto id = *pipeline_.open_window(ks);
        const auto tuples = pipeline_.close_window(ks, id);
        out.push_back({{"keyspace", ks.str()}, {"window_id", id}, {"tuples", tuples.size()}});
      }
    return out;
  }

  std::vector<json> train(TimestampMs now) {
    now_ = now;
    TaskQueue queue;
    const auto cycle = enqueue_cycle(registry_, arms_, queue, now);
    for (const auto& id : cycle.skipped_instances) std::cerr << "banditd: arm source unavailable for " << id << "\n";
    std::vector<json> out;
    for (const auto& e : trainer_->drain(queue))
      out.push_back({{"keyspace", e.keyspace.str()},
                     {"model_version", e.model_version},
                     {"consumed_windows", e.consumed_windows},
                     {"dropped_tuples", e.dropped_tuples},
                     {"model_hash", hex64(fnv1a64(e.model_bytes))}});
    return out;
  }

  /// Publishes an initial model for keyspaces that have none yet.
  void bootstrap(TimestampMs now) {
    for (const auto& c : configs_)
      for (const auto& ks : c.keyspace_list())
        if (!holder_.try_get(ks)) {
          train(now);
          return;
        }
  }

  json serve(const std::string& instance, const json& body, TimestampMs now) {
    auto it = servers_.find(instance);
    if (it == servers_.end()) fail(ErrorCode::ConfigError, "unknown instance " + instance);
    const auto& cfg = config(instance);
    ServeRequest req;
    try {
      req.attributes = body.value("attributes", json::object());
      req.keyspace = {instance, body.at("test_id").get<std::string>(), body.at("variant_id").get<std::string>()};
      if (body.contains("decision_id")) req.decision_id = body.at("decision_id").get<std::string>();
      req.timestamp = body.contains("timestamp") ? body.at("timestamp").get<TimestampMs>() : now;
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidValue, std::string("serve request: ") + e.what());
    }
    bool known = false;
    for (const auto& ks : cfg.keyspace_list()) known = known || ks == req.keyspace;
    if (!known) fail(ErrorCode::InvalidValue, "keyspace " + req.keyspace.str() + " is not configured");

    const auto session = body.value("session_id", std::string{});
    std::lock_guard lock(feed_mu_);
    auto& feed = feeds_[req.keyspace.str() + "\n" + session];
    if (session.empty() || (cfg.session_length > 0 && feed.position() >= cfg.session_length)) feed = FeedState{};
    return it->second->serve(req, cfg.rules, feed).to_json();
  }

  json reward(const json& body, TimestampMs now) {
    RewardRecord r;
    try {
      r.decision_id = body.at("decision_id").get<std::string>();
      r.reward = body.at("reward").get<double>();
      r.timestamp = body.contains("timestamp") ? body.at("timestamp").get<TimestampMs>() : now;
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidValue, std::string("reward: ") + e.what());
    }
    const auto ack = pipeline_.ingest_reward(r);
    {
      std::lock_guard lock(log_mu_);
      reward_log_.append(r.to_json());
    }
    return {{"decision_id", r.decision_id},
            {"status", ack == Ack::Accepted ? "accepted" : ack == Ack::Pending ? "pending" : "duplicate"}};
  }

 private:
  const InstanceConfig& config(const std::string& id) const {
    for (const auto& c : configs_)
      if (c.instance_id == id) return c;
    fail(ErrorCode::ConfigError, "unknown instance " + id);
  }

  void log_decision(const DecisionRecord& r) {
    if (pipeline_.ingest_decision(r) == Ack::Duplicate) fail(ErrorCode::DuplicateDecision, r.decision_id);
    std::lock_guard lock(log_mu_);
    decision_log_.append(r.to_json());
  }

  std::vector<InstanceConfig> configs_;
  std::vector<InstanceSpec> registry_;
  WindowStore windows_;
  ModelHolder holder_;
  AggregationPipeline pipeline_;
  ConfigArmSource arms_;
  std::atomic<TimestampMs> now_{0};
  std::unique_ptr<Trainer> trainer_;
  std::map<std::string, std::unique_ptr<Server>> servers_;
  std::mutex feed_mu_;
  std::map<std::string, FeedState> feeds_;
  std::mutex log_mu_;
  JsonlAppender decision_log_, reward_log_;
};

json error_json(const std::exception& e) {
  if (const auto* be = dynamic_cast<const Error*>(&e)) return {{"error", to_string(be->code())}, {"message", be->what()}};
  return {{"error", "InvalidValue"}, {"message", e.what()}};
}

int http_status(const std::exception& e) {
  const auto* be = dynamic_cast<const Error*>(&e);
  if (!be) return 400;
  switch (be->code()) {
    case ErrorCode::ConfigError: return 404;
    case ErrorCode::ModelNotFound: return 503;
    case ErrorCode::NoEligibleArm:
    case ErrorCode::DuplicateDecision: return 409;
    default: return 400;
  }
}

void handle(httplib::Response& res, const std::function<json()>& fn) {
  try {
    res.set_content(fn().dump(), "application/json");
  } catch (const std::exception& e) {
    res.status = http_status(e);
    res.set_content(error_json(e).dump(), "application/json");
  }
}

struct ServiceArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  double duration_s = 0;
  bool train = false;
};

int run_service(Deployment& dep, const ServiceArgs& a) {
  dep.bootstrap(wall_clock_ms());
  httplib::Server svr;
  svr.Post("/v1/:instance/serve", [&](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] { return dep.serve(req.path_params.at("instance"), parse_json(req.body, "request"), wall_clock_ms()); });
  });
  svr.Post("/v1/:instance/reward", [&](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] { return dep.reward(parse_json(req.body, "request"), wall_clock_ms()); });
  });
  const int port = a.port == 0 ? svr.bind_to_any_port(a.host) : (svr.bind_to_port(a.host, a.port) ? a.port : -1);
  if (port < 0) fail(ErrorCode::IoError, "cannot bind " + a.host + ":" + std::to_string(a.port));
  std::cerr << "banditd: listening on " << a.host << ":" << port << std::endl;
  std::thread http([&] { svr.listen_after_bind(); });

  TimestampMs period = std::numeric_limits<TimestampMs>::max();
  for (const auto& c : dep.configs()) period = std::min(period, c.cycle_period_ms);
  const auto start = std::chrono::steady_clock::now();
  TimestampMs next_cycle = wall_clock_ms() + period;
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (a.duration_s > 0 && elapsed >= a.duration_s) break;
    const auto now = wall_clock_ms();
    if (a.train && now >= next_cycle) {
      try {
        dep.close_windows(now);
        for (const auto& e : dep.train(now)) std::cerr << "banditd: published " << e.dump() << "\n";
      } catch (const std::exception& e) {
        std::cerr << "banditd: training cycle failed: " << e.what() << "\n";
      }
      next_cycle = now + period;
    }
  }
  svr.stop();
  http.join();
  return 0;
}

int serve_batch(Deployment& dep, const std::string& instance, const fs::path& requests, const std::string& out,
                TimestampMs now) {
  std::string text;
  std::uint64_t failures = 0, line = 0;
  for_each_jsonl(input(requests), [&](const json& j) {
    ++line;
    json reply;
    try {
      if (j.contains("reward")) {
        reply = dep.reward(j, now);
      } else {
        const auto id = j.value("instance_id", instance);
        reply = dep.serve(id.empty() ? dep.configs().front().instance_id : id, j, now);
      }
    } catch (const Error& e) {
      ++failures;
      reply = error_json(e);
      reply["line"] = line;
    }
    text += reply.dump() + "\n";
  });
  emit(out, text);
  if (failures > 0) {
    std::cerr << "banditd: " << failures << " of " << line << " requests failed\n";
    return 2;
  }
  return 0;
}

SimulationResult simulate(InstanceConfig cfg, const WorldSpec& world, std::uint64_t rounds, SimPolicy policy,
                          const Globals& g) {
  SimulationOptions o;
  o.seed = g.seed;
  o.rounds = rounds;
  o.policy = policy;
  o.out_dir = need(g.out, "--out");
  auto res = Simulation(std::move(cfg), world, o).run();
  std::cout << res.manifest.dump(2) << "\n";
  return res;
}

InstanceConfig instance_from_world(const WorldSpec& w) {
  InstanceConfig c;
  c.instance_id = "sim";
  c.schema = w.schema;
  c.model = ModelConfig{1.0, 1.0, w.schema.dimension()};
  c.arms = w.arm_ids();
  for (const auto& [id, type] : w.arm_types()) c.catalog.set(id, type);
  c.keyspaces = {{"default", "control", 1.0}};
  return c;
}

/// Uniformly random logged pulls over every world arm, for offline replay.
ReplayLog uniform_log(const WorldSpec& w, std::uint64_t rounds, std::uint64_t seed) {
  ReplayLog log;
  log.arm_set = w.arm_ids();
  log.k = log.arm_set.size();
  for (std::uint64_t i = 0; i < rounds; ++i) {
    const auto req = request_at(w, i, seed);
    const auto x = encode(req.attributes, w.schema);
    auto pick = request_rng(seed, i, Stream::Policy);
    const auto& arm = log.arm_set[pick.index(log.k)];
    auto rr = request_rng(seed, i, Stream::Reward);
    log.events.push_back({req.timestamp, x, arm, realize_reward(w, x, arm, rr, i).reward});
  }
  return log;
}

struct HealthArgs {
  std::string decisions;
  std::string models;
  std::string instance;
  std::string test;
  std::string variant;
  std::optional<TimestampMs> from;
  std::optional<TimestampMs> to;
  TimestampMs epsilon_ms = 10 * 60 * 1000;
  TimestampMs delta_ms = 60 * 60 * 1000;
  std::uint64_t min_support = 50;
  TimestampMs grid_step_ms = 0;
  TimestampMs bucket_ms = 10 * 60 * 1000;
  bool no_smoothing = false;
};

void add_health_options(CLI::App* sub, HealthArgs& a) {
  sub->add_option("--decisions", a.decisions, "Decision log (default: <data>/decisions.jsonl)");
  sub->add_option("--models", a.models, "Model holder root (default: <data>/models)");
  sub->add_option("--instance", a.instance, "Keep only this instance");
  sub->add_option("--test", a.test, "Keep only this test id");
  sub->add_option("--variant", a.variant, "Keep only this variant id");
  sub->add_option("--from", a.from, "Keep decisions with timestamp >= FROM (ms)");
  sub->add_option("--to", a.to, "Keep decisions with timestamp < TO (ms)");
  sub->add_option("--epsilon-ms", a.epsilon_ms, "Window length")->capture_default_str();
  sub->add_option("--delta-ms", a.delta_ms, "Offset between compared windows")->capture_default_str();
  sub->add_option("--min-support", a.min_support, "Minimum decisions per context")->capture_default_str();
  sub->add_option("--grid-step-ms", a.grid_step_ms, "Stability grid step (0: epsilon)")->capture_default_str();
  sub->add_option("--bucket-ms", a.bucket_ms, "Exploitation bucket width")->capture_default_str();
  sub->add_flag("--no-smoothing", a.no_smoothing, "Disable add-one smoothing");
}

std::vector<DecisionRecord> filtered_decisions(const HealthArgs& a, const Globals& g) {
  const fs::path path = a.decisions.empty() ? need(g.data, "--decisions or --data") / "decisions.jsonl" : fs::path(a.decisions);
  auto logs = read_decisions(path);
  std::erase_if(logs, [&](const DecisionRecord& d) {
    return (!a.instance.empty() && d.keyspace.instance_id != a.instance) ||
           (!a.test.empty() && d.keyspace.test_id != a.test) ||
           (!a.variant.empty() && d.keyspace.variant_id != a.variant) || (a.from && d.timestamp < *a.from) ||
           (a.to && d.timestamp >= *a.to);
  });
  if (logs.empty()) fail(ErrorCode::EmptyReport, "no decisions left after filtering " + path.string());
  return logs;
}

HealthParams health_params(const HealthArgs& a) {
  HealthParams p;
  p.epsilon_ms = a.epsilon_ms;
  p.delta_ms = a.delta_ms;
  p.min_support = a.min_support;
  p.smoothing = !a.no_smoothing;
  p.grid_step_ms = a.grid_step_ms;
  try {
    p.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return p;
}

FeatureSchema schema_for(const HealthArgs& a, const Globals& g) {
  if (!g.config.empty()) return pick_instance(load_config(g), a.instance).schema;
  if (!g.world.empty()) return load_world(g.world).schema;
  throw UsageError("continuity needs --config or --world for the feature schema");
}

std::string health_csv(const std::string& kind, const HealthArgs& a, const Globals& g) {
  const auto logs = filtered_decisions(a, g);
  std::string csv;
  if (kind == "continuity") {
    csv = "distance,mean_kl,pair_count\n";
    for (const auto& r : continuity_report(logs, schema_for(a, g), health_params(a)))
      csv += std::to_string(r.hamming_distance) + "," + num(r.mean_kl) + "," + std::to_string(r.pair_count) + "\n";
  } else if (kind == "stability") {
    csv = "t,mean_kl\n";
    for (const auto& p : stability_report(logs, health_params(a))) csv += std::to_string(p.t_ms) + "," + num(p.mean_kl) + "\n";
  } else {
    std::set<Keyspace> spaces;
    for (const auto& d : logs) spaces.insert(d.keyspace);
    if (spaces.size() != 1)
      throw UsageError("exploitation needs a single keyspace; select one with --instance/--test/--variant");
    const fs::path root = a.models.empty() ? need(g.data, "--models or --data") / "models" : fs::path(a.models);
    const auto snaps = ModelHolder(input(root)).snapshots(*spaces.begin());
    if (snaps.empty()) fail(ErrorCode::ModelNotFound, "no snapshots for " + spaces.begin()->str() + " under " + root.string());
    const auto rep = exploitation_ratio(logs, snaps, a.bucket_ms);
    if (rep.excluded > 0) std::cerr << "banditd: " << rep.excluded << " decisions had no resolvable snapshot\n";
    csv = "t,ratio\n";
    for (const auto& p : rep.series) csv += std::to_string(p.t_ms) + "," + num(p.ratio) + "\n";
  }
  return csv;
}

struct ReplayArgs {
  std::string log;
  std::string mode = "classic";
  std::string t1 = "0";
  std::string t2 = "0";
  bool no_repetitions = false;
  std::string policy = "linucb";
  double lambda = 1.0;
  double alpha = 1.0;
  std::vector<double> grid;
};

void add_replay_options(CLI::App* sub, ReplayArgs& a) {
  sub->add_option("--log", a.log, "Uniform replay log (default: <data>/replay.jsonl)");
  sub->add_option("--mode", a.mode, "classic or windowed")->check(CLI::IsMember({"classic", "windowed"}))->capture_default_str();
  sub->add_option("--t1", a.t1, "Window reach into the past in ms, or inf")->capture_default_str();
  sub->add_option("--t2", a.t2, "Window reach into the future in ms, or inf")->capture_default_str();
  sub->add_flag("--no-repetitions", a.no_repetitions, "Sample each logged event at most once");
  sub->add_option("--alpha", a.alpha, "LinUCB exploration width")->capture_default_str();
}

double parse_reach(const std::string& s, const std::string& flag) {
  if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) throw UsageError(flag + ": not a number: " + s);
  return v;
}

ReplayParams replay_params(const ReplayArgs& a, const Globals& g) {
  ReplayParams p;
  p.mode = a.mode == "windowed" ? ReplayMode::Windowed : ReplayMode::Classic;
  p.t1_ms = parse_reach(a.t1, "--t1");
  p.t2_ms = parse_reach(a.t2, "--t2");
  p.with_repetitions = !a.no_repetitions;
  p.seed = g.seed;
  try {
    p.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return p;
}

ReplayLog load_replay_log(const ReplayArgs& a, const Globals& g) {
  const fs::path path = a.log.empty() ? need(g.data, "--log or --data") / "replay.jsonl" : fs::path(a.log);
  return ReplayLog::read(input(path));
}

json replay_json(const ReplayArgs& a, const Globals& g) {
  const auto params = replay_params(a, g);
  const auto log = load_replay_log(a, g);
  std::unique_ptr<ReplayPolicy> policy;
  if (a.policy == "linucb") {
    if (log.events.empty()) fail(ErrorCode::EmptyReport, "replay log has no events");
    ModelConfig cfg{a.lambda, a.alpha, log.events.front().context.dimension()};
    try {
      cfg.validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    policy = std::make_unique<LinUcbPolicy>(cfg, log.arm_set);
  } else if (a.policy.rfind("fixed:", 0) == 0) {
    policy = std::make_unique<FixedArmPolicy>(a.policy.substr(6));
  } else {
    throw UsageError("--policy must be linucb or fixed:<arm>");
  }
  auto j = replay(log, *policy, params).to_json();
  j["policy"] = a.policy;
  if (a.policy == "linucb") {
    j["lambda"] = a.lambda;
    j["alpha"] = a.alpha;
  }
  return j;
}

struct RegretArgs {
  std::string decisions;
  std::string rewards;
  TimestampMs bucket_ms = 60 * 1000;
};

std::string regret_csv(const RegretArgs& a, const Globals& g) {
  const auto world = load_world(g.world);
  const fs::path dpath = a.decisions.empty() ? need(g.data, "--decisions or --data") / "decisions.jsonl" : fs::path(a.decisions);
  const fs::path rpath = a.rewards.empty() ? need(g.data, "--rewards or --data") / "rewards.jsonl" : fs::path(a.rewards);
  if (a.bucket_ms <= 0) throw UsageError("--bucket-ms must be > 0");
  auto logs = read_decisions(dpath);
  std::map<std::string, double> reward_of;
  for_each_jsonl(input(rpath), [&](const json& j) {
    const auto r = RewardRecord::from_json(j);
    reward_of[r.decision_id] += r.reward;
  });
  std::stable_sort(logs.begin(), logs.end(),
                   [](const DecisionRecord& x, const DecisionRecord& y) { return x.timestamp < y.timestamp; });
  const auto world_arms = world.arm_ids();
  std::string csv = "t,decisions,cumulative_reward,cumulative_expected,cumulative_oracle,cumulative_regret\n";
  std::uint64_t n = 0;
  double reward = 0, expected = 0, oracle = 0;
  std::optional<TimestampMs> bucket;
  auto flush = [&] {
    csv += std::to_string(*bucket) + "," + std::to_string(n) + "," + num(reward) + "," + num(expected) + "," +
           num(oracle) + "," + num(oracle - expected) + "\n";
  };
  for (const auto& d : logs) {
    const TimestampMs t = (d.timestamp - world.start_ms) / a.bucket_ms * a.bucket_ms;
    if (bucket && t != *bucket) flush();
    bucket = t;
    const auto round = static_cast<std::uint64_t>(std::max<TimestampMs>(0, (d.timestamp - world.start_ms) / world.interval_ms));
    ++n;
    if (auto it = reward_of.find(d.decision_id); it != reward_of.end()) reward += it->second;
    expected += true_mean(world, d.context, d.arm_id, round);
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& arm : d.eligible.empty() ? world_arms : d.eligible) best = std::max(best, true_mean(world, d.context, arm, round));
    oracle += best;
  }
  if (bucket) flush();
  return csv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"banditd: contextual bandit recommendation service"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(
      "Environment overrides: BANDITD_CONFIG, BANDITD_SEED, BANDITD_OUT, BANDITD_DATA, BANDITD_WORLD.\n"
      "Exit codes: 0 success, 1 usage error, 2 data error.");

  Globals g;
  app.add_option("--config", g.config, "Instance config JSON (one instance or {\"instances\": [...]})")->envname("BANDITD_CONFIG");
  app.add_option("--seed", g.seed, "Random seed")->envname("BANDITD_SEED")->capture_default_str();
  app.add_option("--out", g.out, "Output file or directory (per subcommand)")->envname("BANDITD_OUT");
  app.add_option("--data", g.data, "Deployment directory holding logs, windows and models")->envname("BANDITD_DATA");
  app.add_option("--world", g.world, "Synthetic world spec JSON")->envname("BANDITD_WORLD");

  std::function<int()> action;
  std::string instance;
  TimestampMs now = 0;
  auto clock = [&] { return now > 0 ? now : wall_clock_ms(); };

  // run
  auto* run = app.add_subcommand("run", "All-in-one: simulate a world end to end, or host serving and training");
  ServiceArgs svc;
  std::uint64_t rounds = 1000;
  double duration_s = 0;
  run->add_option("--instance", instance, "Instance to simulate");
  run->add_option("--duration", duration_s, "Seconds (simulated with --world, wall clock otherwise; 0: until signalled)");
  run->add_option("--rounds", rounds, "Simulated requests when --duration is not given")->capture_default_str();
  run->add_option("--host", svc.host, "Listen address")->capture_default_str();
  run->add_option("--port", svc.port, "Listen port (0: any)")->capture_default_str();
  run->footer(
      "With --world: writes <out>/manifest.json, decisions.jsonl, rewards.jsonl, pipeline.journal.jsonl,\n"
      "aggregations/ and models/. Without: serves HTTP on POST /v1/{instance}/serve and /reward, closing\n"
      "windows and training every cycle period, with state under <out>.");
  run->callback([&] {
    action = [&] {
      const auto configs = load_config(g);
      if (!g.world.empty()) {
        const auto world = load_world(g.world);
        if (duration_s > 0) rounds = static_cast<std::uint64_t>(duration_s * 1000.0 / static_cast<double>(world.interval_ms));
        simulate(pick_instance(configs, instance), world, rounds, SimPolicy::LinUcb, g);
        return 0;
      }
      Deployment dep(configs, need(g.out, "--out"), fs::path(g.config).parent_path(), g.seed);
      svc.duration_s = duration_s;
      svc.train = true;
      return run_service(dep, svc);
    };
  });

  // serve
  auto* serve = app.add_subcommand("serve", "Serve requests from a JSONL batch file or over HTTP");
  std::string requests;
  bool http = false;
  serve->add_option("--requests", requests, "JSONL requests; lines with a \"reward\" field are rewards");
  serve->add_option("--instance", instance, "Default instance for requests without instance_id");
  serve->add_option("--now", now, "Clock in ms for records without a timestamp (default: wall clock)");
  serve->add_flag("--http", http, "Listen for HTTP instead of reading --requests");
  serve->add_option("--host", svc.host, "Listen address")->capture_default_str();
  serve->add_option("--port", svc.port, "Listen port (0: any)")->capture_default_str();
  serve->add_option("--duration", svc.duration_s, "Stop after this many seconds (0: until signalled)");
  serve->add_flag("--train", svc.train, "Also close windows and train every cycle period");
  serve->footer(
      "Request line: {instance_id?, session_id?, attributes, test_id, variant_id, decision_id?, timestamp?}\n"
      "Reward line: {decision_id, reward, timestamp?}\n"
      "Output: one JSON reply per line to --out (default stdout); decisions and rewards are appended to\n"
      "<data>/decisions.jsonl and <data>/rewards.jsonl and journaled for the aggregation pipeline.");
  serve->callback([&] {
    action = [&] {
      Deployment dep(load_config(g), need(g.data, "--data"), fs::path(g.config).parent_path(), g.seed);
      if (http) return run_service(dep, svc);
      dep.bootstrap(clock());
      return serve_batch(dep, instance, need(requests, "--requests"), g.out, clock());
    };
  });

  // close-window
  auto* close = app.add_subcommand("close-window", "Close the open aggregation window of every keyspace");
  close->add_option("--now", now, "Clock in ms for orphan-reward expiry (default: wall clock)");
  close->footer("Writes <data>/aggregations/<instance>/<test>/<variant>/<id>.agg.jsonl; prints one JSON line per window.");
  close->callback([&] {
    action = [&] {
      Deployment dep(load_config(g), need(g.data, "--data"), fs::path(g.config).parent_path(), g.seed);
      std::string text;
      for (const auto& j : dep.close_windows(clock())) text += j.dump() + "\n";
      emit(g.out, text);
      return 0;
    };
  });

  // train
  auto* train = app.add_subcommand("train", "Run one training cycle over all closed windows");
  train->add_option("--now", now, "Publish time in ms (default: wall clock)");
  train->footer("Publishes <data>/models/<instance>/<test>/<variant>/model.v<N>; prints one JSON line per snapshot.");
  train->callback([&] {
    action = [&] {
      Deployment dep(load_config(g), need(g.data, "--data"), fs::path(g.config).parent_path(), g.seed);
      std::string text;
      for (const auto& j : dep.train(clock())) text += j.dump() + "\n";
      emit(g.out, text);
      return 0;
    };
  });

  // health
  auto* health = app.add_subcommand("health", "Serving-distribution health reports as CSV");
  health->require_subcommand(1);
  HealthArgs ha;
  for (const auto& [kind, help, header] :
       {std::tuple{"continuity", "Mean KL by context Hamming distance", "distance,mean_kl,pair_count"},
        std::tuple{"stability", "Mean KL between windows delta apart", "t,mean_kl"},
        std::tuple{"exploitation", "Share of decisions matching the greedy arm", "t,ratio"}}) {
    auto* sub = health->add_subcommand(kind, help);
    add_health_options(sub, ha);
    sub->footer(std::string("CSV columns: ") + header + " (t in ms since the first kept decision). Written to --out or stdout.");
    sub->callback([&, k = std::string(kind)] { action = [&, k] { emit(g.out, health_csv(k, ha, g)); return 0; }; });
  }

  // replay
  auto* rep = app.add_subcommand("replay", "Offline replay evaluation on a uniform log");
  ReplayArgs ra;
  add_replay_options(rep, ra);
  rep->add_option("--policy", ra.policy, "linucb or fixed:<arm>")->capture_default_str();
  rep->add_option("--lambda", ra.lambda, "LinUCB ridge parameter")->capture_default_str();
  rep->footer("JSON report {mode, matched, total, reward_sum, mean_reward, seed, ...}; mean_reward is null with status NoMatches.");
  rep->callback([&] { action = [&] { emit(g.out, replay_json(ra, g).dump(2) + "\n"); return 0; }; });

  // tune-lambda
  auto* tune = app.add_subcommand("tune-lambda", "Pick the ridge parameter with the best replayed reward");
  add_replay_options(tune, ra);
  tune->add_option("--grid", ra.grid, "Candidate values")->delimiter(',')->required();
  tune->footer("JSON {best_lambda, per_lambda: [...]}; ties go to the smaller value.");
  tune->callback([&] {
    action = [&] {
      const auto params = replay_params(ra, g);
      emit(g.out, tune_lambda(load_replay_log(ra, g), ra.grid, params, ra.alpha).to_json().dump(2) + "\n");
      return 0;
    };
  });

  // simulate
  auto* sim = app.add_subcommand("simulate", "Run a synthetic world through serving, pipeline and training");
  std::string policy = "linucb";
  double sim_alpha = -1, sim_lambda = -1;
  sim->add_option("--rounds", rounds, "Requests to simulate")->capture_default_str();
  sim->add_option("--policy", policy, "Serving policy")->check(CLI::IsMember({"linucb", "uniform"}))->capture_default_str();
  sim->add_option("--instance", instance, "Instance from --config (default: derived from the world)");
  sim->add_option("--alpha", sim_alpha, "Override the exploration width");
  sim->add_option("--lambda", sim_lambda, "Override the ridge parameter");
  sim->footer(
      "Writes <out>/manifest.json, decisions.jsonl, rewards.jsonl, replay.jsonl (uniform log over all world arms),\n"
      "pipeline.journal.jsonl, aggregations/ and models/. Prints the manifest.");
  sim->callback([&] {
    action = [&] {
      const auto world = load_world(g.world);
      auto cfg = g.config.empty() ? instance_from_world(world) : pick_instance(load_config(g), instance);
      if (sim_alpha >= 0) cfg.model.alpha = sim_alpha;
      if (sim_lambda >= 0) cfg.model.lambda = sim_lambda;
      const auto pol = policy == "uniform" ? SimPolicy::Uniform : SimPolicy::LinUcb;
      simulate(cfg, world, rounds, pol, g);
      if (pol == SimPolicy::LinUcb) atomic_write_file(fs::path(g.out) / "replay.jsonl", uniform_log(world, rounds, g.seed).to_jsonl());
      return 0;
    };
  });

  // report
  auto* report = app.add_subcommand("report", "Write a plot-ready report file into --out");
  std::string kind;
  RegretArgs rg;
  report->add_option("kind", kind, "continuity, stability, exploitation, replay or regret")
      ->required()
      ->check(CLI::IsMember({"continuity", "stability", "exploitation", "replay", "regret"}));
  add_health_options(report, ha);
  add_replay_options(report, ra);
  report->add_option("--policy", ra.policy, "Replay policy: linucb or fixed:<arm>")->capture_default_str();
  report->add_option("--lambda", ra.lambda, "LinUCB ridge parameter")->capture_default_str();
  report->add_option("--rewards", rg.rewards, "Reward log for regret (default: <data>/rewards.jsonl)");
  report->add_option("--regret-bucket-ms", rg.bucket_ms, "Regret row width")->capture_default_str();
  report->footer(
      "Writes <out>/<kind>.csv (replay: <out>/replay.json) atomically.\n"
      "regret.csv: t,decisions,cumulative_reward,cumulative_expected,cumulative_oracle,cumulative_regret\n"
      "  (needs --world; expected and oracle are ground-truth means of the served and best eligible arm).");
  report->callback([&] {
    action = [&] {
      const auto dir = need(g.out, "--out");
      fs::path path;
      if (kind == "replay") {
        path = dir / "replay.json";
        atomic_write_file(path, replay_json(ra, g).dump(2) + "\n");
      } else if (kind == "regret") {
        rg.decisions = ha.decisions;
        path = dir / "regret.csv";
        atomic_write_file(path, regret_csv(rg, g));
      } else {
        path = dir / (kind + ".csv");
        atomic_write_file(path, health_csv(kind, ha, g));
      }
      std::cout << path.string() << "\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  try {
    return action();
  } catch (const UsageError& e) {
    std::cerr << "banditd: " << e.what() << "\nRun with --help for usage.\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "banditd: " << e.what() << "\n";
    return 2;
  }
}
