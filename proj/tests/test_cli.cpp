#include <gtest/gtest.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

#include "banditd/health.hpp"
#include "banditd/simulation.hpp"
#include "test_util.hpp"

// After Eigen: <resolv.h> defines a `_res` macro.
#include <httplib.h>

using namespace banditd;

namespace {

const std::string kCli = BANDITD_CLI_PATH;
const fs::path kSamples = BANDITD_SAMPLES_DIR;

struct Outcome {
  int rc = -1;
  std::string out;
  std::string err;
};

Outcome cli(const std::string& args, const std::string& env = "") {
  test_util::TempDir tmp;
  const auto err_path = tmp.path() / "stderr";
  const auto cmd = env + " " + kCli + " " + args + " 2>" + err_path.string();
  Outcome o;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  char buf[4096];
  for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) o.out.append(buf, n);
  const int status = ::pclose(pipe);
  o.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.err = fs::exists(err_path) ? read_file(err_path) : "";
  return o;
}

std::string world_arg() { return "--world " + (kSamples / "world.json").string(); }
std::string config_arg() { return "--config " + (kSamples / "instance.json").string(); }

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::string line;
  std::istringstream in(text);
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

// One simulated deployment shared by the report tests.
class Simulated : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test_util::TempDir;
    const auto o = cli("simulate " + world_arg() + " " + config_arg() + " --rounds 6000 --seed 7 --out " + data().string());
    ASSERT_EQ(o.rc, 0) << o.err;
  }
  static void TearDownTestSuite() { delete dir_; }
  static fs::path data() { return dir_->path() / "sim"; }
  static std::string data_arg() { return "--data " + data().string(); }

  static test_util::TempDir* dir_;
};

test_util::TempDir* Simulated::dir_ = nullptr;

int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  socklen_t len = sizeof addr;
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), len);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  return ntohs(addr.sin_port);
}

}  // namespace

TEST(Cli, ExitCodes) {
  EXPECT_EQ(cli("--help").rc, 0);
  EXPECT_EQ(cli("").rc, 1);
  EXPECT_EQ(cli("replay --no-such-flag").rc, 1);
  EXPECT_EQ(cli("replay --mode sideways").rc, 1);
  EXPECT_EQ(cli("simulate --rounds 5").rc, 1);  // no --world
  EXPECT_EQ(cli("replay --log /nonexistent/log.jsonl --mode windowed").rc, 1);

  const auto missing = cli("replay --log /nonexistent/log.jsonl");
  EXPECT_EQ(missing.rc, 2);
  EXPECT_NE(missing.err.find("/nonexistent/log.jsonl"), std::string::npos);

  test_util::TempDir dir;
  const auto bad = dir.path() / "bad.json";
  atomic_write_file(bad, R"({"instance_id": "x", "keyspaces": []})");
  EXPECT_EQ(cli("train --data " + dir.path().string() + " --config " + bad.string()).rc, 2);
}

TEST(Cli, HelpDocumentsOutputs) {
  const auto o = cli("report --help");
  EXPECT_EQ(o.rc, 0);
  EXPECT_NE(o.out.find("cumulative_regret"), std::string::npos);
  EXPECT_NE(cli("--help").out.find("BANDITD_SEED"), std::string::npos);
  EXPECT_NE(cli("health continuity --help").out.find("distance,mean_kl,pair_count"), std::string::npos);
}

TEST(Cli, SimulateIsReproducible) {
  test_util::TempDir dir;
  const auto a = dir.path() / "a", b = dir.path() / "b", c = dir.path() / "c";
  const auto base = "simulate " + world_arg() + " --rounds 3000 ";
  ASSERT_EQ(cli(base + "--seed 5 --out " + a.string()).rc, 0);
  ASSERT_EQ(cli(base + "--out " + b.string(), "BANDITD_SEED=5").rc, 0);
  ASSERT_EQ(cli(base + "--seed 6 --out " + c.string()).rc, 0);
  for (const auto* name : {"manifest.json", "decisions.jsonl", "rewards.jsonl", "replay.jsonl"}) {
    EXPECT_EQ(read_file(a / name), read_file(b / name)) << name;
    EXPECT_NE(read_file(a / name), read_file(c / name)) << name;
  }
}

TEST(Cli, RunWithWorldMatchesSimulate) {
  test_util::TempDir dir;
  const auto a = dir.path() / "run", b = dir.path() / "sim";
  // 60 simulated seconds at one request per second.
  ASSERT_EQ(cli("run " + config_arg() + " " + world_arg() + " --duration 60 --seed 2 --out " + a.string()).rc, 0);
  ASSERT_EQ(cli("simulate " + config_arg() + " " + world_arg() + " --rounds 60 --seed 2 --out " + b.string()).rc, 0);
  EXPECT_EQ(read_file(a / "manifest.json"), read_file(b / "manifest.json"));
  EXPECT_EQ(read_json_file(a / "manifest.json")["decisions"], 60);
}

TEST_F(Simulated, LogsUseLibraryFormats) {
  const auto manifest = read_json_file(data() / "manifest.json");
  std::vector<DecisionRecord> decisions;
  for_each_jsonl(data() / "decisions.jsonl", [&](const json& j) { decisions.push_back(DecisionRecord::from_json(j)); });
  double rewards = 0;
  std::size_t reward_lines = 0;
  for_each_jsonl(data() / "rewards.jsonl", [&](const json& j) {
    rewards += RewardRecord::from_json(j).reward;
    ++reward_lines;
  });
  EXPECT_EQ(decisions.size(), 6000u);
  EXPECT_EQ(manifest["decisions"], decisions.size());
  EXPECT_EQ(manifest["pipeline"]["unique_decisions"], decisions.size());
  EXPECT_EQ(manifest["pipeline"]["matched_rewards"], reward_lines);
  EXPECT_DOUBLE_EQ(manifest["realized_reward"].get<double>(), rewards);

  const auto log = ReplayLog::read(data() / "replay.jsonl");
  EXPECT_EQ(log.k, 4u);
  EXPECT_EQ(log.events.size(), 6000u);
}

TEST_F(Simulated, HealthCsvShapes) {
  const auto cont = cli("health continuity " + data_arg() + " " + config_arg() + " --variant A");
  ASSERT_EQ(cont.rc, 0) << cont.err;
  const auto rows = lines(cont.out);
  ASSERT_GE(rows.size(), 2u);
  EXPECT_EQ(rows[0], "distance,mean_kl,pair_count");
  EXPECT_EQ(rows[1].rfind("0,", 0), 0u);

  const auto stab = cli("health stability " + data_arg() + " --variant A --epsilon-ms 600000 --delta-ms 1200000");
  ASSERT_EQ(stab.rc, 0) << stab.err;
  EXPECT_EQ(lines(stab.out).at(0), "t,mean_kl");
  EXPECT_GE(lines(stab.out).size(), 2u);

  const auto expl = cli("health exploitation " + data_arg() + " --variant B --bucket-ms 600000");
  ASSERT_EQ(expl.rc, 0) << expl.err;
  const auto erows = lines(expl.out);
  EXPECT_EQ(erows.at(0), "t,ratio");
  EXPECT_EQ(erows.size(), 11u);  // 6000 s in 600 s buckets
  for (std::size_t i = 1; i < erows.size(); ++i) {
    const double r = std::stod(erows[i].substr(erows[i].find(',') + 1));
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
  }

  // Two keyspaces without a selection is a usage error; identical inputs give identical bytes.
  EXPECT_EQ(cli("health exploitation " + data_arg()).rc, 1);
  EXPECT_EQ(cli("health continuity " + data_arg() + " " + config_arg() + " --variant A").out, cont.out);
}

TEST(Cli, ContinuityOnOneContextIsASingleRow) {
  test_util::TempDir dir;
  const auto schema = FeatureSchema::from_json(read_json_file(kSamples / "schema.json"));
  const auto x = encode(json{{"segment", "new"}, {"platform", "web"}}, schema);
  std::string text;
  for (int i = 0; i < 60; ++i)
    text += DecisionRecord{"d" + std::to_string(i), {"feed", "t", "v"}, x, i % 3 ? "story_a" : "promo_x", i * 1000, 1, {}, false}
                .to_json()
                .dump() +
            "\n";
  atomic_write_file(dir.path() / "decisions.jsonl", text);
  const auto o = cli("health continuity --decisions " + (dir.path() / "decisions.jsonl").string() + " " + world_arg());
  ASSERT_EQ(o.rc, 0) << o.err;
  EXPECT_EQ(o.out, "distance,mean_kl,pair_count\n0,0,1\n");
}

TEST_F(Simulated, ReplayMatchesDirectTally) {
  const auto log = ReplayLog::read(data() / "replay.jsonl");
  double sum = 0;
  std::uint64_t matched = 0;
  for (const auto& e : log.events)
    if (e.arm_id == "story_b") {
      sum += e.reward;
      ++matched;
    }
  const auto o = cli("replay " + data_arg() + " --policy fixed:story_b");
  ASSERT_EQ(o.rc, 0) << o.err;
  const auto j = json::parse(o.out);
  EXPECT_EQ(j["matched"], matched);
  EXPECT_EQ(j["total"], log.events.size());
  EXPECT_DOUBLE_EQ(j["mean_reward"].get<double>(), sum / static_cast<double>(matched));

  const auto w1 = cli("replay " + data_arg() + " --mode windowed --t1 inf --t2 inf --seed 4");
  const auto w2 = cli("replay " + data_arg() + " --mode windowed --t1 inf --t2 inf --seed 4");
  ASSERT_EQ(w1.rc, 0) << w1.err;
  EXPECT_EQ(w1.out, w2.out);
  EXPECT_EQ(json::parse(w1.out)["matched"], log.events.size());

  const auto none = json::parse(cli("replay " + data_arg() + " --policy fixed:ghost").out);
  EXPECT_EQ(none["status"], "NoMatches");
  EXPECT_TRUE(none["mean_reward"].is_null());
}

TEST_F(Simulated, TuneLambdaPicksTheBestRow) {
  const auto o = cli("tune-lambda " + data_arg() + " --grid 10,0.1,1");
  ASSERT_EQ(o.rc, 0) << o.err;
  const auto j = json::parse(o.out);
  ASSERT_EQ(j["per_lambda"].size(), 3u);
  double best = -1, best_lambda = 0;
  for (const auto& row : j["per_lambda"])
    if (row["mean_reward"].get<double>() > best) {
      best = row["mean_reward"];
      best_lambda = row["lambda"];
    }
  EXPECT_EQ(j["best_lambda"].get<double>(), best_lambda);
  EXPECT_EQ(cli("tune-lambda " + data_arg()).rc, 1);  // --grid is required
}

TEST_F(Simulated, RegretMatchesIndependentTally) {
  const auto world = WorldSpec::from_json(read_json_file(kSamples / "world.json"));
  double reward = 0, expected = 0, oracle = 0;
  std::map<std::string, double> reward_of;
  for_each_jsonl(data() / "rewards.jsonl", [&](const json& j) { reward_of[j["decision_id"]] += j["reward"].get<double>(); });
  std::uint64_t n = 0;
  for_each_jsonl(data() / "decisions.jsonl", [&](const json& j) {
    const auto d = DecisionRecord::from_json(j);
    const auto round = static_cast<std::uint64_t>((d.timestamp - world.start_ms) / world.interval_ms);
    reward += reward_of[d.decision_id];
    expected += true_mean(world, d.context, d.arm_id, round);
    double best = 0;
    for (const auto& a : d.eligible) best = std::max(best, true_mean(world, d.context, a, round));
    oracle += best;
    ++n;
  });

  test_util::TempDir out;
  const auto o = cli("report regret " + data_arg() + " " + world_arg() + " --out " + out.path().string());
  ASSERT_EQ(o.rc, 0) << o.err;
  const auto rows = lines(read_file(out.path() / "regret.csv"));
  EXPECT_EQ(rows.front(), "t,decisions,cumulative_reward,cumulative_expected,cumulative_oracle,cumulative_regret");
  std::vector<double> last;
  std::istringstream cells(rows.back());
  for (std::string c; std::getline(cells, c, ',');) last.push_back(std::stod(c));
  ASSERT_EQ(last.size(), 6u);
  EXPECT_EQ(last[1], static_cast<double>(n));
  EXPECT_NEAR(last[2], reward, 1e-9);
  EXPECT_NEAR(last[3], expected, 1e-6);
  EXPECT_NEAR(last[4], oracle, 1e-6);
  EXPECT_NEAR(last[2], read_json_file(data() / "manifest.json")["realized_reward"].get<double>(), 1e-9);
  for (const auto& e : fs::directory_iterator(out.path())) EXPECT_EQ(e.path().extension(), ".csv");
}

TEST_F(Simulated, ReportWritesFilesAndNamesMissingInputs) {
  test_util::TempDir out;
  for (const auto* kind : {"continuity", "stability", "exploitation", "replay"}) {
    const auto o = cli(std::string("report ") + kind + " " + data_arg() + " " + config_arg() +
                       " --variant A --epsilon-ms 600000 --delta-ms 1200000 --out " + out.path().string());
    EXPECT_EQ(o.rc, 0) << kind << ": " << o.err;
  }
  EXPECT_TRUE(fs::exists(out.path() / "continuity.csv"));
  EXPECT_TRUE(fs::exists(out.path() / "stability.csv"));
  EXPECT_TRUE(fs::exists(out.path() / "exploitation.csv"));
  EXPECT_TRUE(fs::exists(out.path() / "replay.json"));
  EXPECT_EQ(read_file(out.path() / "stability.csv"),
            cli("health stability " + data_arg() + " --variant A --epsilon-ms 600000 --delta-ms 1200000").out);

  const auto missing = cli("report regret --data " + out.path().string() + " " + world_arg() + " --out " +
                           out.path().string());
  EXPECT_EQ(missing.rc, 2);
  EXPECT_NE(missing.err.find((out.path() / "decisions.jsonl").string()), std::string::npos);
  EXPECT_EQ(cli("report bogus --out " + out.path().string()).rc, 1);
}

TEST(Cli, BatchServeCloseAndTrain) {
  test_util::TempDir dir;
  const auto data = "--data " + (dir.path() / "dep").string() + " " + config_arg();
  std::string requests;
  for (int i = 0; i < 6; ++i)
    requests += json{{"session_id", "u" + std::to_string(i / 3)},
                     {"attributes", {{"segment", "power"}, {"platform", "ios"}}},
                     {"test_id", "ranking"},
                     {"variant_id", "A"},
                     {"timestamp", 1000 + i}}
                    .dump() +
                "\n";
  requests += R"({"decision_id": "feed-s0n0-0", "reward": 1.0, "timestamp": 1100})" "\n";
  atomic_write_file(dir.path() / "req.jsonl", requests);

  const auto served = cli("serve " + data + " --requests " + (dir.path() / "req.jsonl").string() + " --now 500");
  ASSERT_EQ(served.rc, 0) << served.err;
  const auto replies = lines(served.out);
  ASSERT_EQ(replies.size(), 7u);
  // MaxConsecutive promo 1 and MinWithinPrefix story 3 hold within each three-card session.
  std::vector<std::string> types;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto arm = json::parse(replies[i])["arm_id"].get<std::string>();
    types.push_back(arm.substr(0, arm.find('_')));
  }
  for (std::size_t s = 0; s < 6; s += 3) {
    EXPECT_TRUE(types[s] == "story" || types[s + 1] == "story" || types[s + 2] == "story");
    EXPECT_FALSE(types[s] == "promo" && types[s + 1] == "promo");
    EXPECT_FALSE(types[s + 1] == "promo" && types[s + 2] == "promo");
  }
  EXPECT_EQ(json::parse(replies[6])["status"], "accepted");

  // Separate processes: each reopens the journal.
  ASSERT_EQ(cli("close-window " + data + " --now 2000").rc, 0);
  const auto trained = cli("train " + data + " --now 3000");
  ASSERT_EQ(trained.rc, 0) << trained.err;
  ASSERT_EQ(cli("close-window " + data + " --now 4000").rc, 0);

  ModelHolder holder(dir.path() / "dep" / "models");
  const auto entry = holder.get({"feed", "ranking", "A"});
  EXPECT_EQ(entry->consumed_windows, (std::vector<std::uint64_t>{0}));
  EXPECT_EQ(entry->publish_time, 3000);
  // Each decision sets two fine and two coarse coordinates.
  double pulls = 0, clicks = 0;
  for (const auto& [_, a] : entry->model->arms()) {
    pulls += (a.A.trace() - static_cast<double>(a.A.rows())) / 4.0;
    clicks += a.b.sum() / 4.0;
  }
  EXPECT_NEAR(pulls, 6.0, 1e-9);
  EXPECT_NEAR(clicks, 1.0, 1e-9);
  EXPECT_EQ(holder.get({"feed", "ranking", "B"})->consumed_windows, (std::vector<std::uint64_t>{0}));

  // A later batch gets fresh decision ids.
  const auto again = cli("serve " + data + " --requests " + (dir.path() / "req.jsonl").string() + " --now 5000");
  ASSERT_EQ(again.rc, 0) << again.err;
  EXPECT_EQ(json::parse(lines(again.out)[0])["decision_id"], "feed-s0n6-0");
}

TEST(Cli, HttpService) {
  test_util::TempDir dir;
  const int port = free_port();
  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    const auto cfg = (kSamples / "instance.json").string(), data = (dir.path() / "dep").string(), p = std::to_string(port);
    ::execl(kCli.c_str(), kCli.c_str(), "serve", "--http", "--config", cfg.c_str(), "--data", data.c_str(), "--port",
            p.c_str(), "--duration", "30", static_cast<char*>(nullptr));
    ::_exit(127);
  }
  httplib::Client client("127.0.0.1", port);
  httplib::Result res;
  const json body = {{"session_id", "s"}, {"attributes", {{"segment", "new"}, {"platform", "web"}}}, {"test_id", "ranking"}, {"variant_id", "B"}};
  for (int i = 0; i < 100 && !(res = client.Post("/v1/feed/serve", body.dump(), "application/json")); ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto reply = json::parse(res->body);
  EXPECT_TRUE(reply.contains("decision_id"));
  EXPECT_TRUE(reply.contains("arm_id"));
  EXPECT_EQ(reply["scores"].size(), 4u);

  auto reward = client.Post("/v1/feed/reward", json{{"decision_id", reply["decision_id"]}, {"reward", 1.0}}.dump(),
                            "application/json");
  ASSERT_TRUE(reward);
  EXPECT_EQ(json::parse(reward->body)["status"], "accepted");
  EXPECT_EQ(client.Post("/v1/elsewhere/serve", body.dump(), "application/json")->status, 404);
  EXPECT_EQ(client.Post("/v1/feed/serve", "{}", "application/json")->status, 400);

  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_EQ(lines(read_file(dir.path() / "dep" / "decisions.jsonl")).size(), 1u);
}
