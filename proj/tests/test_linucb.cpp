#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "banditd/linucb.hpp"
#include "banditd/rng.hpp"
#include "oracles.hpp"

using namespace banditd;

namespace {

ContextVector vec(std::vector<double> v) { return ContextVector(std::move(v), {}); }

ContextVector unit(std::size_t d, std::size_t i) {
  std::vector<double> v(d, 0.0);
  v[i] = 1.0;
  return vec(v);
}

AggregateTuple tuple(ContextVector x, ArmId arm, std::uint64_t pulls, double reward) {
  AggregateTuple t;
  t.keyspace = {"inst", "t", "v"};
  t.context = std::move(x);
  t.arm_id = std::move(arm);
  t.pulls = pulls;
  t.reward_sum = reward;
  return t;
}

BanditModel make_model(std::size_t d, std::vector<ArmId> arms, double lambda = 1.0, double alpha = 1.0) {
  BanditModel m("inst", ModelConfig{lambda, alpha, d});
  for (const auto& a : arms) m.insert_arm(a);
  return m;
}

ContextVector random_context(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.bernoulli(0.5) ? 1.0 : std::round(rng.normal(0.0, 1.0) * 100.0) / 100.0;
  return vec(v);
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

double matrix_relative_error(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
  return (got - want).cwiseAbs().maxCoeff() / std::max(want.cwiseAbs().maxCoeff(), 1e-300);
}

}  // namespace

TEST(Score, FreshArmUnitVector) {
  const auto m = make_model(3, {"a"});
  const auto s = score(m, unit(3, 1));
  EXPECT_DOUBLE_EQ(s.at("a").mean, 0.0);
  EXPECT_DOUBLE_EQ(s.at("a").ucb, 1.0);

  const auto m4 = make_model(3, {"a"}, 4.0);
  EXPECT_DOUBLE_EQ(score(m4, unit(3, 0)).at("a").ucb, 0.5);
}

TEST(Score, OneDimensionalClosedForm) {
  auto m = make_model(1, {"a"});
  const std::vector<AggregateTuple> batch{tuple(vec({1.0}), "a", 2, 1.0)};
  m = update_batch(m, batch);
  EXPECT_DOUBLE_EQ(m.arm("a").A(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(m.arm("a").b(0), 1.0);
  // Two observations x=1 with rewards summing to 1: theta = (1+1+1)^-1 * 1.
  const auto s = score(m, vec({1.0}));
  EXPECT_NEAR(s.at("a").mean, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.at("a").ucb, 1.0 / 3.0 + 1.0 / std::sqrt(3.0), 1e-15);
}

TEST(Score, Errors) {
  const auto empty = make_model(2, {});
  try {
    score(empty, unit(2, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoArms);
  }
  try {
    score(make_model(2, {"a"}), unit(3, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionError);
  }
}

TEST(Update, EmptyBatchOnlyBumpsVersion) {
  const auto m = make_model(2, {"a"});
  const auto n = update_batch(m, {});
  EXPECT_EQ(n.version(), m.version() + 1);
  EXPECT_EQ(n.serialize().size(), m.serialize().size());
  EXPECT_EQ(n.arm("a").A, m.arm("a").A);
}

TEST(Update, Errors) {
  const auto m = make_model(2, {"a"});
  const std::vector<AggregateTuple> unknown{tuple(unit(2, 0), "zz", 1, 0.0)};
  try {
    update_batch(m, unknown);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownArm);
  }
  const std::vector<AggregateTuple> nan{tuple(unit(2, 0), "a", 1, std::nan(""))};
  try {
    update_batch(m, nan);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidValue);
  }
}

TEST(Update, BatchEqualsSequentialSinglePulls) {
  const ContextVector x = vec({1.0, 0.5, -2.0});
  auto batched = make_model(3, {"a"});
  const std::vector<AggregateTuple> one{tuple(x, "a", 5, 2.0)};
  batched = update_batch(batched, one);

  const std::vector<double> rewards{1.0, 0.0, 0.5, 0.0, 0.5};
  std::vector<std::size_t> order{0, 1, 2, 3, 4};
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    auto seq = make_model(3, {"a"});
    for (auto i : order) {
      const std::vector<AggregateTuple> single{tuple(x, "a", 1, rewards[i])};
      seq = update_batch(seq, single);
    }
    EXPECT_LE(matrix_relative_error(seq.arm("a").A, batched.arm("a").A), 1e-12);
    EXPECT_LE(oracle::vector_relative_error(to_std(seq.arm("a").b), to_std(batched.arm("a").b)), 1e-12);
  }
}

TEST(Update, PartitionAndPermutationInvariance) {
  Rng rng(17);
  const std::size_t d = 6;
  std::vector<AggregateTuple> events;
  for (int i = 0; i < 300; ++i)
    events.push_back(tuple(random_context(rng, d), i % 2 ? "a" : "b", 1, rng.bernoulli(0.3) ? 1.0 : 0.0));

  auto reference = make_model(d, {"a", "b"});
  reference = update_batch(reference, events);

  for (int trial = 0; trial < 10; ++trial) {
    auto shuffled = events;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.index(i)]);
    auto m = make_model(d, {"a", "b"});
    std::size_t pos = 0;
    while (pos < shuffled.size()) {
      const std::size_t len = std::min<std::size_t>(1 + rng.index(40), shuffled.size() - pos);
      m = update_batch(m, std::span<const AggregateTuple>(shuffled.data() + pos, len));
      pos += len;
    }
    for (const ArmId arm : {"a", "b"}) {
      EXPECT_LE(matrix_relative_error(m.arm(arm).A, reference.arm(arm).A), 1e-12);
      EXPECT_LE(oracle::vector_relative_error(to_std(m.arm(arm).b), to_std(reference.arm(arm).b)), 1e-12);
    }
  }
}

TEST(Update, ThetaMatchesRidgeOracle) {
  Rng rng(5);
  for (std::size_t d : {1u, 3u, 8u, 15u}) {
    for (double lambda : {0.1, 1.0, 7.5}) {
      auto m = make_model(d, {"a"}, lambda);
      std::vector<oracle::Event> raw;
      std::vector<AggregateTuple> batch;
      for (int i = 0; i < 200; ++i) {
        const auto x = random_context(rng, d);
        const auto n = 1 + rng.index(4);
        const double r = static_cast<double>(rng.index(n + 1));
        batch.push_back(tuple(x, "a", n, r));
        // Expand the aggregate back into n raw events sharing the summed reward.
        for (std::uint64_t k = 0; k < n; ++k) raw.push_back({x.unified(), k == 0 ? r : 0.0});
        if (batch.size() == 37) {
          m = update_batch(m, batch);
          batch.clear();
        }
      }
      m = update_batch(m, batch);
      const auto want = oracle::ridge(raw, lambda, d);
      EXPECT_LE(oracle::vector_relative_error(to_std(m.arm("a").theta), want), 1e-10) << "d=" << d << " lambda=" << lambda;
    }
  }
}

TEST(Update, InverseMatchesShermanMorrison) {
  Rng rng(23);
  const std::size_t d = 7;
  const double lambda = 2.0;
  auto m = make_model(d, {"a"}, lambda);
  oracle::Matrix inv(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) inv[i][i] = 1.0 / lambda;
  for (int i = 0; i < 150; ++i) {
    const auto x = random_context(rng, d);
    const std::vector<AggregateTuple> one{tuple(x, "a", 1, 1.0)};
    m = update_batch(m, one);
    oracle::sherman_morrison(inv, x.unified());
  }
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      diff = std::max(diff, std::abs(m.arm("a").A_inv(i, j) - inv[i][j]));
      scale = std::max(scale, std::abs(inv[i][j]));
    }
  EXPECT_LE(diff / scale, 1e-9);
}

TEST(Update, PositiveDefiniteAndUcbAboveMean) {
  Rng rng(29);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 1 + rng.index(10);
    auto m = make_model(d, {"a", "b", "c"}, 0.01 + rng.uniform() * 5.0, rng.uniform() * 3.0);
    for (int round = 0; round < 5; ++round) {
      std::vector<AggregateTuple> batch;
      for (int i = 0; i < 20; ++i) {
        const std::vector<ArmId> arms{"a", "b", "c"};
        batch.push_back(tuple(random_context(rng, d), arms[rng.index(3)], 1 + rng.index(3), rng.normal(0.0, 1.0)));
      }
      m = update_batch(m, batch);
      for (const auto& [id, arm] : m.arms()) {
        Eigen::LLT<Eigen::MatrixXd> llt(arm.A);
        ASSERT_EQ(llt.info(), Eigen::Success);
        ASSERT_EQ(arm.A, arm.A.transpose());
        const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(arm.A).eigenvalues().minCoeff();
        ASSERT_GE(min_eig, m.config().lambda * (1 - 1e-9));
      }
      const auto x = random_context(rng, d);
      for (const auto& [id, s] : score(m, x)) ASSERT_GE(s.ucb, s.mean);
    }
  }
}

TEST(Update, ArmIsolation) {
  Rng rng(31);
  auto m = make_model(4, {"a", "b"});
  const std::vector<AggregateTuple> warm{tuple(random_context(rng, 4), "b", 3, 1.0)};
  m = update_batch(m, warm);
  const auto before = m.arm("b");
  std::vector<AggregateTuple> batch;
  for (int i = 0; i < 50; ++i) batch.push_back(tuple(random_context(rng, 4), "a", 1, 1.0));
  m = update_batch(m, batch);
  EXPECT_EQ(m.arm("b").A, before.A);
  EXPECT_EQ(m.arm("b").b, before.b);
  EXPECT_EQ(m.arm("b").theta, before.theta);
  EXPECT_EQ(m.arm("b").A_inv, before.A_inv);
  EXPECT_EQ(m.arm("b").update_count, before.update_count);
}

TEST(Update, VersionStrictlyIncreases) {
  auto m = make_model(2, {"a"});
  std::uint64_t last = m.version();
  for (int i = 0; i < 5; ++i) {
    const std::vector<AggregateTuple> one{tuple(unit(2, 0), "a", 1, 1.0)};
    m = update_batch(m, one);
    EXPECT_GT(m.version(), last);
    last = m.version();
  }
}

TEST(Arms, AddKeepsExistingArmsBitIdentical) {
  Rng rng(37);
  auto m = make_model(3, {"a"});
  const std::vector<AggregateTuple> warm{tuple(random_context(rng, 3), "a", 4, 2.0)};
  m = update_batch(m, warm);
  const auto n = add_arm(m, "b");
  EXPECT_EQ(n.version(), m.version() + 1);
  EXPECT_EQ(n.arm("a").A, m.arm("a").A);
  EXPECT_EQ(n.arm("a").theta, m.arm("a").theta);
  EXPECT_EQ(n.arm("b").A, Eigen::MatrixXd::Identity(3, 3));
  EXPECT_EQ(n.arm("b").theta, Eigen::VectorXd::Zero(3));
  try {
    add_arm(n, "a");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateArm);
  }
}

TEST(Arms, RemoveThenReaddStartsFresh) {
  auto m = make_model(2, {"a", "b"});
  const std::vector<AggregateTuple> warm{tuple(unit(2, 0), "b", 4, 2.0)};
  m = update_batch(m, warm);
  auto n = remove_arm(m, "b");
  EXPECT_FALSE(n.has_arm("b"));
  EXPECT_EQ(n.arm("a").A, m.arm("a").A);
  n = add_arm(n, "b");
  EXPECT_EQ(n.arm("b").b, Eigen::VectorXd::Zero(2));
  try {
    remove_arm(n, "zz");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownArm);
  }
}

TEST(Serialization, RoundTripIsBitExact) {
  Rng rng(41);
  auto m = make_model(5, {"x", "y", "z"}, 0.37, 1.3);
  for (int round = 0; round < 4; ++round) {
    std::vector<AggregateTuple> batch;
    for (int i = 0; i < 25; ++i)
      batch.push_back(tuple(random_context(rng, 5), std::string(1, "xyz"[rng.index(3)]), 1 + rng.index(5), rng.normal(0.0, 1.0) / 3.0));
    m = update_batch(m, batch);
  }
  const auto bytes = m.serialize();
  const auto back = BanditModel::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.version(), m.version());
  EXPECT_EQ(back.instance_id(), m.instance_id());
  for (const auto& [id, a] : m.arms()) {
    const auto& b = back.arm(id);
    ASSERT_EQ(std::memcmp(a.A.data(), b.A.data(), sizeof(double) * a.A.size()), 0);
    ASSERT_EQ(std::memcmp(a.b.data(), b.b.data(), sizeof(double) * a.b.size()), 0);
    ASSERT_EQ(std::memcmp(a.theta.data(), b.theta.data(), sizeof(double) * a.theta.size()), 0);
    ASSERT_EQ(a.update_count, b.update_count);
  }
  const auto x = random_context(rng, 5);
  const auto s1 = score(m, x), s2 = score(back, x);
  for (const auto& [id, s] : s1) {
    EXPECT_EQ(s.mean, s2.at(id).mean);
    EXPECT_EQ(s.ucb, s2.at(id).ucb);
  }
}

TEST(Serialization, RejectsCorruptBytes) {
  try {
    BanditModel::deserialize("{\"format\":\"banditd.model\"");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptData);
  }
}

TEST(Argmax, TieRuleAndBruteForce) {
  const auto fresh = make_model(2, {"c", "a", "b"});
  EXPECT_EQ(greedy_arm(fresh, unit(2, 0), {"a", "b", "c"}), "a");
  EXPECT_EQ(ucb_arm(fresh, unit(2, 0), {"b", "c"}), "b");
  EXPECT_EQ(greedy_arm(fresh, unit(2, 0), {"c"}), "c");
  try {
    greedy_arm(fresh, unit(2, 0), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoEligibleArm);
  }

  Rng rng(43);
  auto m = make_model(4, {"a", "b", "c", "d"});
  std::vector<AggregateTuple> batch;
  for (int i = 0; i < 200; ++i)
    batch.push_back(tuple(random_context(rng, 4), std::string(1, "abcd"[rng.index(4)]), 1, rng.bernoulli(0.4)));
  m = update_batch(m, batch);
  for (int i = 0; i < 200; ++i) {
    const auto x = random_context(rng, 4);
    // Brute-force: theta re-solved independently, then a manual scan.
    std::string best;
    double best_mean = 0.0;
    for (const auto& [id, arm] : m.arms()) {
      std::vector<std::vector<double>> A(4, std::vector<double>(4));
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) A[r][c] = arm.A(r, c);
      const auto theta = oracle::solve(A, to_std(arm.b));
      double mean = 0.0;
      for (int k = 0; k < 4; ++k) mean += theta[k] * x.unified()[k];
      if (best.empty() || mean > best_mean + 1e-12) {
        best = id;
        best_mean = mean;
      }
    }
    ASSERT_EQ(greedy_arm(m, x, m.arm_ids()), best);
  }
}

TEST(Score, DeterministicForFixedVersion) {
  Rng rng(47);
  auto m = make_model(3, {"a", "b"});
  std::vector<AggregateTuple> batch;
  for (int i = 0; i < 40; ++i) batch.push_back(tuple(random_context(rng, 3), i % 2 ? "a" : "b", 1, 1.0));
  m = update_batch(m, batch);
  const auto x = random_context(rng, 3);
  const auto s1 = score(m, x), s2 = score(m, x);
  for (const auto& [id, s] : s1) EXPECT_EQ(s.ucb, s2.at(id).ucb);
}
