#include <doctest.h>

#include <cmath>

#include "natgrad/agent.hpp"
#include "natgrad/errors.hpp"
#include "natgrad/oracle.hpp"

using namespace natgrad;

namespace {

struct Trace {
  std::vector<Vector> policy, value, x;
  std::vector<double> delta;
};

Trace trace_run(const AgentConfig& config) {
  Trace out;
  TrainOptions options;
  options.on_step = [&](const StepTrace& s) {
    out.policy.push_back(s.policy->params());
    out.value.push_back(s.value->params());
    out.x.push_back(*s.x);
    out.delta.push_back(s.delta);
  };
  train(config, options);
  return out;
}

bool bit_equal(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return false;
  for (int i = 0; i < a.size(); ++i)
    if (a(i) != b(i)) return false;
  return true;
}

}  // namespace

TEST_SUITE("agent") {
  TEST_CASE("ema") {
    CHECK(ema_update(0.0, 10.0) == doctest::Approx(9.0));
    CHECK(ema_update(100.0, 0.0) == doctest::Approx(10.0));
    CHECK(ema_update(5.0, 5.0) == doctest::Approx(5.0));

    AgentConfig config = default_config(Algorithm::ac, "chain:3:0");
    config.episodes = 20;
    const auto result = train(config);
    REQUIRE(result.records.size() == 20);
    CHECK(result.records[0].ema_reward == result.records[0].total_reward);
    for (std::size_t i = 1; i < result.records.size(); ++i)
      CHECK(result.records[i].ema_reward ==
            doctest::Approx(ema_update(result.records[i - 1].ema_reward, result.records[i].total_reward)));
  }

  TEST_CASE("algorithm names") {
    for (auto a : {Algorithm::ac, Algorithm::nac, Algorithm::offac, Algorithm::offnac})
      CHECK(parse_algorithm(to_string(a)) == a);
    CHECK_THROWS_AS(parse_algorithm("sarsa"), DomainError);
  }

  TEST_CASE("step schedules") {
    const StepSchedule constant;
    CHECK(constant.fast(0) == 1.0);
    CHECK(constant.slow(1000) == 1.0);
    const StepSchedule poly = StepSchedule::parse("poly:0.6:0.9");
    CHECK(poly.kind == StepSchedule::Kind::polynomial);
    CHECK(poly.fast(0) == doctest::Approx(1.0));
    CHECK(poly.fast(3) == doctest::Approx(std::pow(4.0, -0.6)));
    CHECK(poly.slow(3) == doctest::Approx(std::pow(4.0, -0.9)));
    CHECK(StepSchedule::parse(poly.to_string()).p_slow == doctest::Approx(0.9));
    CHECK_THROWS_AS(StepSchedule::parse("poly:0.9:0.6"), DomainError);
    CHECK_THROWS_AS(StepSchedule::parse("poly:0.5:0.9"), DomainError);
    CHECK_THROWS_AS(StepSchedule::parse("poly:0.6:1.1"), DomainError);
    CHECK_THROWS_AS(StepSchedule::parse("linear"), DomainError);
  }

  TEST_CASE("two timescales separate") {
    const StepSchedule poly = StepSchedule::polynomial(0.6, 0.9);
    double prev = 2.0;
    for (long long n = 0; n < 100000; n = n * 2 + 1) {
      const double ratio = poly.slow(n) / poly.fast(n);
      CHECK(ratio < prev);
      prev = ratio;
    }
    CHECK(prev < 0.05);
  }

  TEST_CASE("config validation") {
    AgentConfig config = default_config(Algorithm::nac, "cartpole");
    CHECK_NOTHROW(config.validate());
    auto bad = config;
    bad.lambda = 1.5;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    bad = config;
    bad.gamma = 1.0;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    bad = config;
    bad.critic_lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    bad = default_config(Algorithm::offnac, "cartpole");
    bad.ratio.source = RatioSource::exact;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    CHECK_THROWS_AS(default_config(Algorithm::nac, "pendulum"), DomainError);
    CHECK(default_config(Algorithm::ac, "cartpole").advantage_lr == 0.0);
  }

  TEST_CASE("zero actor step freezes the policy but not the critic") {
    AgentConfig config = default_config(Algorithm::nac, "chain:4:2");
    config.actor_lr = 0.0;
    config.episodes = 5;
    const Trace t = trace_run(config);
    REQUIRE(t.policy.size() > 10);
    for (const auto& p : t.policy) CHECK(bit_equal(p, t.policy.front()));
    CHECK_FALSE(bit_equal(t.value.front(), t.value.back()));
    CHECK(t.x.back().norm() > 0.0);
  }

  TEST_CASE("off-policy with behaviour equal to target reproduces on-policy updates") {
    const std::pair<Algorithm, Algorithm> pairs[] = {{Algorithm::nac, Algorithm::offnac},
                                                     {Algorithm::ac, Algorithm::offac}};
    for (const auto& [on, off] : pairs) {
      for (int lambda : {0, 1}) {
        AgentConfig a = default_config(on, "chain:4:3", lambda == 1);
        a.episodes = 6;
        a.seed = 11;
        AgentConfig b = default_config(off, "chain:4:3", lambda == 1);
        b.episodes = 6;
        b.seed = 11;
        b.behavior = BehaviorKind::target;
        b.ratio.source = RatioSource::exact;
        b.ratio.clip = 0.0;
        b.actor_lr = a.actor_lr;
        b.critic_lr = a.critic_lr;
        b.advantage_lr = a.advantage_lr;
        const Trace ta = trace_run(a), tb = trace_run(b);
        CAPTURE(to_string(off));
        CAPTURE(lambda);
        REQUIRE(ta.policy.size() == tb.policy.size());
        bool same = true;
        for (std::size_t i = 0; i < ta.policy.size(); ++i) {
          same = same && bit_equal(ta.policy[i], tb.policy[i]) && bit_equal(ta.value[i], tb.value[i]) &&
                 bit_equal(ta.x[i], tb.x[i]) && ta.delta[i] == tb.delta[i];
        }
        CHECK(same);
      }
    }
  }

  TEST_CASE("training is deterministic per seed") {
    for (auto alg : {Algorithm::nac, Algorithm::offnac}) {
      AgentConfig config = default_config(alg, "chain:3:1");
      config.episodes = 8;
      config.seed = 4;
      const auto r1 = train(config), r2 = train(config);
      REQUIRE(r1.records.size() == r2.records.size());
      for (std::size_t i = 0; i < r1.records.size(); ++i) {
        CHECK(r1.records[i].total_reward == r2.records[i].total_reward);
        CHECK(r1.records[i].steps == r2.records[i].steps);
      }
      CHECK(bit_equal(r1.policy.net().params(), r2.policy.net().params()));
      config.seed = 5;
      CHECK_FALSE(bit_equal(train(config).policy.net().params(), r1.policy.net().params()));
    }
  }

  TEST_CASE("divergence is reported, not thrown") {
    AgentConfig config = default_config(Algorithm::ac, "chain:3:0");
    config.actor_lr = 1e6;
    config.critic_lr = 1e3;
    config.param_norm_limit = 10.0;
    config.episodes = 50;
    const auto result = train(config);
    CHECK(result.diverged);
    CHECK_FALSE(result.diagnostic.empty());
    CHECK(result.records.size() < 50);
  }

  TEST_CASE("evaluate") {
    CartPole env;
    Rng rng(1, Stream::eval);
    const SoftmaxPolicy uniform(Mlp({4, 2}));
    const auto one = evaluate(uniform, env, 1, rng);
    CHECK(one.std == 0.0);
    CHECK(one.returns.size() == 1);
    const auto many = evaluate(uniform, env, 1000, rng);
    CHECK(many.mean >= 15.0);
    CHECK(many.mean <= 35.0);
    CHECK(many.std > 0.0);
    CHECK_THROWS_AS(evaluate(uniform, env, 0, rng), DomainError);
  }

  TEST_CASE("natural direction is the advantage weights") {
    AdvantageCritic critic(3);
    Vector x(3);
    x << 1.0, -2.0, 0.5;
    critic.set_x(x);
    CHECK(bit_equal(natural_direction(critic), x));
  }

  TEST_CASE("advantage update has zero mean drift at the least-norm solution") {
    const auto env = make_env("chain:3:6");
    const auto& mdp = dynamic_cast<const TabularEnv&>(*env).mdp();
    const auto states = encoded_states(3, StateEncoding::one_hot);
    Rng rng(21);
    Mlp net({3, 2});
    Vector p(net.param_count());
    for (int i = 0; i < p.size(); ++i) p(i) = rng.uniform(-1.0, 1.0);
    net.set_params(p);
    const SoftmaxPolicy policy(net);
    const auto sol = oracle::solve(mdp, policy, states);
    const Matrix pi = oracle::policy_table(policy, states);

    const int n = 200000;
    const int k = policy.param_count();
    Vector sum = Vector::Zero(k), sum_sq = Vector::Zero(k);
    std::vector<double> d(sol.d_visit.data(), sol.d_visit.data() + 3);
    for (int i = 0; i < n; ++i) {
      const int s = rng.categorical(d);
      const Vector prow = pi.row(s).transpose();
      const int a = sample_from(prow, rng);
      const int next = mdp.sample_next(s, a, rng);
      const double delta = mdp.reward(s, a) + mdp.gamma() * sol.v(next) - sol.v(s);
      const FlatGrad f = policy.compat_features(states[s], a);
      const Vector g = (delta - sol.x_star.dot(f)) * f;
      sum += g;
      sum_sq += g.cwiseProduct(g);
    }
    const Vector mean = sum / n;
    const Vector se = ((sum_sq / n - mean.cwiseProduct(mean)) / n).cwiseSqrt();
    for (int i = 0; i < k; ++i) CHECK(std::abs(mean(i)) <= 4.0 * se(i) + 1e-12);
  }
}
