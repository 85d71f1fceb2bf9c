#include <doctest.h>

#include <cmath>

#include "natgrad/errors.hpp"
#include "natgrad/harness.hpp"
#include "natgrad/oracle.hpp"

using namespace natgrad;

namespace {

SoftmaxPolicy random_tabular(int n_states, int n_actions, StateEncoding enc, bool reference, double scale, Rng& rng) {
  const int d_in = enc == StateEncoding::one_hot ? n_states : n_states - 1;
  Mlp net({d_in, reference ? n_actions - 1 : n_actions});
  Vector p(net.param_count());
  for (int i = 0; i < p.size(); ++i) p(i) = rng.uniform(-scale, scale);
  net.set_params(p);
  return SoftmaxPolicy(net, reference);
}

TabularMdp with_rewards(const TabularMdp& base, const Matrix& reward) {
  std::vector<Vector> rows;
  for (int s = 0; s < base.n_states(); ++s)
    for (int a = 0; a < base.n_actions(); ++a) rows.push_back(base.transition(s, a));
  return TabularMdp(base.n_states(), base.n_actions(), rows, reward, base.gamma(), base.initial_dist());
}

}  // namespace

TEST_SUITE("oracle") {
  TEST_CASE("single state values") {
    const TabularMdp mdp = make_single_state_mdp(4);
    const Matrix pi = oracle::uniform_table(1, 2);
    const auto v = oracle::exact_values(mdp, pi);
    CHECK(v.v(0) == doctest::Approx(mdp.reward(0, 0) / (1 - mdp.gamma())));
    CHECK(oracle::visitation(mdp, pi)(0) == doctest::Approx(1.0));
  }

  TEST_CASE("zero rewards give zero everything") {
    const TabularMdp mdp = with_rewards(make_chain_mdp(4, 2), Matrix::Zero(4, 2));
    Rng rng(1);
    const auto states = encoded_states(4, StateEncoding::one_hot);
    const SoftmaxPolicy policy = random_tabular(4, 2, StateEncoding::one_hot, false, 1.0, rng);
    const auto v = oracle::exact_values(mdp, oracle::policy_table(policy, states));
    CHECK(v.v.isZero());
    CHECK(v.q.isZero());
    CHECK(v.adv.isZero());
    const auto g = oracle::objective_and_gradient(mdp, policy, states);
    CHECK(g.j == 0.0);
    CHECK(g.grad.isZero());
  }

  TEST_CASE("uniform rewards give a policy independent objective") {
    const TabularMdp mdp = with_rewards(make_chain_mdp(3, 5), Matrix::Constant(3, 2, 0.4));
    Rng rng(2);
    const auto states = encoded_states(3, StateEncoding::one_hot);
    const auto g = oracle::objective_and_gradient(mdp, random_tabular(3, 2, StateEncoding::one_hot, false, 2.0, rng), states);
    CHECK(g.j == doctest::Approx(0.4));
    CHECK(g.grad.norm() <= 1e-12);
  }

  TEST_CASE("values agree with value iteration") {
    const TabularMdp mdp = make_chain_mdp(5, 7);
    Rng rng(3);
    const auto states = encoded_states(5, StateEncoding::one_hot);
    const Matrix pi = oracle::policy_table(random_tabular(5, 2, StateEncoding::one_hot, false, 1.0, rng), states);
    const Matrix P = oracle::state_transition(mdp, pi);
    const Vector r = oracle::expected_reward(mdp, pi);
    Vector v = Vector::Zero(5);
    for (int i = 0; i < 2000; ++i) v = r + mdp.gamma() * P * v;
    const auto exact = oracle::exact_values(mdp, pi);
    CHECK((exact.v - v).cwiseAbs().maxCoeff() <= 1e-8);
    for (int s = 0; s < 5; ++s) CHECK(std::abs(pi.row(s).dot(exact.adv.row(s))) <= 1e-10);
  }

  TEST_CASE("visitation agrees with the truncated series") {
    const TabularMdp mdp = make_chain_mdp(4, 8);
    const Matrix pi = oracle::uniform_table(4, 2);
    const Matrix P = oracle::state_transition(mdp, pi);
    Vector term = mdp.initial_dist(), sum = Vector::Zero(4);
    double g = 1.0;
    for (int t = 0; t <= 1000; ++t) {
      sum += (1 - mdp.gamma()) * g * term;
      term = (term.transpose() * P).transpose();
      g *= mdp.gamma();
    }
    const Vector d = oracle::visitation(mdp, pi);
    CHECK((d - sum).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(std::abs(d.sum() - 1.0) <= 1e-10);
  }

  TEST_CASE("visitation approaches d0 as gamma goes to zero") {
    const TabularMdp base = make_chain_mdp(3, 9);
    std::vector<Vector> rows;
    for (int s = 0; s < 3; ++s)
      for (int a = 0; a < 2; ++a) rows.push_back(base.transition(s, a));
    Vector d0(3);
    d0 << 0.7, 0.2, 0.1;
    const TabularMdp mdp(3, 2, rows, base.reward(), 1e-9, d0);
    CHECK((oracle::visitation(mdp, oracle::uniform_table(3, 2)) - d0).norm() <= 1e-8);
  }

  TEST_CASE("gradient agrees with finite differences of J") {
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
      const TabularMdp mdp = make_chain_mdp(3 + trial % 3, 100 + trial);
      const int n = mdp.n_states();
      const auto states = encoded_states(n, StateEncoding::one_hot);
      SoftmaxPolicy policy = random_tabular(n, 2, StateEncoding::one_hot, false, 1.0, rng);
      const auto g = oracle::objective_and_gradient(mdp, policy, states);
      for (int dir = 0; dir < 10; ++dir) {
        Vector u(policy.param_count());
        for (int i = 0; i < u.size(); ++i) u(i) = rng.normal();
        u.normalize();
        const double h = 1e-6;
        SoftmaxPolicy plus = policy, minus = policy;
        plus.net().apply_update(u, h);
        minus.net().apply_update(u, -h);
        const double fd = (oracle::objective(mdp, oracle::policy_table(plus, states)) -
                           oracle::objective(mdp, oracle::policy_table(minus, states))) /
                          (2 * h);
        CHECK(std::abs(fd - g.grad.dot(u)) <= 1e-5 * std::max(std::abs(fd), 1e-3));
      }
    }
  }

  TEST_CASE("fisher is symmetric PSD and solves the gradient identity") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      const TabularMdp mdp = make_chain_mdp(3 + trial % 4, 200 + trial);
      const int n = mdp.n_states();
      const auto states = encoded_states(n, StateEncoding::one_hot);
      const SoftmaxPolicy policy = random_tabular(n, 2, StateEncoding::one_hot, false, 1.5, rng);
      const auto fs = oracle::fisher_and_xstar(mdp, policy, states);
      const auto g = oracle::objective_and_gradient(mdp, policy, states);
      CHECK((fs.fisher - fs.fisher.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
      CHECK(fs.eigenvalues.minCoeff() >= -1e-10);
      CHECK((fs.fisher * fs.x_star - g.grad).norm() <= 1e-8);
      CHECK(oracle::projection_condition(mdp, policy, states, fs.x_star).norm() <= 1e-8);
      CHECK(fs.degenerate);  // uniform logit shifts are null directions
    }
  }

  TEST_CASE("minimal parameterisation has a positive definite fisher") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
      const TabularMdp mdp = make_chain_mdp(3 + trial % 4, 300 + trial);
      const int n = mdp.n_states();
      const auto states = encoded_states(n, StateEncoding::reduced_one_hot);
      const SoftmaxPolicy policy = random_tabular(n, 2, StateEncoding::reduced_one_hot, true, 1.5, rng);
      const auto fs = oracle::fisher_and_xstar(mdp, policy, states);
      const auto g = oracle::objective_and_gradient(mdp, policy, states);
      CHECK_FALSE(fs.degenerate);
      CHECK(fs.eigenvalues.minCoeff() > 0.0);
      const Vector natural = fs.fisher.ldlt().solve(g.grad);
      CHECK((natural - fs.x_star).norm() <= 1e-8);
    }
  }

  TEST_CASE("near deterministic policy has a vanishing fisher") {
    const TabularMdp mdp = make_chain_mdp(3, 11);
    const auto states = encoded_states(3, StateEncoding::one_hot);
    Mlp net({3, 2});
    Vector p = Vector::Zero(net.param_count());
    p.tail(2) << 40.0, -40.0;
    net.set_params(p);
    const auto fs = oracle::fisher_and_xstar(mdp, SoftmaxPolicy(net), states);
    CHECK(fs.fisher.cwiseAbs().maxCoeff() <= 1e-20);
  }

  TEST_CASE("bounds") {
    Rng rng(7);
    const TabularMdp mdp = make_chain_mdp(4, 12);
    const auto states = encoded_states(4, StateEncoding::one_hot);
    const SoftmaxPolicy policy = random_tabular(4, 2, StateEncoding::one_hot, false, 1.0, rng);
    const Matrix mu = oracle::uniform_table(4, 2);
    const auto b = oracle::lipschitz_and_bounds(mdp, policy, states, mu);
    CHECK(b.k2 <= 1.0);
    CHECK(b.k4 == doctest::Approx(2 * b.k2 / (1 - mdp.gamma())));
    CHECK(b.k5 == doctest::Approx(2.0));
    CHECK(b.k6 == doctest::Approx(1.0 / oracle::visitation(mdp, mu).minCoeff()));

    const auto fs = oracle::fisher_and_xstar(mdp, policy, states);
    for (int t = 0; t < 100; ++t) {
      Vector x1(policy.param_count()), x2(policy.param_count());
      for (int i = 0; i < x1.size(); ++i) x1(i) = rng.normal(), x2(i) = rng.normal();
      CHECK((fs.drift(x1) - fs.drift(x2)).norm() <= b.fisher_norm * (x1 - x2).norm() * (1 + 1e-10));
    }

    Matrix bad = mu;
    bad(0, 0) = 1.0;
    bad(0, 1) = 0.0;
    CHECK_THROWS_AS(oracle::lipschitz_and_bounds(mdp, policy, states, bad), DomainError);

    std::vector<Vector> rows;
    for (int s = 0; s < 4; ++s)
      for (int a = 0; a < 2; ++a) rows.push_back(mdp.transition(s, a));
    const TabularMdp g9(4, 2, rows, Matrix::Ones(4, 2), 0.9, mdp.initial_dist());
    CHECK(oracle::lipschitz_and_bounds(g9, policy, states, mu).k4 == doctest::Approx(20.0));
  }

  TEST_CASE("solve bundles consistent quantities") {
    Rng rng(8);
    const TabularMdp mdp = make_chain_mdp(4, 13);
    const auto states = encoded_states(4, StateEncoding::one_hot);
    const SoftmaxPolicy policy = random_tabular(4, 2, StateEncoding::one_hot, false, 1.0, rng);
    const auto sol = oracle::solve(mdp, policy, states);
    CHECK(std::abs(sol.d_visit.sum() - 1.0) <= 1e-10);
    CHECK(std::abs(sol.d_stat.sum() - 1.0) <= 1e-10);
    CHECK(sol.j == doctest::Approx((1 - mdp.gamma()) * mdp.initial_dist().dot(sol.v)));
    CHECK((sol.fisher * sol.x_star - sol.grad_j).norm() <= 1e-8);
  }

  TEST_CASE("single state chain has a zero gradient") {
    const SoftmaxPolicy policy = tabular_policy("chain:1:5", 3);
    const auto env = make_env("chain:1:5");
    const auto& mdp = dynamic_cast<const TabularEnv&>(*env).mdp();
    const auto g = oracle::objective_and_gradient(mdp, policy, encoded_states(1, StateEncoding::one_hot));
    CHECK(g.grad.norm() == 0.0);
  }

  TEST_CASE("size cap") {
    const TabularMdp mdp = make_chain_mdp(3, 1);
    Mlp big({3, 70, 2});
    CHECK_THROWS_AS(oracle::fisher_and_xstar(mdp, SoftmaxPolicy(big), encoded_states(3, StateEncoding::one_hot)),
                    DomainError);
  }
}
