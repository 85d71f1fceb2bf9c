#include "natgrad/oracle.hpp"

#include <cmath>

#include <fmt/format.h>

#include "natgrad/errors.hpp"

namespace natgrad::oracle {

namespace {

void check_table(const TabularMdp& mdp, const Matrix& pi) {
  if (pi.rows() != mdp.n_states() || pi.cols() != mdp.n_actions())
    throw DomainError("oracle: policy table has the wrong shape");
}

void check_states(const TabularMdp& mdp, std::span<const Vector> states) {
  if (static_cast<int>(states.size()) != mdp.n_states())
    throw DomainError("oracle: need one observation per state");
}

void check_size(const SoftmaxPolicy& policy) {
  if (policy.param_count() > kMaxParams)
    throw DomainError(fmt::format("oracle: {} policy parameters exceeds the limit of {}", policy.param_count(), kMaxParams));
}

}  // namespace

Matrix policy_table(const SoftmaxPolicy& policy, std::span<const Vector> states) {
  Matrix pi(static_cast<Eigen::Index>(states.size()), policy.n_actions());
  for (std::size_t s = 0; s < states.size(); ++s) pi.row(static_cast<Eigen::Index>(s)) = policy.action_probs(states[s]);
  return pi;
}

Matrix uniform_table(int n_states, int n_actions) { return Matrix::Constant(n_states, n_actions, 1.0 / n_actions); }

Matrix state_transition(const TabularMdp& mdp, const Matrix& pi) {
  check_table(mdp, pi);
  Matrix p = Matrix::Zero(mdp.n_states(), mdp.n_states());
  for (int s = 0; s < mdp.n_states(); ++s)
    for (int a = 0; a < mdp.n_actions(); ++a) p.row(s) += pi(s, a) * mdp.transition(s, a).transpose();
  return p;
}

Vector expected_reward(const TabularMdp& mdp, const Matrix& pi) {
  check_table(mdp, pi);
  return pi.cwiseProduct(mdp.reward()).rowwise().sum();
}

Values exact_values(const TabularMdp& mdp, const Matrix& pi) {
  const int n = mdp.n_states();
  const Matrix system = Matrix::Identity(n, n) - mdp.gamma() * state_transition(mdp, pi);
  Values out;
  out.v = system.partialPivLu().solve(expected_reward(mdp, pi));
  out.q.resize(n, mdp.n_actions());
  for (int s = 0; s < n; ++s)
    for (int a = 0; a < mdp.n_actions(); ++a)
      out.q(s, a) = mdp.reward(s, a) + mdp.gamma() * mdp.transition(s, a).dot(out.v);
  out.adv = out.q.colwise() - out.v;
  return out;
}

Vector visitation(const TabularMdp& mdp, const Matrix& pi) {
  const int n = mdp.n_states();
  const Matrix system = Matrix::Identity(n, n) - mdp.gamma() * state_transition(mdp, pi);
  // d^T (I - gamma P) = (1 - gamma) d0^T
  Vector d = system.transpose().partialPivLu().solve((1.0 - mdp.gamma()) * mdp.initial_dist());
  return d;
}

Vector stationary(const TabularMdp& mdp, const Matrix& pi) {
  const int n = mdp.n_states();
  const Matrix generator = state_transition(mdp, pi).transpose() - Matrix::Identity(n, n);
  Eigen::FullPivLU<Matrix> lu(generator);
  lu.setThreshold(1e-10);
  if (lu.rank() != n - 1) throw DegeneracyError("oracle: stationary distribution is not unique");
  Matrix system = generator;
  system.row(n - 1).setOnes();
  Vector rhs = Vector::Zero(n);
  rhs(n - 1) = 1.0;
  Vector d = system.fullPivLu().solve(rhs);
  if (!d.allFinite() || (d.array() < -1e-12).any()) throw DegeneracyError("oracle: stationary solve failed");
  return d.cwiseMax(0.0);
}

double objective(const TabularMdp& mdp, const Matrix& pi) {
  return (1.0 - mdp.gamma()) * mdp.initial_dist().dot(exact_values(mdp, pi).v);
}

double finite_horizon_return(const TabularMdp& mdp, const Matrix& pi, int horizon) {
  const Matrix p = state_transition(mdp, pi);
  const Vector r = expected_reward(mdp, pi);
  Vector dist = mdp.initial_dist();
  double total = 0.0;
  for (int t = 0; t < horizon; ++t) {
    total += dist.dot(r);
    dist = p.transpose() * dist;
  }
  return total;
}

std::vector<FlatGrad> score_table(const SoftmaxPolicy& policy, std::span<const Vector> states) {
  std::vector<FlatGrad> scores;
  scores.reserve(states.size() * policy.n_actions());
  for (const auto& obs : states)
    for (int a = 0; a < policy.n_actions(); ++a) scores.push_back(policy.compat_features(obs, a));
  return scores;
}

ObjectiveGradient objective_and_gradient(const TabularMdp& mdp, const SoftmaxPolicy& policy,
                                         std::span<const Vector> states) {
  check_states(mdp, states);
  const Matrix pi = policy_table(policy, states);
  const Values values = exact_values(mdp, pi);
  const Vector d = visitation(mdp, pi);
  const auto scores = score_table(policy, states);
  ObjectiveGradient out;
  out.j = (1.0 - mdp.gamma()) * mdp.initial_dist().dot(values.v);
  out.grad = FlatGrad::Zero(policy.param_count());
  const int n_actions = mdp.n_actions();
  for (int s = 0; s < mdp.n_states(); ++s)
    for (int a = 0; a < n_actions; ++a) out.grad += d(s) * pi(s, a) * values.adv(s, a) * scores[s * n_actions + a];
  return out;
}

FisherSolution fisher_and_xstar(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states) {
  check_states(mdp, states);
  check_size(policy);
  const Matrix pi = policy_table(policy, states);
  const Values values = exact_values(mdp, pi);
  const Vector d = visitation(mdp, pi);
  const auto scores = score_table(policy, states);
  const int k = policy.param_count();
  const int n_actions = mdp.n_actions();

  FisherSolution out;
  out.fisher = Matrix::Zero(k, k);
  out.score_advantage = Vector::Zero(k);
  for (int s = 0; s < mdp.n_states(); ++s) {
    for (int a = 0; a < n_actions; ++a) {
      const double weight = d(s) * pi(s, a);
      const FlatGrad& f = scores[s * n_actions + a];
      out.fisher.noalias() += weight * f * f.transpose();
      out.score_advantage += weight * values.adv(s, a) * f;
    }
  }
  out.fisher = 0.5 * (out.fisher + out.fisher.transpose());

  Eigen::SelfAdjointEigenSolver<Matrix> eig(out.fisher);
  out.eigenvalues = eig.eigenvalues();
  const double largest = std::max(out.eigenvalues.cwiseAbs().maxCoeff(), 1e-300);
  const double cutoff = largest * 1e-10 * k;
  out.degenerate = out.eigenvalues(0) <= cutoff;
  // Least-norm solve on the retained eigenspace.
  const Vector projected = eig.eigenvectors().transpose() * out.score_advantage;
  Vector coeffs = Vector::Zero(k);
  for (int i = 0; i < k; ++i)
    if (out.eigenvalues(i) > cutoff) coeffs(i) = projected(i) / out.eigenvalues(i);
  out.x_star = eig.eigenvectors() * coeffs;
  return out;
}

Vector projection_condition(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states,
                            const Vector& x) {
  check_states(mdp, states);
  const Matrix pi = policy_table(policy, states);
  const Values values = exact_values(mdp, pi);
  const Vector d = visitation(mdp, pi);
  const int n_actions = mdp.n_actions();
  Vector residual = Vector::Zero(policy.param_count());
  for (int s = 0; s < mdp.n_states(); ++s) {
    for (int a = 0; a < n_actions; ++a) {
      const FlatGrad f = policy.compat_features(states[s], a);
      residual += d(s) * pi(s, a) * (values.adv(s, a) - x.dot(f)) * f;
    }
  }
  return residual;
}

Bounds lipschitz_and_bounds(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states,
                            const Matrix& mu) {
  check_states(mdp, states);
  check_table(mdp, mu);
  if ((mu.array() <= 0.0).any()) throw DomainError("lipschitz_and_bounds: behaviour policy lacks full support");
  const FisherSolution fisher = fisher_and_xstar(mdp, policy, states);
  Bounds b;
  b.fisher_norm = fisher.eigenvalues.cwiseAbs().maxCoeff();
  b.k2 = mdp.reward().cwiseAbs().maxCoeff();
  for (const auto& f : score_table(policy, states)) b.k3 = std::max(b.k3, f.norm());
  b.k4 = 2.0 * b.k2 / (1.0 - mdp.gamma());
  b.k5 = 1.0 / mu.minCoeff();
  b.k6 = 1.0 / visitation(mdp, mu).minCoeff();
  return b;
}

ExactSolution solve(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states) {
  check_states(mdp, states);
  const Matrix pi = policy_table(policy, states);
  ExactSolution out;
  Values values = exact_values(mdp, pi);
  out.v = std::move(values.v);
  out.q = std::move(values.q);
  out.adv = std::move(values.adv);
  out.d_stat = stationary(mdp, pi);
  out.d_visit = visitation(mdp, pi);
  const ObjectiveGradient og = objective_and_gradient(mdp, policy, states);
  out.j = og.j;
  out.grad_j = og.grad;
  FisherSolution fisher = fisher_and_xstar(mdp, policy, states);
  out.fisher = std::move(fisher.fisher);
  out.x_star = std::move(fisher.x_star);
  out.degenerate = fisher.degenerate;
  return out;
}

}  // namespace natgrad::oracle
