#pragma once

#include <span>
#include <vector>

#include "natgrad/env.hpp"
#include "natgrad/policy.hpp"

namespace natgrad::oracle {

/// Largest policy the Fisher computations accept.
inline constexpr int kMaxParams = 200;

/// pi(a|s) for every state, n_states x n_actions. `states` holds each state's observation.
Matrix policy_table(const SoftmaxPolicy& policy, std::span<const Vector> states);
Matrix uniform_table(int n_states, int n_actions);

/// P_pi(s'|s) = sum_a pi(a|s) P(s'|s,a).
Matrix state_transition(const TabularMdp& mdp, const Matrix& pi);
/// r_pi(s) = sum_a pi(a|s) r(s,a).
Vector expected_reward(const TabularMdp& mdp, const Matrix& pi);

struct Values {
  Vector v;
  Matrix q;
  Matrix adv;
};

/// V from (I - gamma P_pi) V = r_pi, then Q and A = Q - V.
Values exact_values(const TabularMdp& mdp, const Matrix& pi);

/// Discounted visitation (1 - gamma) d0^T (I - gamma P_pi)^-1.
Vector visitation(const TabularMdp& mdp, const Matrix& pi);

/// Stationary distribution of P_pi. Throws DegeneracyError if it is not unique.
Vector stationary(const TabularMdp& mdp, const Matrix& pi);

/// J = (1 - gamma) d0^T V.
double objective(const TabularMdp& mdp, const Matrix& pi);

/// Expected undiscounted return over the first `horizon` steps from d0.
double finite_horizon_return(const TabularMdp& mdp, const Matrix& pi, int horizon);

/// Score vectors grad log pi(a|s), indexed [s * n_actions + a].
std::vector<FlatGrad> score_table(const SoftmaxPolicy& policy, std::span<const Vector> states);

struct ObjectiveGradient {
  double j = 0.0;
  FlatGrad grad;
};

/// J and its gradient by exact summation of E_{d~pi, pi}[grad log pi * A].
ObjectiveGradient objective_and_gradient(const TabularMdp& mdp, const SoftmaxPolicy& policy,
                                         std::span<const Vector> states);

/// Fisher matrix, compatible-critic optimum and the mean-field drift of the
/// advantage critic.
struct FisherSolution {
  Matrix fisher;              ///< E[f f^T] under d~pi x pi
  Vector score_advantage;     ///< E[A f] under d~pi x pi
  FlatGrad x_star;            ///< least-norm solution of F x = E[A f]
  Vector eigenvalues;         ///< ascending
  bool degenerate = false;    ///< F numerically singular; x_star is the least-norm solve

  /// h(x) = E[A f] - F x.
  Vector drift(const Vector& x) const { return score_advantage - fisher * x; }
  /// || E[(A - x*.f) f] || recomputed from the stored terms.
  double projection_residual() const { return drift(x_star).norm(); }
};

/// Throws DomainError when the policy has more than kMaxParams parameters.
FisherSolution fisher_and_xstar(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states);

/// Projection residual E[(A - x.f) f] evaluated by direct summation over (s, a).
Vector projection_condition(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states,
                            const Vector& x);

struct Bounds {
  double fisher_norm = 0.0;  ///< spectral norm of F; Lipschitz constant of h
  double k2 = 0.0;           ///< max |r(s,a)|
  double k3 = 0.0;           ///< max ||grad log pi(a|s)||
  double k4 = 0.0;           ///< 2 k2 / (1 - gamma)
  double k5 = 0.0;           ///< 1 / min mu(a|s)
  double k6 = 0.0;           ///< 1 / min d~mu(s)
};

/// Throws DomainError if mu lacks full support.
Bounds lipschitz_and_bounds(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states,
                            const Matrix& mu);

struct ExactSolution {
  Vector v;
  Matrix q;
  Matrix adv;
  Vector d_stat;
  Vector d_visit;
  double j = 0.0;
  Matrix fisher;
  FlatGrad grad_j;
  FlatGrad x_star;
  bool degenerate = false;
};

ExactSolution solve(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states);

}  // namespace natgrad::oracle
