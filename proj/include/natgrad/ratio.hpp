#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "natgrad/env.hpp"
#include "natgrad/mlp.hpp"
#include "natgrad/policy.hpp"

namespace natgrad {

/// Importance weight pi(a|s) / mu(a|s). Throws DomainError when mu(a|s) = 0.
double rho(const SoftmaxPolicy& policy, const Vector& mu_probs, const Vector& obs, int action);

/// Transition residual w(s) rho(s, a) - w(s').
inline double delta_term(double w_s, double rho_val, double w_next) { return w_s * rho_val - w_next; }

/// One behaviour-policy transition with its current importance weight.
struct RatioTransition {
  Vector obs;
  int action = 0;
  Vector next_obs;
  double rho = 1.0;
  double weight = 1.0;  ///< sampling weight; discounted-episode weights for the visitation loss
};

struct TransitionBatch {
  std::vector<RatioTransition> transitions;
  std::vector<Vector> start_states;  ///< s0 ~ d0, used by the visitation loss
};

/// k(u, v) = exp(-||u - v||^2 / (2 h^2)).
struct GaussianKernel {
  double bandwidth = 1.0;
  double operator()(const Vector& u, const Vector& v) const;
};

/// Median of the nonzero pairwise distances between next-states (at most
/// `max_points` of them, evenly strided). Falls back to 1 when all coincide.
double median_bandwidth(const TransitionBatch& batch, int max_points = 256);

using RatioFn = std::function<double(const Vector&)>;

/// U-statistic estimate of E[Delta Delta' k(s', s'')] over ordered pairs of
/// distinct transitions. Unbiased, so it can dip slightly below zero.
double kernel_loss_stationary(const RatioFn& w, const TransitionBatch& batch, const GaussianKernel& kernel);

/// U-statistic estimate of the squared RKHS norm of
/// gamma E[Delta f(s')] + (1 - gamma) E_{d0}[(1 - w(s0)) f(s0)].
double kernel_loss_visitation(const RatioFn& w, const TransitionBatch& batch, double gamma,
                              const GaussianKernel& kernel);

enum class RatioMode { tabular_exact, network };
enum class RatioTarget {
  stationary,  ///< w_hat = d_pi / d_mu, fitted with the stationary loss
  visitation,  ///< w = d~_pi / d~_mu, fitted with the visitation loss
};

/// Nonnegative state-ratio model, either one entry per tabular state or
/// `scale * exp(net(s))`.
class RatioEstimator {
 public:
  static RatioEstimator tabular(int n_states, StateEncoding encoding, RatioTarget target, double gamma);
  static RatioEstimator network(Mlp net, RatioTarget target, double gamma);

  double operator()(const Vector& obs) const;

  RatioMode mode() const { return mode_; }
  RatioTarget target() const { return target_; }
  double gamma() const { return gamma_; }

  const Vector& table() const { return table_; }
  void set_table(const Vector& values);
  int state_index(const Vector& obs) const;

  Mlp& net() { return *net_; }
  const Mlp& net() const { return *net_; }
  double scale() const { return scale_; }
  void set_scale(double s) { scale_ = s; }

  /// Fixed kernel bandwidth; the median heuristic is used when unset.
  std::optional<double> bandwidth;
  /// Transitions per gradient step; 0 uses the whole batch.
  int minibatch = 0;

 private:
  RatioEstimator(RatioMode mode, RatioTarget target, double gamma) : mode_(mode), target_(target), gamma_(gamma) {}

  RatioMode mode_;
  RatioTarget target_;
  double gamma_;
  int n_states_ = 0;
  StateEncoding encoding_ = StateEncoding::one_hot;
  Vector table_;
  std::optional<Mlp> net_;
  double scale_ = 1.0;
};

/// Runs `steps` gradient-descent iterations on the estimator's kernel loss
/// (V-statistic form, normalised by the batch mean of w for the stationary
/// target), then rescales so the batch mean of w is 1. `rng` drives
/// minibatch sampling and may be null when `minibatch == 0`. Returns the final loss.
double fit_ratio(RatioEstimator& estimator, const TransitionBatch& batch, int steps, double lr, Rng* rng = nullptr);

struct ExactRatios {
  Vector w_hat;  ///< d_pi / d_mu
  Vector w;      ///< d~_pi / d~_mu
};

/// Exact ratios on a tabular MDP. Identical policy tables give exact ones.
ExactRatios exact_ratios(const TabularMdp& mdp, const Matrix& pi, const Matrix& mu);
ExactRatios exact_ratios(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states,
                         const Matrix& mu);

}  // namespace natgrad
