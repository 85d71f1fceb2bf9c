#pragma once

#include "natgrad/mlp.hpp"
#include "natgrad/rng.hpp"

namespace natgrad {

/// Numerically stable softmax (max-subtracted).
Vector softmax(const Vector& logits);

/// Softmax policy over network logits.
///
/// With `reference_logit` the network emits n_actions - 1 logits and the last
/// action's logit is pinned at zero. Combined with a reduced one-hot state
/// code this gives a minimal tabular parameterisation with a nonsingular
/// Fisher matrix.
class SoftmaxPolicy {
 public:
  explicit SoftmaxPolicy(Mlp net, bool reference_logit = false);

  int n_actions() const { return net_.output_dim() + (reference_logit_ ? 1 : 0); }
  int param_count() const { return net_.param_count(); }
  bool reference_logit() const { return reference_logit_; }

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

  Vector logits(const Vector& obs) const;
  Vector action_probs(const Vector& obs) const;
  int sample_action(const Vector& obs, Rng& rng) const;

  /// Score vector grad_theta log pi(a|s), flattened in canonical layout.
  FlatGrad compat_features(const Vector& obs, int action) const;
  /// Same, also returning the action probabilities from the shared forward pass.
  FlatGrad compat_features(const Vector& obs, int action, Vector& probs) const;

 private:
  Mlp net_;
  bool reference_logit_;
};

/// Draws an index from a probability vector.
int sample_from(const Vector& probs, Rng& rng);

struct TdSample {
  Vector obs;
  double reward = 0.0;
  Vector next_obs;
  bool terminated = false;
};

/// State-value critic V_psi with optional accumulating eligibility trace.
class ValueCritic {
 public:
  ValueCritic(Mlp net, double gamma, double lambda = 0.0);

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  double gamma() const { return gamma_; }
  double lambda() const { return lambda_; }
  const FlatGrad& trace() const { return trace_; }

  double value(const Vector& obs) const;
  /// r + gamma V(s') - V(s); V(s') is taken as 0 only on true termination.
  double td_error(double reward, const Vector& obs, const Vector& next_obs, bool terminated) const;

  /// Zeroes the eligibility trace.
  void begin_episode();

  /// TD(lambda) update when lambda > 0, plain TD(0) otherwise. Returns the
  /// TD error computed before the parameters moved.
  double update(const TdSample& sample, double alpha, double correction);
  /// psi <- psi + alpha * correction * delta * grad V(s).
  double update_td0(const TdSample& sample, double alpha, double correction);
  /// z <- gamma lambda z + grad V(s); psi <- psi + alpha * correction * delta * z.
  double update_trace(const TdSample& sample, double alpha, double correction);

 private:
  double gradient_and_delta(const TdSample& sample, FlatGrad& grad) const;

  Mlp net_;
  double gamma_;
  double lambda_;
  FlatGrad trace_;
};

/// Linear advantage critic A(s, a) ~ x . grad log pi(a|s) on compatible features.
class AdvantageCritic {
 public:
  explicit AdvantageCritic(int k) : x_(Vector::Zero(k)) {}

  const Vector& x() const { return x_; }
  void set_x(const Vector& x);
  int size() const { return static_cast<int>(x_.size()); }

  double predict(const FlatGrad& features) const;
  /// x <- x + alpha * correction * (delta - x.f) * f.
  void update(const FlatGrad& features, double delta, double alpha, double correction);

 private:
  Vector x_;
};

}  // namespace natgrad
