#include "natgrad/policy.hpp"

#include <cmath>

#include <fmt/format.h>

#include "natgrad/errors.hpp"

namespace natgrad {

Vector softmax(const Vector& logits) {
  const double shift = logits.maxCoeff();
  Vector p = (logits.array() - shift).exp();
  return p / p.sum();
}

int sample_from(const Vector& probs, Rng& rng) {
  return rng.categorical({probs.data(), static_cast<std::size_t>(probs.size())});
}

SoftmaxPolicy::SoftmaxPolicy(Mlp net, bool reference_logit) : net_(std::move(net)), reference_logit_(reference_logit) {}

Vector SoftmaxPolicy::logits(const Vector& obs) const {
  Vector out = net_.forward(obs);
  if (!reference_logit_) return out;
  Vector full = Vector::Zero(out.size() + 1);
  full.head(out.size()) = out;
  return full;
}

Vector SoftmaxPolicy::action_probs(const Vector& obs) const { return softmax(logits(obs)); }

int SoftmaxPolicy::sample_action(const Vector& obs, Rng& rng) const { return sample_from(action_probs(obs), rng); }

FlatGrad SoftmaxPolicy::compat_features(const Vector& obs, int action) const {
  Vector probs;
  return compat_features(obs, action, probs);
}

FlatGrad SoftmaxPolicy::compat_features(const Vector& obs, int action, Vector& probs) const {
  if (action < 0 || action >= n_actions()) throw DomainError(fmt::format("compat_features: bad action {}", action));
  ForwardTape tape;
  Vector out = net_.forward(obs, tape);
  if (reference_logit_) {
    Vector full = Vector::Zero(out.size() + 1);
    full.head(out.size()) = out;
    probs = softmax(full);
  } else {
    probs = softmax(out);
  }
  // d log pi(a) / d logits = e_a - pi
  Vector cograd = -probs.head(net_.output_dim());
  if (action < net_.output_dim()) cograd(action) += 1.0;
  return net_.backward(tape, cograd);
}

// ---------------------------------------------------------------------------

ValueCritic::ValueCritic(Mlp net, double gamma, double lambda)
    : net_(std::move(net)), gamma_(gamma), lambda_(lambda), trace_(Vector::Zero(net_.param_count())) {
  if (net_.output_dim() != 1) throw DomainError("ValueCritic: network must have a single output");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("ValueCritic: lambda must lie in [0, 1]");
}

double ValueCritic::value(const Vector& obs) const { return net_.forward(obs)(0); }

double ValueCritic::td_error(double reward, const Vector& obs, const Vector& next_obs, bool terminated) const {
  const double next = terminated ? 0.0 : value(next_obs);
  return reward + gamma_ * next - value(obs);
}

void ValueCritic::begin_episode() { trace_.setZero(); }

double ValueCritic::gradient_and_delta(const TdSample& sample, FlatGrad& grad) const {
  ForwardTape tape;
  const double v = net_.forward(sample.obs, tape)(0);
  const double next = sample.terminated ? 0.0 : value(sample.next_obs);
  const double delta = sample.reward + gamma_ * next - v;
  grad = net_.backward(tape, Vector::Ones(1));
  return delta;
}

namespace {

void check_finite(double delta, double correction) {
  if (!std::isfinite(delta)) throw NumericError("value update: non-finite TD error");
  if (!std::isfinite(correction) || correction < 0.0) throw NumericError("value update: invalid correction weight");
}

}  // namespace

double ValueCritic::update(const TdSample& sample, double alpha, double correction) {
  return lambda_ > 0.0 ? update_trace(sample, alpha, correction) : update_td0(sample, alpha, correction);
}

double ValueCritic::update_td0(const TdSample& sample, double alpha, double correction) {
  FlatGrad grad;
  const double delta = gradient_and_delta(sample, grad);
  check_finite(delta, correction);
  net_.apply_update(grad, alpha * correction * delta);
  return delta;
}

double ValueCritic::update_trace(const TdSample& sample, double alpha, double correction) {
  FlatGrad grad;
  const double delta = gradient_and_delta(sample, grad);
  check_finite(delta, correction);
  trace_ = gamma_ * lambda_ * trace_ + grad;
  net_.apply_update(trace_, alpha * correction * delta);
  return delta;
}

// ---------------------------------------------------------------------------

void AdvantageCritic::set_x(const Vector& x) {
  if (x.size() != x_.size()) throw DomainError("AdvantageCritic::set_x: length mismatch");
  x_ = x;
}

double AdvantageCritic::predict(const FlatGrad& features) const {
  if (features.size() != x_.size()) throw DomainError("AdvantageCritic: feature length mismatch");
  return x_.dot(features);
}

void AdvantageCritic::update(const FlatGrad& features, double delta, double alpha, double correction) {
  const double residual = delta - predict(features);
  if (!std::isfinite(residual) || !std::isfinite(correction) || !std::isfinite(alpha))
    throw NumericError("advantage update: non-finite input");
  x_ += (alpha * correction * residual) * features;
}

}  // namespace natgrad
