#include "natgrad/ratio.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "natgrad/errors.hpp"
#include "natgrad/oracle.hpp"

namespace natgrad {

double rho(const SoftmaxPolicy& policy, const Vector& mu_probs, const Vector& obs, int action) {
  if (action < 0 || action >= mu_probs.size()) throw DomainError("rho: action out of range");
  const double mu = mu_probs(action);
  if (!(mu > 0.0)) throw DomainError("rho: behaviour policy gives the action zero probability");
  return policy.action_probs(obs)(action) / mu;
}

double GaussianKernel::operator()(const Vector& u, const Vector& v) const {
  return std::exp(-(u - v).squaredNorm() / (2.0 * bandwidth * bandwidth));
}

double median_bandwidth(const TransitionBatch& batch, int max_points) {
  const auto& ts = batch.transitions;
  if (ts.empty()) throw DomainError("median_bandwidth: empty batch");
  const std::size_t stride = std::max<std::size_t>(1, ts.size() / static_cast<std::size_t>(max_points));
  std::vector<const Vector*> pts;
  for (std::size_t i = 0; i < ts.size() && pts.size() < static_cast<std::size_t>(max_points); i += stride)
    pts.push_back(&ts[i].next_obs);
  std::vector<double> dists;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const double d = (*pts[i] - *pts[j]).norm();
      if (d > 0.0) dists.push_back(d);
    }
  if (dists.empty()) return 1.0;
  auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
  std::nth_element(dists.begin(), mid, dists.end());
  return *mid;
}

namespace {

/// Deduplicated view of a batch. Every distinct observation is evaluated
/// once; kernel sums run over distinct kernel points only.
struct Problem {
  std::vector<Vector> points;         // distinct observations where w is evaluated
  std::vector<int> kernel_points;     // point index for each kernel slot
  std::vector<int> trans_state;       // point of s_i
  std::vector<int> trans_next;        // point of s'_i
  std::vector<int> trans_slot;        // kernel slot of s'_i
  std::vector<double> trans_rho;
  std::vector<double> trans_weight;   // normalised to sum 1
  std::vector<int> start_point;
  std::vector<int> start_slot;
  std::vector<double> start_weight;   // normalised to sum 1
  Matrix kernel;                      // over kernel slots

  int point_of(const Vector& v, std::map<std::vector<double>, int>& index) {
    std::vector<double> key(v.data(), v.data() + v.size());
    auto [it, inserted] = index.emplace(std::move(key), static_cast<int>(points.size()));
    if (inserted) points.push_back(v);
    return it->second;
  }
};

Problem build_problem(std::span<const RatioTransition* const> transitions, std::span<const Vector* const> starts,
                      const GaussianKernel& kernel) {
  Problem p;
  std::map<std::vector<double>, int> index;
  std::map<int, int> slot_of_point;
  auto slot = [&](int point) {
    auto [it, inserted] = slot_of_point.emplace(point, static_cast<int>(p.kernel_points.size()));
    if (inserted) p.kernel_points.push_back(point);
    return it->second;
  };
  double total = 0.0;
  for (const RatioTransition* t : transitions) {
    p.trans_state.push_back(p.point_of(t->obs, index));
    const int next = p.point_of(t->next_obs, index);
    p.trans_next.push_back(next);
    p.trans_slot.push_back(slot(next));
    p.trans_rho.push_back(t->rho);
    p.trans_weight.push_back(t->weight);
    total += t->weight;
  }
  if (!(total > 0.0)) throw DomainError("ratio loss: transition weights sum to zero");
  for (double& w : p.trans_weight) w /= total;
  for (const Vector* s : starts) {
    const int point = p.point_of(*s, index);
    p.start_point.push_back(point);
    p.start_slot.push_back(slot(point));
    p.start_weight.push_back(1.0 / static_cast<double>(starts.size()));
  }
  const auto n = static_cast<Eigen::Index>(p.kernel_points.size());
  p.kernel.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    p.kernel(i, i) = 1.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double k = kernel(p.points[p.kernel_points[i]], p.points[p.kernel_points[j]]);
      p.kernel(i, j) = k;
      p.kernel(j, i) = k;
    }
  }
  return p;
}

struct Coefficients {
  Vector transition_part;  // per kernel slot
  Vector start_part;       // per kernel slot
  double diag_transition = 0.0;
  double diag_start = 0.0;
  double z = 0.0;          // weighted batch mean of w(s_i)
};

Coefficients coefficients(const Problem& p, const Vector& w, RatioTarget target, double gamma) {
  const auto slots = static_cast<Eigen::Index>(p.kernel_points.size());
  Coefficients c;
  c.transition_part = Vector::Zero(slots);
  c.start_part = Vector::Zero(slots);
  const double scale = target == RatioTarget::visitation ? gamma : 1.0;
  for (std::size_t i = 0; i < p.trans_state.size(); ++i) {
    const double u = p.trans_weight[i] * scale * delta_term(w(p.trans_state[i]), p.trans_rho[i], w(p.trans_next[i]));
    c.transition_part(p.trans_slot[i]) += u;
    c.diag_transition += u * u;
    c.z += p.trans_weight[i] * w(p.trans_state[i]);
  }
  if (target == RatioTarget::visitation) {
    for (std::size_t j = 0; j < p.start_point.size(); ++j) {
      const double u = p.start_weight[j] * (1.0 - gamma) * (1.0 - w(p.start_point[j]));
      c.start_part(p.start_slot[j]) += u;
      c.diag_start += u * u;
    }
  }
  return c;
}

double sum_squares(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

/// Unbiased form: diagonal (i == j) terms removed within each sample block.
double u_statistic(const Problem& p, const Coefficients& c) {
  auto block = [](const Vector& u, const Matrix& k, double diag, double weight_sq) {
    const double full = u.dot(k * u);
    const double denom = 1.0 - weight_sq;
    if (denom <= 1e-15) return full;  // a single sample: no distinct pairs
    return (full - diag) / denom;
  };
  double loss = block(c.transition_part, p.kernel, c.diag_transition, sum_squares(p.trans_weight));
  if (!p.start_point.empty()) {
    loss += 2.0 * c.transition_part.dot(p.kernel * c.start_part);
    loss += block(c.start_part, p.kernel, c.diag_start, sum_squares(p.start_weight));
  }
  return loss;
}

Vector evaluate_points(const RatioFn& w, const Problem& p) {
  Vector out(static_cast<Eigen::Index>(p.points.size()));
  for (std::size_t i = 0; i < p.points.size(); ++i) out(static_cast<Eigen::Index>(i)) = w(p.points[i]);
  return out;
}

std::vector<const RatioTransition*> all_transitions(const TransitionBatch& batch) {
  std::vector<const RatioTransition*> out;
  out.reserve(batch.transitions.size());
  for (const auto& t : batch.transitions) out.push_back(&t);
  return out;
}

std::vector<const Vector*> all_starts(const TransitionBatch& batch) {
  std::vector<const Vector*> out;
  out.reserve(batch.start_states.size());
  for (const auto& s : batch.start_states) out.push_back(&s);
  return out;
}

}  // namespace

double kernel_loss_stationary(const RatioFn& w, const TransitionBatch& batch, const GaussianKernel& kernel) {
  if (batch.transitions.size() < 2) throw DomainError("kernel_loss_stationary: need at least two transitions");
  const auto ts = all_transitions(batch);
  const Problem p = build_problem(ts, {}, kernel);
  const Coefficients c = coefficients(p, evaluate_points(w, p), RatioTarget::stationary, 1.0);
  return u_statistic(p, c);
}

double kernel_loss_visitation(const RatioFn& w, const TransitionBatch& batch, double gamma,
                              const GaussianKernel& kernel) {
  if (batch.transitions.empty() || batch.start_states.empty())
    throw DomainError("kernel_loss_visitation: need transitions and start states");
  const auto ts = all_transitions(batch);
  const auto ss = all_starts(batch);
  const Problem p = build_problem(ts, ss, kernel);
  const Coefficients c = coefficients(p, evaluate_points(w, p), RatioTarget::visitation, gamma);
  return u_statistic(p, c);
}

// ---------------------------------------------------------------------------
// RatioEstimator

RatioEstimator RatioEstimator::tabular(int n_states, StateEncoding encoding, RatioTarget target, double gamma) {
  if (n_states < 1) throw DomainError("RatioEstimator: need at least one state");
  RatioEstimator est(RatioMode::tabular_exact, target, gamma);
  est.n_states_ = n_states;
  est.encoding_ = encoding;
  est.table_ = Vector::Ones(n_states);
  return est;
}

RatioEstimator RatioEstimator::network(Mlp net, RatioTarget target, double gamma) {
  if (net.output_dim() != 1) throw DomainError("RatioEstimator: ratio network must have a single output");
  RatioEstimator est(RatioMode::network, target, gamma);
  est.net_.emplace(std::move(net));
  return est;
}

int RatioEstimator::state_index(const Vector& obs) const { return decode_state(obs, n_states_, encoding_); }

double RatioEstimator::operator()(const Vector& obs) const {
  if (mode_ == RatioMode::tabular_exact) return table_(state_index(obs));
  return scale_ * std::exp(net_->forward(obs)(0));
}

void RatioEstimator::set_table(const Vector& values) {
  if (mode_ != RatioMode::tabular_exact) throw StateError("RatioEstimator::set_table: not a tabular estimator");
  if (values.size() != table_.size()) throw DomainError("RatioEstimator::set_table: length mismatch");
  if ((values.array() < 0.0).any()) throw DomainError("RatioEstimator::set_table: ratios must be nonnegative");
  table_ = values;
}

namespace {

/// V-statistic loss and its gradient with respect to w at every problem point.
double loss_and_point_gradient(const Problem& p, const Vector& w, RatioTarget target, double gamma, Vector& grad) {
  const Coefficients c = coefficients(p, w, target, gamma);
  const Vector u = c.transition_part + c.start_part;
  const Vector ku = p.kernel * u;
  double loss = u.dot(ku);
  const Vector g = 2.0 * ku;  // dL/du per kernel slot
  grad = Vector::Zero(w.size());
  if (target == RatioTarget::stationary) {
    // Scale-free objective D(w / z).
    const double z = c.z;
    if (!(z > 0.0)) throw NumericError("fit_ratio: ratios collapsed to zero");
    const double inv_z2 = 1.0 / (z * z);
    for (std::size_t i = 0; i < p.trans_state.size(); ++i) {
      const double gi = p.trans_weight[i] * g(p.trans_slot[i]) * inv_z2;
      grad(p.trans_state[i]) += gi * p.trans_rho[i] - 2.0 * loss * inv_z2 / z * p.trans_weight[i];
      grad(p.trans_next[i]) -= gi;
    }
    loss *= inv_z2;
  } else {
    for (std::size_t i = 0; i < p.trans_state.size(); ++i) {
      const double gi = p.trans_weight[i] * gamma * g(p.trans_slot[i]);
      grad(p.trans_state[i]) += gi * p.trans_rho[i];
      grad(p.trans_next[i]) -= gi;
    }
    for (std::size_t j = 0; j < p.start_point.size(); ++j)
      grad(p.start_point[j]) -= p.start_weight[j] * (1.0 - gamma) * g(p.start_slot[j]);
  }
  return loss;
}

void draw_minibatch(const TransitionBatch& batch, int size, Rng& rng, std::vector<const RatioTransition*>& ts,
                    std::vector<const Vector*>& ss) {
  ts.clear();
  ss.clear();
  std::vector<double> cumulative;
  cumulative.reserve(batch.transitions.size());
  double acc = 0.0;
  for (const auto& t : batch.transitions) cumulative.push_back(acc += t.weight);
  for (int i = 0; i < size; ++i) {
    const double u = rng.uniform() * acc;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    if (it == cumulative.end()) --it;
    ts.push_back(&batch.transitions[static_cast<std::size_t>(it - cumulative.begin())]);
  }
  const int starts = std::min<int>(size, static_cast<int>(batch.start_states.size()));
  for (int j = 0; j < starts; ++j) ss.push_back(&batch.start_states[rng.below(batch.start_states.size())]);
}

}  // namespace

double fit_ratio(RatioEstimator& est, const TransitionBatch& batch, int steps, double lr, Rng* rng) {
  if (steps < 1) throw DomainError("fit_ratio: steps must be at least 1");
  if (!(lr > 0.0)) throw DomainError("fit_ratio: learning rate must be positive");
  if (batch.transitions.empty()) throw DomainError("fit_ratio: empty batch");
  const bool visitation = est.target() == RatioTarget::visitation;
  if (visitation && batch.start_states.empty()) throw DomainError("fit_ratio: visitation target needs start states");
  const bool use_minibatch = est.minibatch > 0 && static_cast<std::size_t>(est.minibatch) < batch.transitions.size();
  if (use_minibatch && rng == nullptr) throw DomainError("fit_ratio: minibatch fitting needs a generator");

  const GaussianKernel kernel{est.bandwidth.value_or(median_bandwidth(batch))};
  const auto full_ts = all_transitions(batch);
  const auto full_ss = visitation ? all_starts(batch) : std::vector<const Vector*>{};
  std::optional<Problem> full;
  if (!use_minibatch) full.emplace(build_problem(full_ts, full_ss, kernel));

  std::vector<const RatioTransition*> ts;
  std::vector<const Vector*> ss;
  double loss = 0.0;
  for (int step = 0; step < steps; ++step) {
    std::optional<Problem> local;
    if (use_minibatch) {
      draw_minibatch(batch, est.minibatch, *rng, ts, ss);
      if (!visitation) ss.clear();
      // Minibatch draws are already weight-proportional.
      local.emplace(build_problem(ts, ss, kernel));
      std::fill(local->trans_weight.begin(), local->trans_weight.end(), 1.0 / static_cast<double>(ts.size()));
    }
    const Problem& p = use_minibatch ? *local : *full;

    Vector grad;
    if (est.mode() == RatioMode::tabular_exact) {
      Vector w(static_cast<Eigen::Index>(p.points.size()));
      std::vector<int> state(p.points.size());
      for (std::size_t i = 0; i < p.points.size(); ++i) {
        state[i] = est.state_index(p.points[i]);
        w(static_cast<Eigen::Index>(i)) = est.table()(state[i]);
      }
      loss = loss_and_point_gradient(p, w, est.target(), est.gamma(), grad);
      if (!std::isfinite(loss) || !grad.allFinite()) throw NumericError("fit_ratio: non-finite loss");
      Vector table_grad = Vector::Zero(est.table().size());
      for (std::size_t i = 0; i < p.points.size(); ++i) table_grad(state[i]) += grad(static_cast<Eigen::Index>(i));
      est.set_table((est.table() - lr * table_grad).cwiseMax(0.0));
    } else {
      Mlp& net = est.net();
      std::vector<ForwardTape> tapes(p.points.size());
      Vector w(static_cast<Eigen::Index>(p.points.size()));
      for (std::size_t i = 0; i < p.points.size(); ++i)
        w(static_cast<Eigen::Index>(i)) = est.scale() * std::exp(net.forward(p.points[i], tapes[i])(0));
      loss = loss_and_point_gradient(p, w, est.target(), est.gamma(), grad);
      if (!std::isfinite(loss) || !grad.allFinite()) throw NumericError("fit_ratio: non-finite loss");
      FlatGrad param_grad = FlatGrad::Zero(net.param_count());
      Vector cograd(1);
      for (std::size_t i = 0; i < p.points.size(); ++i) {
        const auto idx = static_cast<Eigen::Index>(i);
        if (grad(idx) == 0.0) continue;
        cograd(0) = grad(idx) * w(idx);  // d exp(o) / d o = exp(o)
        param_grad += net.backward(tapes[i], cograd);
      }
      net.apply_update(param_grad, -lr);
    }
  }

  // Normalise to unit batch mean.
  double mean = 0.0, total = 0.0;
  for (const auto& t : batch.transitions) {
    mean += t.weight * est(t.obs);
    total += t.weight;
  }
  mean /= total;
  if (!(mean > 0.0) || !std::isfinite(mean)) throw NumericError("fit_ratio: degenerate ratio estimate");
  if (est.mode() == RatioMode::tabular_exact)
    est.set_table(est.table() / mean);
  else
    est.set_scale(est.scale() / mean);
  return loss;
}

// ---------------------------------------------------------------------------

ExactRatios exact_ratios(const TabularMdp& mdp, const Matrix& pi, const Matrix& mu) {
  const int n = mdp.n_states();
  if (pi == mu) return {Vector::Ones(n), Vector::Ones(n)};
  ExactRatios out;
  const Vector d_pi = oracle::stationary(mdp, pi);
  const Vector d_mu = oracle::stationary(mdp, mu);
  const Vector v_pi = oracle::visitation(mdp, pi);
  const Vector v_mu = oracle::visitation(mdp, mu);
  if ((d_mu.array() <= 0.0).any() || (v_mu.array() <= 0.0).any())
    throw DegeneracyError("exact_ratios: behaviour distribution has empty states");
  out.w_hat = d_pi.cwiseQuotient(d_mu);
  out.w = v_pi.cwiseQuotient(v_mu);
  return out;
}

ExactRatios exact_ratios(const TabularMdp& mdp, const SoftmaxPolicy& policy, std::span<const Vector> states,
                         const Matrix& mu) {
  return exact_ratios(mdp, oracle::policy_table(policy, states), mu);
}

}  // namespace natgrad
