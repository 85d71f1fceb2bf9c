#include "natgrad/env.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "natgrad/errors.hpp"

namespace natgrad {

Vector Environment::reset(Rng& rng) {
  steps_ = 0;
  over_ = false;
  return do_reset(rng);
}

StepResult Environment::step(int action, Rng& rng) {
  if (over_) throw StateError(fmt::format("{}: step called on a finished episode", id()));
  if (action < 0 || action >= n_actions())
    throw DomainError(fmt::format("{}: action {} outside [0, {})", id(), action, n_actions()));
  Outcome out = do_step(action, rng);
  ++steps_;
  StepResult result{std::move(out.obs), out.reward, out.terminated, false};
  if (!result.terminated && steps_ >= max_steps_) result.truncated = true;
  over_ = result.done();
  return result;
}

// ---------------------------------------------------------------------------
// TabularMdp

TabularMdp::TabularMdp(int n_states, int n_actions, std::vector<Vector> transition, Matrix reward,
                       double gamma, Vector initial_dist)
    : n_states_(n_states),
      n_actions_(n_actions),
      transition_(std::move(transition)),
      reward_(std::move(reward)),
      gamma_(gamma),
      initial_dist_(std::move(initial_dist)) {
  if (n_states < 1 || n_actions < 1) throw DomainError("TabularMdp: empty state or action set");
  if (!(gamma > 0.0 && gamma < 1.0)) throw DomainError("TabularMdp: gamma must lie in (0, 1)");
  if (static_cast<int>(transition_.size()) != n_states * n_actions)
    throw DomainError("TabularMdp: transition table has wrong size");
  if (reward_.rows() != n_states || reward_.cols() != n_actions)
    throw DomainError("TabularMdp: reward table has wrong shape");
  if (initial_dist_.size() != n_states) throw DomainError("TabularMdp: d0 has wrong length");
  auto check_dist = [](const Vector& p, const char* what) {
    if ((p.array() < 0.0).any() || !p.allFinite())
      throw DomainError(fmt::format("TabularMdp: {} has a negative entry", what));
    if (std::abs(p.sum() - 1.0) > 1e-12) throw DomainError(fmt::format("TabularMdp: {} does not sum to 1", what));
  };
  for (const auto& row : transition_) {
    if (row.size() != n_states) throw DomainError("TabularMdp: transition row has wrong length");
    check_dist(row, "transition row");
  }
  check_dist(initial_dist_, "d0");
}

int TabularMdp::sample_next(int s, int a, Rng& rng) const {
  const Vector& row = transition(s, a);
  return rng.categorical({row.data(), static_cast<std::size_t>(row.size())});
}

int TabularMdp::sample_initial(Rng& rng) const {
  return rng.categorical({initial_dist_.data(), static_cast<std::size_t>(initial_dist_.size())});
}

TabularMdp make_chain_mdp(int n_states, std::uint64_t seed) {
  if (n_states < 2) throw DomainError("make_chain_mdp: need at least 2 states");
  constexpr int kActions = 2;
  Rng rng(seed, Stream::fixture);
  std::vector<Vector> transition;
  transition.reserve(n_states * kActions);
  Matrix reward(n_states, kActions);
  for (int s = 0; s < n_states; ++s) {
    for (int a = 0; a < kActions; ++a) {
      Vector noise(n_states);
      for (int j = 0; j < n_states; ++j) noise(j) = 0.05 + rng.uniform();
      noise /= noise.sum();
      const int drift = a == 0 ? std::max(s - 1, 0) : std::min(s + 1, n_states - 1);
      Vector row = 0.5 * noise;
      row(drift) += 0.5;
      row /= row.sum();
      transition.push_back(std::move(row));
      reward(s, a) = rng.uniform();
    }
  }
  Vector d0 = Vector::Constant(n_states, 1.0 / n_states);
  return TabularMdp(n_states, kActions, std::move(transition), std::move(reward), 0.95, std::move(d0));
}

TabularMdp make_single_state_mdp(std::uint64_t seed) {
  Rng rng(seed, Stream::fixture);
  const double r = rng.uniform();
  std::vector<Vector> transition(2, Vector::Ones(1));
  return TabularMdp(1, 2, std::move(transition), Matrix::Constant(1, 2, r), 0.95, Vector::Ones(1));
}

Vector encode_state(int s, int n_states, StateEncoding encoding) {
  if (s < 0 || s >= n_states) throw DomainError("encode_state: state out of range");
  if (encoding == StateEncoding::one_hot) {
    Vector v = Vector::Zero(n_states);
    v(s) = 1.0;
    return v;
  }
  Vector v = Vector::Zero(n_states - 1);
  if (s < n_states - 1) v(s) = 1.0;
  return v;
}

int decode_state(const Vector& obs, int n_states, StateEncoding encoding) {
  const int dim = encoding == StateEncoding::one_hot ? n_states : n_states - 1;
  if (obs.size() != dim) throw DomainError("decode_state: observation has wrong length");
  int hot = -1;
  for (int i = 0; i < dim; ++i) {
    if (obs(i) == 1.0 && hot < 0) {
      hot = i;
    } else if (obs(i) != 0.0) {
      throw DomainError("decode_state: observation is not a one-hot code");
    }
  }
  if (hot >= 0) return hot;
  if (encoding == StateEncoding::reduced_one_hot) return n_states - 1;
  throw DomainError("decode_state: observation is not a one-hot code");
}

std::vector<Vector> encoded_states(int n_states, StateEncoding encoding) {
  std::vector<Vector> out;
  out.reserve(n_states);
  for (int s = 0; s < n_states; ++s) out.push_back(encode_state(s, n_states, encoding));
  return out;
}

// ---------------------------------------------------------------------------
// TabularEnv

TabularEnv::TabularEnv(std::shared_ptr<const TabularMdp> mdp, std::string id, int max_steps,
                       StateEncoding encoding)
    : Environment(max_steps), mdp_(std::move(mdp)), id_(std::move(id)), encoding_(encoding) {
  if (encoding_ == StateEncoding::reduced_one_hot && mdp_->n_states() < 2)
    throw DomainError("TabularEnv: reduced encoding needs at least 2 states");
}

int TabularEnv::obs_dim() const {
  return encoding_ == StateEncoding::one_hot ? mdp_->n_states() : mdp_->n_states() - 1;
}

std::unique_ptr<Environment> TabularEnv::clone() const { return std::make_unique<TabularEnv>(*this); }

Vector TabularEnv::do_reset(Rng& rng) {
  state_ = mdp_->sample_initial(rng);
  return encode_state(state_, mdp_->n_states(), encoding_);
}

Environment::Outcome TabularEnv::do_step(int action, Rng& rng) {
  const double r = mdp_->reward(state_, action);
  state_ = mdp_->sample_next(state_, action, rng);
  return {encode_state(state_, mdp_->n_states(), encoding_), r, false};
}

// ---------------------------------------------------------------------------
// CartPole

Vector CartPole::do_reset(Rng& rng) {
  for (int i = 0; i < 4; ++i) state_(i) = rng.uniform(-0.05, 0.05);
  return state_;
}

Environment::Outcome CartPole::do_step(int action, Rng&) {
  constexpr double total_mass = kCartMass + kPoleMass;
  constexpr double pole_mass_length = kPoleMass * kHalfLength;
  const double x = state_(0), x_dot = state_(1), theta = state_(2), theta_dot = state_(3);
  const double force = action == 1 ? kForce : -kForce;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double temp = (force + pole_mass_length * theta_dot * theta_dot * sin_t) / total_mass;
  const double theta_acc =
      (kGravity * sin_t - cos_t * temp) / (kHalfLength * (4.0 / 3.0 - kPoleMass * cos_t * cos_t / total_mass));
  const double x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass;

  state_(0) = x + kTau * x_dot;
  state_(1) = x_dot + kTau * x_acc;
  state_(2) = theta + kTau * theta_dot;
  state_(3) = theta_dot + kTau * theta_acc;

  const bool failed = std::abs(state_(0)) > kPositionLimit || std::abs(state_(2)) > kAngleLimit;
  return {state_, 1.0, failed};
}

// ---------------------------------------------------------------------------
// Acrobot

namespace {

double wrap_angle(double x) {
  constexpr double pi = std::numbers::pi;
  const double span = 2.0 * pi;
  while (x > pi) x -= span;
  while (x < -pi) x += span;
  return x;
}

Eigen::Vector4d acrobot_derivative(const Eigen::Vector4d& s, double torque) {
  constexpr double m1 = Acrobot::kLinkMass, m2 = Acrobot::kLinkMass;
  constexpr double l1 = Acrobot::kLinkLength;
  constexpr double lc1 = Acrobot::kLinkCom, lc2 = Acrobot::kLinkCom;
  constexpr double i1 = Acrobot::kLinkMoi, i2 = Acrobot::kLinkMoi;
  constexpr double g = 9.8;
  constexpr double half_pi = std::numbers::pi / 2.0;
  const double theta1 = s(0), theta2 = s(1), dtheta1 = s(2), dtheta2 = s(3);

  const double d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * std::cos(theta2)) + i1 + i2;
  const double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(theta2)) + i2;
  const double phi2 = m2 * lc2 * g * std::cos(theta1 + theta2 - half_pi);
  const double phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * std::sin(theta2) -
                      2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * std::sin(theta2) +
                      (m1 * lc1 + m2 * l1) * g * std::cos(theta1 - half_pi) + phi2;
  const double ddtheta2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 * dtheta1 * std::sin(theta2) - phi2) /
                          (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
  const double ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
  return {dtheta1, dtheta2, ddtheta1, ddtheta2};
}

}  // namespace

Vector Acrobot::observe() const {
  Vector obs(6);
  obs << std::cos(state_(0)), std::sin(state_(0)), std::cos(state_(1)), std::sin(state_(1)), state_(2), state_(3);
  return obs;
}

Vector Acrobot::do_reset(Rng& rng) {
  for (int i = 0; i < 4; ++i) state_(i) = rng.uniform(-0.1, 0.1);
  return observe();
}

Environment::Outcome Acrobot::do_step(int action, Rng&) {
  const double torque = static_cast<double>(action - 1);
  const Eigen::Vector4d k1 = acrobot_derivative(state_, torque);
  const Eigen::Vector4d k2 = acrobot_derivative(state_ + 0.5 * kDt * k1, torque);
  const Eigen::Vector4d k3 = acrobot_derivative(state_ + 0.5 * kDt * k2, torque);
  const Eigen::Vector4d k4 = acrobot_derivative(state_ + kDt * k3, torque);
  Eigen::Vector4d next = state_ + kDt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

  next(0) = wrap_angle(next(0));
  next(1) = wrap_angle(next(1));
  next(2) = std::clamp(next(2), -kMaxVel1, kMaxVel1);
  next(3) = std::clamp(next(3), -kMaxVel2, kMaxVel2);
  state_ = next;

  const bool goal = -std::cos(state_(0)) - std::cos(state_(1) + state_(0)) > 1.0;
  return {observe(), goal ? 0.0 : -1.0, goal};
}

// ---------------------------------------------------------------------------
// MountainCar

Vector MountainCar::do_reset(Rng& rng) {
  state_ << rng.uniform(-0.6, -0.4), 0.0;
  return state_;
}

Environment::Outcome MountainCar::do_step(int action, Rng&) {
  double position = state_(0), velocity = state_(1);
  velocity += (action - 1) * kForce + std::cos(3.0 * position) * (-kGravity);
  velocity = std::clamp(velocity, -kMaxSpeed, kMaxSpeed);
  position += velocity;
  position = std::clamp(position, kMinPosition, kMaxPosition);
  if (position == kMinPosition && velocity < 0.0) velocity = 0.0;
  state_ << position, velocity;
  const bool goal = position >= kGoalPosition && velocity >= 0.0;
  return {state_, goal ? 0.0 : -1.0, goal};
}

// ---------------------------------------------------------------------------

bool is_tabular_id(const std::string& id) { return id.rfind("chain:", 0) == 0; }

namespace {

long long parse_integer(std::string_view text, const std::string& id) {
  long long value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw DomainError(fmt::format("unknown environment id '{}'", id));
  return value;
}

}  // namespace

std::unique_ptr<Environment> make_env(const std::string& id) {
  if (id == "cartpole") return std::make_unique<CartPole>();
  if (id == "acrobot") return std::make_unique<Acrobot>();
  if (id == "mountaincar") return std::make_unique<MountainCar>();
  if (is_tabular_id(id)) {
    const std::string_view rest = std::string_view(id).substr(6);
    const auto colon = rest.find(':');
    if (colon == std::string_view::npos) throw DomainError(fmt::format("unknown environment id '{}'", id));
    const long long n = parse_integer(rest.substr(0, colon), id);
    const long long seed = parse_integer(rest.substr(colon + 1), id);
    if (n < 1 || seed < 0) throw DomainError(fmt::format("unknown environment id '{}'", id));
    auto mdp = n == 1 ? make_single_state_mdp(static_cast<std::uint64_t>(seed))
                      : make_chain_mdp(static_cast<int>(n), static_cast<std::uint64_t>(seed));
    return std::make_unique<TabularEnv>(std::make_shared<const TabularMdp>(std::move(mdp)), id);
  }
  throw DomainError(fmt::format("unknown environment id '{}'", id));
}

}  // namespace natgrad
