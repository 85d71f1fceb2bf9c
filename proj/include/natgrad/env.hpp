#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "natgrad/rng.hpp"

namespace natgrad {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct StepResult {
  Vector next_obs;
  double reward = 0.0;
  bool terminated = false;
  bool truncated = false;

  bool done() const { return terminated || truncated; }
};

/// Episodic environment with a discrete action set.
///
/// The base class owns the step counter and the episode cap: subclasses only
/// implement the dynamics. Reaching the cap sets `truncated`, which is kept
/// distinct from `terminated` so learners can keep bootstrapping through it.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string id() const = 0;
  virtual int obs_dim() const = 0;
  virtual int n_actions() const = 0;
  /// Discount factor the learners use on this task.
  virtual double gamma() const = 0;

  int max_steps() const { return max_steps_; }
  int steps() const { return steps_; }
  bool episode_over() const { return over_; }

  Vector reset(Rng& rng);
  /// Throws DomainError on an illegal action and StateError once the episode is over.
  StepResult step(int action, Rng& rng);

  virtual std::unique_ptr<Environment> clone() const = 0;

 protected:
  explicit Environment(int max_steps) : max_steps_(max_steps) {}

  struct Outcome {
    Vector obs;
    double reward;
    bool terminated;
  };
  virtual Vector do_reset(Rng& rng) = 0;
  virtual Outcome do_step(int action, Rng& rng) = 0;

 private:
  int max_steps_;
  int steps_ = 0;
  bool over_ = true;
};

/// Finite MDP (S, A, P, r, gamma, d0). Immutable after construction.
class TabularMdp {
 public:
  /// `transition` is indexed [s * n_actions + a](s'); `reward` is n_states x n_actions.
  TabularMdp(int n_states, int n_actions, std::vector<Vector> transition, Matrix reward, double gamma,
             Vector initial_dist);

  int n_states() const { return n_states_; }
  int n_actions() const { return n_actions_; }
  double gamma() const { return gamma_; }
  const Vector& initial_dist() const { return initial_dist_; }
  const Matrix& reward() const { return reward_; }
  double reward(int s, int a) const { return reward_(s, a); }
  /// Row P(. | s, a).
  const Vector& transition(int s, int a) const { return transition_[s * n_actions_ + a]; }
  double transition(int s, int a, int next) const { return transition_[s * n_actions_ + a](next); }

  int sample_next(int s, int a, Rng& rng) const;
  int sample_initial(Rng& rng) const;

 private:
  int n_states_;
  int n_actions_;
  std::vector<Vector> transition_;
  Matrix reward_;
  double gamma_;
  Vector initial_dist_;
};

/// Random ergodic MDP with 2 actions, rewards in [0, 1], gamma = 0.95 and a
/// uniform start distribution. Action 0 drifts left along the chain and
/// action 1 drifts right; every transition probability is strictly positive.
TabularMdp make_chain_mdp(int n_states, std::uint64_t seed);

/// Single-state, two-action MDP whose reward does not depend on the action.
TabularMdp make_single_state_mdp(std::uint64_t seed);

/// How tabular states are presented to networks.
enum class StateEncoding {
  one_hot,          ///< e_s, length n_states
  reduced_one_hot,  ///< e_s for s < n-1 and the zero vector for s = n-1, length n_states-1
};

Vector encode_state(int s, int n_states, StateEncoding encoding);
/// Inverse of encode_state; throws DomainError if `obs` is not a valid code.
int decode_state(const Vector& obs, int n_states, StateEncoding encoding);
std::vector<Vector> encoded_states(int n_states, StateEncoding encoding);

class TabularEnv final : public Environment {
 public:
  static constexpr int kDefaultCap = 100;

  TabularEnv(std::shared_ptr<const TabularMdp> mdp, std::string id, int max_steps = kDefaultCap,
             StateEncoding encoding = StateEncoding::one_hot);

  std::string id() const override { return id_; }
  int obs_dim() const override;
  int n_actions() const override { return mdp_->n_actions(); }
  double gamma() const override { return mdp_->gamma(); }
  std::unique_ptr<Environment> clone() const override;

  const TabularMdp& mdp() const { return *mdp_; }
  std::shared_ptr<const TabularMdp> shared_mdp() const { return mdp_; }
  StateEncoding encoding() const { return encoding_; }
  int state() const { return state_; }

 private:
  Vector do_reset(Rng& rng) override;
  Outcome do_step(int action, Rng& rng) override;

  std::shared_ptr<const TabularMdp> mdp_;
  std::string id_;
  StateEncoding encoding_;
  int state_ = 0;
};

/// Cart-pole balancing. Euler integration with the classic-control constants:
/// gravity 9.8, cart mass 1.0, pole mass 0.1, pole half-length 0.5, force
/// magnitude 10, timestep 0.02. Terminates when |angle| > 15 degrees or
/// |x| > 2.4; reward +1 on every step; capped at 500 steps.
/// Actions: 0 pushes left, 1 pushes right.
class CartPole final : public Environment {
 public:
  static constexpr double kGravity = 9.8;
  static constexpr double kCartMass = 1.0;
  static constexpr double kPoleMass = 0.1;
  static constexpr double kHalfLength = 0.5;
  static constexpr double kForce = 10.0;
  static constexpr double kTau = 0.02;
  static constexpr double kAngleLimit = 15.0 * 3.14159265358979323846 / 180.0;
  static constexpr double kPositionLimit = 2.4;
  static constexpr int kCap = 500;

  CartPole() : Environment(kCap) {}

  std::string id() const override { return "cartpole"; }
  int obs_dim() const override { return 4; }
  int n_actions() const override { return 2; }
  double gamma() const override { return 0.95; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<CartPole>(*this); }

  const Eigen::Vector4d& state() const { return state_; }
  void set_state(const Eigen::Vector4d& s) { state_ = s; }

 private:
  Vector do_reset(Rng& rng) override;
  Outcome do_step(int action, Rng& rng) override;

  Eigen::Vector4d state_ = Eigen::Vector4d::Zero();
};

/// Two-link acrobot, classic-control formulation: unit link lengths and
/// masses, centres of mass at 0.5, unit moments of inertia, dt 0.2 with one
/// RK4 step, velocity bounds 4*pi and 9*pi. Actions 0/1/2 apply torque -1/0/+1.
/// Reward -1 per step and 0 on the step that reaches the goal height; capped at 500.
/// Observation: cos t1, sin t1, cos t2, sin t2, dt1, dt2.
class Acrobot final : public Environment {
 public:
  static constexpr double kDt = 0.2;
  static constexpr double kLinkLength = 1.0;
  static constexpr double kLinkMass = 1.0;
  static constexpr double kLinkCom = 0.5;
  static constexpr double kLinkMoi = 1.0;
  static constexpr double kMaxVel1 = 4.0 * 3.14159265358979323846;
  static constexpr double kMaxVel2 = 9.0 * 3.14159265358979323846;
  static constexpr int kCap = 500;

  Acrobot() : Environment(kCap) {}

  std::string id() const override { return "acrobot"; }
  int obs_dim() const override { return 6; }
  int n_actions() const override { return 3; }
  double gamma() const override { return 0.99; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<Acrobot>(*this); }

 private:
  Vector do_reset(Rng& rng) override;
  Outcome do_step(int action, Rng& rng) override;
  Vector observe() const;

  Eigen::Vector4d state_ = Eigen::Vector4d::Zero();
};

/// Under-powered car in a valley: force 0.001, gravity 0.0025, velocity
/// clipped to [-0.07, 0.07], position to [-1.2, 0.6] with an inelastic left
/// wall. Goal at position >= 0.5. Actions 0/1/2 push left/none/right.
/// Reward -1 per step and 0 on reaching the goal; capped at 10000 steps.
class MountainCar final : public Environment {
 public:
  static constexpr double kForce = 0.001;
  static constexpr double kGravity = 0.0025;
  static constexpr double kMaxSpeed = 0.07;
  static constexpr double kMinPosition = -1.2;
  static constexpr double kMaxPosition = 0.6;
  static constexpr double kGoalPosition = 0.5;
  static constexpr int kCap = 10000;

  MountainCar() : Environment(kCap) {}

  std::string id() const override { return "mountaincar"; }
  int obs_dim() const override { return 2; }
  int n_actions() const override { return 3; }
  double gamma() const override { return 0.99; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<MountainCar>(*this); }

  const Eigen::Vector2d& state() const { return state_; }

 private:
  Vector do_reset(Rng& rng) override;
  Outcome do_step(int action, Rng& rng) override;

  Eigen::Vector2d state_ = Eigen::Vector2d::Zero();
};

/// Builds an environment from its id: `cartpole`, `acrobot`, `mountaincar`
/// or `chain:<n>:<seed>`. Throws DomainError for anything else.
std::unique_ptr<Environment> make_env(const std::string& id);

/// True when `id` names a tabular environment.
bool is_tabular_id(const std::string& id);

}  // namespace natgrad
