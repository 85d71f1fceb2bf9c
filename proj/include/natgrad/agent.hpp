#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "natgrad/env.hpp"
#include "natgrad/mlp.hpp"
#include "natgrad/policy.hpp"

namespace natgrad {

enum class Algorithm { ac, nac, offac, offnac };

std::string to_string(Algorithm algorithm);
Algorithm parse_algorithm(const std::string& name);
inline bool is_off_policy(Algorithm a) { return a == Algorithm::offac || a == Algorithm::offnac; }
inline bool is_natural(Algorithm a) { return a == Algorithm::nac || a == Algorithm::offnac; }

/// Step-size multipliers indexed by episode n. Polynomial schedules give
/// critic steps c / (n+1)^p_fast and actor steps c / (n+1)^p_slow.
struct StepSchedule {
  enum class Kind { constant, polynomial };
  Kind kind = Kind::constant;
  double p_fast = 0.6;
  double p_slow = 0.9;

  static StepSchedule polynomial(double p_fast, double p_slow);
  /// Parses `constant` or `poly:<p_fast>:<p_slow>`.
  static StepSchedule parse(const std::string& text);
  std::string to_string() const;

  double fast(long long n) const;
  double slow(long long n) const;
  /// Requires 0.5 < p_fast < p_slow <= 1 for polynomial schedules.
  void validate() const;
};

enum class BehaviorKind {
  uniform,  ///< mu picks every action with equal probability
  target,   ///< mu tracks the current pi (diagnostic: all corrections become 1)
};

enum class RatioSource {
  fitted,  ///< kernel-loss estimators refit from the behaviour buffer
  exact,   ///< oracle ratios; tabular environments only
};

struct RatioConfig {
  RatioSource source = RatioSource::fitted;
  int refit_every = 1;  ///< episodes between refits
  double clip = 20.0;   ///< ceiling on state ratios before use; <= 0 disables
  int fit_steps = 10;
  int minibatch = 128;
  int buffer_size = 5000;
  std::vector<int> hidden = {16};
  std::optional<double> bandwidth;
};

struct AgentConfig {
  Algorithm algorithm = Algorithm::nac;
  std::string env_id = "cartpole";
  double lambda = 0.0;
  double gamma = 0.0;  ///< discount for the classic tasks; 0 keeps the environment's
  double actor_lr = 1e-3;
  double critic_lr = 1e-2;
  double advantage_lr = 1e-3;
  double ratio_lr = 1e-2;
  StepSchedule schedule;
  int episodes = 100;
  std::uint64_t seed = 0;
  std::vector<int> actor_hidden = {16};
  std::vector<int> critic_hidden = {64, 64};
  Activation activation = Activation::tanh;
  BehaviorKind behavior = BehaviorKind::uniform;
  RatioConfig ratio;
  int episode_cap = 0;  ///< overrides the cap of tabular environments when > 0
  double param_norm_limit = 1e6;

  void validate() const;
};

/// Hyperparameters for an (algorithm, environment) pair. Classic-control
/// values are the reference learning rates; `td_lambda` selects the TD(lambda)
/// table (MountainCar). Tabular chains get small linear networks.
AgentConfig default_config(Algorithm algorithm, const std::string& env_id, bool td_lambda = false);

struct EpisodeRecord {
  int index = 0;
  /// Training-episode return on-policy; return of the follow-up evaluation
  /// episode under pi off-policy.
  double total_reward = 0.0;
  double ema_reward = 0.0;
  int steps = 0;
  std::int64_t wall_ms = 0;
};

/// EMA metric: 0.9 * reward + 0.1 * previous.
double ema_update(double prev_ema, double episode_reward);

/// Parameters after one inner-loop step, for observers.
struct StepTrace {
  long long step = 0;
  int episode = 0;
  const Mlp* policy = nullptr;
  const Mlp* value = nullptr;
  const Vector* x = nullptr;
  double delta = 0.0;
  double value_correction = 1.0;
  double advantage_correction = 1.0;
};

struct TrainOptions {
  std::function<void(const StepTrace&)> on_step;
  std::function<void(const EpisodeRecord&)> on_episode;
  bool record_wall_time = false;
};

struct TrainResult {
  std::vector<EpisodeRecord> records;
  SoftmaxPolicy policy;
  SoftmaxPolicy best_policy;  ///< parameters at the highest EMA
  int best_episode = -1;
  Mlp value_net;
  Vector x;
  bool diverged = false;
  std::string diagnostic;
};

/// Runs Deep AC / NAC / OffAC / OffNAC (TD(lambda) when lambda > 0).
TrainResult train(const AgentConfig& config, const TrainOptions& options = {});

struct EvalSummary {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> returns;
};

/// Runs `episodes` episodes sampling from pi, without learning. Population std.
EvalSummary evaluate(const SoftmaxPolicy& policy, Environment& env, int episodes, Rng& rng);

/// The ascent direction of the natural actor: the advantage weights verbatim.
inline const Vector& natural_direction(const AdvantageCritic& critic) { return critic.x(); }

/// Environment for a config, honouring `episode_cap` on tabular tasks.
std::unique_ptr<Environment> make_config_env(const AgentConfig& config);

}  // namespace natgrad
