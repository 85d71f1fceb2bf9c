#include "natgrad/agent.hpp"

#include <chrono>
#include <cmath>
#include <deque>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "natgrad/errors.hpp"
#include "natgrad/oracle.hpp"
#include "natgrad/ratio.hpp"

namespace natgrad {

std::string to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::ac:
      return "ac";
    case Algorithm::nac:
      return "nac";
    case Algorithm::offac:
      return "offac";
    case Algorithm::offnac:
      return "offnac";
  }
  return "?";
}

Algorithm parse_algorithm(const std::string& name) {
  if (name == "ac") return Algorithm::ac;
  if (name == "nac") return Algorithm::nac;
  if (name == "offac") return Algorithm::offac;
  if (name == "offnac") return Algorithm::offnac;
  throw DomainError(fmt::format("unknown algorithm '{}'", name));
}

StepSchedule StepSchedule::polynomial(double p_fast, double p_slow) {
  StepSchedule s;
  s.kind = Kind::polynomial;
  s.p_fast = p_fast;
  s.p_slow = p_slow;
  s.validate();
  return s;
}

StepSchedule StepSchedule::parse(const std::string& text) {
  if (text == "constant") return {};
  if (text.rfind("poly:", 0) == 0) {
    const auto colon = text.find(':', 5);
    if (colon != std::string::npos) {
      try {
        std::size_t used_fast = 0, used_slow = 0;
        const std::string fast = text.substr(5, colon - 5), slow = text.substr(colon + 1);
        const double pf = std::stod(fast, &used_fast);
        const double ps = std::stod(slow, &used_slow);
        if (used_fast == fast.size() && used_slow == slow.size()) return polynomial(pf, ps);
      } catch (const std::logic_error&) {
      }
    }
  }
  throw DomainError(fmt::format("bad schedule '{}': expected constant or poly:<p_fast>:<p_slow>", text));
}

std::string StepSchedule::to_string() const {
  return kind == Kind::constant ? "constant" : fmt::format("poly:{}:{}", p_fast, p_slow);
}

double StepSchedule::fast(long long n) const {
  return kind == Kind::constant ? 1.0 : std::pow(static_cast<double>(n + 1), -p_fast);
}

double StepSchedule::slow(long long n) const {
  return kind == Kind::constant ? 1.0 : std::pow(static_cast<double>(n + 1), -p_slow);
}

void StepSchedule::validate() const {
  if (kind == Kind::polynomial && !(0.5 < p_fast && p_fast < p_slow && p_slow <= 1.0))
    throw DomainError(fmt::format("polynomial schedule needs 0.5 < p_fast < p_slow <= 1, got {} and {}", p_fast, p_slow));
}

void AgentConfig::validate() const {
  schedule.validate();
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("lambda must lie in [0, 1]");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw DomainError("gamma must lie in (0, 1), or 0 for the default");
  if (gamma > 0.0 && is_tabular_id(env_id)) throw DomainError("tabular environments fix their own gamma");
  if (episodes < 1) throw DomainError("episodes must be positive");
  if (!(actor_lr >= 0.0) || !(critic_lr > 0.0)) throw DomainError("learning rates must be positive");
  if (is_natural(algorithm) && !(advantage_lr > 0.0)) throw DomainError("advantage learning rate must be positive");
  if (is_off_policy(algorithm)) {
    if (ratio.refit_every < 1) throw DomainError("ratio_refit_every must be at least 1");
    if (ratio.source == RatioSource::fitted && !(ratio_lr > 0.0))
      throw DomainError("ratio learning rate must be positive");
    if (ratio.source == RatioSource::exact && !is_tabular_id(env_id))
      throw DomainError("exact ratios need a tabular environment");
  }
  for (int h : actor_hidden)
    if (h < 1) throw DomainError("hidden sizes must be positive");
  for (int h : critic_hidden)
    if (h < 1) throw DomainError("hidden sizes must be positive");
}

AgentConfig default_config(Algorithm algorithm, const std::string& env_id, bool td_lambda) {
  AgentConfig c;
  c.algorithm = algorithm;
  c.env_id = env_id;
  struct Row {
    double actor, advantage, value, ratio, lambda;
  };
  auto apply = [&](std::vector<int> actor, std::vector<int> critic, Row row) {
    c.actor_hidden = std::move(actor);
    c.critic_hidden = std::move(critic);
    c.actor_lr = row.actor;
    c.advantage_lr = row.advantage;
    c.critic_lr = row.value;
    c.ratio_lr = row.ratio;
    c.lambda = row.lambda;
  };
  const int column = static_cast<int>(algorithm);  // ac, nac, offac, offnac
  if (env_id == "cartpole") {
    const Row rows[] = {{1e-3, 0.0, 5e-3, 0.0, 0.0},
                        {1e-3, 1e-3, 1e-2, 0.0, 0.0},
                        {5e-4, 0.0, 1e-2, 1e-3, 0.0},
                        {5e-4, 1e-2, 1e-2, 1e-2, 0.0}};
    apply({16}, {64, 64}, rows[column]);
  } else if (env_id == "acrobot") {
    const Row rows[] = {{5e-4, 0.0, 1e-3, 0.0, 0.0},
                        {1e-4, 1e-3, 5e-3, 0.0, 0.0},
                        {1e-4, 0.0, 5e-3, 1e-4, 0.0},
                        {5e-5, 1e-4, 5e-3, 1e-4, 0.0}};
    apply({32}, {32, 32}, rows[column]);
  } else if (env_id == "mountaincar") {
    const Row plain[] = {{1e-3, 0.0, 5e-3, 0.0, 0.0},
                         {1e-5, 1e-4, 5e-3, 0.0, 0.0},
                         {1e-4, 0.0, 5e-3, 1e-2, 0.0},
                         {1e-6, 1e-4, 5e-3, 1e-2, 0.0}};
    const Row traced[] = {{5e-3, 0.0, 5e-2, 0.0, 0.7},
                          {1e-4, 1e-3, 5e-2, 0.0, 1.0},
                          {1e-4, 0.0, 5e-3, 1e-2, 0.7},
                          {1e-6, 1e-4, 5e-3, 1e-2, 1.0}};
    apply({32}, {32, 32}, td_lambda ? traced[column] : plain[column]);
  } else if (is_tabular_id(env_id)) {
    const Row row{0.05, 0.1, 0.1, 0.5, td_lambda ? 0.5 : 0.0};
    apply({}, {}, row);
    c.ratio.minibatch = 0;
    c.ratio.buffer_size = 2000;
  } else {
    throw DomainError(fmt::format("no default hyperparameters for environment '{}'", env_id));
  }
  if (!is_natural(algorithm)) c.advantage_lr = 0.0;
  return c;
}

double ema_update(double prev_ema, double episode_reward) { return 0.9 * episode_reward + 0.1 * prev_ema; }

EvalSummary evaluate(const SoftmaxPolicy& policy, Environment& env, int episodes, Rng& rng) {
  if (episodes < 1) throw DomainError("evaluate: need at least one episode");
  EvalSummary out;
  out.returns.reserve(episodes);
  for (int e = 0; e < episodes; ++e) {
    Vector obs = env.reset(rng);
    double total = 0.0;
    for (;;) {
      const StepResult step = env.step(policy.sample_action(obs, rng), rng);
      total += step.reward;
      if (step.done()) break;
      obs = step.next_obs;
    }
    out.returns.push_back(total);
  }
  double sum = 0.0;
  for (double r : out.returns) sum += r;
  out.mean = sum / episodes;
  double var = 0.0;
  for (double r : out.returns) var += (r - out.mean) * (r - out.mean);
  out.std = episodes > 1 ? std::sqrt(var / episodes) : 0.0;
  return out;
}

std::unique_ptr<Environment> make_config_env(const AgentConfig& config) {
  auto env = make_env(config.env_id);
  if (config.episode_cap > 0) {
    auto* tabular = dynamic_cast<TabularEnv*>(env.get());
    if (tabular == nullptr) throw DomainError("episode_cap only applies to tabular environments");
    return std::make_unique<TabularEnv>(tabular->shared_mdp(), config.env_id, config.episode_cap,
                                        tabular->encoding());
  }
  return env;
}

namespace {

std::vector<int> with_ends(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> dims;
  dims.push_back(in);
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

struct BufferedTransition {
  Vector obs;
  int action;
  Vector next_obs;
  int t;  // step index inside its episode
};

/// Behaviour data and the two state-ratio estimators of the off-policy actor.
class RatioTracker {
 public:
  RatioTracker(const AgentConfig& config, const Environment& env, double gamma, Rng& init)
      : config_(config.ratio), lr_(config.ratio_lr), gamma_(gamma) {
    if (const auto* tabular = dynamic_cast<const TabularEnv*>(&env)) {
      mdp_ = tabular->shared_mdp();
      states_ = encoded_states(mdp_->n_states(), tabular->encoding());
      encoding_ = tabular->encoding();
    }
    if (config_.source == RatioSource::fitted) {
      if (mdp_) {
        w_hat_.emplace(RatioEstimator::tabular(mdp_->n_states(), encoding_, RatioTarget::stationary, gamma_));
        w_.emplace(RatioEstimator::tabular(mdp_->n_states(), encoding_, RatioTarget::visitation, gamma_));
      } else {
        const auto dims = with_ends(env.obs_dim(), config_.hidden, 1);
        w_hat_.emplace(RatioEstimator::network(Mlp::random(dims, Activation::tanh, init), RatioTarget::stationary, gamma_));
        w_.emplace(RatioEstimator::network(Mlp::random(dims, Activation::tanh, init), RatioTarget::visitation, gamma_));
      }
      for (auto* est : {&*w_hat_, &*w_}) {
        est->minibatch = config_.minibatch;
        est->bandwidth = config_.bandwidth;
      }
    }
  }

  void record(const Vector& obs, int action, const Vector& next_obs, int t) {
    if (t == 0) {
      starts_.push_back(obs);
      episode_lengths_.push_back(0);
    }
    buffer_.push_back({obs, action, next_obs, t});
    ++episode_lengths_.back();
    while (static_cast<int>(buffer_.size()) > config_.buffer_size) {
      buffer_.pop_front();
      if (--episode_lengths_.front() == 0) {
        episode_lengths_.pop_front();
        starts_.pop_front();
      }
    }
  }

  void refit(const SoftmaxPolicy& policy, const Matrix& mu_table, BehaviorKind behavior, Rng& rng) {
    if (config_.source == RatioSource::exact) {
      const Matrix pi = oracle::policy_table(policy, states_);
      const Matrix mu = behavior == BehaviorKind::target ? pi : mu_table;
      exact_ = exact_ratios(*mdp_, pi, mu);
      return;
    }
    if (buffer_.size() < 2) return;
    TransitionBatch stationary_batch, visitation_batch;
    stationary_batch.transitions.reserve(buffer_.size());
    visitation_batch.transitions.reserve(buffer_.size());
    // Per-episode discount weights, each episode normalised to total mass 1.
    std::size_t index = 0;
    for (int len : episode_lengths_) {
      double mass = 0.0;
      const int first_t = buffer_[index].t;
      for (int i = 0; i < len; ++i) mass += std::pow(gamma_, buffer_[index + i].t - first_t);
      for (int i = 0; i < len; ++i, ++index) {
        const auto& b = buffer_[index];
        const Vector probs = policy.action_probs(b.obs);
        const double mu = behavior == BehaviorKind::target ? probs(b.action) : mu_table(0, b.action);
        const double r = probs(b.action) / mu;
        stationary_batch.transitions.push_back({b.obs, b.action, b.next_obs, r, 1.0});
        visitation_batch.transitions.push_back({b.obs, b.action, b.next_obs, r, std::pow(gamma_, b.t - first_t) / mass});
      }
    }
    visitation_batch.start_states.assign(starts_.begin(), starts_.end());
    fit_ratio(*w_hat_, stationary_batch, config_.fit_steps, lr_, &rng);
    fit_ratio(*w_, visitation_batch, config_.fit_steps, lr_, &rng);
  }

  double w_hat(const Vector& obs) const { return clip(lookup(obs, true)); }
  double w(const Vector& obs) const { return clip(lookup(obs, false)); }

 private:
  double lookup(const Vector& obs, bool stationary) const {
    if (config_.source == RatioSource::exact) {
      if (!exact_) return 1.0;
      const int s = decode_state(obs, mdp_->n_states(), encoding_);
      return stationary ? exact_->w_hat(s) : exact_->w(s);
    }
    return stationary ? (*w_hat_)(obs) : (*w_)(obs);
  }
  double clip(double v) const { return config_.clip > 0.0 ? std::min(v, config_.clip) : v; }

  RatioConfig config_;
  double lr_;
  double gamma_;
  std::shared_ptr<const TabularMdp> mdp_;
  std::vector<Vector> states_;
  StateEncoding encoding_ = StateEncoding::one_hot;
  std::optional<RatioEstimator> w_hat_;
  std::optional<RatioEstimator> w_;
  std::optional<ExactRatios> exact_;
  std::deque<BufferedTransition> buffer_;
  std::deque<Vector> starts_;
  std::deque<int> episode_lengths_;
};

double norm_of(const Mlp& net) { return net.params().norm(); }

}  // namespace

TrainResult train(const AgentConfig& config, const TrainOptions& options) {
  config.validate();
  auto env = make_config_env(config);
  auto eval_env = env->clone();
  Rng init_rng(config.seed, Stream::init);
  Rng env_rng(config.seed, Stream::env);
  Rng policy_rng(config.seed, Stream::policy);
  Rng eval_rng(config.seed, Stream::eval);
  Rng ratio_rng(config.seed, Stream::ratio);

  const int n_actions = env->n_actions();
  const double gamma = config.gamma > 0.0 ? config.gamma : env->gamma();
  SoftmaxPolicy policy(Mlp::random(with_ends(env->obs_dim(), config.actor_hidden, n_actions), config.activation,
                                   init_rng));
  ValueCritic critic(Mlp::random(with_ends(env->obs_dim(), config.critic_hidden, 1), config.activation, init_rng),
                     gamma, config.lambda);
  AdvantageCritic advantage(policy.param_count());

  const bool off_policy = is_off_policy(config.algorithm);
  const bool natural = is_natural(config.algorithm);
  const Matrix mu_table = Matrix::Constant(1, n_actions, 1.0 / n_actions);
  const Vector mu_probs = mu_table.row(0).transpose();
  std::optional<RatioTracker> ratios;
  if (off_policy) ratios.emplace(config, *env, gamma, init_rng);

  TrainResult result{{}, policy, policy, -1, critic.net(), advantage.x(), false, {}};
  double best_ema = -std::numeric_limits<double>::infinity();
  double ema = 0.0;
  long long global_step = 0;

  try {
    for (int n = 0; n < config.episodes; ++n) {
      const auto started = std::chrono::steady_clock::now();
      const double alpha_value = config.critic_lr * config.schedule.fast(n);
      const double alpha_adv = config.advantage_lr * config.schedule.fast(n);
      const double beta = config.actor_lr * config.schedule.slow(n);

      if (off_policy && n % config.ratio.refit_every == 0)
        ratios->refit(policy, mu_table, config.behavior, ratio_rng);

      Vector obs = env->reset(env_rng);
      critic.begin_episode();
      double total = 0.0;
      int t = 0;
      for (;;) {
        const Vector probs = policy.action_probs(obs);
        const bool follow_target = !off_policy || config.behavior == BehaviorKind::target;
        const Vector& behaviour = follow_target ? probs : mu_probs;
        const int action = sample_from(behaviour, policy_rng);
        StepResult step = env->step(action, env_rng);

        double value_correction = 1.0, advantage_correction = 1.0;
        if (off_policy) {
          const double r = probs(action) / behaviour(action);
          value_correction = ratios->w_hat(obs) * r;
          advantage_correction = ratios->w(obs) * r;
        }

        const TdSample sample{obs, step.reward, step.next_obs, step.terminated};
        critic.update(sample, alpha_value, value_correction);
        const double delta = critic.td_error(step.reward, obs, step.next_obs, step.terminated);
        const FlatGrad features = policy.compat_features(obs, action);
        if (natural) {
          advantage.update(features, delta, alpha_adv, advantage_correction);
          policy.net().apply_update(natural_direction(advantage), beta);
        } else {
          if (!std::isfinite(delta)) throw NumericError("actor update: non-finite TD error");
          policy.net().apply_update(features, beta * advantage_correction * delta);
        }

        const double norm = std::max({norm_of(policy.net()), norm_of(critic.net()), advantage.x().norm()});
        if (!(norm <= config.param_norm_limit))
          throw NumericError(fmt::format("parameter norm {} exceeded {} at episode {} step {}", norm,
                                         config.param_norm_limit, n, t));

        if (off_policy) ratios->record(obs, action, step.next_obs, t);
        if (options.on_step) {
          options.on_step({global_step, n, &policy.net(), &critic.net(), &advantage.x(), delta, value_correction,
                           advantage_correction});
        }
        total += step.reward;
        ++t;
        ++global_step;
        if (step.done()) break;
        obs = std::move(step.next_obs);
      }

      double reported = total;
      if (off_policy) reported = evaluate(policy, *eval_env, 1, eval_rng).mean;
      ema = n == 0 ? reported : ema_update(ema, reported);
      EpisodeRecord record{n, reported, ema, t, 0};
      if (options.record_wall_time) {
        record.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started)
                             .count();
      }
      result.records.push_back(record);
      if (ema > best_ema) {
        best_ema = ema;
        result.best_policy = policy;
        result.best_episode = n;
      }
      if (options.on_episode) options.on_episode(record);
      spdlog::debug("{} {} episode {} reward {:.2f} ema {:.2f} steps {}", to_string(config.algorithm), config.env_id, n,
                    reported, ema, t);
    }
  } catch (const NumericError& e) {
    result.diverged = true;
    result.diagnostic = e.what();
    spdlog::warn("training diverged: {}", e.what());
  }
  result.policy = policy;
  result.value_net = critic.net();
  result.x = advantage.x();
  if (result.best_episode < 0) result.best_policy = policy;
  return result;
}

}  // namespace natgrad
