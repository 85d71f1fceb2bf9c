#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "natgrad/errors.hpp"
#include "natgrad/harness.hpp"

namespace fs = std::filesystem;
using namespace natgrad;

namespace {

constexpr int kUsage = 2;
constexpr int kDiverged = 3;

struct TrainArgs {
  std::string config_path;
  std::string out;
  std::string seeds;
  std::optional<std::string> algo, env, schedule;
  std::optional<double> lambda, actor_lr, critic_lr, adv_lr, ratio_lr, ratio_clip;
  std::optional<long long> episodes, seed, refit_every;
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) throw DomainError(fmt::format("bad seed list '{}'", text));
    seeds.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return seeds;
}

int cmd_train(const TrainArgs& a) {
  KeyValues values;
  if (!a.config_path.empty()) values = read_key_values(a.config_path);
  auto set = [&](const char* key, const auto& opt) {
    if (opt) values[key] = fmt::format("{}", *opt);
  };
  set("algo", a.algo);
  set("env", a.env);
  set("schedule", a.schedule);
  set("lambda", a.lambda);
  set("actor_lr", a.actor_lr);
  set("critic_lr", a.critic_lr);
  set("adv_lr", a.adv_lr);
  set("ratio_lr", a.ratio_lr);
  set("ratio_clip", a.ratio_clip);
  set("episodes", a.episodes);
  set("seed", a.seed);
  set("ratio_refit_every", a.refit_every);
  if (!values.count("env")) throw CLI::RequiredError("--env");

  const AgentConfig config = config_from_key_values(values);
  std::vector<std::uint64_t> seeds = a.seeds.empty() ? std::vector<std::uint64_t>{config.seed} : parse_seeds(a.seeds);
  const auto outcomes = run_seeds(config, seeds, a.out);
  int status = 0;
  for (const auto& o : outcomes) {
    if (o.diverged) {
      std::cerr << fmt::format("seed {} diverged: {}\n", o.seed, o.diagnostic);
      status = kDiverged;
    }
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Natural actor-critic experiments"};
  app.require_subcommand(1);

  TrainArgs t;
  auto* train = app.add_subcommand("train", "Train an agent and write per-episode results");
  train->add_option("--config", t.config_path, "key = value config file")->check(CLI::ExistingFile);
  train->add_option("--algo", t.algo, "ac | nac | offac | offnac");
  train->add_option("--env", t.env, "cartpole | acrobot | mountaincar | chain:<n>:<seed>");
  train->add_option("--lambda", t.lambda, "TD(lambda) trace decay");
  train->add_option("--episodes", t.episodes, "Training episodes");
  auto* seed_opt = train->add_option("--seed", t.seed, "Random seed");
  train->add_option("--seeds", t.seeds, "Comma-separated seed sweep")->excludes(seed_opt);
  train->add_option("--out", t.out, "Output directory")->required();
  train->add_option("--actor-lr", t.actor_lr);
  train->add_option("--critic-lr", t.critic_lr);
  train->add_option("--adv-lr", t.adv_lr);
  train->add_option("--ratio-lr", t.ratio_lr);
  train->add_option("--ratio-refit-every", t.refit_every);
  train->add_option("--ratio-clip", t.ratio_clip);
  train->add_option("--schedule", t.schedule, "constant | poly:<p_fast>:<p_slow>");

  std::string eval_dir, eval_policy, eval_env, eval_out;
  int eval_episodes = 200;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "Evaluate a saved policy");
  eval->add_option("--run", eval_dir, "Run directory (uses policy.txt and config.txt)");
  eval->add_option("--policy", eval_policy, "Policy file");
  eval->add_option("--env", eval_env, "Environment id (defaults to the run's)");
  eval->add_option("--episodes", eval_episodes, "Evaluation episodes")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed, "Random seed");
  eval->add_option("--out", eval_out, "Summary CSV path");

  std::vector<std::string> compare_dirs;
  std::string compare_out, compare_title = "EMA reward";
  std::vector<double> thresholds;
  auto* compare = app.add_subcommand("compare", "Aggregate EMA curves across runs");
  compare->add_option("dirs", compare_dirs, "Result directories")->required()->expected(2, -1);
  compare->add_option("--out", compare_out, "Output directory")->required();
  compare->add_option("--threshold", thresholds, "EMA thresholds to report");
  compare->add_option("--title", compare_title, "Plot title");

  std::string oracle_env, oracle_policy;
  std::uint64_t oracle_seed = 0;
  auto* oracle_cmd = app.add_subcommand("oracle", "Exact quantities on a tabular environment");
  oracle_cmd->add_option("--env", oracle_env, "chain:<n>:<seed>")->required();
  oracle_cmd->add_option("--policy", oracle_policy, "Policy file (random linear policy if omitted)");
  oracle_cmd->add_option("--seed", oracle_seed, "Seed for the random policy");

  std::string ratio_env = "chain:3:0";
  std::uint64_t ratio_seed = 0;
  int ratio_samples = 10000, ratio_steps = 500;
  double ratio_lr = 0.5;
  auto* ratio_cmd = app.add_subcommand("ratio-test", "Fit tabular state ratios and compare with exact values");
  ratio_cmd->add_option("--env", ratio_env, "chain:<n>:<seed>");
  ratio_cmd->add_option("--seed", ratio_seed);
  ratio_cmd->add_option("--samples", ratio_samples)->check(CLI::PositiveNumber);
  ratio_cmd->add_option("--steps", ratio_steps)->check(CLI::PositiveNumber);
  ratio_cmd->add_option("--lr", ratio_lr)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*train) return cmd_train(t);

    if (*eval) {
      if (eval_policy.empty() && eval_dir.empty()) throw DomainError("eval needs --run or --policy");
      const fs::path policy_path = eval_policy.empty() ? fs::path(eval_dir) / "policy.txt" : fs::path(eval_policy);
      if (eval_env.empty()) {
        if (eval_dir.empty()) throw DomainError("eval needs --env when only --policy is given");
        eval_env = read_key_values(fs::path(eval_dir) / "config.txt").at("env");
      }
      const SoftmaxPolicy policy = load_policy(policy_path);
      auto env = make_env(eval_env);
      if (policy.n_actions() != env->n_actions() || policy.net().input_dim() != env->obs_dim())
        throw DomainError("policy shape does not match the environment");
      Rng rng(eval_seed, Stream::eval);
      const EvalSummary summary = evaluate(policy, *env, eval_episodes, rng);
      std::cout << fmt::format("mean={:.2f} std={:.2f} episodes={}\n", summary.mean, summary.std, eval_episodes);
      const fs::path out = !eval_out.empty() ? fs::path(eval_out)
                           : !eval_dir.empty() ? fs::path(eval_dir) / "eval.csv"
                                               : fs::path("eval.csv");
      FILE* f = std::fopen(out.c_str(), "w");
      if (f == nullptr) throw DomainError(fmt::format("cannot write '{}'", out.string()));
      fmt::print(f, "env,episodes,mean,std\n{},{},{:.6f},{:.6f}\n", eval_env, eval_episodes, summary.mean, summary.std);
      std::fclose(f);
      return 0;
    }

    if (*compare) {
      std::vector<fs::path> dirs(compare_dirs.begin(), compare_dirs.end());
      const auto groups = load_groups(dirs);
      fs::create_directories(compare_out);
      write_combined_csv(fs::path(compare_out) / "combined.csv", groups);
      const std::string svg = render_svg(groups, compare_title);
      FILE* f = std::fopen((fs::path(compare_out) / "ema.svg").c_str(), "w");
      if (f == nullptr) throw DomainError("cannot write plot");
      std::fputs(svg.c_str(), f);
      std::fclose(f);
      for (double threshold : thresholds) {
        for (const auto& g : groups) {
          const auto hit = first_crossing(g.band.median, threshold);
          std::cout << fmt::format("threshold {} {}: {}\n", threshold, g.label,
                                   hit ? std::to_string(*hit) : std::string("never"));
        }
      }
      return 0;
    }

    if (*oracle_cmd) {
      if (!is_tabular_id(oracle_env)) {
        make_env(oracle_env);
        throw DomainError(fmt::format("'{}' is not a tabular environment", oracle_env));
      }
      const SoftmaxPolicy policy =
          oracle_policy.empty() ? tabular_policy(oracle_env, oracle_seed) : load_policy(oracle_policy);
      std::cout << oracle_report(oracle_env, policy);
      return 0;
    }

    if (*ratio_cmd) {
      const auto r = ratio_recovery(ratio_env, ratio_seed, ratio_samples, ratio_steps, ratio_lr);
      std::cout << "state,exact_w_hat,fitted_w_hat,exact_w,fitted_w\n";
      for (Eigen::Index s = 0; s < r.exact_w.size(); ++s)
        std::cout << fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f}\n", s, r.exact_w_hat(s), r.fitted_w_hat(s),
                                 r.exact_w(s), r.fitted_w(s));
      std::cout << fmt::format("max_rel_error_w_hat={:.4f} max_rel_error_w={:.4f}\n", r.max_rel_error_w_hat,
                               r.max_rel_error_w);
      return 0;
    }
  } catch (const CLI::RequiredError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const AlignmentError& e) {
    std::cerr << "alignment error: " << e.what() << "\n";
    return kUsage;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return 0;
}
