#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <fmt/format.h>

#include "natgrad/errors.hpp"
#include "natgrad/harness.hpp"
#include "natgrad/oracle.hpp"

using namespace natgrad;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / fmt::format("natgrad_test_{}_{}", ::getpid(), name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const fs::path& stdout_file = {}) {
  std::string cmd = std::string(NATGRAD_CLI) + " " + args;
  cmd += stdout_file.empty() ? " >/dev/null" : " >" + stdout_file.string();
  cmd += " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("episode csv round trip") {
    const std::vector<EpisodeRecord> records = {{0, 12.5, 12.5, 13, 0}, {1, -3.25, -1.675, 4, 7}};
    const fs::path dir = scratch("csv");
    write_episode_csv(dir / "e.csv", records);
    const std::string text = slurp(dir / "e.csv");
    CHECK(text.rfind(std::string(kCsvHeader) + "\n", 0) == 0);
    CHECK(format_record(records[0]) == "0,12.500000,12.500000,13,0");
    const auto back = read_episode_csv(dir / "e.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[1].total_reward == -3.25);
    CHECK(back[1].ema_reward == doctest::Approx(-1.675));
    CHECK(back[1].wall_ms == 7);
    CHECK_THROWS(parse_episode_csv("bogus,header\n1,2\n"));
    fs::remove_all(dir);
  }

  TEST_CASE("key value configs") {
    const auto kv = parse_key_values("# comment\nalgo = offnac\nenv=cartpole  \n\nactor_lr = 0.002 # inline\n");
    CHECK(kv.at("algo") == "offnac");
    CHECK(kv.at("env") == "cartpole");
    const AgentConfig config = config_from_key_values(kv);
    CHECK(config.algorithm == Algorithm::offnac);
    CHECK(config.actor_lr == doctest::Approx(0.002));
    CHECK(config.critic_lr == default_config(Algorithm::offnac, "cartpole").critic_lr);

    const AgentConfig round = config_from_key_values(config_to_key_values(config));
    CHECK(config_to_key_values(round) == config_to_key_values(config));

    CHECK_THROWS_AS(config_from_key_values({{"algo", "nac"}}), DomainError);
    CHECK_THROWS_AS(config_from_key_values({{"env", "cartpole"}, {"colour", "blue"}}), DomainError);
    CHECK_THROWS_AS(config_from_key_values({{"env", "cartpole"}, {"actor_lr", "fast"}}), DomainError);
    CHECK_THROWS_AS(config_from_key_values({{"env", "nowhere"}}), DomainError);

    const auto hidden = config_from_key_values({{"env", "cartpole"}, {"actor_hidden", "none"}, {"critic_hidden", "8,4"}});
    CHECK(hidden.actor_hidden.empty());
    CHECK(hidden.critic_hidden == std::vector<int>{8, 4});
  }

  TEST_CASE("manifest round trip") {
    RunManifest m;
    m.config = {{"algo", "nac"}, {"env", "cartpole"}};
    m.seeds = {1, 2, 3};
    m.result_files = {"seed_1/episodes.csv"};
    m.started = utc_timestamp();
    m.finished = m.started;
    const RunManifest back = RunManifest::from_json(m.to_json());
    CHECK(back.config == m.config);
    CHECK(back.seeds == m.seeds);
    CHECK(back.result_files == m.result_files);
    CHECK(back.version == kVersion);
    CHECK(back.started == m.started);
  }

  TEST_CASE("policy save and load") {
    const fs::path dir = scratch("policy");
    Rng rng(3);
    const SoftmaxPolicy policy(Mlp::random({4, 5, 2}, Activation::tanh, rng), true);
    save_policy(dir / "p.txt", policy);
    const SoftmaxPolicy back = load_policy(dir / "p.txt");
    CHECK(back.reference_logit());
    CHECK(back.net().params() == policy.net().params());
    fs::remove_all(dir);
  }

  TEST_CASE("aggregation") {
    const std::vector<double> curve = {1, 2, 3, 4};
    const Band self = aggregate_curves({curve, curve});
    CHECK(self.median == curve);
    CHECK(self.lower == self.upper);
    const Band b = aggregate_curves({{0, 0}, {1, 10}, {2, 20}, {3, 30}, {4, 40}});
    CHECK(b.median[1] == doctest::Approx(20.0));
    CHECK(b.lower[1] == doctest::Approx(10.0));
    CHECK(b.upper[1] == doctest::Approx(30.0));
    CHECK_THROWS_AS(aggregate_curves({{1, 2, 3}, {1, 2}}), AlignmentError);
    CHECK(first_crossing({1, 5, 9}, 5.0) == 1);
    CHECK_FALSE(first_crossing({1, 5, 9}, 10.0).has_value());
  }

  TEST_CASE("svg output") {
    CurveGroup g{"nac cartpole", {{1, 2, 3}, {2, 3, 4}}, {}};
    g.band = aggregate_curves(g.curves);
    const std::string svg = render_svg({g}, "demo");
    CHECK(is_well_formed_svg(svg));
    CHECK(svg.find("EMA reward") != std::string::npos);
    CHECK(svg.find("nac cartpole") != std::string::npos);
    CHECK_FALSE(is_well_formed_svg("<svg>"));
  }

  TEST_CASE("evaluation matches the exact finite-horizon return") {
    const std::string id = "chain:3:4";
    const auto env = make_env(id);
    const auto& mdp = dynamic_cast<const TabularEnv&>(*env).mdp();
    const SoftmaxPolicy policy = tabular_policy(id, 9);
    const Matrix pi = oracle::policy_table(policy, encoded_states(3, StateEncoding::one_hot));
    const double expected = oracle::finite_horizon_return(mdp, pi, env->max_steps());
    Rng rng(2, Stream::eval);
    const auto summary = evaluate(policy, *env, 4000, rng);
    CHECK(std::abs(summary.mean - expected) <= 4.0 * summary.std / std::sqrt(4000.0));
  }

  TEST_CASE("ratio recovery on a small chain") {
    const auto r = ratio_recovery("chain:3:0", 1, 10000, 500, 0.5);
    CHECK(r.max_rel_error_w_hat <= 0.05);
    CHECK(r.max_rel_error_w <= 0.05);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("train writes one row per episode and is reproducible") {
    const fs::path dir = scratch("train");
    REQUIRE(run_cli(fmt::format("train --algo nac --env chain:3:0 --episodes 5 --seed 1 --out {}", (dir / "a").string())) == 0);
    REQUIRE(run_cli(fmt::format("train --algo nac --env chain:3:0 --episodes 5 --seed 1 --out {}", (dir / "b").string())) == 0);
    const std::string a = slurp(dir / "a" / "episodes.csv");
    CHECK(count_lines(a) == 6);
    CHECK(a == slurp(dir / "b" / "episodes.csv"));
    CHECK(fs::exists(dir / "a" / "policy.txt"));
    CHECK(fs::exists(dir / "a" / "manifest.json"));

    REQUIRE(run_cli(fmt::format("train --algo nac --env chain:3:0 --episodes 5 --seeds 1,2 --out {}", (dir / "s").string())) == 0);
    CHECK(count_lines(slurp(dir / "s" / "seed_2" / "episodes.csv")) == 6);

    const fs::path out = dir / "cmp";
    CHECK(run_cli(fmt::format("compare {} {} --out {} --threshold 1e9", (dir / "a").string(), (dir / "s").string(), out.string()),
                  dir / "cmp.txt") == 0);
    CHECK(is_well_formed_svg(slurp(out / "ema.svg")));
    CHECK(slurp(dir / "cmp.txt").find("never") != std::string::npos);
    fs::remove_all(dir);
  }

  TEST_CASE("eval output format") {
    const fs::path dir = scratch("eval");
    save_policy(dir / "p.txt", SoftmaxPolicy(Mlp({4, 2})));
    REQUIRE(run_cli(fmt::format("eval --policy {} --env cartpole --episodes 1 --out {}", (dir / "p.txt").string(),
                                (dir / "e.csv").string()),
                    dir / "out.txt") == 0);
    const std::string out = slurp(dir / "out.txt");
    CHECK(out.find("std=0.00 episodes=1") != std::string::npos);
    CHECK(out.rfind("mean=", 0) == 0);
    CHECK(count_lines(slurp(dir / "e.csv")) == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("exit codes") {
    const fs::path dir = scratch("codes");
    CHECK(run_cli(fmt::format("train --algo nac --episodes 2 --out {}", (dir / "x").string())) == 2);
    CHECK(run_cli("train --env chain:3:0 --episodes 2") == 2);
    CHECK(run_cli(fmt::format("train --algo nac --env moon --out {}", (dir / "y").string())) == 2);
    CHECK(run_cli("oracle --env cartpole") == 2);
    CHECK(run_cli("oracle --env bogus") == 2);
    CHECK(run_cli("nonsense") == 2);
    CHECK(run_cli("compare only_one --out x") == 2);

    std::ofstream(dir / "div.txt") << "algo = ac\nenv = chain:3:0\nactor_lr = 1e6\ncritic_lr = 1e3\nparam_norm_limit = 10\n";
    CHECK(run_cli(fmt::format("train --config {} --episodes 20 --out {}", (dir / "div.txt").string(), (dir / "z").string())) == 3);
    fs::remove_all(dir);
  }

  TEST_CASE("oracle command") {
    const fs::path dir = scratch("oracle");
    REQUIRE(run_cli("oracle --env chain:1:5 --seed 2", dir / "one.txt") == 0);
    CHECK(slurp(dir / "one.txt").find("grad_norm=0.000000e+00") != std::string::npos);
    REQUIRE(run_cli("oracle --env chain:4:1", dir / "four.txt") == 0);
    const std::string text = slurp(dir / "four.txt");
    for (const char* key : {"J=", "fisher_eigenvalues=", "x_star=", "projection_residual=", "K4="})
      CHECK(text.find(key) != std::string::npos);
    fs::remove_all(dir);
  }
}
