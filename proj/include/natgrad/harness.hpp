#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "natgrad/agent.hpp"

namespace natgrad {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kCsvHeader = "episode,total_reward,ema_reward,steps,wall_ms";

// Per-episode CSV. Rewards use fixed 6-decimal rendering.
std::string format_record(const EpisodeRecord& record);
void write_episode_csv(const std::filesystem::path& path, const std::vector<EpisodeRecord>& records);
std::vector<EpisodeRecord> parse_episode_csv(const std::string& text);
std::vector<EpisodeRecord> read_episode_csv(const std::filesystem::path& path);

using KeyValues = std::map<std::string, std::string>;

/// Flat `key = value` text. `#` starts a comment.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& values);

/// Builds a config from `algo`/`env` defaults, then applies every other key.
/// Throws DomainError on unknown keys or malformed values.
AgentConfig config_from_key_values(const KeyValues& values);
KeyValues config_to_key_values(const AgentConfig& config);

struct RunManifest {
  KeyValues config;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> result_files;
  std::string version = kVersion;
  std::string started;
  std::string finished;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

std::string utc_timestamp();

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  bool diverged = false;
  std::string diagnostic;
  int best_episode = -1;
};

/// Trains one run and writes episodes.csv, policy.txt (best policy),
/// final_policy.txt, value.txt and config.txt into `dir`.
SeedOutcome run_seed(const AgentConfig& config, const std::filesystem::path& dir);

/// Independent runs for each seed. A single seed writes into `out`, several
/// seeds into `out/seed_<n>`. Runs in parallel up to the hardware thread count.
/// Writes out/manifest.json.
std::vector<SeedOutcome> run_seeds(const AgentConfig& base, const std::vector<std::uint64_t>& seeds,
                                   const std::filesystem::path& out);

/// Loads a policy saved by `run_seed`.
SoftmaxPolicy load_policy(const std::filesystem::path& path);
void save_policy(const std::filesystem::path& path, const SoftmaxPolicy& policy);

struct Band {
  std::vector<double> median;
  std::vector<double> lower;  ///< 25th percentile
  std::vector<double> upper;  ///< 75th percentile
};

/// Pointwise median and interquartile range. Throws AlignmentError on ragged curves.
Band aggregate_curves(const std::vector<std::vector<double>>& curves);

struct AlignmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CurveGroup {
  std::string label;
  std::vector<std::vector<double>> curves;
  Band band;
};

/// Collects EMA curves from result directories (a run directory or a sweep
/// directory with seed_* children). Directories with the same label are merged.
std::vector<CurveGroup> load_groups(const std::vector<std::filesystem::path>& dirs);

/// First index with value >= threshold.
std::optional<int> first_crossing(const std::vector<double>& curve, double threshold);

void write_combined_csv(const std::filesystem::path& path, const std::vector<CurveGroup>& groups);
std::string render_svg(const std::vector<CurveGroup>& groups, const std::string& title);
/// Checks the XML prolog, the root element and the closing tag.
bool is_well_formed_svg(const std::string& text);

/// Oracle quantities for a tabular env under a policy, as printable text.
std::string oracle_report(const std::string& env_id, const SoftmaxPolicy& policy);
/// Linear softmax policy for a tabular env, initialised from `seed`.
SoftmaxPolicy tabular_policy(const std::string& env_id, std::uint64_t seed);

struct RatioRecovery {
  Vector exact_w_hat, fitted_w_hat;
  Vector exact_w, fitted_w;
  double max_rel_error_w_hat = 0.0;
  double max_rel_error_w = 0.0;
};

/// Fits tabular w_hat and w from `samples` uniform-behaviour transitions each
/// and compares against the oracle ratios for a random target policy.
RatioRecovery ratio_recovery(const std::string& env_id, std::uint64_t seed, int samples, int fit_steps, double lr);

/// Applies NATGRAD_LOG (debug|info|warn) to the default logger.
void configure_logging();

}  // namespace natgrad
