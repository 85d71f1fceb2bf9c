#include "natgrad/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <json.hpp>

#include "natgrad/errors.hpp"
#include "natgrad/oracle.hpp"
#include "natgrad/ratio.hpp"

namespace fs = std::filesystem;

namespace natgrad {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) parts.push_back(trim(item));
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError(fmt::format("cannot read '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError(fmt::format("cannot write '{}'", path.string()));
  out << text;
  if (!out) throw DomainError(fmt::format("write failed for '{}'", path.string()));
}

double to_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size())
    throw DomainError(fmt::format("'{}' expects a number, got '{}'", key, value));
  return v;
}

long long to_int(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (value.empty() || end != value.c_str() + value.size())
    throw DomainError(fmt::format("'{}' expects an integer, got '{}'", key, value));
  return v;
}

std::vector<int> to_dims(const std::string& key, const std::string& value) {
  std::vector<int> dims;
  if (trim(value).empty() || value == "none") return dims;
  for (const auto& part : split(value, ',')) {
    const long long d = to_int(key, part);
    if (d < 1) throw DomainError(fmt::format("'{}' needs positive layer sizes", key));
    dims.push_back(static_cast<int>(d));
  }
  return dims;
}

std::string dims_text(const std::vector<int>& dims) {
  if (dims.empty()) return "none";
  return fmt::format("{}", fmt::join(dims, ","));
}

std::string number_text(double v) { return fmt::format("{}", v); }

}  // namespace

std::string format_record(const EpisodeRecord& r) {
  return fmt::format("{},{:.6f},{:.6f},{},{}", r.index, r.total_reward, r.ema_reward, r.steps, r.wall_ms);
}

void write_episode_csv(const fs::path& path, const std::vector<EpisodeRecord>& records) {
  std::string text = std::string(kCsvHeader) + "\n";
  for (const auto& r : records) text += format_record(r) + "\n";
  spill(path, text);
}

std::vector<EpisodeRecord> parse_episode_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCsvHeader) throw DomainError("episode CSV: missing or wrong header");
  std::vector<EpisodeRecord> records;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    if (cells.size() != 5) throw DomainError(fmt::format("episode CSV: bad row '{}'", line));
    EpisodeRecord r;
    r.index = static_cast<int>(to_int("episode", cells[0]));
    r.total_reward = to_double("total_reward", cells[1]);
    r.ema_reward = to_double("ema_reward", cells[2]);
    r.steps = static_cast<int>(to_int("steps", cells[3]));
    r.wall_ms = to_int("wall_ms", cells[4]);
    records.push_back(r);
  }
  return records;
}

std::vector<EpisodeRecord> read_episode_csv(const fs::path& path) { return parse_episode_csv(slurp(path)); }

KeyValues parse_key_values(const std::string& text) {
  KeyValues values;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DomainError(fmt::format("config line {}: expected key = value", lineno));
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw DomainError(fmt::format("config line {}: empty key", lineno));
    values[key] = trim(line.substr(eq + 1));
  }
  return values;
}

KeyValues read_key_values(const fs::path& path) { return parse_key_values(slurp(path)); }

std::string format_key_values(const KeyValues& values) {
  std::string text;
  for (const auto& [k, v] : values) text += fmt::format("{} = {}\n", k, v);
  return text;
}

AgentConfig config_from_key_values(const KeyValues& values) {
  const auto find = [&](const std::string& key) -> const std::string* {
    auto it = values.find(key);
    return it == values.end() ? nullptr : &it->second;
  };
  const std::string* env = find("env");
  if (env == nullptr || env->empty()) throw DomainError("missing required setting 'env'");
  const std::string* algo = find("algo");
  const Algorithm algorithm = parse_algorithm(algo ? *algo : "nac");
  make_env(*env);  // rejects unknown ids early
  const std::string* lambda = find("lambda");
  const bool traced = lambda != nullptr && to_double("lambda", *lambda) > 0.0;
  AgentConfig c = default_config(algorithm, *env, traced);

  for (const auto& [key, value] : values) {
    if (key == "algo" || key == "env") continue;
    if (key == "lambda") c.lambda = to_double(key, value);
    else if (key == "gamma") c.gamma = to_double(key, value);
    else if (key == "episodes") c.episodes = static_cast<int>(to_int(key, value));
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(key, value));
    else if (key == "actor_lr") c.actor_lr = to_double(key, value);
    else if (key == "critic_lr") c.critic_lr = to_double(key, value);
    else if (key == "adv_lr") c.advantage_lr = to_double(key, value);
    else if (key == "ratio_lr") c.ratio_lr = to_double(key, value);
    else if (key == "schedule") c.schedule = StepSchedule::parse(value);
    else if (key == "actor_hidden") c.actor_hidden = to_dims(key, value);
    else if (key == "critic_hidden") c.critic_hidden = to_dims(key, value);
    else if (key == "activation") c.activation = parse_activation(value);
    else if (key == "behavior") {
      if (value == "uniform") c.behavior = BehaviorKind::uniform;
      else if (value == "target") c.behavior = BehaviorKind::target;
      else throw DomainError(fmt::format("behavior must be uniform or target, got '{}'", value));
    } else if (key == "ratio_source") {
      if (value == "fitted") c.ratio.source = RatioSource::fitted;
      else if (value == "exact") c.ratio.source = RatioSource::exact;
      else throw DomainError(fmt::format("ratio_source must be fitted or exact, got '{}'", value));
    } else if (key == "ratio_refit_every") c.ratio.refit_every = static_cast<int>(to_int(key, value));
    else if (key == "ratio_clip") c.ratio.clip = to_double(key, value);
    else if (key == "ratio_fit_steps") c.ratio.fit_steps = static_cast<int>(to_int(key, value));
    else if (key == "ratio_minibatch") c.ratio.minibatch = static_cast<int>(to_int(key, value));
    else if (key == "ratio_buffer") c.ratio.buffer_size = static_cast<int>(to_int(key, value));
    else if (key == "ratio_hidden") c.ratio.hidden = to_dims(key, value);
    else if (key == "ratio_bandwidth") {
      if (value == "median") c.ratio.bandwidth.reset();
      else c.ratio.bandwidth = to_double(key, value);
    } else if (key == "episode_cap") c.episode_cap = static_cast<int>(to_int(key, value));
    else if (key == "param_norm_limit") c.param_norm_limit = to_double(key, value);
    else throw DomainError(fmt::format("unknown setting '{}'", key));
  }
  c.validate();
  return c;
}

KeyValues config_to_key_values(const AgentConfig& c) {
  KeyValues v;
  v["algo"] = to_string(c.algorithm);
  v["env"] = c.env_id;
  v["lambda"] = number_text(c.lambda);
  v["gamma"] = number_text(c.gamma);
  v["episodes"] = std::to_string(c.episodes);
  v["seed"] = std::to_string(c.seed);
  v["actor_lr"] = number_text(c.actor_lr);
  v["critic_lr"] = number_text(c.critic_lr);
  v["adv_lr"] = number_text(c.advantage_lr);
  v["ratio_lr"] = number_text(c.ratio_lr);
  v["schedule"] = c.schedule.to_string();
  v["actor_hidden"] = dims_text(c.actor_hidden);
  v["critic_hidden"] = dims_text(c.critic_hidden);
  v["activation"] = to_string(c.activation);
  v["behavior"] = c.behavior == BehaviorKind::uniform ? "uniform" : "target";
  v["ratio_source"] = c.ratio.source == RatioSource::fitted ? "fitted" : "exact";
  v["ratio_refit_every"] = std::to_string(c.ratio.refit_every);
  v["ratio_clip"] = number_text(c.ratio.clip);
  v["ratio_fit_steps"] = std::to_string(c.ratio.fit_steps);
  v["ratio_minibatch"] = std::to_string(c.ratio.minibatch);
  v["ratio_buffer"] = std::to_string(c.ratio.buffer_size);
  v["ratio_hidden"] = dims_text(c.ratio.hidden);
  v["ratio_bandwidth"] = c.ratio.bandwidth ? number_text(*c.ratio.bandwidth) : "median";
  v["episode_cap"] = std::to_string(c.episode_cap);
  v["param_norm_limit"] = number_text(c.param_norm_limit);
  return v;
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["version"] = version;
  j["config"] = config;
  j["seeds"] = seeds;
  j["result_files"] = result_files;
  j["started"] = started;
  j["finished"] = finished;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RunManifest m;
    m.version = j.at("version").get<std::string>();
    m.config = j.at("config").get<KeyValues>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.result_files = j.at("result_files").get<std::vector<std::string>>();
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(fmt::format("bad manifest: {}", e.what()));
  }
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void save_policy(const fs::path& path, const SoftmaxPolicy& policy) {
  std::ostringstream out;
  out << "reference_logit " << (policy.reference_logit() ? 1 : 0) << "\n";
  save_mlp(out, policy.net());
  spill(path, out.str());
}

SoftmaxPolicy load_policy(const fs::path& path) {
  std::istringstream in(slurp(path));
  std::string tag;
  int reference = 0;
  if (!(in >> tag >> reference) || tag != "reference_logit")
    throw DomainError(fmt::format("'{}' is not a policy file", path.string()));
  in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  return SoftmaxPolicy(load_mlp(in), reference != 0);
}

SeedOutcome run_seed(const AgentConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  spill(dir / "config.txt", format_key_values(config_to_key_values(config)));
  const TrainResult result = train(config);
  write_episode_csv(dir / "episodes.csv", result.records);
  save_policy(dir / "policy.txt", result.best_policy);
  save_policy(dir / "final_policy.txt", result.policy);
  {
    std::ostringstream out;
    save_mlp(out, result.value_net);
    spill(dir / "value.txt", out.str());
  }
  return {config.seed, dir, result.diverged, result.diagnostic, result.best_episode};
}

std::vector<SeedOutcome> run_seeds(const AgentConfig& base, const std::vector<std::uint64_t>& seeds,
                                   const fs::path& out) {
  if (seeds.empty()) throw DomainError("no seeds given");
  fs::create_directories(out);
  RunManifest manifest;
  manifest.config = config_to_key_values(base);
  manifest.config.erase("seed");
  manifest.seeds = seeds;
  manifest.started = utc_timestamp();

  std::vector<SeedOutcome> outcomes(seeds.size());
  std::vector<std::string> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < seeds.size();) {
      AgentConfig config = base;
      config.seed = seeds[i];
      const fs::path dir = seeds.size() == 1 ? out : out / fmt::format("seed_{}", seeds[i]);
      try {
        outcomes[i] = run_seed(config, dir);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t n_threads =
      std::min<std::size_t>(seeds.size(), std::max(1u, std::thread::hardware_concurrency()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (!e.empty()) throw DomainError(e);

  for (const auto& o : outcomes) manifest.result_files.push_back(fs::relative(o.dir / "episodes.csv", out).string());
  manifest.finished = utc_timestamp();
  spill(out / "manifest.json", manifest.to_json());
  return outcomes;
}

Band aggregate_curves(const std::vector<std::vector<double>>& curves) {
  if (curves.empty()) throw AlignmentError("no curves to aggregate");
  const std::size_t len = curves.front().size();
  for (const auto& c : curves)
    if (c.size() != len)
      throw AlignmentError(fmt::format("episode counts differ: {} vs {}", len, c.size()));
  Band band;
  band.median.resize(len);
  band.lower.resize(len);
  band.upper.resize(len);
  std::vector<double> column(curves.size());
  // Linear interpolation between order statistics.
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(column.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, column.size() - 1);
    return column[lo] + (pos - static_cast<double>(lo)) * (column[hi] - column[lo]);
  };
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t k = 0; k < curves.size(); ++k) column[k] = curves[k][i];
    std::sort(column.begin(), column.end());
    band.median[i] = quantile(0.5);
    band.lower[i] = quantile(0.25);
    band.upper[i] = quantile(0.75);
  }
  return band;
}

std::vector<CurveGroup> load_groups(const std::vector<fs::path>& dirs) {
  std::vector<CurveGroup> groups;
  for (const auto& dir : dirs) {
    std::vector<fs::path> csvs;
    if (fs::exists(dir / "episodes.csv")) {
      csvs.push_back(dir / "episodes.csv");
    } else if (fs::is_directory(dir)) {
      for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory() && entry.path().filename().string().rfind("seed_", 0) == 0 &&
            fs::exists(entry.path() / "episodes.csv"))
          csvs.push_back(entry.path() / "episodes.csv");
      std::sort(csvs.begin(), csvs.end());
    }
    if (csvs.empty()) throw DomainError(fmt::format("no results in '{}'", dir.string()));

    std::string label = fs::path(dir).lexically_normal().filename().string();
    if (label.empty()) label = fs::path(dir).lexically_normal().parent_path().filename().string();
    if (fs::exists(dir / "manifest.json")) {
      const auto m = RunManifest::from_json(slurp(dir / "manifest.json"));
      if (m.config.count("algo") && m.config.count("env"))
        label = fmt::format("{} {}", m.config.at("algo"), m.config.at("env"));
    }
    auto it = std::find_if(groups.begin(), groups.end(), [&](const CurveGroup& g) { return g.label == label; });
    if (it == groups.end()) {
      groups.push_back({label, {}, {}});
      it = groups.end() - 1;
    }
    for (const auto& csv : csvs) {
      std::vector<double> curve;
      for (const auto& r : read_episode_csv(csv)) curve.push_back(r.ema_reward);
      it->curves.push_back(std::move(curve));
    }
  }
  std::size_t len = groups.front().curves.front().size();
  for (auto& g : groups) {
    for (const auto& c : g.curves)
      if (c.size() != len) throw AlignmentError(fmt::format("episode counts differ: {} vs {}", len, c.size()));
    g.band = aggregate_curves(g.curves);
  }
  return groups;
}

std::optional<int> first_crossing(const std::vector<double>& curve, double threshold) {
  for (std::size_t i = 0; i < curve.size(); ++i)
    if (curve[i] >= threshold) return static_cast<int>(i);
  return std::nullopt;
}

void write_combined_csv(const fs::path& path, const std::vector<CurveGroup>& groups) {
  std::string text = "episode";
  for (const auto& g : groups) text += fmt::format(",{0} median,{0} q25,{0} q75", g.label);
  text += "\n";
  const std::size_t len = groups.empty() ? 0 : groups.front().band.median.size();
  for (std::size_t i = 0; i < len; ++i) {
    text += std::to_string(i);
    for (const auto& g : groups)
      text += fmt::format(",{:.6f},{:.6f},{:.6f}", g.band.median[i], g.band.lower[i], g.band.upper[i]);
    text += "\n";
  }
  spill(path, text);
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(const std::vector<CurveGroup>& groups, const std::string& title) {
  constexpr double width = 720, height = 440, left = 70, right = 170, top = 40, bottom = 50;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  std::size_t len = 0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& g : groups) {
    len = std::max(len, g.band.median.size());
    for (double v : g.band.lower) lo = std::min(lo, v);
    for (double v : g.band.upper) hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-9) lo -= 1, hi += 1;
  const double span_x = len > 1 ? static_cast<double>(len - 1) : 1.0;
  auto px = [&](std::size_t i) { return left + plot_w * static_cast<double>(i) / span_x; };
  auto py = [&](double v) { return top + plot_h * (1.0 - (v - lo) / (hi - lo)); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
                   width, height, width, height);
  s += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", width, height);
  s += fmt::format("<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
                   left + plot_w / 2, xml_escape(title));
  s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", left, top,
                   plot_w, plot_h);
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    const std::size_t ep = static_cast<std::size_t>(span_x * k / 4.0);
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.0f}</text>\n",
                     left - 6, py(v) + 4, v);
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                     px(ep), top + plot_h + 16, ep);
  }
  s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">Episodes</text>\n",
                   left + plot_w / 2, height - 10);
  s += fmt::format("<text x=\"16\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1f})\">EMA reward</text>\n",
                   top + plot_h / 2, top + plot_h / 2);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& b = groups[gi].band;
    const char* color = palette[gi % std::size(palette)];
    std::string band_pts, median_pts;
    for (std::size_t i = 0; i < b.upper.size(); ++i) band_pts += fmt::format("{:.2f},{:.2f} ", px(i), py(b.upper[i]));
    for (std::size_t i = b.lower.size(); i-- > 0;) band_pts += fmt::format("{:.2f},{:.2f} ", px(i), py(b.lower[i]));
    for (std::size_t i = 0; i < b.median.size(); ++i) median_pts += fmt::format("{:.2f},{:.2f} ", px(i), py(b.median[i]));
    s += fmt::format("<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n", band_pts, color);
    s += fmt::format("<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n", median_pts, color);
    const double ly = top + 16 + 18 * static_cast<double>(gi);
    s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>\n",
                     left + plot_w + 10, ly, left + plot_w + 30, color);
    s += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
                     left + plot_w + 36, ly + 4, xml_escape(groups[gi].label));
  }
  s += "</svg>\n";
  return s;
}

bool is_well_formed_svg(const std::string& text) {
  if (text.rfind("<?xml", 0) != 0) return false;
  const auto root = text.find("<svg ");
  if (root == std::string::npos || text.find("xmlns=\"http://www.w3.org/2000/svg\"", root) == std::string::npos)
    return false;
  const std::string closing = "</svg>";
  const std::string body = trim(text);
  return body.size() >= closing.size() && body.compare(body.size() - closing.size(), closing.size(), closing) == 0 &&
         text.find(closing) == text.rfind(closing);
}

SoftmaxPolicy tabular_policy(const std::string& env_id, std::uint64_t seed) {
  auto env = make_env(env_id);
  if (!dynamic_cast<const TabularEnv*>(env.get()))
    throw DomainError(fmt::format("'{}' is not a tabular environment", env_id));
  Rng rng(seed, Stream::init);
  const std::vector<int> dims = {env->obs_dim(), env->n_actions()};
  return SoftmaxPolicy(Mlp::random(dims, Activation::tanh, rng));
}

std::string oracle_report(const std::string& env_id, const SoftmaxPolicy& policy) {
  auto env = make_env(env_id);
  const auto* tabular = dynamic_cast<const TabularEnv*>(env.get());
  if (tabular == nullptr) throw DomainError(fmt::format("'{}' is not a tabular environment", env_id));
  const TabularMdp& mdp = tabular->mdp();
  const auto states = encoded_states(mdp.n_states(), tabular->encoding());
  const auto gradient = oracle::objective_and_gradient(mdp, policy, states);
  const auto fisher = oracle::fisher_and_xstar(mdp, policy, states);
  const double residual = oracle::projection_condition(mdp, policy, states, fisher.x_star).norm();
  const Matrix mu = oracle::uniform_table(mdp.n_states(), mdp.n_actions());
  const auto bounds = oracle::lipschitz_and_bounds(mdp, policy, states, mu);
  auto vec = [](const Vector& v) {
    std::vector<std::string> parts;
    for (Eigen::Index i = 0; i < v.size(); ++i) parts.push_back(fmt::format("{:.10g}", v(i)));
    return fmt::format("[{}]", fmt::join(parts, ", "));
  };
  std::string s;
  s += fmt::format("env={} states={} actions={} gamma={}\n", env_id, mdp.n_states(), mdp.n_actions(), mdp.gamma());
  const Matrix pi = oracle::policy_table(policy, states);
  s += fmt::format("V={}\n", vec(oracle::exact_values(mdp, pi).v));
  s += fmt::format("visitation={}\n", vec(oracle::visitation(mdp, pi)));
  s += fmt::format("J={:.12g}\n", gradient.j);
  s += fmt::format("grad_norm={:.6e}\n", gradient.grad.norm());
  s += fmt::format("fisher_eigenvalues={}\n", vec(fisher.eigenvalues));
  s += fmt::format("fisher_degenerate={}\n", fisher.degenerate ? "yes" : "no");
  s += fmt::format("x_star={}\n", vec(fisher.x_star));
  s += fmt::format("projection_residual={:.6e}\n", residual);
  s += fmt::format("fisher_norm={:.10g} K2={:.10g} K3={:.10g} K4={:.10g} K5={:.10g} K6={:.10g}\n", bounds.fisher_norm,
                   bounds.k2, bounds.k3, bounds.k4, bounds.k5, bounds.k6);
  return s;
}

RatioRecovery ratio_recovery(const std::string& env_id, std::uint64_t seed, int samples, int fit_steps, double lr) {
  if (samples < 2) throw DomainError("ratio_recovery: need at least 2 samples");
  auto env = make_env(env_id);
  const auto* tabular = dynamic_cast<const TabularEnv*>(env.get());
  if (tabular == nullptr) throw DomainError(fmt::format("'{}' is not a tabular environment", env_id));
  const TabularMdp& mdp = tabular->mdp();
  const int n = mdp.n_states(), n_actions = mdp.n_actions();
  const StateEncoding encoding = tabular->encoding();
  const auto states = encoded_states(n, encoding);
  const SoftmaxPolicy policy = tabular_policy(env_id, seed);
  const Matrix pi = oracle::policy_table(policy, states);
  const Matrix mu = oracle::uniform_table(n, n_actions);
  const double gamma = mdp.gamma();
  Rng rng(seed, Stream::ratio);

  auto transition = [&](int s, int a, int next, double weight) {
    return RatioTransition{states[s], a, states[next], pi(s, a) / mu(s, a), weight};
  };

  // Stationary target: one long behaviour trajectory after burn-in.
  TransitionBatch stationary_batch;
  int s = mdp.sample_initial(rng);
  for (int t = 0; t < 200; ++t) s = mdp.sample_next(s, static_cast<int>(rng.below(n_actions)), rng);
  for (int t = 0; t < samples; ++t) {
    const int a = static_cast<int>(rng.below(n_actions));
    const int next = mdp.sample_next(s, a, rng);
    stationary_batch.transitions.push_back(transition(s, a, next, 1.0));
    s = next;
  }

  // Visitation target: restarts from d0 with discount weights per episode.
  TransitionBatch visitation_batch;
  const int horizon = std::max(1, static_cast<int>(std::ceil(std::log(1e-3) / std::log(gamma))));
  while (static_cast<int>(visitation_batch.transitions.size()) < samples) {
    s = mdp.sample_initial(rng);
    visitation_batch.start_states.push_back(states[s]);
    const int len = std::min(horizon, samples - static_cast<int>(visitation_batch.transitions.size()));
    const double mass = (1.0 - std::pow(gamma, len)) / (1.0 - gamma);
    for (int t = 0; t < len; ++t) {
      const int a = static_cast<int>(rng.below(n_actions));
      const int next = mdp.sample_next(s, a, rng);
      visitation_batch.transitions.push_back(transition(s, a, next, std::pow(gamma, t) / mass));
      s = next;
    }
  }

  auto w_hat = RatioEstimator::tabular(n, encoding, RatioTarget::stationary, gamma);
  auto w = RatioEstimator::tabular(n, encoding, RatioTarget::visitation, gamma);
  fit_ratio(w_hat, stationary_batch, fit_steps, lr, nullptr);
  fit_ratio(w, visitation_batch, fit_steps, lr, nullptr);

  const ExactRatios exact = exact_ratios(mdp, pi, mu);
  RatioRecovery out{exact.w_hat, w_hat.table(), exact.w, w.table(), 0.0, 0.0};
  for (int i = 0; i < n; ++i) {
    out.max_rel_error_w_hat =
        std::max(out.max_rel_error_w_hat, std::abs(out.fitted_w_hat(i) - out.exact_w_hat(i)) / out.exact_w_hat(i));
    out.max_rel_error_w = std::max(out.max_rel_error_w, std::abs(out.fitted_w(i) - out.exact_w(i)) / out.exact_w(i));
  }
  return out;
}

void configure_logging() {
  const char* level = std::getenv("NATGRAD_LOG");
  const std::string value = level ? level : "";
  if (value == "debug") spdlog::set_level(spdlog::level::debug);
  else if (value == "info") spdlog::set_level(spdlog::level::info);
  else spdlog::set_level(spdlog::level::warn);
}

}  // namespace natgrad
