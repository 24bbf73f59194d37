#pragma once

// Experiment configuration parsing and run-directory output: strict JSON
// config, atomic file writes, lockfile, metrics CSV, JSONL events and
// trajectory dumps.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "steptool/env.hpp"
#include "steptool/errors.hpp"
#include "steptool/eval.hpp"
#include "steptool/optim.hpp"
#include "json.hpp"

namespace steptool {

struct ExperimentConfig {
  WorldConfig world;
  std::uint64_t world_seed = 7;
  TrainConfig train;
  StrategySpec eval_strategy;
  int eval_runs = 5;
  std::uint64_t eval_seed = 11;
  std::string out_dir = "runs/default";
  int checkpoint_interval = 25;
  std::string log_level = "info";
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::vector<std::string>& known,
                                const std::string& section) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const auto& k : known)
      if (it.key() == k) { ok = true; break; }
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in config section '" + section + "'");
  }
}

template <typename T>
inline void read_if(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

inline DecodeConfig decode_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"mode", "temperature"}, "decode");
  DecodeConfig dec;
  if (j.contains("mode")) dec.mode = decode_mode_from_string(j.at("mode").get<std::string>());
  detail::read_if(j, "temperature", dec.temperature);
  if (dec.temperature <= 0.0) throw ConfigError("decode temperature must be > 0");
  return dec;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"world", "train", "eval", "io", "seeds"}, "<root>");
  ExperimentConfig cfg;
  if (j.contains("world")) {
    const auto& w = j.at("world");
    detail::reject_unknown_keys(
        w,
        {"n_tools", "n_args", "args_per_tool", "n_tasks", "items_per_task_min",
         "items_per_task_max", "distractors_per_relevant", "horizon", "max_action_len",
         "task_feature_buckets"},
        "world");
    detail::read_if(w, "n_tools", cfg.world.n_tools);
    detail::read_if(w, "n_args", cfg.world.n_args);
    detail::read_if(w, "args_per_tool", cfg.world.args_per_tool);
    detail::read_if(w, "n_tasks", cfg.world.n_tasks);
    detail::read_if(w, "items_per_task_min", cfg.world.items_per_task_min);
    detail::read_if(w, "items_per_task_max", cfg.world.items_per_task_max);
    detail::read_if(w, "distractors_per_relevant", cfg.world.distractors_per_relevant);
    detail::read_if(w, "horizon", cfg.world.horizon);
    detail::read_if(w, "max_action_len", cfg.world.max_action_len);
    detail::read_if(w, "task_feature_buckets", cfg.world.task_feature_buckets);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(
        t,
        {"alpha", "gamma", "gae_lambda", "clip_epsilon", "kl_coef", "learning_rate",
         "critic_learning_rate", "entropy_coef", "batch_size", "ppo_epochs", "critic_epochs",
         "iterations", "standardize_advantages", "ablation_mode", "optimizer", "decode",
         "hidden_dim"},
        "train");
    detail::read_if(t, "alpha", cfg.train.alpha);
    detail::read_if(t, "gamma", cfg.train.gamma);
    detail::read_if(t, "gae_lambda", cfg.train.gae_lambda);
    detail::read_if(t, "clip_epsilon", cfg.train.clip_epsilon);
    detail::read_if(t, "kl_coef", cfg.train.kl_coef);
    detail::read_if(t, "learning_rate", cfg.train.learning_rate);
    detail::read_if(t, "critic_learning_rate", cfg.train.critic_learning_rate);
    detail::read_if(t, "entropy_coef", cfg.train.entropy_coef);
    detail::read_if(t, "batch_size", cfg.train.batch_size);
    detail::read_if(t, "ppo_epochs", cfg.train.ppo_epochs);
    detail::read_if(t, "critic_epochs", cfg.train.critic_epochs);
    detail::read_if(t, "iterations", cfg.train.iterations);
    detail::read_if(t, "standardize_advantages", cfg.train.standardize_advantages);
    detail::read_if(t, "hidden_dim", cfg.train.hidden_dim);
    if (t.contains("ablation_mode"))
      cfg.train.ablation_mode = ablation_mode_from_string(t.at("ablation_mode").get<std::string>());
    if (t.contains("optimizer"))
      cfg.train.optimizer = optimizer_kind_from_string(t.at("optimizer").get<std::string>());
    if (t.contains("decode")) cfg.train.decode = decode_config_from_json(t.at("decode"));
    cfg.train.validate();
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown_keys(
        e, {"strategy", "greedy", "width", "budget", "runs", "decode", "unsure_weight"}, "eval");
    if (e.contains("strategy")) cfg.eval_strategy.kind = e.at("strategy").get<std::string>();
    if (cfg.eval_strategy.kind != "sequential" && cfg.eval_strategy.kind != "dfs")
      throw ConfigError("eval strategy must be 'sequential' or 'dfs'");
    detail::read_if(e, "greedy", cfg.eval_strategy.greedy);
    detail::read_if(e, "width", cfg.eval_strategy.width);
    detail::read_if(e, "budget", cfg.eval_strategy.budget);
    detail::read_if(e, "unsure_weight", cfg.eval_strategy.unsure_weight);
    detail::read_if(e, "runs", cfg.eval_runs);
    if (e.contains("decode")) cfg.eval_strategy.decode = decode_config_from_json(e.at("decode"));
  }
  if (j.contains("io")) {
    const auto& io = j.at("io");
    detail::reject_unknown_keys(io, {"out_dir", "checkpoint_interval", "log_level"}, "io");
    detail::read_if(io, "out_dir", cfg.out_dir);
    detail::read_if(io, "checkpoint_interval", cfg.checkpoint_interval);
    detail::read_if(io, "log_level", cfg.log_level);
    if (cfg.checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
    if (cfg.log_level != "info" && cfg.log_level != "debug" && cfg.log_level != "quiet")
      throw ConfigError("log_level must be one of quiet/info/debug");
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    detail::reject_unknown_keys(s, {"world", "policy_init", "rollout", "eval"}, "seeds");
    detail::read_if(s, "world", cfg.world_seed);
    detail::read_if(s, "policy_init", cfg.train.seed_policy_init);
    detail::read_if(s, "rollout", cfg.train.seed_rollout);
    detail::read_if(s, "eval", cfg.eval_seed);
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["world"] = {{"n_tools", cfg.world.n_tools},
                {"n_args", cfg.world.n_args},
                {"args_per_tool", cfg.world.args_per_tool},
                {"n_tasks", cfg.world.n_tasks},
                {"items_per_task_min", cfg.world.items_per_task_min},
                {"items_per_task_max", cfg.world.items_per_task_max},
                {"distractors_per_relevant", cfg.world.distractors_per_relevant},
                {"horizon", cfg.world.horizon},
                {"max_action_len", cfg.world.max_action_len},
                {"task_feature_buckets", cfg.world.task_feature_buckets}};
  j["train"] = {{"alpha", cfg.train.alpha},
                {"gamma", cfg.train.gamma},
                {"gae_lambda", cfg.train.gae_lambda},
                {"clip_epsilon", cfg.train.clip_epsilon},
                {"kl_coef", cfg.train.kl_coef},
                {"learning_rate", cfg.train.learning_rate},
                {"critic_learning_rate", cfg.train.critic_learning_rate},
                {"entropy_coef", cfg.train.entropy_coef},
                {"batch_size", cfg.train.batch_size},
                {"ppo_epochs", cfg.train.ppo_epochs},
                {"critic_epochs", cfg.train.critic_epochs},
                {"iterations", cfg.train.iterations},
                {"standardize_advantages", cfg.train.standardize_advantages},
                {"ablation_mode", to_string(cfg.train.ablation_mode)},
                {"optimizer", to_string(cfg.train.optimizer)},
                {"hidden_dim", cfg.train.hidden_dim},
                {"decode",
                 {{"mode", to_string(cfg.train.decode.mode)},
                  {"temperature", cfg.train.decode.temperature}}}};
  j["eval"] = {{"strategy", cfg.eval_strategy.kind},
               {"greedy", cfg.eval_strategy.greedy},
               {"width", cfg.eval_strategy.width},
               {"budget", cfg.eval_strategy.budget},
               {"unsure_weight", cfg.eval_strategy.unsure_weight},
               {"runs", cfg.eval_runs},
               {"decode",
                {{"mode", to_string(cfg.eval_strategy.decode.mode)},
                 {"temperature", cfg.eval_strategy.decode.temperature}}}};
  j["io"] = {{"out_dir", cfg.out_dir},
             {"checkpoint_interval", cfg.checkpoint_interval},
             {"log_level", cfg.log_level}};
  j["seeds"] = {{"world", cfg.world_seed},
                {"policy_init", cfg.train.seed_policy_init},
                {"rollout", cfg.train.seed_rollout},
                {"eval", cfg.eval_seed}};
  return j;
}

// ---------------------------------------------------------------------------
// Atomic writes and the run directory

// Writes to <path>.tmp then renames, so readers never observe a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed for " + path.string() + ": " + ec.message());
}

// Refuses to start a run in a directory another live run owns.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) : lock_path_(dir / "run.lock") {
    std::filesystem::create_directories(dir);
    if (std::filesystem::exists(lock_path_))
      throw IoError("run directory is locked (stale run.lock?): " + lock_path_.string());
    std::ofstream out(lock_path_);
    if (!out) throw IoError("cannot create lockfile: " + lock_path_.string());
    out << "locked\n";
    held_ = true;
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (held_) {
      std::error_code ec;
      std::filesystem::remove(lock_path_, ec);
    }
  }

 private:
  std::filesystem::path lock_path_;
  bool held_ = false;
};

inline std::string metrics_csv_header() {
  return "iteration,mean_return,pass_rate,tool_success_rate,mean_kl,clip_fraction,value_loss";
}

inline std::string metrics_csv_row(const MetricsRow& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.iteration << ',' << r.mean_return << ',' << r.pass_rate << ','
     << r.tool_success_rate << ',' << r.mean_kl << ',' << r.clip_fraction << ','
     << r.value_loss;
  return os.str();
}

inline nlohmann::json trajectory_to_json(const ToolWorld& world, const Trajectory& traj,
                                         double alpha) {
  nlohmann::json j;
  j["task_id"] = traj.task_id;
  j["alpha"] = alpha;
  j["steps"] = nlohmann::json::array();
  nlohmann::json normalized = nlohmann::json::array();
  for (int t = 0; t < traj.length(); ++t) {
    const TrajectoryStep& st = traj.steps[static_cast<size_t>(t)];
    nlohmann::json sj;
    sj["action_tokens"] = st.action.tokens;
    sj["obs_tokens"] = st.obs;
    sj["old_logprobs"] = st.old_logprobs;
    if (t < traj.length() - 1 && t < static_cast<int>(traj.rewards.size())) {
      sj["sc"] = traj.rewards[static_cast<size_t>(t)].succ_calling;
      sj["contribution"] = traj.rewards[static_cast<size_t>(t)].contribution;
    }
    j["steps"].push_back(std::move(sj));
  }
  for (const StepReward& r : traj.rewards) normalized.push_back(r.normalized);
  j["normalized_rewards"] = std::move(normalized);
  const TrajectoryStep& last = traj.steps.back();
  nlohmann::json fj;
  fj["answer_tokens"] = last.action.kind == ActionKind::Finish
                            ? nlohmann::json(last.action.answer)
                            : nlohmann::json(nlohmann::json::array());
  fj["status"] = to_string(judge_trajectory_solved(world, traj));
  j["final"] = std::move(fj);
  return j;
}

// Rebuilds a trajectory by replaying its recorded actions through the
// environment; recorded observations must match the replay exactly.
inline Trajectory trajectory_from_json(const ToolWorld& world, const nlohmann::json& j) {
  Trajectory traj;
  traj.task_id = j.at("task_id").get<int>();
  EnvState s = reset(world, traj.task_id);
  for (const auto& sj : j.at("steps")) {
    if (s.done) throw SchemaError("trajectory replay: steps continue past a terminal state");
    Action a = parse_action(world.vocab, sj.at("action_tokens").get<std::vector<Token>>());
    auto [next, rec] = step(world, s, a);
    if (rec.obs != sj.at("obs_tokens").get<std::vector<Token>>())
      throw SchemaError("trajectory replay: recorded observation diverges from environment");
    std::vector<double> old_lp;
    if (sj.contains("old_logprobs")) old_lp = sj.at("old_logprobs").get<std::vector<double>>();
    traj.steps.push_back({s, std::move(a), rec.obs, std::move(old_lp)});
    s = next;
  }
  if (!s.done) throw NonTerminalTrajectory("trajectory replay: episode did not terminate");
  traj.terminal = true;
  return traj;
}

// Append-friendly JSONL event stream (one compact JSON object per line).
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path)
      : out_(path, std::ios::binary | std::ios::app) {
    if (!out_) throw IoError("cannot open jsonl file: " + path.string());
  }
  void write(const nlohmann::json& j) { out_ << j.dump() << '\n'; }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

}  // namespace steptool
