#pragma once

// Evaluation harness: sequential (CoT-style) and depth-first-search rollout
// strategies, pass rate, win rate, and intermediate tool-invocation success
// rate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "steptool/env.hpp"
#include "steptool/errors.hpp"
#include "steptool/policy.hpp"
#include "steptool/reward.hpp"

namespace steptool {

inline Trajectory rollout_sequential(const ToolWorld& world, const PolicyParams& params,
                                     int task_id, Rng& rng, bool greedy = false,
                                     const DecodeConfig& dec = {}) {
  Trajectory traj;
  traj.task_id = task_id;
  EnvState s = reset(world, task_id);
  while (!s.done) {
    SampledAction sa = sample_action(params, world, s, rng, dec, greedy);
    auto [next, rec] = step(world, s, sa.action);
    traj.steps.push_back({s, sa.action, rec.obs, sa.logprobs});
    s = next;
  }
  traj.terminal = true;
  return traj;
}

namespace detail {

struct Candidate {
  std::vector<Token> tokens;
  std::vector<double> logprobs;
  double total = 0.0;
};

inline bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.total != b.total) return a.total > b.total;
  return a.tokens < b.tokens;
}

// Beam extraction of the `width` highest-probability complete actions from a
// state. Width 1 degenerates to greedy decoding: each round keeps exactly
// the argmax continuation.
inline std::vector<Candidate> top_actions(const PolicyParams& params, const ToolWorld& world,
                                          const EnvState& state, int width,
                                          const DecodeConfig& dec) {
  std::vector<Candidate> alive{Candidate{}};
  std::vector<Candidate> frozen;
  while (!alive.empty() && static_cast<int>(frozen.size()) < width) {
    std::vector<Candidate> pool = frozen;
    std::vector<Candidate> next_alive_pool;
    for (const Candidate& beam : alive) {
      auto lp = next_token_logprobs(params, world, state, beam.tokens, dec);
      for (size_t v = 0; v < lp.size(); ++v) {
        if (lp[v] == -std::numeric_limits<double>::infinity()) continue;
        Candidate child = beam;
        child.tokens.push_back(static_cast<Token>(v));
        child.logprobs.push_back(lp[v]);
        child.total += lp[v];
        if (classify_prefix(world.vocab, child.tokens, world.max_action_len) ==
            PrefixState::Alive)
          next_alive_pool.push_back(std::move(child));
        else
          pool.push_back(std::move(child));
      }
    }
    for (Candidate& c : next_alive_pool) pool.push_back(std::move(c));
    std::sort(pool.begin(), pool.end(), candidate_before);
    if (static_cast<int>(pool.size()) > width) pool.resize(static_cast<size_t>(width));
    frozen.clear();
    alive.clear();
    for (Candidate& c : pool) {
      if (classify_prefix(world.vocab, c.tokens, world.max_action_len) == PrefixState::Alive)
        alive.push_back(std::move(c));
      else
        frozen.push_back(std::move(c));
    }
  }
  std::sort(frozen.begin(), frozen.end(), candidate_before);
  if (static_cast<int>(frozen.size()) > width) frozen.resize(static_cast<size_t>(width));
  return frozen;
}

struct DfsBest {
  bool have = false;
  Trajectory traj;
  double status_value = -1.0;
  double shaped_return = -std::numeric_limits<double>::infinity();
};

inline void dfs_rec(const ToolWorld& world, const PolicyParams& params, const EnvState& state,
                    Trajectory& partial, int width, int& budget, const DecodeConfig& dec,
                    double alpha, DfsBest& best) {
  if (budget <= 0 || best.status_value >= 1.0) return;
  auto candidates = top_actions(params, world, state, width, dec);
  for (const Candidate& c : candidates) {
    if (budget <= 0 || best.status_value >= 1.0) return;
    --budget;
    Action a = parse_action(world.vocab, c.tokens);
    auto [next, rec] = step(world, state, a);
    partial.steps.push_back({state, a, rec.obs, c.logprobs});
    if (next.done) {
      Trajectory t = partial;
      t.terminal = true;
      double ret = shape_rewards_return(world, t, alpha, 1.0);
      double sv = solved_value(t.rewards.back().is_solved);
      if (!best.have || sv > best.status_value ||
          (sv == best.status_value && ret > best.shaped_return)) {
        best.have = true;
        best.traj = t;
        best.status_value = sv;
        best.shaped_return = ret;
      }
    } else {
      dfs_rec(world, params, next, partial, width, budget, dec, alpha, best);
    }
    partial.steps.pop_back();
  }
}

}  // namespace detail

// Depth-first search over the top-`width` candidate actions per node,
// backtracking on unsolved terminals; anytime within `budget` expansions.
inline Trajectory rollout_dfs(const ToolWorld& world, const PolicyParams& params, int task_id,
                              int width, int budget, const DecodeConfig& dec = {},
                              double alpha = 1.0) {
  if (width < 1 || budget < 1) throw ConfigError("rollout_dfs: width and budget must be >= 1");
  detail::DfsBest best;
  Trajectory partial;
  partial.task_id = task_id;
  EnvState s0 = reset(world, task_id);
  int left = budget;
  detail::dfs_rec(world, params, s0, partial, width, left, dec, alpha, best);
  if (!best.have) {
    // budget too small to finish any episode: fall back to the greedy dive
    Rng rng(0);
    return rollout_sequential(world, params, task_id, rng, true, dec);
  }
  best.traj.rewards.clear();
  return best.traj;
}

// ---------------------------------------------------------------------------
// Metrics

struct StrategySpec {
  std::string kind = "sequential";  // "sequential" | "dfs"
  bool greedy = false;              // sequential only
  int width = 3;                    // dfs only
  int budget = 24;                  // dfs only
  DecodeConfig decode;
  double unsure_weight = 0.0;       // pass-rate credit for Unsure outcomes
};

struct TaskOutcome {
  int task_id = -1;
  int run = 0;
  SolvedStatus status = SolvedStatus::Unsolved;
  int steps_used = 0;
  int tool_successes = 0;
  int tool_attempts = 0;
  double score = 0.0;
};

struct EvalReport {
  std::vector<TaskOutcome> outcomes;
  double pass_rate = 0.0;
  double pass_rate_std = 0.0;  // sample std across runs
  double tool_success_rate = 0.0;
  int n_runs = 0;
  std::string strategy;
};

inline double tool_success_rate(const ToolWorld& world,
                                const std::vector<Trajectory>& trajectories) {
  long long succ = 0, total = 0;
  for (const Trajectory& traj : trajectories) {
    for (int t = 1; t < traj.length(); ++t) {
      const TrajectoryStep& st = traj.steps[static_cast<size_t>(t - 1)];
      if (st.action.kind == ActionKind::Finish) continue;
      ++total;
      if (static_cast<int>(traj.rewards.size()) == traj.length())
        succ += traj.rewards[static_cast<size_t>(t - 1)].succ_calling;
      else
        succ += judge_succ_calling(world, st.action, st.obs);
    }
  }
  if (total == 0) throw NoIntermediateSteps("tool_success_rate: no intermediate steps");
  return static_cast<double>(succ) / static_cast<double>(total);
}

inline Trajectory run_strategy(const ToolWorld& world, const PolicyParams& params, int task_id,
                               const StrategySpec& strategy, Rng& rng) {
  if (strategy.kind == "dfs")
    return rollout_dfs(world, params, task_id, strategy.width, strategy.budget, strategy.decode);
  return rollout_sequential(world, params, task_id, rng, strategy.greedy, strategy.decode);
}

inline EvalReport pass_rate(const ToolWorld& world, const PolicyParams& params,
                            const std::vector<int>& tasks, const StrategySpec& strategy,
                            int n_runs, Rng& rng) {
  if (n_runs < 1) throw ConfigError("pass_rate: n_runs must be >= 1");
  EvalReport report;
  report.n_runs = n_runs;
  report.strategy = strategy.kind;
  std::vector<double> per_run(static_cast<size_t>(n_runs), 0.0);
  long long succ = 0, attempts = 0;
  for (int run = 0; run < n_runs; ++run) {
    double run_sum = 0.0;
    for (int task : tasks) {
      Rng task_rng = rng.fork();
      Trajectory traj = run_strategy(world, params, task, strategy, task_rng);
      TaskOutcome o;
      o.task_id = task;
      o.run = run;
      o.status = judge_trajectory_solved(world, traj);
      o.steps_used = traj.length();
      for (int t = 1; t < traj.length(); ++t) {
        const TrajectoryStep& st = traj.steps[static_cast<size_t>(t - 1)];
        if (st.action.kind == ActionKind::Finish) continue;
        ++o.tool_attempts;
        o.tool_successes += judge_succ_calling(world, st.action, st.obs);
      }
      o.score = o.status == SolvedStatus::Solved     ? 1.0
                : o.status == SolvedStatus::Unsure ? strategy.unsure_weight
                                                   : 0.0;
      run_sum += o.score;
      succ += o.tool_successes;
      attempts += o.tool_attempts;
      report.outcomes.push_back(o);
    }
    per_run[static_cast<size_t>(run)] = tasks.empty() ? 0.0 : run_sum / tasks.size();
  }
  double mean = 0.0;
  for (double r : per_run) mean += r;
  mean /= static_cast<double>(n_runs);
  report.pass_rate = mean;
  if (n_runs > 1) {
    double ss = 0.0;
    for (double r : per_run) ss += (r - mean) * (r - mean);
    report.pass_rate_std = std::sqrt(ss / static_cast<double>(n_runs - 1));
  }
  report.tool_success_rate =
      attempts > 0 ? static_cast<double>(succ) / static_cast<double>(attempts) : 0.0;
  return report;
}

// Returns 1.0 if a beats b, 0.0 if b beats a, 0.5 for a residual tie:
// higher IsSolved status wins, then fewer steps.
using PairJudge = std::function<double(const Trajectory&, const Trajectory&)>;

inline PairJudge make_lexicographic_judge(const ToolWorld& world) {
  return [&world](const Trajectory& a, const Trajectory& b) {
    const double sa = solved_value(judge_trajectory_solved(world, a));
    const double sb = solved_value(judge_trajectory_solved(world, b));
    if (sa != sb) return sa > sb ? 1.0 : 0.0;
    if (a.length() != b.length()) return a.length() < b.length() ? 1.0 : 0.0;
    return 0.5;
  };
}

// Fraction of paired tasks where a's solution path beats b's (ties 0.5).
inline double win_rate(const std::vector<Trajectory>& trajectories_a,
                       const std::vector<Trajectory>& trajectories_b, const PairJudge& judge) {
  std::map<int, const Trajectory*> by_task_b;
  for (const Trajectory& t : trajectories_b) by_task_b.emplace(t.task_id, &t);
  if (trajectories_a.size() != by_task_b.size())
    throw UnpairedTasks("win_rate: trajectory sets are not paired by task id");
  double wins = 0.0;
  for (const Trajectory& a : trajectories_a) {
    auto it = by_task_b.find(a.task_id);
    if (it == by_task_b.end()) throw UnpairedTasks("win_rate: missing pair for task");
    wins += judge(a, *it->second);
  }
  return wins / static_cast<double>(trajectories_a.size());
}

// ---------------------------------------------------------------------------
// Report serialization

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["pass_rate"] = r.pass_rate;
  j["pass_rate_std"] = r.pass_rate_std;
  j["tool_success_rate"] = r.tool_success_rate;
  j["n_runs"] = r.n_runs;
  j["strategy"] = r.strategy;
  j["outcomes"] = nlohmann::json::array();
  for (const TaskOutcome& o : r.outcomes) {
    j["outcomes"].push_back({{"task_id", o.task_id},
                             {"run", o.run},
                             {"status", to_string(o.status)},
                             {"steps_used", o.steps_used},
                             {"tool_successes", o.tool_successes},
                             {"tool_attempts", o.tool_attempts},
                             {"score", o.score}});
  }
  return j;
}

}  // namespace steptool
