#pragma once

// Exhaustive-enumeration oracles over tiny worlds: the complete action
// sample space of the token sampler, and a maximum-return search over
// outcome-equivalent action classes.

#include <algorithm>
#include <limits>
#include <map>
#include <utility>
#include <vector>

#include "steptool/env.hpp"
#include "steptool/errors.hpp"
#include "steptool/reward.hpp"

namespace steptool {

// ---------------------------------------------------------------------------
// Enumeration oracle

namespace detail {

// Complete action token sequences under free (unconstrained) decoding with
// dead-prefix termination; exactly the sample space of the token sampler.
inline void enumerate_actions_rec(const Vocab& vocab, int max_len, std::vector<Token>& prefix,
                                  std::vector<std::vector<Token>>& out) {
  PrefixState st = classify_prefix(vocab, prefix, max_len);
  if (st == PrefixState::Complete || st == PrefixState::Dead) {
    out.push_back(prefix);
    return;
  }
  for (Token t = 0; t < vocab.size(); ++t) {
    prefix.push_back(t);
    enumerate_actions_rec(vocab, max_len, prefix, out);
    prefix.pop_back();
  }
}

}  // namespace detail

inline std::vector<std::vector<Token>> enumerate_action_sequences(const ToolWorld& world) {
  std::vector<std::vector<Token>> out;
  std::vector<Token> prefix;
  detail::enumerate_actions_rec(world.vocab, world.max_action_len, prefix, out);
  return out;
}

struct OracleResult {
  double optimal_return = 0.0;
  Trajectory optimal_trajectory;
};

namespace detail {

// Outcome-equivalence classes of actions: every valid (tool, arg) call, the
// best possible Finish (referencing all gathered required items), the empty
// Finish, and one malformed representative. Malformed/invalid actions all
// score zero and observe ERR, so one representative per class is exhaustive
// over distinct outcomes.
inline std::vector<Action> canonical_actions(const ToolWorld& world, const EnvState& state) {
  std::vector<Action> out;
  const Vocab& v = world.vocab;
  for (const auto& tool : world.tools) {
    for (Token arg : v.arg_tokens) {
      Action a;
      a.tokens = {v.call, tool.name_token, v.arg_marker, arg, v.end};
      a.kind = ActionKind::ToolCall;
      a.tool_name = tool.name_token;
      a.arg = arg;
      out.push_back(std::move(a));
    }
  }
  const Task& task = world.tasks[static_cast<size_t>(state.task_id)];
  Action best_finish;
  best_finish.kind = ActionKind::Finish;
  best_finish.tokens = {v.finish};
  for (int item : task.required_items) {
    if (state.has_item(item) &&
        static_cast<int>(best_finish.answer.size()) < world.max_action_len - 2) {
      best_finish.answer.push_back(v.item_tokens[static_cast<size_t>(item)]);
      best_finish.tokens.push_back(v.item_tokens[static_cast<size_t>(item)]);
    }
  }
  best_finish.tokens.push_back(v.end);
  out.push_back(best_finish);
  if (!best_finish.answer.empty()) {
    Action empty_finish;
    empty_finish.kind = ActionKind::Finish;
    empty_finish.tokens = {v.finish, v.end};
    out.push_back(std::move(empty_finish));
  }
  Action malformed;
  malformed.tokens = {v.arg_marker};
  malformed.kind = ActionKind::Malformed;
  out.push_back(std::move(malformed));
  return out;
}

// Every judge is a local function of (gathered, action), so the maximum tail
// return from a state depends only on (t, gathered). Memoizing on that pair
// turns the exponential tree search into an exact dynamic program.
struct OracleMemo {
  std::map<std::pair<int, std::uint32_t>, std::pair<double, Action>> best;
};

inline double oracle_tail(const ToolWorld& world, const EnvState& state, double alpha,
                          double gamma, long long budget, long long& used, OracleMemo& memo) {
  const auto key = std::make_pair(state.t, state.gathered);
  if (auto it = memo.best.find(key); it != memo.best.end()) return it->second.first;
  double best_val = -std::numeric_limits<double>::infinity();
  Action best_action;
  for (const Action& a : canonical_actions(world, state)) {
    if (++used > budget) throw BudgetExceeded("oracle_search: enumeration bound exceeded");
    auto [next, rec] = step(world, state, a);
    double val;
    if (next.done) {
      Trajectory one;
      one.task_id = state.task_id;
      one.terminal = true;
      one.steps.push_back({state, a, rec.obs, {}});
      val = shape_rewards(world, one, alpha).back().normalized;
    } else {
      const int sc = a.kind == ActionKind::Finish ? 0 : judge_succ_calling(world, a, rec.obs);
      int contribution = 0;
      if (a.kind == ActionKind::ToolCall && rec.yielded_item >= 0) {
        const Task& task = world.tasks[static_cast<size_t>(state.task_id)];
        const bool required = std::find(task.required_items.begin(), task.required_items.end(),
                                        rec.yielded_item) != task.required_items.end();
        contribution = (required && rec.newly_gathered) ? 5 : 2;
      }
      val = normalize_intermediate(sc, contribution, alpha) +
            gamma * oracle_tail(world, next, alpha, gamma, budget, used, memo);
    }
    if (val > best_val + 1e-15) {
      best_val = val;
      best_action = a;
    }
  }
  memo.best[key] = {best_val, best_action};
  return best_val;
}

}  // namespace detail

// Exhaustive search for the maximum discounted shaped return, over outcome
// classes of action sequences up to the horizon.
inline OracleResult oracle_search(const ToolWorld& world, int task_id, double gamma,
                                  double alpha = 1.0, long long budget = 1000000) {
  if (task_id < 0 || task_id >= static_cast<int>(world.tasks.size()))
    throw UnknownTask("oracle_search: unknown task id");
  long long used = 0;
  detail::OracleMemo memo;
  EnvState s = reset(world, task_id);
  detail::oracle_tail(world, s, alpha, gamma, budget, used, memo);
  OracleResult best;
  best.optimal_trajectory.task_id = task_id;
  while (true) {
    const Action& a = memo.best.at({s.t, s.gathered}).second;
    auto [next, rec] = step(world, s, a);
    best.optimal_trajectory.steps.push_back({s, a, rec.obs, {}});
    if (next.done) break;
    s = next;
  }
  best.optimal_trajectory.terminal = true;
  // Recomputing through the shaping path guarantees the reported return and
  // the reconstructed trajectory agree with it exactly.
  best.optimal_return = shape_rewards_return(world, best.optimal_trajectory, alpha, gamma);
  return best;
}

// Rule-based shortest solution: one call per missing required item, then a
// Finish referencing all of them. Used for oracle-replay evaluation.
inline Trajectory solve_task(const ToolWorld& world, int task_id) {
  const Task& task = world.tasks.at(static_cast<size_t>(task_id));
  const Vocab& v = world.vocab;
  Trajectory traj;
  traj.task_id = task_id;
  EnvState s = reset(world, task_id);
  for (int item : task.required_items) {
    for (const auto& tool : world.tools) {
      for (const auto& [arg, yielded] : tool.yields) {
        if (yielded == item) {
          Action a;
          a.tokens = {v.call, tool.name_token, v.arg_marker, arg, v.end};
          a.kind = ActionKind::ToolCall;
          a.tool_name = tool.name_token;
          a.arg = arg;
          auto [next, rec] = step(world, s, a);
          traj.steps.push_back({s, a, rec.obs, {}});
          s = next;
        }
      }
    }
  }
  Action fin;
  fin.kind = ActionKind::Finish;
  fin.tokens = {v.finish};
  for (int item : task.required_items) {
    fin.answer.push_back(v.item_tokens[static_cast<size_t>(item)]);
    fin.tokens.push_back(v.item_tokens[static_cast<size_t>(item)]);
  }
  fin.tokens.push_back(v.end);
  auto [next, rec] = step(world, s, fin);
  traj.steps.push_back({s, fin, rec.obs, {}});
  traj.terminal = true;
  return traj;
}

}  // namespace steptool
