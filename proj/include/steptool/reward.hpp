#pragma once

// Step-grained reward shaping: per-step SuccCalling / Contribution signals,
// the terminal IsSolved signal, their normalization to [0,1], and the
// external-judge annotation schema (prompt + JSON response).

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "steptool/env.hpp"
#include "steptool/errors.hpp"

namespace steptool {

inline int judge_succ_calling(const ToolWorld& world, const Action& action,
                              const std::vector<Token>& next_obs) {
  if (action.kind == ActionKind::Finish)
    throw FinalStepNotApplicable("judge_succ_calling: Finish steps are not scored");
  if (action.kind != ActionKind::ToolCall) return 0;
  const ToolSpec* tool = world.find_tool(action.tool_name);
  if (tool == nullptr) return 0;
  if (!next_obs.empty() && next_obs[0] == tool->error_obs) return 0;
  return tool->yields.count(action.arg) ? 1 : 0;
}

// Rule-based contribution levels: 5 = first successful gathering of a
// required item, 2 = successful but redundant or non-required, 0 = failed.
inline int judge_contribution(const ToolWorld& world, const Trajectory& traj, int t) {
  if (t < 1 || t > traj.length() - 1)
    throw IndexOutOfRange("judge_contribution: step index out of 1..T-1");
  const TrajectoryStep& st = traj.steps[static_cast<size_t>(t - 1)];
  if (st.action.kind != ActionKind::ToolCall) return 0;
  const ToolSpec* tool = world.find_tool(st.action.tool_name);
  if (tool == nullptr) return 0;
  auto it = tool->yields.find(st.action.arg);
  if (it == tool->yields.end()) return 0;
  const Task& task = world.tasks[static_cast<size_t>(traj.task_id)];
  const bool required = std::find(task.required_items.begin(), task.required_items.end(),
                                  it->second) != task.required_items.end();
  const bool novel = !st.state.has_item(it->second);
  return (required && novel) ? 5 : 2;
}

inline SolvedStatus judge_is_solved(const ToolWorld& world, const Task& task,
                                    const Action& final_action) {
  std::uint32_t referenced = 0;
  if (final_action.kind == ActionKind::Finish) {
    for (Token t : final_action.answer) {
      int item = world.vocab.item_index(t);
      if (item >= 0) referenced |= (1u << item);
    }
  }
  int n_ref = 0;
  for (int item : task.required_items)
    if ((referenced >> item) & 1u) ++n_ref;
  const int n = static_cast<int>(task.required_items.size());
  if (n_ref == n) return SolvedStatus::Solved;
  if (2 * n_ref >= n && n_ref > 0) return SolvedStatus::Unsure;  // at least half, rounded up
  return SolvedStatus::Unsolved;
}

// Solved additionally requires that every referenced required item was
// actually gathered during the episode.
inline SolvedStatus judge_trajectory_solved(const ToolWorld& world, const Trajectory& traj) {
  const Task& task = world.tasks[static_cast<size_t>(traj.task_id)];
  SolvedStatus s = judge_is_solved(world, task, traj.final_action());
  if (s == SolvedStatus::Solved) {
    std::uint32_t gathered = traj.steps.back().state.gathered;
    for (int item : task.required_items)
      if (!((gathered >> item) & 1u)) return SolvedStatus::Unsure;
  }
  return s;
}

inline double solved_value(SolvedStatus s) {
  switch (s) {
    case SolvedStatus::Solved: return 1.0;
    case SolvedStatus::Unsure: return 0.5;
    case SolvedStatus::Unsolved: return 0.0;
  }
  return 0.0;
}

namespace detail {

inline double normalize_intermediate(int sc, int contribution, double alpha) {
  return (alpha * sc + contribution / 5.0) / (alpha + 1.0);
}

}  // namespace detail

// Per-step shaped rewards for a terminal trajectory, normalized to [0,1]:
// intermediate steps get (alpha*SC + Contribution/5) / (alpha + 1), the final
// step gets the IsSolved value.
inline std::vector<StepReward> shape_rewards(const ToolWorld& world, const Trajectory& traj,
                                             double alpha) {
  if (!traj.terminal) throw NonTerminalTrajectory("shape_rewards: trajectory not terminal");
  if (alpha < 0.0) throw ConfigError("shape_rewards: alpha must be >= 0");
  const int T = traj.length();
  std::vector<StepReward> out(static_cast<size_t>(T));
  for (int t = 1; t < T; ++t) {
    StepReward& r = out[static_cast<size_t>(t - 1)];
    const TrajectoryStep& st = traj.steps[static_cast<size_t>(t - 1)];
    r.succ_calling = st.action.kind == ActionKind::Finish
                         ? 0
                         : judge_succ_calling(world, st.action, st.obs);
    r.contribution = judge_contribution(world, traj, t);
    r.is_final = false;
    r.normalized = detail::normalize_intermediate(r.succ_calling, r.contribution, alpha);
  }
  StepReward& last = out[static_cast<size_t>(T - 1)];
  last.is_final = true;
  last.is_solved = judge_trajectory_solved(world, traj);
  last.normalized = solved_value(last.is_solved);
  return out;
}

// Discounted shaped return from the initial step; used by the search oracle.
inline double shape_rewards_return(const ToolWorld& world, Trajectory& traj, double alpha,
                                   double gamma) {
  traj.rewards = shape_rewards(world, traj, alpha);
  double ret = 0.0;
  for (int t = traj.length() - 1; t >= 0; --t)
    ret = traj.rewards[static_cast<size_t>(t)].normalized + gamma * ret;
  return ret;
}

// ---------------------------------------------------------------------------
// External-judge annotation schema

struct AnnotationRecord {
  std::vector<int> succeed_tool_calling;            // length T-1, each 0/1
  std::vector<int> contribution_to_final_answer;    // length T-1, each 0..5
  SolvedStatus final_answer_status = SolvedStatus::Unsolved;
};

namespace detail {

inline std::string render_tokens(const Vocab& vocab, const std::vector<Token>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += vocab.name(tokens[i]);
  }
  return out;
}

}  // namespace detail

struct AnnotationRequest {
  std::string prompt;
  std::string schema_descriptor;
};

// Fills the judge prompt template with the rendered query, intermediate
// steps and final answer.
inline AnnotationRequest serialize_annotation_request(const ToolWorld& world,
                                                      const Trajectory& traj) {
  if (!traj.terminal)
    throw NonTerminalTrajectory("serialize_annotation_request: trajectory not terminal");
  const Vocab& v = world.vocab;
  const Task& task = world.tasks.at(static_cast<size_t>(traj.task_id));

  std::ostringstream mid;
  for (int t = 1; t < traj.length(); ++t) {
    const TrajectoryStep& st = traj.steps[static_cast<size_t>(t - 1)];
    mid << "Step " << t << ": " << detail::render_tokens(v, st.action.tokens) << "\n";
    mid << "Response: " << detail::render_tokens(v, st.obs) << "\n";
  }
  const Action& fin = traj.final_action();
  std::string final_answer =
      fin.kind == ActionKind::Finish ? detail::render_tokens(v, fin.answer) : std::string();

  std::ostringstream p;
  p << "Query: \n"
    << detail::render_tokens(v, task.query_tokens) << " \n\n"
    << "Intermediate Steps: \n"
    << mid.str() << " \n"
    << "Final Answer: \n"
    << final_answer << " \n\n"
    << "Given the above query, all intermediate steps and the final answer, you need to "
       "evaluate the entire task-solving process by following rules: \n"
    << "(1) **Successful Tool Calling:** For each intermediate step, determine if a tool was "
       "called successfully and give a score of 0 (no) or 1 (yes). \n"
    << "(2) **Contribution to Final Answer:** For each intermediate step, rate its contribution "
       "to the final answer on a scale from 0 to 5. \n"
    << "(3) **Final Answer Status:** Determine if the final answer is \"Solved\", \"Unsure\", or "
       "\"Unsolved\". \n\n"
    << "Now provide your evaluation in JSON format with the parameters of "
       "\"succeed_tool_calling\", \"contribution_to_final_answer\" and \"final_answer_status\" "
       "to the function `evaluate_process_reward`.\n";

  AnnotationRequest req;
  req.prompt = p.str();
  req.schema_descriptor =
      "{\"succeed_tool_calling\": [0|1,...], \"contribution_to_final_answer\": [0..5,...], "
      "\"final_answer_status\": \"Solved\"|\"Unsure\"|\"Unsolved\"}";
  return req;
}

inline AnnotationRecord parse_annotation_response(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("annotation response is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("annotation response must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key != "succeed_tool_calling" && key != "contribution_to_final_answer" &&
        key != "final_answer_status")
      throw SchemaError("unexpected field in annotation response: " + key);
  }
  AnnotationRecord rec;
  try {
    rec.succeed_tool_calling = j.at("succeed_tool_calling").get<std::vector<int>>();
    rec.contribution_to_final_answer =
        j.at("contribution_to_final_answer").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed annotation field: ") + e.what());
  }
  if (!j.contains("final_answer_status") || !j.at("final_answer_status").is_string())
    throw SchemaError("final_answer_status missing or not a string");
  auto status = solved_status_from_string(j.at("final_answer_status").get<std::string>());
  if (!status)
    throw SchemaError("final_answer_status must be one of Solved/Unsure/Unsolved");
  rec.final_answer_status = *status;
  for (int sc : rec.succeed_tool_calling)
    if (sc != 0 && sc != 1) throw SchemaError("succeed_tool_calling entries must be 0 or 1");
  for (int c : rec.contribution_to_final_answer)
    if (c < 0 || c > 5) throw SchemaError("contribution_to_final_answer entries must be in 0..5");
  if (rec.succeed_tool_calling.size() != rec.contribution_to_final_answer.size())
    throw SchemaError("annotation step lists must have equal length");
  return rec;
}

// Same arithmetic as shape_rewards, sourcing components from an external
// annotation instead of the oracle judges.
inline std::vector<StepReward> apply_annotation(const Trajectory& traj,
                                                const AnnotationRecord& rec, double alpha) {
  const int T = traj.length();
  if (static_cast<int>(rec.succeed_tool_calling.size()) != T - 1 ||
      static_cast<int>(rec.contribution_to_final_answer.size()) != T - 1)
    throw LengthMismatch("apply_annotation: step list lengths must equal T-1");
  for (int sc : rec.succeed_tool_calling)
    if (sc != 0 && sc != 1) throw SchemaError("succeed_tool_calling entries must be 0 or 1");
  for (int c : rec.contribution_to_final_answer)
    if (c < 0 || c > 5) throw SchemaError("contribution_to_final_answer entries must be in 0..5");
  std::vector<StepReward> out(static_cast<size_t>(T));
  for (int t = 1; t < T; ++t) {
    StepReward& r = out[static_cast<size_t>(t - 1)];
    r.succ_calling = rec.succeed_tool_calling[static_cast<size_t>(t - 1)];
    r.contribution = rec.contribution_to_final_answer[static_cast<size_t>(t - 1)];
    r.is_final = false;
    r.normalized = detail::normalize_intermediate(r.succ_calling, r.contribution, alpha);
  }
  StepReward& last = out[static_cast<size_t>(T - 1)];
  last.is_final = true;
  last.is_solved = rec.final_answer_status;
  last.normalized = solved_value(last.is_solved);
  return out;
}

// Oracle judges expressed as an AnnotationRecord (what a perfect external
// judge would return).
inline AnnotationRecord oracle_annotation(const ToolWorld& world, const Trajectory& traj) {
  AnnotationRecord rec;
  for (int t = 1; t < traj.length(); ++t) {
    const TrajectoryStep& st = traj.steps[static_cast<size_t>(t - 1)];
    rec.succeed_tool_calling.push_back(
        st.action.kind == ActionKind::Finish ? 0 : judge_succ_calling(world, st.action, st.obs));
    rec.contribution_to_final_answer.push_back(judge_contribution(world, traj, t));
  }
  rec.final_answer_status = judge_trajectory_solved(world, traj);
  return rec;
}

// text-in / JSON-out judge adapter; transport is the caller's concern
using JudgeFn = std::function<std::string(const std::string& prompt)>;

}  // namespace steptool
