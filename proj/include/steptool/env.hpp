#pragma once

// Simulated multi-step tool-use environment: a small deterministic world of
// tools that yield information items, tasks that require gathering a set of
// items, and a token-level action grammar
//
//   tool call:    CALL <tool> ARG <arg> END
//   final answer: FINISH <item>* [END]
//
// Anything else parses as Malformed, which is a legal (zero-reward) action.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "steptool/errors.hpp"

namespace steptool {

using Token = int;

struct Vocab {
  std::vector<std::string> names;
  Token call = -1;
  Token arg_marker = -1;
  Token end = -1;
  Token finish = -1;
  Token err = -1;
  std::vector<Token> tool_tokens;
  std::vector<Token> arg_tokens;
  std::vector<Token> item_tokens;  // item i <-> item_tokens[i]; doubles as answer token

  int size() const { return static_cast<int>(names.size()); }

  bool contains(Token t) const { return t >= 0 && t < size(); }

  bool is_tool(Token t) const {
    return std::find(tool_tokens.begin(), tool_tokens.end(), t) != tool_tokens.end();
  }
  bool is_arg(Token t) const {
    return std::find(arg_tokens.begin(), arg_tokens.end(), t) != arg_tokens.end();
  }
  bool is_item(Token t) const {
    return std::find(item_tokens.begin(), item_tokens.end(), t) != item_tokens.end();
  }
  int item_index(Token t) const {
    auto it = std::find(item_tokens.begin(), item_tokens.end(), t);
    return it == item_tokens.end() ? -1 : static_cast<int>(it - item_tokens.begin());
  }
  const std::string& name(Token t) const { return names.at(static_cast<size_t>(t)); }
};

struct ToolSpec {
  Token name_token = -1;
  std::vector<Token> accepted_args;      // sorted, nonempty
  std::map<Token, int> yields;           // accepted arg -> item id
  Token error_obs = -1;
};

struct Task {
  int id = -1;
  std::vector<Token> query_tokens;
  std::vector<int> required_items;       // sorted, nonempty
  std::vector<Token> distractor_hint;    // tool-name tokens present but irrelevant
};

struct WorldConfig {
  int n_tools = 5;
  int n_args = 4;                 // global argument-token pool
  int args_per_tool = 2;          // accepted args per tool (each yields one item)
  int n_tasks = 6;
  int items_per_task_min = 2;
  int items_per_task_max = 3;
  int distractors_per_relevant = 2;
  int horizon = 6;
  int max_action_len = 6;
  int task_feature_buckets = 16;  // hash buckets of the task-id feature block
};

struct ToolWorld {
  std::vector<ToolSpec> tools;
  std::vector<Task> tasks;
  Vocab vocab;
  int horizon = 0;
  int max_action_len = 0;
  std::uint64_t seed = 0;
  int task_feature_buckets = 16;

  int n_items() const {
    return static_cast<int>(vocab.item_tokens.size());
  }
  const ToolSpec* find_tool(Token name) const {
    for (const auto& t : tools)
      if (t.name_token == name) return &t;
    return nullptr;
  }
};

struct EnvState {
  int task_id = -1;
  int t = 1;                       // 1-based step index
  std::uint32_t gathered = 0;      // bitmask over item ids
  std::vector<Token> last_obs;
  bool done = false;

  bool has_item(int i) const { return (gathered >> i) & 1u; }
};

enum class ActionKind { ToolCall, Finish, Malformed };

struct Action {
  std::vector<Token> tokens;
  ActionKind kind = ActionKind::Malformed;
  Token tool_name = -1;            // ToolCall only
  Token arg = -1;                  // ToolCall only
  std::vector<Token> answer;       // Finish only
};

struct ObservationRecord {
  std::vector<Token> obs;
  bool tool_success = false;
  int yielded_item = -1;
  bool newly_gathered = false;
};

struct TrajectoryStep {
  EnvState state;                  // state the action was taken from
  Action action;
  std::vector<Token> obs;
  std::vector<double> old_logprobs;  // per action token, recorded at sampling time
};

enum class SolvedStatus { Unsolved, Unsure, Solved };

inline const char* to_string(SolvedStatus s) {
  switch (s) {
    case SolvedStatus::Unsolved: return "Unsolved";
    case SolvedStatus::Unsure: return "Unsure";
    case SolvedStatus::Solved: return "Solved";
  }
  return "Unsolved";
}

inline std::optional<SolvedStatus> solved_status_from_string(const std::string& s) {
  if (s == "Unsolved") return SolvedStatus::Unsolved;
  if (s == "Unsure") return SolvedStatus::Unsure;
  if (s == "Solved") return SolvedStatus::Solved;
  return std::nullopt;
}

struct StepReward {
  int succ_calling = 0;                      // intermediate steps
  int contribution = 0;                      // intermediate steps, 0..5
  SolvedStatus is_solved = SolvedStatus::Unsolved;  // final step
  bool is_final = false;
  double normalized = 0.0;
};

struct Trajectory {
  int task_id = -1;
  std::vector<TrajectoryStep> steps;
  std::vector<StepReward> rewards;  // empty until annotated
  bool terminal = false;

  int length() const { return static_cast<int>(steps.size()); }
  const Action& final_action() const { return steps.back().action; }
};

// ---------------------------------------------------------------------------
// Action grammar

inline Action parse_action(const Vocab& vocab, const std::vector<Token>& tokens) {
  if (tokens.empty()) throw UnknownToken("parse_action: empty token sequence");
  for (Token t : tokens)
    if (!vocab.contains(t)) throw UnknownToken("parse_action: token id out of vocab");

  Action a;
  a.tokens = tokens;
  a.kind = ActionKind::Malformed;

  if (tokens[0] == vocab.call) {
    if (tokens.size() == 5 && vocab.is_tool(tokens[1]) && tokens[2] == vocab.arg_marker &&
        vocab.is_arg(tokens[3]) && tokens[4] == vocab.end) {
      a.kind = ActionKind::ToolCall;
      a.tool_name = tokens[1];
      a.arg = tokens[3];
    }
    return a;
  }
  if (tokens[0] == vocab.finish) {
    std::vector<Token> body(tokens.begin() + 1, tokens.end());
    if (!body.empty() && body.back() == vocab.end) body.pop_back();
    for (Token t : body)
      if (!vocab.is_item(t)) return a;
    a.kind = ActionKind::Finish;
    a.answer = body;
    return a;
  }
  return a;
}

// Incremental classification of a partially generated action. Alive means
// some continuation still matches the grammar; Dead prefixes terminate
// sampling immediately and parse as Malformed.
enum class PrefixState { Alive, Complete, Dead };

inline PrefixState classify_prefix(const Vocab& vocab, const std::vector<Token>& prefix,
                                   int max_action_len) {
  const int n = static_cast<int>(prefix.size());
  if (n == 0) return PrefixState::Alive;
  if (n >= max_action_len) return PrefixState::Complete;

  if (prefix[0] == vocab.call) {
    if (n >= 2 && !vocab.is_tool(prefix[1])) return PrefixState::Dead;
    if (n >= 3 && prefix[2] != vocab.arg_marker) return PrefixState::Dead;
    if (n >= 4 && !vocab.is_arg(prefix[3])) return PrefixState::Dead;
    if (n >= 5) return prefix[4] == vocab.end ? PrefixState::Complete : PrefixState::Dead;
    return PrefixState::Alive;
  }
  if (prefix[0] == vocab.finish) {
    for (int i = 1; i < n; ++i) {
      if (prefix[i] == vocab.end)
        return i == n - 1 ? PrefixState::Complete : PrefixState::Dead;
      if (!vocab.is_item(prefix[i])) return PrefixState::Dead;
    }
    return PrefixState::Alive;
  }
  return PrefixState::Dead;
}

// Tokens that keep an alive prefix alive (grammar-constrained decoding).
inline std::vector<Token> allowed_next(const Vocab& vocab, const std::vector<Token>& prefix) {
  std::vector<Token> out;
  if (prefix.empty()) {
    out = {vocab.call, vocab.finish};
    return out;
  }
  if (prefix[0] == vocab.call) {
    switch (prefix.size()) {
      case 1: return vocab.tool_tokens;
      case 2: return {vocab.arg_marker};
      case 3: return vocab.arg_tokens;
      case 4: return {vocab.end};
      default: return out;
    }
  }
  if (prefix[0] == vocab.finish) {
    out = vocab.item_tokens;
    out.push_back(vocab.end);
    return out;
  }
  return out;
}

// ---------------------------------------------------------------------------
// World generation

namespace detail {

// Deterministic 64-bit mix (splitmix64); keeps generation independent of
// library RNG implementations.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // uniform in [0, n)
  int below(int n) { return static_cast<int>(next() % static_cast<std::uint64_t>(n)); }

 private:
  std::uint64_t state_;
};

}  // namespace detail

inline ToolWorld generate_world(const WorldConfig& config, std::uint64_t seed) {
  if (config.n_tools < 1 || config.n_args < 1 || config.args_per_tool < 1 ||
      config.n_tasks < 1 || config.items_per_task_min < 1 ||
      config.items_per_task_max < config.items_per_task_min || config.horizon < 2 ||
      config.max_action_len < 5 || config.task_feature_buckets < 1)
    throw ConfigError("generate_world: config fields must be positive (horizon>=2, max_action_len>=5)");
  if (config.args_per_tool > config.n_args)
    throw ConfigError("generate_world: args_per_tool exceeds n_args");
  if (config.items_per_task_max > config.horizon - 1)
    throw ConfigError("generate_world: tasks unsolvable within horizon (need one step per item plus Finish)");
  const int n_items = config.n_tools * config.args_per_tool;
  if (n_items > 32) throw ConfigError("generate_world: item count exceeds 32-bit gathered mask");
  if (config.items_per_task_max > n_items)
    throw ConfigError("generate_world: items_per_task_max exceeds item count");
  // Finish must be able to reference every required item: FINISH + items (+END)
  if (config.items_per_task_max > config.max_action_len - 2)
    throw ConfigError("generate_world: max_action_len too small to reference all required items");

  ToolWorld w;
  w.horizon = config.horizon;
  w.max_action_len = config.max_action_len;
  w.seed = seed;
  w.task_feature_buckets = config.task_feature_buckets;

  Vocab& v = w.vocab;
  auto add = [&v](const std::string& name) {
    v.names.push_back(name);
    return static_cast<Token>(v.names.size() - 1);
  };
  v.call = add("CALL");
  v.arg_marker = add("ARG");
  v.end = add("END");
  v.finish = add("FINISH");
  v.err = add("ERR");
  for (int i = 0; i < config.n_tools; ++i) v.tool_tokens.push_back(add("t" + std::to_string(i)));
  for (int i = 0; i < config.n_args; ++i) v.arg_tokens.push_back(add("a" + std::to_string(i)));
  for (int i = 0; i < n_items; ++i) v.item_tokens.push_back(add("i" + std::to_string(i)));

  detail::SeedStream rng(seed ^ 0x5377006c746f6f6cULL);

  // Tools: each accepted arg yields a distinct item; unaccepted args error.
  int next_item = 0;
  for (int j = 0; j < config.n_tools; ++j) {
    ToolSpec tool;
    tool.name_token = v.tool_tokens[static_cast<size_t>(j)];
    tool.error_obs = v.err;
    std::vector<int> arg_ix(static_cast<size_t>(config.n_args));
    for (int k = 0; k < config.n_args; ++k) arg_ix[static_cast<size_t>(k)] = k;
    for (int k = config.n_args - 1; k > 0; --k)
      std::swap(arg_ix[static_cast<size_t>(k)], arg_ix[static_cast<size_t>(rng.below(k + 1))]);
    arg_ix.resize(static_cast<size_t>(config.args_per_tool));
    std::sort(arg_ix.begin(), arg_ix.end());
    for (int k : arg_ix) {
      Token at = v.arg_tokens[static_cast<size_t>(k)];
      tool.accepted_args.push_back(at);
      tool.yields[at] = next_item++;
    }
    w.tools.push_back(std::move(tool));
  }

  // Tasks: required items drawn without replacement; distractor tools are
  // the candidate-set padding around the relevant ones.
  auto tool_of_item = [&](int item) {
    for (size_t j = 0; j < w.tools.size(); ++j)
      for (const auto& [a, it] : w.tools[j].yields)
        if (it == item) return static_cast<int>(j);
    return -1;
  };
  for (int q = 0; q < config.n_tasks; ++q) {
    Task task;
    task.id = q;
    const int span = config.items_per_task_max - config.items_per_task_min + 1;
    const int k = config.items_per_task_min + rng.below(span);
    std::vector<int> pool(static_cast<size_t>(n_items));
    for (int i = 0; i < n_items; ++i) pool[static_cast<size_t>(i)] = i;
    for (int i = n_items - 1; i > 0; --i)
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(rng.below(i + 1))]);
    pool.resize(static_cast<size_t>(k));
    std::sort(pool.begin(), pool.end());
    task.required_items = pool;
    for (int item : pool) task.query_tokens.push_back(v.item_tokens[static_cast<size_t>(item)]);

    std::vector<int> relevant;
    for (int item : pool) {
      int j = tool_of_item(item);
      if (std::find(relevant.begin(), relevant.end(), j) == relevant.end()) relevant.push_back(j);
    }
    std::vector<int> others;
    for (int j = 0; j < config.n_tools; ++j)
      if (std::find(relevant.begin(), relevant.end(), j) == relevant.end()) others.push_back(j);
    for (int i = static_cast<int>(others.size()) - 1; i > 0; --i)
      std::swap(others[static_cast<size_t>(i)], others[static_cast<size_t>(rng.below(i + 1))]);
    const size_t want = std::min(others.size(),
                                 relevant.size() * static_cast<size_t>(config.distractors_per_relevant));
    for (size_t i = 0; i < want; ++i)
      task.distractor_hint.push_back(v.tool_tokens[static_cast<size_t>(others[i])]);
    std::sort(task.distractor_hint.begin(), task.distractor_hint.end());

    w.tasks.push_back(std::move(task));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Transitions

inline EnvState reset(const ToolWorld& world, int task_id) {
  if (task_id < 0 || task_id >= static_cast<int>(world.tasks.size()))
    throw UnknownTask("reset: unknown task id " + std::to_string(task_id));
  EnvState s;
  s.task_id = task_id;
  s.t = 1;
  s.gathered = 0;
  s.last_obs = world.tasks[static_cast<size_t>(task_id)].query_tokens;
  s.done = false;
  return s;
}

inline std::pair<EnvState, ObservationRecord> step(const ToolWorld& world, const EnvState& state,
                                                   const Action& action) {
  if (state.done) throw EpisodeFinished("step: episode already finished");

  EnvState next = state;
  ObservationRecord rec;

  if (action.kind == ActionKind::ToolCall) {
    const ToolSpec* tool = world.find_tool(action.tool_name);
    if (tool != nullptr) {
      auto it = tool->yields.find(action.arg);
      if (it != tool->yields.end()) {
        rec.tool_success = true;
        rec.yielded_item = it->second;
        rec.newly_gathered = !state.has_item(it->second);
        next.gathered |= (1u << it->second);
        rec.obs = {world.vocab.item_tokens[static_cast<size_t>(it->second)]};
      } else {
        rec.obs = {tool->error_obs};
      }
    } else {
      rec.obs = {world.vocab.err};
    }
  } else if (action.kind == ActionKind::Finish) {
    next.done = true;
  } else {
    rec.obs = {world.vocab.err};
  }

  next.t = state.t + 1;
  if (next.t > world.horizon) next.done = true;
  next.last_obs = rec.obs;
  return {next, rec};
}

// ---------------------------------------------------------------------------
// Canonical JSON serialization (sorted keys; bit-exact round trip)

inline nlohmann::json world_to_json(const ToolWorld& w) {
  nlohmann::json j;
  j["horizon"] = w.horizon;
  j["seed"] = w.seed;
  nlohmann::json jv;
  jv["names"] = w.vocab.names;
  jv["call"] = w.vocab.call;
  jv["arg_marker"] = w.vocab.arg_marker;
  jv["end"] = w.vocab.end;
  jv["finish"] = w.vocab.finish;
  jv["err"] = w.vocab.err;
  jv["tool_tokens"] = w.vocab.tool_tokens;
  jv["arg_tokens"] = w.vocab.arg_tokens;
  jv["item_tokens"] = w.vocab.item_tokens;
  jv["max_action_len"] = w.max_action_len;
  jv["task_feature_buckets"] = w.task_feature_buckets;
  j["vocab"] = jv;
  j["tools"] = nlohmann::json::array();
  for (const auto& t : w.tools) {
    nlohmann::json jt;
    jt["name_token"] = t.name_token;
    jt["accepted_args"] = t.accepted_args;
    jt["error_obs"] = t.error_obs;
    nlohmann::json jy = nlohmann::json::array();
    for (const auto& [a, item] : t.yields) jy.push_back({{"arg", a}, {"item", item}});
    jt["yields"] = jy;
    j["tools"].push_back(jt);
  }
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : w.tasks) {
    nlohmann::json jt;
    jt["id"] = t.id;
    jt["query_tokens"] = t.query_tokens;
    jt["required_items"] = t.required_items;
    jt["distractor_hint"] = t.distractor_hint;
    j["tasks"].push_back(jt);
  }
  return j;
}

inline ToolWorld world_from_json(const nlohmann::json& j) {
  ToolWorld w;
  w.horizon = j.at("horizon").get<int>();
  w.seed = j.at("seed").get<std::uint64_t>();
  const auto& jv = j.at("vocab");
  w.vocab.names = jv.at("names").get<std::vector<std::string>>();
  w.vocab.call = jv.at("call").get<Token>();
  w.vocab.arg_marker = jv.at("arg_marker").get<Token>();
  w.vocab.end = jv.at("end").get<Token>();
  w.vocab.finish = jv.at("finish").get<Token>();
  w.vocab.err = jv.at("err").get<Token>();
  w.vocab.tool_tokens = jv.at("tool_tokens").get<std::vector<Token>>();
  w.vocab.arg_tokens = jv.at("arg_tokens").get<std::vector<Token>>();
  w.vocab.item_tokens = jv.at("item_tokens").get<std::vector<Token>>();
  w.max_action_len = jv.at("max_action_len").get<int>();
  w.task_feature_buckets = jv.at("task_feature_buckets").get<int>();
  for (const auto& jt : j.at("tools")) {
    ToolSpec t;
    t.name_token = jt.at("name_token").get<Token>();
    t.accepted_args = jt.at("accepted_args").get<std::vector<Token>>();
    t.error_obs = jt.at("error_obs").get<Token>();
    for (const auto& jy : jt.at("yields"))
      t.yields[jy.at("arg").get<Token>()] = jy.at("item").get<int>();
    w.tools.push_back(std::move(t));
  }
  for (const auto& jt : j.at("tasks")) {
    Task t;
    t.id = jt.at("id").get<int>();
    t.query_tokens = jt.at("query_tokens").get<std::vector<Token>>();
    t.required_items = jt.at("required_items").get<std::vector<int>>();
    t.distractor_hint = jt.at("distractor_hint").get<std::vector<Token>>();
    w.tasks.push_back(std::move(t));
  }
  return w;
}

inline std::string world_to_canonical_json(const ToolWorld& w) { return world_to_json(w).dump(); }

}  // namespace steptool
