#pragma once

// Step-grained reinforced optimization: REINFORCE estimator, step-grained
// PPO-clip with per-token KL penalty, critic fitting, the training loop, and
// the ablation modes (zeroed step rewards, sub-trajectory PPO).

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "steptool/advantage.hpp"
#include "steptool/env.hpp"
#include "steptool/errors.hpp"
#include "steptool/eval.hpp"
#include "steptool/policy.hpp"
#include "steptool/reward.hpp"

namespace steptool {

enum class AblationMode { None, ZeroStepRewards, SubTrajectoryPpo };

inline AblationMode ablation_mode_from_string(const std::string& s) {
  if (s == "none") return AblationMode::None;
  if (s == "zero_step_rewards") return AblationMode::ZeroStepRewards;
  if (s == "sub_trajectory_ppo") return AblationMode::SubTrajectoryPpo;
  throw ConfigError("unknown ablation mode: " + s);
}

inline const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::None: return "none";
    case AblationMode::ZeroStepRewards: return "zero_step_rewards";
    case AblationMode::SubTrajectoryPpo: return "sub_trajectory_ppo";
  }
  return "none";
}

enum class OptimizerKind { Sgd, Adam };

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer kind: " + s);
}

inline const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::Sgd ? "sgd" : "adam";
}

struct TrainConfig {
  double alpha = 1.0;            // reward shaping weight of SuccCalling
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  double kl_coef = 0.3;
  double learning_rate = 1e-2;
  double critic_learning_rate = 5e-2;
  double entropy_coef = 0.0;     // hook, off by default
  int batch_size = 64;           // trajectories per iteration
  int ppo_epochs = 4;
  int critic_epochs = 8;
  int iterations = 200;
  bool standardize_advantages = true;
  AblationMode ablation_mode = AblationMode::None;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  DecodeConfig decode;           // sampling configuration during collection
  int hidden_dim = 32;
  std::uint64_t seed_policy_init = 1;
  std::uint64_t seed_rollout = 2;

  void validate() const {
    if (clip_epsilon <= 0.0 || clip_epsilon >= 1.0)
      throw ConfigError("clip_epsilon must be in (0,1)");
    if (kl_coef < 0.0) throw ConfigError("kl_coef must be >= 0");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
    if (gamma < 0.0 || gamma > 1.0) throw ConfigError("gamma must be in [0,1]");
    if (gae_lambda < 0.0 || gae_lambda > 1.0) throw ConfigError("gae_lambda must be in [0,1]");
    if (batch_size < 1 || ppo_epochs < 1 || iterations < 0)
      throw ConfigError("batch_size/ppo_epochs/iterations must be positive");
    if (entropy_coef != 0.0)
      throw ConfigError("entropy_coef regularization is reserved and must be 0");
  }
};

struct TokenRecord {
  int traj_index = 0;
  int step_index = 0;  // 0-based
  FeatureVector features;
  std::vector<Token> support;  // empty = full vocab (free decoding)
  Token chosen = -1;
  double old_logprob = 0.0;
  double advantage = 0.0;  // the step advantage, shared by the step's tokens
};

struct RolloutBatch {
  std::vector<Trajectory> trajectories;           // shaped (rewards filled)
  std::vector<std::vector<double>> step_rewards;  // normalized, post ablation/penalty
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> returns;
  std::vector<std::vector<double>> advantages;
  std::vector<TokenRecord> tokens;
  DecodeConfig decode;
  bool has_old_logprobs = false;
};

// ---------------------------------------------------------------------------
// Batch assembly

namespace detail {

inline std::vector<Token> token_support(const ToolWorld& world, const DecodeConfig& dec,
                                        const std::vector<Token>& prefix) {
  if (dec.mode == DecodeMode::Grammar) return allowed_next(world.vocab, prefix);
  return {};
}

}  // namespace detail

// Rebuilds values, returns, advantages and the flattened token records from
// the batch's trajectories and (possibly penalized) step reward streams.
inline void compute_advantages(RolloutBatch& batch, const ToolWorld& world,
                               const ValueParams& vparams, const TrainConfig& config) {
  const size_t n = batch.trajectories.size();
  batch.values.assign(n, {});
  batch.returns.assign(n, {});
  batch.advantages.assign(n, {});
  for (size_t i = 0; i < n; ++i) {
    const Trajectory& traj = batch.trajectories[i];
    std::vector<double> vals;
    for (const TrajectoryStep& st : traj.steps)
      vals.push_back(value_estimate(vparams, world, st.state));
    batch.values[i] = vals;
    batch.returns[i] = discounted_returns(batch.step_rewards[i], config.gamma);
    batch.advantages[i] = gae(batch.step_rewards[i], vals, config.gamma, config.gae_lambda);
  }
  if (config.standardize_advantages) {
    std::vector<double> flat;
    for (const auto& a : batch.advantages) flat.insert(flat.end(), a.begin(), a.end());
    flat = standardize(flat);
    size_t k = 0;
    for (auto& a : batch.advantages)
      for (double& x : a) x = flat[k++];
  }
  batch.tokens.clear();
  for (size_t i = 0; i < n; ++i) {
    const Trajectory& traj = batch.trajectories[i];
    for (int t = 0; t < traj.length(); ++t) {
      const TrajectoryStep& st = traj.steps[static_cast<size_t>(t)];
      std::vector<Token> prefix;
      for (size_t k2 = 0; k2 < st.action.tokens.size(); ++k2) {
        TokenRecord rec;
        rec.traj_index = static_cast<int>(i);
        rec.step_index = t;
        rec.features = featurize(world, st.state, prefix);
        rec.support = detail::token_support(world, batch.decode, prefix);
        rec.chosen = st.action.tokens[k2];
        rec.old_logprob = st.old_logprobs.empty() ? 0.0 : st.old_logprobs[k2];
        rec.advantage = batch.advantages[i][static_cast<size_t>(t)];
        batch.tokens.push_back(std::move(rec));
        prefix.push_back(st.action.tokens[k2]);
      }
    }
  }
}

// Splits a trajectory into prefixes ending at each step; prefix k becomes an
// independent episode whose single terminal reward is step k's shaped reward.
// Splits a trajectory into prefixes ending at every intermediate action; each
// prefix becomes an independent episode whose only reward is its last step's
// shaped reward. The full trajectory (ending at the final answer) is not among
// the prefixes, so this mode never optimizes against the final-answer reward.
inline std::vector<std::pair<Trajectory, std::vector<double>>> expand_sub_trajectories(
    const Trajectory& traj, const std::vector<double>& rewards) {
  std::vector<std::pair<Trajectory, std::vector<double>>> out;
  for (int k = 1; k <= traj.length() - 1; ++k) {
    Trajectory sub;
    sub.task_id = traj.task_id;
    sub.terminal = true;
    sub.steps.assign(traj.steps.begin(), traj.steps.begin() + k);
    sub.rewards.assign(traj.rewards.begin(), traj.rewards.begin() + k);
    std::vector<double> r(static_cast<size_t>(k), 0.0);
    r.back() = rewards[static_cast<size_t>(k - 1)];
    out.emplace_back(std::move(sub), std::move(r));
  }
  return out;
}

inline RolloutBatch collect_rollouts(const ToolWorld& world, const PolicyParams& params,
                                     const ValueParams& vparams, const TrainConfig& config,
                                     Rng& rng) {
  if (world.tasks.empty()) throw ConfigError("collect_rollouts: world has no tasks");
  RolloutBatch batch;
  batch.decode = config.decode;
  batch.has_old_logprobs = true;
  for (int i = 0; i < config.batch_size; ++i) {
    const int task = i % static_cast<int>(world.tasks.size());
    Rng traj_rng = rng.fork();
    Trajectory traj = rollout_sequential(world, params, task, traj_rng, false, config.decode);
    traj.rewards = shape_rewards(world, traj, config.alpha);
    std::vector<double> r;
    for (size_t t = 0; t < traj.rewards.size(); ++t) {
      double v = traj.rewards[t].normalized;
      if (config.ablation_mode == AblationMode::ZeroStepRewards && !traj.rewards[t].is_final)
        v = 0.0;
      r.push_back(v);
    }
    if (config.ablation_mode == AblationMode::SubTrajectoryPpo) {
      for (auto& [sub, sub_r] : expand_sub_trajectories(traj, r)) {
        batch.trajectories.push_back(std::move(sub));
        batch.step_rewards.push_back(std::move(sub_r));
      }
    } else {
      batch.trajectories.push_back(std::move(traj));
      batch.step_rewards.push_back(std::move(r));
    }
  }
  compute_advantages(batch, world, vparams, config);
  return batch;
}

// ---------------------------------------------------------------------------
// Per-token KL penalty (RLHF convention: folded into rewards)

// Decrements each step's reward by kl_coef * sum over the step's tokens of
// (new_logprob - old_logprob); no-op for kl_coef = 0. Advantages must be
// recomputed afterwards.
inline void apply_kl_penalty(RolloutBatch& batch, const PolicyParams& params,
                             const TrainConfig& config) {
  if (config.kl_coef == 0.0) return;
  if (!batch.has_old_logprobs)
    throw MissingOldLogprobs("apply_kl_penalty: batch lacks sampling-time log-probs");
  for (const TokenRecord& rec : batch.tokens) {
    const auto lp = detail::log_softmax(detail::forward_pass(params, rec.features).logits,
                                        batch.decode.temperature, rec.support);
    const double gap = lp[static_cast<size_t>(rec.chosen)] - rec.old_logprob;
    batch.step_rewards[static_cast<size_t>(rec.traj_index)]
                      [static_cast<size_t>(rec.step_index)] -= config.kl_coef * gap;
  }
}

// ---------------------------------------------------------------------------
// Gradient estimators

// Mean over trajectories of sum_t A_t * grad log pi(a_t | s_t).
inline std::vector<double> reinforce_gradient(const RolloutBatch& batch,
                                              const PolicyParams& params) {
  std::vector<double> grad(static_cast<size_t>(params.dims.param_count()), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.trajectories.size());
  for (const TokenRecord& rec : batch.tokens)
    accumulate_token_grad(params, rec.features, rec.chosen, rec.support,
                          batch.decode.temperature, rec.advantage * inv_n, grad);
  return grad;
}

struct PpoDiagnostics {
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  double mean_ratio = 0.0;
};

struct PpoResult {
  double loss = 0.0;
  std::vector<double> gradient;
  PpoDiagnostics diagnostics;
};

// Token-level PPO-clip loss: -mean over tokens of
// min(rho*A, clip(rho, 1-eps, 1+eps)*A) with rho = exp(new - old).
inline PpoResult ppo_loss_and_grad(const RolloutBatch& batch, const PolicyParams& params,
                                   const TrainConfig& config) {
  if (!batch.has_old_logprobs)
    throw MissingOldLogprobs("ppo_loss_and_grad: batch lacks sampling-time log-probs");
  PpoResult out;
  out.gradient.assign(static_cast<size_t>(params.dims.param_count()), 0.0);
  const double eps = config.clip_epsilon;
  const size_t n = batch.tokens.size();
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  long long clipped = 0;
  for (const TokenRecord& rec : batch.tokens) {
    const auto fwd = detail::forward_pass(params, rec.features);
    const auto lp = detail::log_softmax(fwd.logits, batch.decode.temperature, rec.support);
    const double new_lp = lp[static_cast<size_t>(rec.chosen)];
    const double rho = std::exp(new_lp - rec.old_logprob);
    const double clipped_rho = std::min(std::max(rho, 1.0 - eps), 1.0 + eps);
    const double m_unclipped = rho * rec.advantage;
    const double m_clipped = clipped_rho * rec.advantage;
    const double term = std::min(m_unclipped, m_clipped);
    out.loss -= term * inv_n;
    if (m_unclipped <= m_clipped) {
      // unclipped branch active: d term / d new_lp = A * rho
      accumulate_token_grad(params, rec.features, rec.chosen, rec.support,
                            batch.decode.temperature, -rec.advantage * rho * inv_n,
                            out.gradient);
    } else {
      ++clipped;
    }
    out.diagnostics.mean_kl += (rec.old_logprob - new_lp) * inv_n;
    out.diagnostics.mean_ratio += rho * inv_n;
  }
  out.diagnostics.clip_fraction = static_cast<double>(clipped) * inv_n;
  return out;
}

// Classic single-step (RLHF-style) PPO on T=1 batches: one terminal reward,
// trajectory-level ratio terms. Kept as an independent implementation to
// exercise the T=1 reduction property.
inline PpoResult rlhf_single_step_loss(const RolloutBatch& batch, const PolicyParams& params,
                                       const TrainConfig& config) {
  for (const Trajectory& t : batch.trajectories)
    if (t.length() != 1)
      throw NonSingleStepBatch("rlhf_single_step_loss: batch contains T>1 trajectories");
  if (!batch.has_old_logprobs)
    throw MissingOldLogprobs("rlhf_single_step_loss: batch lacks sampling-time log-probs");
  PpoResult out;
  out.gradient.assign(static_cast<size_t>(params.dims.param_count()), 0.0);
  const double eps = config.clip_epsilon;
  const size_t n = batch.tokens.size();
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  long long clipped = 0;
  for (const TokenRecord& rec : batch.tokens) {
    const auto lp = detail::log_softmax(detail::forward_pass(params, rec.features).logits,
                                        batch.decode.temperature, rec.support);
    const double new_lp = lp[static_cast<size_t>(rec.chosen)];
    const double rho = std::exp(new_lp - rec.old_logprob);
    const double clipped_rho = std::min(std::max(rho, 1.0 - eps), 1.0 + eps);
    const double m_unclipped = rho * rec.advantage;
    const double m_clipped = clipped_rho * rec.advantage;
    out.loss -= std::min(m_unclipped, m_clipped) * inv_n;
    if (m_unclipped <= m_clipped)
      accumulate_token_grad(params, rec.features, rec.chosen, rec.support,
                            batch.decode.temperature, -rec.advantage * rho * inv_n,
                            out.gradient);
    else
      ++clipped;
    out.diagnostics.mean_kl += (rec.old_logprob - new_lp) * inv_n;
    out.diagnostics.mean_ratio += rho * inv_n;
  }
  out.diagnostics.clip_fraction = static_cast<double>(clipped) * inv_n;
  return out;
}

// ---------------------------------------------------------------------------
// Critic

struct CriticUpdateResult {
  double loss_before = 0.0;
  double loss_after = 0.0;
};

namespace detail {

inline double value_loss(const RolloutBatch& batch, const ToolWorld& world,
                         const ValueParams& vparams) {
  double loss = 0.0;
  long long n = 0;
  for (size_t i = 0; i < batch.trajectories.size(); ++i) {
    const Trajectory& traj = batch.trajectories[i];
    for (int t = 0; t < traj.length(); ++t) {
      const double v = value_estimate(vparams, world, traj.steps[static_cast<size_t>(t)].state);
      const double g = batch.returns[i][static_cast<size_t>(t)];
      loss += (v - g) * (v - g);
      ++n;
    }
  }
  return n > 0 ? loss / static_cast<double>(n) : 0.0;
}

}  // namespace detail

// Gradient steps on the mean squared error between V(s_t) and G_t.
inline CriticUpdateResult critic_update(const RolloutBatch& batch, const ToolWorld& world,
                                        ValueParams& vparams, const TrainConfig& config) {
  CriticUpdateResult res;
  res.loss_before = detail::value_loss(batch, world, vparams);
  long long n = 0;
  for (const Trajectory& traj : batch.trajectories) n += traj.length();
  if (n == 0) {
    res.loss_after = res.loss_before;
    return res;
  }
  for (int epoch = 0; epoch < config.critic_epochs; ++epoch) {
    std::vector<double> grad(vparams.w.size(), 0.0);
    for (size_t i = 0; i < batch.trajectories.size(); ++i) {
      const Trajectory& traj = batch.trajectories[i];
      for (int t = 0; t < traj.length(); ++t) {
        const FeatureVector x = featurize(world, traj.steps[static_cast<size_t>(t)].state, {});
        const double v = value_estimate(vparams, x);
        const double g = batch.returns[i][static_cast<size_t>(t)];
        const double coef = 2.0 * (v - g) / static_cast<double>(n);
        for (size_t k = 0; k < x.size(); ++k) grad[k] += coef * x[k];
        grad.back() += coef;
      }
    }
    for (size_t k = 0; k < vparams.w.size(); ++k)
      vparams.w[k] -= config.critic_learning_rate * grad[k];
  }
  res.loss_after = detail::value_loss(batch, world, vparams);
  return res;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::vector<double> m, v;
  long long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void ensure(size_t n) {
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
      t = 0;
    }
  }
};

// Applies a descent step on the loss gradient.
inline void apply_update(std::vector<double>& theta, const std::vector<double>& loss_grad,
                         double lr, OptimizerKind kind, AdamState& adam) {
  if (kind == OptimizerKind::Sgd) {
    for (size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * loss_grad[i];
    return;
  }
  adam.ensure(theta.size());
  ++adam.t;
  const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(adam.t));
  for (size_t i = 0; i < theta.size(); ++i) {
    adam.m[i] = adam.beta1 * adam.m[i] + (1.0 - adam.beta1) * loss_grad[i];
    adam.v[i] = adam.beta2 * adam.v[i] + (1.0 - adam.beta2) * loss_grad[i] * loss_grad[i];
    theta[i] -= lr * (adam.m[i] / bc1) / (std::sqrt(adam.v[i] / bc2) + adam.eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  int iteration = 0;
  double mean_return = 0.0;
  double pass_rate = 0.0;
  double tool_success_rate = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double value_loss = 0.0;
};

struct TrainResult {
  PolicyParams params;
  ValueParams vparams;
  std::vector<MetricsRow> metrics;
};

using IterationCallback =
    std::function<void(int iteration, const PolicyParams&, const ValueParams&, const MetricsRow&)>;

// Greedy sequential pass over all tasks; the training-time progress metric.
inline double greedy_pass_rate(const ToolWorld& world, const PolicyParams& params,
                               const DecodeConfig& dec, double unsure_weight = 0.0) {
  double sum = 0.0;
  Rng rng(0);
  for (size_t task = 0; task < world.tasks.size(); ++task) {
    Trajectory traj =
        rollout_sequential(world, params, static_cast<int>(task), rng, true, dec);
    const SolvedStatus s = judge_trajectory_solved(world, traj);
    sum += s == SolvedStatus::Solved ? 1.0 : s == SolvedStatus::Unsure ? unsure_weight : 0.0;
  }
  return sum / static_cast<double>(world.tasks.size());
}

inline TrainResult train(const ToolWorld& world, const TrainConfig& config,
                         const IterationCallback& callback = {}) {
  config.validate();
  TrainResult res;
  Dims dims{feature_dim(world), config.hidden_dim, world.vocab.size()};
  res.params = init_policy(dims, config.seed_policy_init);
  res.vparams = init_value(dims.feature_dim, config.seed_policy_init);
  Rng rng(config.seed_rollout);
  AdamState adam;

  for (int iter = 0; iter < config.iterations; ++iter) {
    RolloutBatch batch = collect_rollouts(world, res.params, res.vparams, config, rng);
    apply_kl_penalty(batch, res.params, config);
    compute_advantages(batch, world, res.vparams, config);

    MetricsRow row;
    row.iteration = iter;
    double ret = 0.0;
    for (const auto& r : batch.returns) ret += r.empty() ? 0.0 : r.front();
    row.mean_return = ret / static_cast<double>(batch.trajectories.size());
    long long succ = 0, attempts = 0;
    for (const Trajectory& traj : batch.trajectories) {
      for (int t = 1; t < traj.length(); ++t) {
        if (traj.steps[static_cast<size_t>(t - 1)].action.kind == ActionKind::Finish) continue;
        ++attempts;
        succ += traj.rewards[static_cast<size_t>(t - 1)].succ_calling;
      }
    }
    row.tool_success_rate =
        attempts > 0 ? static_cast<double>(succ) / static_cast<double>(attempts) : 0.0;

    PpoDiagnostics last_diag;
    for (int epoch = 0; epoch < config.ppo_epochs; ++epoch) {
      PpoResult ppo = ppo_loss_and_grad(batch, res.params, config);
      apply_update(res.params.theta, ppo.gradient, config.learning_rate, config.optimizer, adam);
      last_diag = ppo.diagnostics;
    }
    CriticUpdateResult cu = critic_update(batch, world, res.vparams, config);

    row.mean_kl = last_diag.mean_kl;
    row.clip_fraction = last_diag.clip_fraction;
    row.value_loss = cu.loss_after;
    row.pass_rate = greedy_pass_rate(world, res.params, config.decode);
    res.metrics.push_back(row);
    if (callback) callback(iter, res.params, res.vparams, row);
  }
  return res;
}

}  // namespace steptool
