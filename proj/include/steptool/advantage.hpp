#pragma once

// Return and advantage computation: discounted returns, TD residuals,
// generalized advantage estimation, token broadcast, batch standardization.

#include <cmath>
#include <vector>

#include "steptool/errors.hpp"

namespace steptool {

// G_t = r_t + gamma * G_{t+1}, backward recursion, inclusive of the final step.
inline std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  if (rewards.empty()) throw EmptyRewards("discounted_returns: empty rewards");
  if (gamma < 0.0 || gamma > 1.0) throw ConfigError("discounted_returns: gamma must be in [0,1]");
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    out[i] = acc;
  }
  return out;
}

inline std::vector<double> mc_advantage(const std::vector<double>& rewards,
                                        const std::vector<double>& values, double gamma) {
  if (rewards.size() != values.size())
    throw LengthMismatch("mc_advantage: rewards/values length mismatch");
  std::vector<double> out = discounted_returns(rewards, gamma);
  for (size_t i = 0; i < out.size(); ++i) out[i] -= values[i];
  return out;
}

// delta_t = r_t + gamma * V(s_{t+1}) - V(s_t), terminal bootstrap V(s_{T+1}) = 0.
inline std::vector<double> td_residuals(const std::vector<double>& rewards,
                                        const std::vector<double>& values, double gamma) {
  if (rewards.size() != values.size())
    throw LengthMismatch("td_residuals: rewards/values length mismatch");
  if (rewards.empty()) throw EmptyRewards("td_residuals: empty rewards");
  std::vector<double> out(rewards.size());
  for (size_t i = 0; i < rewards.size(); ++i) {
    const double v_next = i + 1 < values.size() ? values[i + 1] : 0.0;
    out[i] = rewards[i] + gamma * v_next - values[i];
  }
  return out;
}

// A_t = delta_t + gamma*lambda * A_{t+1}, backward recursion.
inline std::vector<double> gae(const std::vector<double>& rewards,
                               const std::vector<double>& values, double gamma, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("gae: lambda must be in [0,1]");
  std::vector<double> delta = td_residuals(rewards, values, gamma);
  double acc = 0.0;
  for (size_t i = delta.size(); i-- > 0;) {
    acc = delta[i] + gamma * lambda * acc;
    delta[i] = acc;
  }
  return delta;
}

// One advantage per step, repeated over that step's L_t tokens.
inline std::vector<double> broadcast_to_tokens(const std::vector<double>& advantages,
                                               const std::vector<int>& token_counts) {
  if (advantages.size() != token_counts.size())
    throw LengthMismatch("broadcast_to_tokens: advantages/token_counts length mismatch");
  std::vector<double> out;
  for (size_t i = 0; i < advantages.size(); ++i)
    for (int k = 0; k < token_counts[i]; ++k) out.push_back(advantages[i]);
  return out;
}

// Mean-0 / variance-1 rescale across a batch; identity for n <= 1 (nothing
// to standardize) or zero variance. Order-preserving by construction.
inline std::vector<double> standardize(const std::vector<double>& xs) {
  if (xs.size() <= 1) return xs;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  if (var == 0.0) return xs;
  std::vector<double> out(xs.size());
  const double inv = 1.0 / std::sqrt(var);
  for (size_t i = 0; i < xs.size(); ++i) out[i] = (xs[i] - mean) * inv;
  return out;
}

}  // namespace steptool
