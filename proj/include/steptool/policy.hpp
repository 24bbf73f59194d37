#pragma once

// Autoregressive token policy: a single-hidden-layer tanh scorer over
// hand-built state/prefix features, with exact log-probabilities and exact
// analytic gradients, plus a linear state-value head over the same features.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "steptool/env.hpp"
#include "steptool/errors.hpp"

namespace steptool {

inline constexpr int kPrefixWindow = 4;

struct Dims {
  int feature_dim = 0;
  int hidden_dim = 0;
  int vocab_size = 0;

  int param_count() const {
    return feature_dim * hidden_dim + hidden_dim + hidden_dim * vocab_size + vocab_size;
  }
  bool operator==(const Dims&) const = default;
};

struct PolicyParams {
  std::vector<double> theta;
  Dims dims;
};

struct ValueParams {
  std::vector<double> w;  // length feature_dim + 1 (bias)
};

inline int feature_dim(const ToolWorld& world) {
  const int V = world.vocab.size();
  return world.task_feature_buckets + world.n_items() + world.horizon + kPrefixWindow * V + V;
}

using FeatureVector = std::vector<double>;

// Block layout: [task bucket | gathered bitmask | step one-hot | last 4
// prefix tokens (most recent first) | last observation token]
inline FeatureVector featurize(const ToolWorld& world, const EnvState& state,
                               const std::vector<Token>& prefix) {
  const int V = world.vocab.size();
  const int B = world.task_feature_buckets;
  const int n_items = world.n_items();
  FeatureVector x(static_cast<size_t>(feature_dim(world)), 0.0);

  int off = 0;
  x[static_cast<size_t>(off + state.task_id % B)] = 1.0;
  off += B;
  for (int i = 0; i < n_items; ++i)
    if (state.has_item(i)) x[static_cast<size_t>(off + i)] = 1.0;
  off += n_items;
  x[static_cast<size_t>(off + std::min(state.t, world.horizon) - 1)] = 1.0;
  off += world.horizon;
  for (int j = 0; j < kPrefixWindow; ++j) {
    const int pos = static_cast<int>(prefix.size()) - 1 - j;
    if (pos >= 0) x[static_cast<size_t>(off + prefix[static_cast<size_t>(pos)])] = 1.0;
    off += V;
  }
  if (!state.last_obs.empty()) x[static_cast<size_t>(off + state.last_obs[0])] = 1.0;
  return x;
}

inline PolicyParams init_policy(const Dims& dims, std::uint64_t seed, double scale = 0.05) {
  PolicyParams p;
  p.dims = dims;
  p.theta.resize(static_cast<size_t>(dims.param_count()));
  detail::SeedStream rng(seed ^ 0x706f6c696379ULL);
  for (double& w : p.theta) {
    const double u = static_cast<double>(rng.next() >> 11) * 0x1.0p-53;  // [0,1)
    w = (2.0 * u - 1.0) * scale;
  }
  return p;
}

inline ValueParams init_value(int feature_dim_, std::uint64_t seed, double scale = 0.05) {
  ValueParams v;
  v.w.resize(static_cast<size_t>(feature_dim_ + 1));
  detail::SeedStream rng(seed ^ 0x76616c7565ULL);
  for (double& w : v.w) {
    const double u = static_cast<double>(rng.next() >> 11) * 0x1.0p-53;
    w = (2.0 * u - 1.0) * scale;
  }
  return v;
}

namespace detail {

struct Forward {
  std::vector<double> hidden;  // tanh activations, length h
  std::vector<double> logits;  // length V
};

inline Forward forward_pass(const PolicyParams& p, const FeatureVector& x) {
  const int d = p.dims.feature_dim, h = p.dims.hidden_dim, V = p.dims.vocab_size;
  if (static_cast<int>(x.size()) != d)
    throw DimensionMismatch("forward: feature vector length != feature_dim");
  if (static_cast<int>(p.theta.size()) != p.dims.param_count())
    throw DimensionMismatch("forward: theta length inconsistent with dims");
  const double* W1 = p.theta.data();
  const double* b1 = W1 + static_cast<size_t>(d) * h;
  const double* W2 = b1 + h;
  const double* b2 = W2 + static_cast<size_t>(h) * V;

  Forward f;
  f.hidden.resize(static_cast<size_t>(h));
  for (int i = 0; i < h; ++i) {
    double z = b1[i];
    const double* row = W1 + static_cast<size_t>(i) * d;
    for (int k = 0; k < d; ++k) z += row[k] * x[static_cast<size_t>(k)];
    f.hidden[static_cast<size_t>(i)] = std::tanh(z);
  }
  f.logits.resize(static_cast<size_t>(V));
  for (int v = 0; v < V; ++v) {
    double z = b2[v];
    const double* row = W2 + static_cast<size_t>(v) * h;
    for (int i = 0; i < h; ++i) z += row[i] * f.hidden[static_cast<size_t>(i)];
    f.logits[static_cast<size_t>(v)] = z;
  }
  return f;
}

// log-softmax over an optional support set (empty support = full vocab)
inline std::vector<double> log_softmax(const std::vector<double>& logits, double temperature,
                                       const std::vector<Token>& support) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> out(logits.size(), -inf);
  auto in_support = [&](Token t) {
    return support.empty() ||
           std::find(support.begin(), support.end(), t) != support.end();
  };
  double mx = -inf;
  for (size_t v = 0; v < logits.size(); ++v)
    if (in_support(static_cast<Token>(v))) mx = std::max(mx, logits[v] / temperature);
  double sum = 0.0;
  for (size_t v = 0; v < logits.size(); ++v)
    if (in_support(static_cast<Token>(v))) sum += std::exp(logits[v] / temperature - mx);
  const double lse = mx + std::log(sum);
  for (size_t v = 0; v < logits.size(); ++v)
    if (in_support(static_cast<Token>(v))) out[v] = logits[v] / temperature - lse;
  return out;
}

}  // namespace detail

// Exact per-token log-probabilities over the full vocabulary.
inline std::vector<double> token_logprobs(const PolicyParams& params, const FeatureVector& x,
                                          double temperature = 1.0) {
  auto f = detail::forward_pass(params, x);
  return detail::log_softmax(f.logits, temperature, {});
}

enum class DecodeMode { Free, Grammar };

inline DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "free") return DecodeMode::Free;
  if (s == "grammar") return DecodeMode::Grammar;
  throw ConfigError("unknown decode mode: " + s);
}

inline const char* to_string(DecodeMode m) {
  return m == DecodeMode::Free ? "free" : "grammar";
}

struct DecodeConfig {
  DecodeMode mode = DecodeMode::Free;
  double temperature = 1.0;
};

// Distribution over the next token given a partial action; Grammar mode
// renormalizes over the grammar-alive continuations.
inline std::vector<double> next_token_logprobs(const PolicyParams& params, const ToolWorld& world,
                                               const EnvState& state,
                                               const std::vector<Token>& prefix,
                                               const DecodeConfig& dec) {
  FeatureVector x = featurize(world, state, prefix);
  auto f = detail::forward_pass(params, x);
  if (dec.mode == DecodeMode::Free) return detail::log_softmax(f.logits, dec.temperature, {});
  return detail::log_softmax(f.logits, dec.temperature, allowed_next(world.vocab, prefix));
}

struct ActionLogprob {
  double total = 0.0;
  std::vector<double> per_token;
};

inline ActionLogprob action_logprob(const PolicyParams& params, const ToolWorld& world,
                                    const EnvState& state, const Action& action,
                                    const DecodeConfig& dec = {}) {
  ActionLogprob out;
  std::vector<Token> prefix;
  for (Token t : action.tokens) {
    if (!world.vocab.contains(t)) throw UnknownToken("action_logprob: token out of vocab");
    auto lp = next_token_logprobs(params, world, state, prefix, dec);
    out.per_token.push_back(lp[static_cast<size_t>(t)]);
    out.total += lp[static_cast<size_t>(t)];
    prefix.push_back(t);
  }
  return out;
}

// Adds coef * d(log pi(chosen | x)) / d(theta) into grad (length p).
inline void accumulate_token_grad(const PolicyParams& params, const FeatureVector& x,
                                  Token chosen, const std::vector<Token>& support,
                                  double temperature, double coef, std::vector<double>& grad) {
  const int d = params.dims.feature_dim, h = params.dims.hidden_dim, V = params.dims.vocab_size;
  auto f = detail::forward_pass(params, x);
  auto lp = detail::log_softmax(f.logits, temperature, support);

  // dlogp/dlogits = (onehot - p) / temperature on the support, 0 elsewhere
  std::vector<double> dlogits(static_cast<size_t>(V), 0.0);
  for (int v = 0; v < V; ++v) {
    const double l = lp[static_cast<size_t>(v)];
    if (l == -std::numeric_limits<double>::infinity()) continue;
    dlogits[static_cast<size_t>(v)] =
        ((v == chosen ? 1.0 : 0.0) - std::exp(l)) / temperature;
  }

  double* gW1 = grad.data();
  double* gb1 = gW1 + static_cast<size_t>(d) * h;
  double* gW2 = gb1 + h;
  double* gb2 = gW2 + static_cast<size_t>(h) * V;
  const double* W2 = params.theta.data() + static_cast<size_t>(d) * h + h;

  std::vector<double> dhidden(static_cast<size_t>(h), 0.0);
  for (int v = 0; v < V; ++v) {
    const double dv = dlogits[static_cast<size_t>(v)];
    if (dv == 0.0) continue;
    gb2[v] += coef * dv;
    double* gRow = gW2 + static_cast<size_t>(v) * h;
    const double* wRow = W2 + static_cast<size_t>(v) * h;
    for (int i = 0; i < h; ++i) {
      gRow[i] += coef * dv * f.hidden[static_cast<size_t>(i)];
      dhidden[static_cast<size_t>(i)] += dv * wRow[i];
    }
  }
  for (int i = 0; i < h; ++i) {
    const double hi = f.hidden[static_cast<size_t>(i)];
    const double dz = dhidden[static_cast<size_t>(i)] * (1.0 - hi * hi);
    if (dz == 0.0) continue;
    gb1[i] += coef * dz;
    double* gRow = gW1 + static_cast<size_t>(i) * d;
    for (int k = 0; k < d; ++k)
      if (x[static_cast<size_t>(k)] != 0.0) gRow[k] += coef * dz * x[static_cast<size_t>(k)];
  }
}

// Analytic gradient of action_logprob(...).total with respect to theta.
inline std::vector<double> logprob_grad(const PolicyParams& params, const ToolWorld& world,
                                        const EnvState& state, const Action& action,
                                        const DecodeConfig& dec = {}) {
  std::vector<double> grad(static_cast<size_t>(params.dims.param_count()), 0.0);
  std::vector<Token> prefix;
  for (Token t : action.tokens) {
    if (!world.vocab.contains(t)) throw UnknownToken("logprob_grad: token out of vocab");
    FeatureVector x = featurize(world, state, prefix);
    std::vector<Token> support =
        dec.mode == DecodeMode::Grammar ? allowed_next(world.vocab, prefix) : std::vector<Token>{};
    accumulate_token_grad(params, x, t, support, dec.temperature, 1.0, grad);
    prefix.push_back(t);
  }
  return grad;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  // uniform in [0,1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  std::uint64_t raw() { return engine_(); }
  Rng fork() { return Rng(engine_()); }

 private:
  std::mt19937_64 engine_;
};

struct SampledAction {
  Action action;
  std::vector<double> logprobs;  // per sampled token, under the decode config
};

// Autoregressive sampling until grammar completion, a dead prefix, or the
// length cap; greedy=true takes the argmax at each position.
inline SampledAction sample_action(const PolicyParams& params, const ToolWorld& world,
                                   const EnvState& state, Rng& rng,
                                   const DecodeConfig& dec = {}, bool greedy = false) {
  if (dec.temperature <= 0.0) throw ConfigError("sample_action: temperature must be > 0");
  SampledAction out;
  std::vector<Token> prefix;
  while (classify_prefix(world.vocab, prefix, world.max_action_len) == PrefixState::Alive) {
    auto lp = next_token_logprobs(params, world, state, prefix, dec);
    Token chosen = -1;
    if (greedy) {
      double best = -std::numeric_limits<double>::infinity();
      for (size_t v = 0; v < lp.size(); ++v)
        if (lp[v] > best) {
          best = lp[v];
          chosen = static_cast<Token>(v);
        }
    } else {
      const double u = rng.uniform();
      double acc = 0.0;
      for (size_t v = 0; v < lp.size(); ++v) {
        if (lp[v] == -std::numeric_limits<double>::infinity()) continue;
        acc += std::exp(lp[v]);
        if (u < acc) {
          chosen = static_cast<Token>(v);
          break;
        }
      }
      if (chosen < 0) {  // numeric slack: acc summed to just under 1
        for (size_t v = lp.size(); v-- > 0;)
          if (lp[v] != -std::numeric_limits<double>::infinity()) {
            chosen = static_cast<Token>(v);
            break;
          }
      }
    }
    out.logprobs.push_back(lp[static_cast<size_t>(chosen)]);
    prefix.push_back(chosen);
  }
  out.action = parse_action(world.vocab, prefix);
  return out;
}

// ---------------------------------------------------------------------------
// Value head

inline double value_estimate(const ValueParams& vparams, const FeatureVector& x) {
  if (vparams.w.size() != x.size() + 1)
    throw DimensionMismatch("value_estimate: weight length != feature_dim + 1");
  double v = vparams.w.back();
  for (size_t i = 0; i < x.size(); ++i) v += vparams.w[i] * x[i];
  return v;
}

inline double value_estimate(const ValueParams& vparams, const ToolWorld& world,
                             const EnvState& state) {
  return value_estimate(vparams, featurize(world, state, {}));
}

// ---------------------------------------------------------------------------
// Checkpoints (canonical JSON; exact round trip at full precision)

inline nlohmann::json checkpoint_to_json(const PolicyParams& p, const ValueParams& v) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["dims"] = {{"feature_dim", p.dims.feature_dim},
               {"hidden_dim", p.dims.hidden_dim},
               {"vocab_size", p.dims.vocab_size}};
  j["theta"] = p.theta;
  j["value_w"] = v.w;
  return j;
}

inline std::pair<PolicyParams, ValueParams> checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("format_version") || j.at("format_version").get<int>() != 1)
    throw SchemaError("checkpoint: unsupported or missing format_version");
  PolicyParams p;
  p.dims.feature_dim = j.at("dims").at("feature_dim").get<int>();
  p.dims.hidden_dim = j.at("dims").at("hidden_dim").get<int>();
  p.dims.vocab_size = j.at("dims").at("vocab_size").get<int>();
  p.theta = j.at("theta").get<std::vector<double>>();
  if (static_cast<int>(p.theta.size()) != p.dims.param_count())
    throw SchemaError("checkpoint: theta length inconsistent with dims");
  ValueParams v;
  v.w = j.at("value_w").get<std::vector<double>>();
  if (v.w.size() != static_cast<size_t>(p.dims.feature_dim) + 1)
    throw SchemaError("checkpoint: value_w length inconsistent with dims");
  return {std::move(p), std::move(v)};
}

}  // namespace steptool
