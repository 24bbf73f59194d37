#include <catch_amalgamated.hpp>

#include "steptool/optim.hpp"
#include "steptool/oracle.hpp"

using namespace steptool;

namespace {

ToolWorld small_world() {
  WorldConfig c;
  c.n_tools = 2;
  c.n_args = 2;
  c.args_per_tool = 1;
  c.n_tasks = 2;
  c.items_per_task_min = 1;
  c.items_per_task_max = 2;
  c.horizon = 3;
  c.max_action_len = 5;
  c.task_feature_buckets = 4;
  return generate_world(c, 5);
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.hidden_dim = 6;
  cfg.decode.mode = DecodeMode::Grammar;
  cfg.kl_coef = 0.0;
  return cfg;
}

struct Setup {
  ToolWorld world;
  PolicyParams params;
  ValueParams vparams;
  TrainConfig cfg;
  Rng rng{17};
};

Setup make_setup() {
  Setup s{small_world(), {}, {}, small_config()};
  Dims dims{feature_dim(s.world), s.cfg.hidden_dim, s.world.vocab.size()};
  s.params = init_policy(dims, 1);
  s.vparams = init_value(dims.feature_dim, 1);
  return s;
}

}  // namespace

TEST_CASE("TrainConfig validation") {
  TrainConfig cfg;
  REQUIRE_NOTHROW(cfg.validate());
  cfg.clip_epsilon = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.kl_coef = -1.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.gamma = 1.5;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.entropy_coef = 0.1;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  REQUIRE_THROWS_AS(ablation_mode_from_string("bogus"), ConfigError);
  REQUIRE_THROWS_AS(optimizer_kind_from_string("bogus"), ConfigError);
}

TEST_CASE("collect_rollouts is deterministic and internally consistent") {
  Setup a = make_setup(), b = make_setup();
  RolloutBatch ba = collect_rollouts(a.world, a.params, a.vparams, a.cfg, a.rng);
  RolloutBatch bb = collect_rollouts(b.world, b.params, b.vparams, b.cfg, b.rng);
  REQUIRE(ba.trajectories.size() == static_cast<size_t>(a.cfg.batch_size));
  REQUIRE(ba.tokens.size() == bb.tokens.size());
  for (size_t i = 0; i < ba.tokens.size(); ++i) {
    REQUIRE(ba.tokens[i].chosen == bb.tokens[i].chosen);
    REQUIRE(ba.tokens[i].old_logprob == bb.tokens[i].old_logprob);
    REQUIRE(ba.tokens[i].advantage == bb.tokens[i].advantage);
  }
  // every step's tokens share its advantage; token counts match trajectories
  size_t n_tokens = 0;
  for (const auto& traj : ba.trajectories)
    for (const auto& st : traj.steps) n_tokens += st.action.tokens.size();
  REQUIRE(ba.tokens.size() == n_tokens);
  for (const auto& rec : ba.tokens)
    REQUIRE(rec.advantage ==
            ba.advantages[static_cast<size_t>(rec.traj_index)][static_cast<size_t>(rec.step_index)]);
  // standardized advantages: zero mean, unit variance
  std::vector<double> flat;
  for (const auto& adv : ba.advantages) flat.insert(flat.end(), adv.begin(), adv.end());
  double mean = 0.0;
  for (double x : flat) mean += x;
  mean /= static_cast<double>(flat.size());
  double var = 0.0;
  for (double x : flat) var += (x - mean) * (x - mean);
  var /= static_cast<double>(flat.size());
  REQUIRE(std::abs(mean) < 1e-9);
  REQUIRE(std::abs(var - 1.0) < 1e-9);
}

TEST_CASE("zero_step_rewards ablation keeps only the terminal reward") {
  Setup s = make_setup();
  s.cfg.ablation_mode = AblationMode::ZeroStepRewards;
  RolloutBatch b = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);
  for (size_t i = 0; i < b.trajectories.size(); ++i) {
    const auto& r = b.step_rewards[i];
    for (size_t t = 0; t + 1 < r.size(); ++t) REQUIRE(r[t] == 0.0);
    REQUIRE(r.back() == b.trajectories[i].rewards.back().normalized);
  }
}

TEST_CASE("sub-trajectory ablation expands prefixes with isolated rewards") {
  Setup s = make_setup();
  s.cfg.ablation_mode = AblationMode::SubTrajectoryPpo;
  s.cfg.batch_size = 4;
  RolloutBatch b = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);

  // reference: plain collection with the same seed
  Setup ref = make_setup();
  ref.cfg.batch_size = 4;
  RolloutBatch rb = collect_rollouts(ref.world, ref.params, ref.vparams, ref.cfg, ref.rng);

  // prefixes end at intermediate actions only; the final-answer step is excluded
  size_t expanded = 0;
  for (const auto& traj : rb.trajectories) expanded += static_cast<size_t>(traj.length() - 1);
  REQUIRE(b.trajectories.size() == expanded);

  size_t j = 0;
  for (size_t i = 0; i < rb.trajectories.size(); ++i) {
    const auto& full = rb.trajectories[i];
    for (int k = 1; k <= full.length() - 1; ++k, ++j) {
      const auto& sub = b.trajectories[j];
      REQUIRE(sub.length() == k);
      for (int t = 0; t < k; ++t)
        REQUIRE(sub.steps[static_cast<size_t>(t)].action.tokens ==
                full.steps[static_cast<size_t>(t)].action.tokens);
      const auto& r = b.step_rewards[j];
      for (int t = 0; t + 1 < k; ++t) REQUIRE(r[static_cast<size_t>(t)] == 0.0);
      REQUIRE(r.back() == rb.step_rewards[i][static_cast<size_t>(k - 1)]);
    }
  }
}

TEST_CASE("apply_kl_penalty is a no-op at beta 0 and at the sampling policy") {
  Setup s = make_setup();
  RolloutBatch b = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);
  auto before = b.step_rewards;

  apply_kl_penalty(b, s.params, s.cfg);  // kl_coef = 0
  REQUIRE(b.step_rewards == before);     // bitwise

  // beta > 0 but params unchanged since sampling: new_lp == old_lp exactly
  s.cfg.kl_coef = 0.3;
  apply_kl_penalty(b, s.params, s.cfg);
  for (size_t i = 0; i < before.size(); ++i)
    for (size_t t = 0; t < before[i].size(); ++t)
      REQUIRE(b.step_rewards[i][t] == Catch::Approx(before[i][t]).margin(1e-12));

  // after a parameter change the penalty moves the rewards
  PolicyParams moved = s.params;
  for (double& x : moved.theta) x += 0.05;
  RolloutBatch b2 = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);
  auto before2 = b2.step_rewards;
  apply_kl_penalty(b2, moved, s.cfg);
  bool changed = false;
  for (size_t i = 0; i < before2.size(); ++i)
    for (size_t t = 0; t < before2[i].size(); ++t)
      if (b2.step_rewards[i][t] != before2[i][t]) changed = true;
  REQUIRE(changed);

  b2.has_old_logprobs = false;
  REQUIRE_THROWS_AS(apply_kl_penalty(b2, moved, s.cfg), MissingOldLogprobs);
}

TEST_CASE("ppo gradient matches finite differences of the ppo loss") {
  Setup s = make_setup();
  s.cfg.batch_size = 4;
  RolloutBatch b = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);
  // evaluate at slightly moved params so ratios differ from 1 (generic point)
  PolicyParams at = s.params;
  detail::SeedStream ss(99);
  for (double& x : at.theta)
    x += 1e-2 * (2.0 * (static_cast<double>(ss.next() >> 11) * 0x1.0p-53) - 1.0);

  PpoResult res = ppo_loss_and_grad(b, at, s.cfg);
  const double h = 1e-6;
  for (size_t i = 0; i < at.theta.size(); i += 53) {
    PolicyParams pp = at, pm = at;
    pp.theta[i] += h;
    pm.theta[i] -= h;
    const double fd =
        (ppo_loss_and_grad(b, pp, s.cfg).loss - ppo_loss_and_grad(b, pm, s.cfg).loss) / (2.0 * h);
    if (std::abs(res.gradient[i]) > 1e-8)
      REQUIRE(std::abs(res.gradient[i] - fd) / std::abs(res.gradient[i]) < 1e-4);
    else
      REQUIRE(std::abs(fd) < 1e-6);
  }

  RolloutBatch no_old = b;
  no_old.has_old_logprobs = false;
  REQUIRE_THROWS_AS(ppo_loss_and_grad(no_old, at, s.cfg), MissingOldLogprobs);
}

TEST_CASE("clip inertness: wide epsilon reproduces the unclipped gradient") {
  Setup s = make_setup();
  s.cfg.batch_size = 4;
  RolloutBatch b = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);
  PolicyParams at = s.params;
  for (double& x : at.theta) x += 0.01;

  TrainConfig wide = s.cfg;
  wide.clip_epsilon = 0.999;  // larger than any ratio deviation in this batch
  PpoResult clipped = ppo_loss_and_grad(b, at, wide);
  REQUIRE(clipped.diagnostics.clip_fraction == 0.0);

  // independent unclipped estimator: -(1/N) sum_tokens A * rho * grad logp
  std::vector<double> expect(at.theta.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(b.tokens.size());
  for (const TokenRecord& rec : b.tokens) {
    const auto lp = steptool::detail::log_softmax(
        steptool::detail::forward_pass(at, rec.features).logits, b.decode.temperature,
        rec.support);
    const double rho = std::exp(lp[static_cast<size_t>(rec.chosen)] - rec.old_logprob);
    accumulate_token_grad(at, rec.features, rec.chosen, rec.support, b.decode.temperature,
                          -rec.advantage * rho * inv_n, expect);
  }
  for (size_t i = 0; i < expect.size(); ++i)
    REQUIRE(std::abs(clipped.gradient[i] - expect[i]) < 1e-12);

  // with a tiny epsilon some tokens clip and their gradient contribution drops
  TrainConfig narrow = s.cfg;
  narrow.clip_epsilon = 1e-6;
  PpoResult n = ppo_loss_and_grad(b, at, narrow);
  REQUIRE(n.diagnostics.clip_fraction > 0.0);
}

TEST_CASE("T=1 batches reduce to the single-step RLHF loss bitwise") {
  Setup s = make_setup();
  s.cfg.ablation_mode = AblationMode::SubTrajectoryPpo;
  s.cfg.batch_size = 6;
  RolloutBatch b = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);
  // keep only the T=1 sub-episodes
  RolloutBatch t1;
  t1.decode = b.decode;
  t1.has_old_logprobs = true;
  for (size_t i = 0; i < b.trajectories.size(); ++i) {
    if (b.trajectories[i].length() != 1) continue;
    t1.trajectories.push_back(b.trajectories[i]);
    t1.step_rewards.push_back(b.step_rewards[i]);
  }
  REQUIRE(t1.trajectories.size() >= 2);
  compute_advantages(t1, s.world, s.vparams, s.cfg);

  PolicyParams at = s.params;
  for (double& x : at.theta) x += 0.005;
  PpoResult step_grained = ppo_loss_and_grad(t1, at, s.cfg);
  PpoResult single = rlhf_single_step_loss(t1, at, s.cfg);
  REQUIRE(step_grained.loss == single.loss);  // bitwise: identical summation order
  for (size_t i = 0; i < single.gradient.size(); ++i)
    REQUIRE(std::abs(step_grained.gradient[i] - single.gradient[i]) <= 1e-12);
  REQUIRE(step_grained.diagnostics.clip_fraction == single.diagnostics.clip_fraction);

  // T=2 batches are rejected
  Setup s2 = make_setup();
  RolloutBatch full = collect_rollouts(s2.world, s2.params, s2.vparams, s2.cfg, s2.rng);
  bool has_multi = false;
  for (const auto& traj : full.trajectories) has_multi |= traj.length() > 1;
  REQUIRE(has_multi);
  REQUIRE_THROWS_AS(rlhf_single_step_loss(full, at, s.cfg), NonSingleStepBatch);
}

TEST_CASE("reinforce_gradient equals mean trajectory score-weighted gradients") {
  Setup s = make_setup();
  s.cfg.batch_size = 4;
  s.cfg.standardize_advantages = false;
  RolloutBatch b = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);
  auto grad = reinforce_gradient(b, s.params);

  // independent computation through logprob_grad per step
  std::vector<double> expect(s.params.theta.size(), 0.0);
  DecodeConfig dec = s.cfg.decode;
  for (size_t i = 0; i < b.trajectories.size(); ++i) {
    const Trajectory& traj = b.trajectories[i];
    for (int t = 0; t < traj.length(); ++t) {
      auto g = logprob_grad(s.params, s.world, traj.steps[static_cast<size_t>(t)].state,
                            traj.steps[static_cast<size_t>(t)].action, dec);
      const double a = b.advantages[i][static_cast<size_t>(t)];
      for (size_t k = 0; k < expect.size(); ++k)
        expect[k] += a * g[k] / static_cast<double>(b.trajectories.size());
    }
  }
  for (size_t k = 0; k < expect.size(); ++k) REQUIRE(std::abs(grad[k] - expect[k]) < 1e-10);
}

TEST_CASE("critic_update reduces the value loss") {
  Setup s = make_setup();
  RolloutBatch b = collect_rollouts(s.world, s.params, s.vparams, s.cfg, s.rng);
  ValueParams v = s.vparams;
  TrainConfig cfg = s.cfg;
  cfg.critic_epochs = 25;
  CriticUpdateResult res = critic_update(b, s.world, v, cfg);
  REQUIRE(res.loss_after < res.loss_before);
  REQUIRE(res.loss_after >= 0.0);
}

TEST_CASE("adam and sgd updates move parameters as specified") {
  std::vector<double> theta{1.0, -1.0};
  AdamState adam;
  apply_update(theta, {0.5, -0.25}, 0.1, OptimizerKind::Sgd, adam);
  REQUIRE(theta[0] == Catch::Approx(0.95).margin(1e-15));
  REQUIRE(theta[1] == Catch::Approx(-0.975).margin(1e-15));

  // first adam step moves each coordinate by ~lr * sign(grad)
  std::vector<double> t2{0.0, 0.0};
  apply_update(t2, {0.5, -0.25}, 0.1, OptimizerKind::Adam, adam);
  REQUIRE(t2[0] == Catch::Approx(-0.1).epsilon(1e-4));
  REQUIRE(t2[1] == Catch::Approx(0.1).epsilon(1e-4));
}

TEST_CASE("train emits one metrics row per iteration, deterministically") {
  ToolWorld w = small_world();
  TrainConfig cfg = small_config();
  cfg.iterations = 3;
  cfg.batch_size = 8;

  int callbacks = 0;
  TrainResult a = train(w, cfg, [&](int, const PolicyParams&, const ValueParams&,
                                    const MetricsRow&) { ++callbacks; });
  TrainResult b = train(w, cfg);
  REQUIRE(callbacks == 3);
  REQUIRE(a.metrics.size() == 3);
  REQUIRE(a.params.theta == b.params.theta);
  for (size_t i = 0; i < a.metrics.size(); ++i) {
    REQUIRE(a.metrics[i].iteration == static_cast<int>(i));
    REQUIRE(a.metrics[i].mean_return == b.metrics[i].mean_return);
    REQUIRE(a.metrics[i].pass_rate == b.metrics[i].pass_rate);
    REQUIRE(a.metrics[i].mean_kl == b.metrics[i].mean_kl);
    REQUIRE(a.metrics[i].value_loss == b.metrics[i].value_loss);
  }
}
