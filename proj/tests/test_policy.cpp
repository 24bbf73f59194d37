#include <catch_amalgamated.hpp>

#include <map>

#include "steptool/oracle.hpp"
#include "steptool/policy.hpp"

using namespace steptool;

namespace {

ToolWorld tiny_world() {
  WorldConfig c;
  c.n_tools = 1;
  c.n_args = 1;
  c.args_per_tool = 1;
  c.n_tasks = 1;
  c.items_per_task_min = 1;
  c.items_per_task_max = 1;
  c.distractors_per_relevant = 0;
  c.horizon = 2;
  c.max_action_len = 5;
  c.task_feature_buckets = 4;
  return generate_world(c, 42);
}

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

double logsumexp_check(const std::vector<double>& lp) {
  double s = 0.0;
  for (double l : lp)
    if (l != -std::numeric_limits<double>::infinity()) s += std::exp(l);
  return s;
}

}  // namespace

TEST_CASE("init_policy is deterministic and bounded") {
  ToolWorld w = small_world();
  Dims dims{feature_dim(w), 8, w.vocab.size()};
  PolicyParams a = init_policy(dims, 3);
  PolicyParams b = init_policy(dims, 3);
  PolicyParams c = init_policy(dims, 4);
  REQUIRE(a.theta == b.theta);
  REQUIRE(a.theta != c.theta);
  REQUIRE(static_cast<int>(a.theta.size()) == dims.param_count());
  for (double x : a.theta) {
    REQUIRE(x >= -0.05);
    REQUIRE(x <= 0.05);
  }
  ValueParams v = init_value(dims.feature_dim, 3);
  REQUIRE(v.w.size() == static_cast<size_t>(dims.feature_dim) + 1);
}

TEST_CASE("featurize produces a fixed-layout one-hot block vector") {
  ToolWorld w = small_world();
  EnvState s = reset(w, 1);
  FeatureVector x = featurize(w, s, {w.vocab.call});
  REQUIRE(static_cast<int>(x.size()) == feature_dim(w));
  for (double v : x) REQUIRE((v == 0.0 || v == 1.0));
  // blocks: task bucket (1) + gathered (0 at reset) + step (1) + one prefix
  // token (1) + last obs head (1)
  double sum = 0.0;
  for (double v : x) sum += v;
  REQUIRE(sum == 4.0);

  // gathering an item flips exactly its bit in the gathered block
  const ToolSpec& t0 = w.tools[0];
  Action call = parse_action(
      w.vocab, {w.vocab.call, t0.name_token, w.vocab.arg_marker, t0.accepted_args[0], w.vocab.end});
  auto [s1, rec] = step(w, s, call);
  FeatureVector x1 = featurize(w, s1, {});
  const int off = w.task_feature_buckets;
  REQUIRE(x1[static_cast<size_t>(off + rec.yielded_item)] == 1.0);
}

TEST_CASE("token log-probabilities normalize on full vocab and on support") {
  ToolWorld w = small_world();
  Dims dims{feature_dim(w), 8, w.vocab.size()};
  PolicyParams p = init_policy(dims, 3);
  EnvState s = reset(w, 0);
  FeatureVector x = featurize(w, s, {});

  auto lp = token_logprobs(p, x);
  REQUIRE(static_cast<int>(lp.size()) == w.vocab.size());
  REQUIRE(logsumexp_check(lp) == Catch::Approx(1.0).margin(1e-12));

  DecodeConfig dec;
  dec.mode = DecodeMode::Grammar;
  auto glp = next_token_logprobs(p, w, s, {}, dec);
  REQUIRE(logsumexp_check(glp) == Catch::Approx(1.0).margin(1e-12));
  // only CALL and FINISH are alive at the first position
  for (Token t = 0; t < w.vocab.size(); ++t) {
    const bool finite = glp[static_cast<size_t>(t)] != -std::numeric_limits<double>::infinity();
    REQUIRE(finite == (t == w.vocab.call || t == w.vocab.finish));
  }

  // temperature flattens: higher temperature shrinks the logit gap
  DecodeConfig hot;
  hot.temperature = 10.0;
  auto lp_hot = next_token_logprobs(p, w, s, {}, hot);
  double spread = *std::max_element(lp.begin(), lp.end()) -
                  *std::min_element(lp.begin(), lp.end());
  double spread_hot = *std::max_element(lp_hot.begin(), lp_hot.end()) -
                      *std::min_element(lp_hot.begin(), lp_hot.end());
  REQUIRE(spread_hot < spread);

  FeatureVector bad(x.size() + 1, 0.0);
  REQUIRE_THROWS_AS(token_logprobs(p, bad), DimensionMismatch);
}

TEST_CASE("action_logprob totals its per-token terms") {
  ToolWorld w = small_world();
  Dims dims{feature_dim(w), 8, w.vocab.size()};
  PolicyParams p = init_policy(dims, 3);
  EnvState s = reset(w, 0);
  const ToolSpec& t0 = w.tools[0];
  Action call = parse_action(
      w.vocab, {w.vocab.call, t0.name_token, w.vocab.arg_marker, t0.accepted_args[0], w.vocab.end});
  ActionLogprob alp = action_logprob(p, w, s, call);
  REQUIRE(alp.per_token.size() == call.tokens.size());
  double sum = 0.0;
  for (double l : alp.per_token) sum += l;
  REQUIRE(alp.total == Catch::Approx(sum).margin(1e-12));

  Action bad = call;
  bad.tokens.push_back(w.vocab.size());
  REQUIRE_THROWS_AS(action_logprob(p, w, s, bad), UnknownToken);
}

TEST_CASE("logprob_grad matches central finite differences") {
  ToolWorld w = tiny_world();
  Dims dims{feature_dim(w), 4, w.vocab.size()};
  Rng rng(11);
  const double h = 1e-5;
  int instances = 0;
  for (std::uint64_t seed = 1; instances < 20; ++seed) {
    PolicyParams p = init_policy(dims, seed, 0.5);  // larger scale: nontrivial logits
    EnvState s = reset(w, 0);
    DecodeConfig dec;
    dec.mode = (seed % 2 == 0) ? DecodeMode::Grammar : DecodeMode::Free;
    dec.temperature = (seed % 3 == 0) ? 0.7 : 1.0;
    SampledAction sa = sample_action(p, w, s, rng, dec);
    auto grad = logprob_grad(p, w, s, sa.action, dec);
    for (size_t i = 0; i < p.theta.size(); i += 37) {  // coordinate subsample
      PolicyParams pp = p, pm = p;
      pp.theta[i] += h;
      pm.theta[i] -= h;
      const double fd = (action_logprob(pp, w, s, sa.action, dec).total -
                         action_logprob(pm, w, s, sa.action, dec).total) /
                        (2.0 * h);
      if (std::abs(grad[i]) > 1e-8)
        REQUIRE(std::abs(grad[i] - fd) / std::abs(grad[i]) < 1e-4);
      else
        REQUIRE(std::abs(fd) < 1e-6);
    }
    ++instances;
  }
}

TEST_CASE("sample_action is reproducible and grammar mode never emits malformed") {
  ToolWorld w = small_world();
  Dims dims{feature_dim(w), 8, w.vocab.size()};
  PolicyParams p = init_policy(dims, 3);
  EnvState s = reset(w, 0);

  Rng r1(7), r2(7);
  DecodeConfig dec;
  SampledAction a = sample_action(p, w, s, r1, dec);
  SampledAction b = sample_action(p, w, s, r2, dec);
  REQUIRE(a.action.tokens == b.action.tokens);
  REQUIRE(a.logprobs == b.logprobs);
  REQUIRE(a.logprobs.size() == a.action.tokens.size());

  // greedy ignores the rng entirely
  Rng r3(1), r4(999);
  REQUIRE(sample_action(p, w, s, r3, dec, true).action.tokens ==
          sample_action(p, w, s, r4, dec, true).action.tokens);

  DecodeConfig gdec;
  gdec.mode = DecodeMode::Grammar;
  Rng r5(13);
  for (int i = 0; i < 200; ++i) {
    SampledAction g = sample_action(p, w, s, r5, gdec);
    REQUIRE(g.action.kind != ActionKind::Malformed);
    REQUIRE(static_cast<int>(g.action.tokens.size()) <= w.max_action_len);
  }

  DecodeConfig badt;
  badt.temperature = 0.0;
  Rng r6(1);
  REQUIRE_THROWS_AS(sample_action(p, w, s, r6, badt), ConfigError);
}

TEST_CASE("sampling frequencies match enumerated probabilities within 3 sigma") {
  ToolWorld w = tiny_world();
  Dims dims{feature_dim(w), 4, w.vocab.size()};
  PolicyParams p = init_policy(dims, 21, 0.3);
  EnvState s = reset(w, 0);
  DecodeConfig dec;  // free decoding: the enumerated space is the sample space

  // exact probability of each complete sequence under the policy
  auto seqs = enumerate_action_sequences(w);
  std::map<std::vector<Token>, double> exact;
  for (const auto& seq : seqs) {
    double lp = 0.0;
    std::vector<Token> prefix;
    for (Token t : seq) {
      auto l = next_token_logprobs(p, w, s, prefix, dec);
      lp += l[static_cast<size_t>(t)];
      prefix.push_back(t);
    }
    exact[seq] = std::exp(lp);
  }
  double total = 0.0;
  for (const auto& [seq, prob] : exact) total += prob;
  REQUIRE(total == Catch::Approx(1.0).margin(1e-10));

  const int N = 100000;
  std::map<std::vector<Token>, int> counts;
  Rng rng(2024);
  for (int i = 0; i < N; ++i) ++counts[sample_action(p, w, s, rng, dec).action.tokens];

  // 3-sigma binomial check on every sequence with non-negligible mass
  for (const auto& [seq, prob] : exact) {
    if (prob < 1e-4) continue;
    const double mean = N * prob;
    const double sigma = std::sqrt(N * prob * (1.0 - prob));
    const double got = static_cast<double>(counts.count(seq) ? counts.at(seq) : 0);
    REQUIRE(std::abs(got - mean) <= 3.0 * sigma + 1.0);
  }
}

TEST_CASE("value head is linear in the features") {
  ToolWorld w = small_world();
  ValueParams v = init_value(feature_dim(w), 3);
  EnvState s = reset(w, 0);
  FeatureVector x = featurize(w, s, {});
  double expect = v.w.back();
  for (size_t i = 0; i < x.size(); ++i) expect += v.w[i] * x[i];
  REQUIRE(value_estimate(v, w, s) == expect);
  ValueParams bad;
  bad.w.assign(3, 0.0);
  REQUIRE_THROWS_AS(value_estimate(bad, x), DimensionMismatch);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ToolWorld w = small_world();
  Dims dims{feature_dim(w), 8, w.vocab.size()};
  PolicyParams p = init_policy(dims, 3);
  ValueParams v = init_value(dims.feature_dim, 3);
  nlohmann::json j = checkpoint_to_json(p, v);
  auto [p2, v2] = checkpoint_from_json(j);
  REQUIRE(p2.theta == p.theta);
  REQUIRE(p2.dims == p.dims);
  REQUIRE(v2.w == v.w);
  // serialized text also round-trips (nlohmann emits shortest round-trip doubles)
  auto [p3, v3] = checkpoint_from_json(nlohmann::json::parse(j.dump()));
  REQUIRE(p3.theta == p.theta);
  REQUIRE(v3.w == v.w);

  nlohmann::json bad = j;
  bad["format_version"] = 2;
  REQUIRE_THROWS_AS(checkpoint_from_json(bad), SchemaError);
  bad = j;
  bad["theta"].push_back(0.0);
  REQUIRE_THROWS_AS(checkpoint_from_json(bad), SchemaError);
  bad = j;
  bad["value_w"] = std::vector<double>{1.0};
  REQUIRE_THROWS_AS(checkpoint_from_json(bad), SchemaError);
}
