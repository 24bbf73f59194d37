#include <catch_amalgamated.hpp>

#include <random>

#include "steptool/advantage.hpp"

using namespace steptool;

TEST_CASE("discounted_returns backward recursion") {
  // gamma 0.5, rewards [1, 0, 2]: G = [1 + .5*(0 + .5*2), 0 + .5*2, 2]
  auto g = discounted_returns({1.0, 0.0, 2.0}, 0.5);
  REQUIRE(g.size() == 3);
  REQUIRE(g[0] == Catch::Approx(1.5).margin(1e-15));
  REQUIRE(g[1] == Catch::Approx(1.0).margin(1e-15));
  REQUIRE(g[2] == Catch::Approx(2.0).margin(1e-15));
  REQUIRE_THROWS_AS(discounted_returns({}, 0.5), EmptyRewards);
  REQUIRE_THROWS_AS(discounted_returns({1.0}, -0.1), ConfigError);
  REQUIRE_THROWS_AS(discounted_returns({1.0}, 1.1), ConfigError);
}

TEST_CASE("mc_advantage is return minus value") {
  auto a = mc_advantage({1.0, 1.0}, {0.25, 0.5}, 1.0);
  REQUIRE(a[0] == Catch::Approx(2.0 - 0.25).margin(1e-15));
  REQUIRE(a[1] == Catch::Approx(1.0 - 0.5).margin(1e-15));
}

TEST_CASE("td_residuals bootstrap zero at the terminal") {
  // delta_t = r_t + gamma V(s_{t+1}) - V(s_t), V(terminal) = 0
  auto d = td_residuals({1.0, 2.0}, {0.5, 0.25}, 0.9);
  REQUIRE(d[0] == Catch::Approx(1.0 + 0.9 * 0.25 - 0.5).margin(1e-15));
  REQUIRE(d[1] == Catch::Approx(2.0 + 0.0 - 0.25).margin(1e-15));
  REQUIRE_THROWS_AS(td_residuals({1.0}, {0.5, 0.25}, 0.9), LengthMismatch);
}

TEST_CASE("GAE identities on random sequences") {
  std::mt19937_64 rng(12345);
  std::uniform_real_distribution<double> ur(-2.0, 2.0);
  std::uniform_int_distribution<int> ut(1, 8);
  for (int it = 0; it < 1000; ++it) {
    const int T = ut(rng);
    std::vector<double> r(static_cast<size_t>(T)), v(static_cast<size_t>(T));
    for (auto& x : r) x = ur(rng);
    for (auto& x : v) x = ur(rng);
    const double gamma = 0.5 + 0.5 * std::generate_canonical<double, 53>(rng);

    // lambda = 0: GAE reduces to the one-step TD residual
    auto a0 = gae(r, v, gamma, 0.0);
    auto d = td_residuals(r, v, gamma);
    for (int t = 0; t < T; ++t)
      REQUIRE(std::abs(a0[static_cast<size_t>(t)] - d[static_cast<size_t>(t)]) < 1e-10);

    // lambda = 1: GAE reduces to the Monte Carlo advantage G - V
    auto a1 = gae(r, v, gamma, 1.0);
    auto g = discounted_returns(r, gamma);
    for (int t = 0; t < T; ++t)
      REQUIRE(std::abs(a1[static_cast<size_t>(t)] -
                       (g[static_cast<size_t>(t)] - v[static_cast<size_t>(t)])) < 1e-10);

    // backward recursion equals the direct double sum
    const double lambda = std::generate_canonical<double, 53>(rng);
    auto a = gae(r, v, gamma, lambda);
    for (int t = 0; t < T; ++t) {
      double direct = 0.0;
      for (int l = 0; t + l < T; ++l)
        direct += std::pow(gamma * lambda, l) * d[static_cast<size_t>(t + l)];
      REQUIRE(std::abs(a[static_cast<size_t>(t)] - direct) < 1e-12);
    }
  }
}

TEST_CASE("broadcast_to_tokens repeats the step advantage") {
  auto b = broadcast_to_tokens({1.0, -2.0}, {3, 1});
  REQUIRE(b == std::vector<double>{1.0, 1.0, 1.0, -2.0});
  REQUIRE_THROWS_AS(broadcast_to_tokens({1.0}, {1, 2}), LengthMismatch);
}

TEST_CASE("standardize yields exact zero mean and unit variance") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> ur(-5.0, 5.0);
  std::vector<double> xs(64);
  for (auto& x : xs) x = ur(rng);
  auto z = standardize(xs);
  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= static_cast<double>(z.size());
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= static_cast<double>(z.size());
  REQUIRE(std::abs(mean) < 1e-9);
  REQUIRE(std::abs(var - 1.0) < 1e-9);

  // degenerate cases pass through unchanged
  REQUIRE(standardize({3.0}) == std::vector<double>{3.0});
  REQUIRE(standardize({2.0, 2.0, 2.0}) == std::vector<double>{2.0, 2.0, 2.0});
  REQUIRE(standardize({}).empty());
}
