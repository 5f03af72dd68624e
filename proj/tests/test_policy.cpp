#include <catch_amalgamated.hpp>

#include <sstream>

#include "helpers.hpp"
#include "oracles/oracles.hpp"
#include "promptmatch/policy.hpp"

using namespace promptmatch;
using Catch::Matchers::WithinAbs;

namespace {

// init_params leaves biases at zero; random biases exercise more of the
// backward pass.
void randomize_biases(MatchingNetParams& p, Rng& rng) {
  for (auto* net : {&p.key_net, &p.query_net}) {
    for (double& b : net->b1) b = rng.uniform(-0.5, 0.5);
    for (double& b : net->b2) b = rng.uniform(-0.5, 0.5);
  }
}

std::vector<bool> mask_of(std::size_t n, const std::vector<std::size_t>& masked) { return make_mask(n, masked); }

}  // namespace

TEST_CASE("init_params shapes and determinism", "[policy]") {
  const auto p = init_params(3, 32, 64, 16);
  CHECK(p.key_net.w1.rows == 64);
  CHECK(p.key_net.w1.cols == 32);
  CHECK(p.query_net.w1.rows == 64);
  CHECK(p.query_net.w1.cols == 64);
  CHECK(p.key_net.out_dim() == 16);
  CHECK(p.query_net.out_dim() == 16);
  CHECK_THAT(p.scale, WithinAbs(0.25, 1e-15));
  CHECK(init_params(3, 32, 64, 16).key_net == p.key_net);
  CHECK(init_params(3, 32, 64, 16).query_net == p.query_net);
  CHECK_FALSE(init_params(4, 32, 64, 16).key_net == p.key_net);

  for (const auto* net : {&p.key_net, &p.query_net}) {
    for (double b : net->b1) CHECK(b == 0.0);
    for (double b : net->b2) CHECK(b == 0.0);
    const double bound1 = 1.0 / std::sqrt(static_cast<double>(net->in_dim()));
    for (double w : net->w1.data) CHECK(std::abs(w) <= bound1 * (1 + 1e-7));
    const double bound2 = 1.0 / std::sqrt(static_cast<double>(net->hidden_dim()));
    for (double w : net->w2.data) CHECK(std::abs(w) <= bound2 * (1 + 1e-7));
  }
  CHECK(p.parameter_count() == (64 * 32 + 64 + 16 * 64 + 16) + (64 * 64 + 64 + 16 * 64 + 16));
}

TEST_CASE("mlp_forward basics", "[policy]") {
  const auto zero = MlpParams::zeros(4, 8, 3);
  CHECK(mlp_forward(zero, Vector{1, -2, 3, 0.5}) == Vector{0, 0, 0});

  auto id = MlpParams::zeros(3, 3, 3);
  for (std::size_t i = 0; i < 3; ++i) id.w1(i, i) = id.w2(i, i) = 1.0;
  CHECK(mlp_forward(id, Vector{0.5, 0.0, 2.0}) == Vector{0.5, 0.0, 2.0});
  CHECK(mlp_forward(id, Vector{-1.0, 1.0, 0.0}) == Vector{0.0, 1.0, 0.0});

  CHECK_THROWS_AS(mlp_forward(id, Vector{1, 2}), DimensionError);

  Rng rng(1);
  auto big = MlpParams::zeros(16, 4096, 8);
  for (auto* m : {&big.w1, &big.w2}) {
    for (double& w : m->data) w = rng.uniform(-1, 1);
  }
  for (double x : mlp_forward(big, testing::random_vector(rng, 16))) CHECK(std::isfinite(x));
}

TEST_CASE("identical embeddings give a uniform distribution", "[policy]") {
  Rng rng(2);
  const auto p = init_params(7, 8, 16, 8);
  EmbeddingSet set;
  set.dim = 8;
  const Vector f = testing::random_vector(rng, 8);
  set.vectors.assign(5, f);
  for (int trial = 0; trial < 10; ++trial) {
    const auto dist = forward(p, set, testing::random_vector(rng, 16), {});
    for (double pr : dist.probs) CHECK_THAT(pr, WithinAbs(0.2, 1e-12));
  }
}

TEST_CASE("masked softmax", "[policy]") {
  const auto dist = softmax_masked({0.3, -1.2, 2.0}, mask_of(3, {2}));
  CHECK(dist.probs[2] == 0.0);
  CHECK_THAT(dist.probs[0] + dist.probs[1], WithinAbs(1.0, 1e-12));
  CHECK_THROWS_AS(softmax_masked({1.0, 2.0}, mask_of(2, {0, 1})), ContractError);
  CHECK_THROWS_AS(make_mask(2, std::vector<std::size_t>{5}), ContractError);
}

TEST_CASE("softmax sums to one and is shift invariant", "[policy]") {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    Vector logits = testing::random_vector(rng, n, -30, 30);
    std::vector<std::size_t> masked;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (rng.bernoulli(0.3)) masked.push_back(i);
    }
    const auto a = softmax_masked(logits, mask_of(n, masked));
    double total = 0.0;
    for (double pr : a.probs) {
      CHECK(pr >= 0.0);
      total += pr;
    }
    CHECK_THAT(total, WithinAbs(1.0, 1e-9));
    for (std::size_t i : masked) CHECK(a.probs[i] == 0.0);

    const double c = rng.uniform(-100, 100);
    for (double& l : logits) l += c;
    const auto b = softmax_masked(logits, mask_of(n, masked));
    for (std::size_t i = 0; i < n; ++i) CHECK_THAT(b.probs[i], WithinAbs(a.probs[i], 1e-12));
  }
}

TEST_CASE("sample_action", "[policy]") {
  Rng rng(4);
  const auto degenerate = softmax_masked({0.0, 0.0, 0.0}, mask_of(3, {1, 2}));
  for (int i = 0; i < 1000; ++i) REQUIRE(sample_action(degenerate, rng) == 0);

  const auto dist = softmax_masked({0.5, -0.3, 1.1, 0.0, 0.2}, mask_of(5, {3}));
  constexpr int kDraws = 100000;
  std::vector<int> counts(5, 0);
  for (int i = 0; i < kDraws; ++i) ++counts[sample_action(dist, rng)];
  CHECK(counts[3] == 0);
  for (std::size_t i = 0; i < 5; ++i) {
    const double p = dist.probs[i];
    const double sigma = std::sqrt(p * (1 - p) / kDraws);
    CHECK(std::abs(counts[i] / double(kDraws) - p) <= 3 * sigma + 1e-12);
  }

  Rng r1(9), r2(9);
  for (int i = 0; i < 100; ++i) CHECK(sample_action(dist, r1) == sample_action(dist, r2));
}

TEST_CASE("greedy_action", "[policy]") {
  auto from_probs = [](Vector probs, std::vector<std::size_t> masked) {
    ActionDistribution d;
    d.mask = make_mask(probs.size(), masked);
    d.probs = std::move(probs);
    return d;
  };
  CHECK(greedy_action(from_probs({0.2, 0.5, 0.3}, {})) == 1);
  CHECK(greedy_action(from_probs({0.5, 0.5}, {})) == 0);
  CHECK(greedy_action(softmax_masked({0.0, 3.0, 1.0}, mask_of(3, {1}))) == 2);
}

TEST_CASE("single action pool has zero gradient", "[policy]") {
  Rng rng(5);
  auto p = init_params(11, 4, 6, 3);
  randomize_biases(p, rng);
  const auto set = testing::random_embeddings(rng, 1, 4);
  const auto g = grad_log_prob(p, set, testing::random_vector(rng, 8), {}, 0);
  CHECK(squared_norm(g) == 0.0);

  // Same with n = 3 and two masked.
  const auto set3 = testing::random_embeddings(rng, 3, 4);
  const std::vector<std::size_t> masked{0, 2};
  CHECK(squared_norm(grad_log_prob(p, set3, testing::random_vector(rng, 8), masked, 1)) == 0.0);
}

TEST_CASE("grad_log_prob errors", "[policy]") {
  Rng rng(6);
  const auto p = init_params(1, 4, 6, 3);
  const auto set = testing::random_embeddings(rng, 3, 4);
  const Vector l = testing::random_vector(rng, 8);
  const std::vector<std::size_t> masked{1};
  CHECK_THROWS_AS(grad_log_prob(p, set, l, masked, 1), ContractError);
  CHECK_THROWS_AS(grad_log_prob(p, set, l, {}, 3), ContractError);
}

TEST_CASE("grad_log_prob matches finite differences", "[policy]") {
  constexpr int kInstances = 120;
  constexpr double kEps = 1e-4;
  int checked = 0;
  for (int seed = 0; checked < kInstances; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t d = 2 + rng.below(7);       // <= 8
    const std::size_t hidden = 2 + rng.below(15);  // <= 16
    const std::size_t out = 2 + rng.below(7);
    const std::size_t n = 2 + rng.below(5);        // <= 6
    auto p = init_params(seed, d, hidden, out);
    randomize_biases(p, rng);
    const auto set = testing::random_embeddings(rng, n, d);
    const Vector l = testing::random_vector(rng, 2 * d);
    std::vector<std::size_t> masked;
    if (n > 2 && rng.bernoulli(0.5)) masked.push_back(rng.below(n));
    std::size_t action;
    do {
      action = rng.below(n);
    } while (std::find(masked.begin(), masked.end(), action) != masked.end());

    if (oracle::min_preactivation(p, set.vectors, l) < 2 * kEps) continue;

    const auto analytic = oracle::flatten(grad_log_prob(p, set, l, masked, action));
    const auto numeric =
        oracle::finite_difference_grad(p, set.vectors, l, make_mask(n, masked), action, kEps);
    INFO("seed " << seed << " d " << d << " hidden " << hidden << " n " << n);
    CHECK(oracle::relative_error(analytic, numeric) <= 1e-4);
    ++checked;
  }
  CHECK(checked >= 100);
}

TEST_CASE("score function identity", "[policy]") {
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    auto p = init_params(seed, 6, 10, 5);
    randomize_biases(p, rng);
    const std::size_t n = 2 + rng.below(5);
    const auto set = testing::random_embeddings(rng, n, 6);
    const Vector l = testing::random_vector(rng, 12);
    const std::vector<std::size_t> masked = n > 2 ? std::vector<std::size_t>{0} : std::vector<std::size_t>{};
    const auto dist = forward(p, set, l, masked);
    auto total = zeros_like(p);
    for (std::size_t a = 0; a < n; ++a) {
      if (dist.mask[a]) continue;
      axpy(dist.probs[a], grad_log_prob(p, set, l, masked, a), total);
    }
    const auto flat = oracle::flatten(total);
    for (double x : flat) REQUIRE(std::abs(x) <= 1e-6);
  }
}

TEST_CASE("accumulator equals the sum of single gradients", "[policy]") {
  Rng rng(8);
  const auto p = init_params(2, 5, 7, 4);
  const auto set = testing::random_embeddings(rng, 6, 5);
  const auto keys = compute_keys(p, set);
  ScoreGradientAccumulator acc(p, keys);
  auto expected = zeros_like(p);
  for (int k = 0; k < 4; ++k) {
    const Vector l = testing::random_vector(rng, 10);
    const std::vector<std::size_t> masked{static_cast<std::size_t>(k)};
    const std::size_t a = 5 - k;
    const double w = rng.uniform(-2, 2);
    acc.add(l, masked, a, w);
    axpy(w, grad_log_prob(p, set, l, masked, a), expected);
  }
  const auto got = std::move(acc).finish();
  CHECK(oracle::relative_error(oracle::flatten(got), oracle::flatten(expected)) <= 1e-12);
}

TEST_CASE("apply_update", "[policy]") {
  Rng rng(9);
  const auto p = init_params(4, 5, 6, 3);
  auto g = zeros_like(p);
  g.for_each_block([&](std::span<double> b) {
    for (double& x : b) x = rng.uniform(-1, 1);
  });
  CHECK(apply_update(p, g, 0.0).key_net == p.key_net);
  CHECK(apply_update(p, zeros_like(p), 0.5).query_net == p.query_net);

  const auto back = apply_update(apply_update(p, g, 0.01), g, -0.01);
  const auto a = oracle::flatten(p), b = oracle::flatten(back);
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a[i] - b[i]) <= 1e-12);

  g.key_net.b1[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(apply_update(p, g, 0.1), NumericError);
}

TEST_CASE("checkpoint round-trip is bit exact", "[policy]") {
  const auto dir = testing::scratch_dir("ckpt");
  const auto p = init_params(12, 8, 16, 4);
  const std::string path = (dir / "a.bin").string();
  save_checkpoint(p, path);
  const auto q = load_checkpoint(path);
  CHECK(q.key_net == p.key_net);
  CHECK(q.query_net == p.query_net);
  CHECK(q.scale == p.scale);

  save_checkpoint(q, (dir / "b.bin").string());
  CHECK(testing::read_file(path) == testing::read_file(dir / "b.bin"));

  const std::size_t floats = p.parameter_count();
  const std::string bytes = testing::read_file(path);
  const std::string header = bytes.substr(0, bytes.size() - 4 * floats);
  CHECK(header.substr(0, 5) == "PMK1\n");
  CHECK(header.find("8 16 4 0.5\n") != std::string::npos);
}

TEST_CASE("checkpoint corruption is rejected", "[policy]") {
  const auto p = init_params(1, 4, 4, 4);
  std::stringstream ss;
  write_checkpoint(ss, p);
  const std::string good = ss.str();

  auto load = [](std::string bytes) {
    std::istringstream in(bytes);
    return read_checkpoint(in);
  };
  CHECK_NOTHROW(load(good));

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(load(bad_magic), DataError);

  CHECK_THROWS_AS(load(good.substr(0, good.size() - 3)), DataError);

  // Declared dims larger than the payload.
  std::string wrong = good;
  wrong.replace(wrong.find("4 4 4"), 5, "4 5 4");
  CHECK_THROWS_AS(load(wrong), DataError);

  // Declared dims smaller than the payload.
  std::string smaller = good;
  smaller.replace(smaller.find("4 4 4"), 5, "4 3 4");
  CHECK_THROWS_AS(load(smaller), DataError);

  std::string garbage = good;
  garbage.replace(garbage.find("4 4 4"), 5, "a b c");
  CHECK_THROWS_AS(load(garbage), DataError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ck.bin"), DataError);
}
