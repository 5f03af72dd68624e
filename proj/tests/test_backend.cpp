#include <catch_amalgamated.hpp>

#include <atomic>
#include <numeric>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "helpers.hpp"
#include "promptmatch/backend.hpp"
#include "promptmatch/http_backend.hpp"
#include "promptmatch/synthetic.hpp"

using namespace promptmatch;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

SyntheticTask make_task(double rho, std::size_t n_queries = 200, std::uint64_t seed = 1) {
  SyntheticTaskOptions opt;
  opt.seed = seed;
  opt.misalignment = rho;
  opt.n_queries = n_queries;
  return generate_synthetic_task(opt);
}

std::string input_with(const SyntheticTask& task, const std::vector<std::size_t>& picks, const std::string& query) {
  EnvConfig cfg;
  cfg.shots = picks.size();
  auto s = reset_state(cfg.shots);
  for (std::size_t a : picks) s = step(s, a, task.pool.size());
  return compose_llm_input(s, task.pool, query, cfg);
}

// First pool index of cluster c, skipping `skip` matches.
std::size_t member(const SyntheticTask& task, std::size_t c, std::size_t skip = 0) {
  for (std::size_t i = 0; i < task.pool.size(); ++i) {
    if (task.pool_clusters[i] == c && skip-- == 0) return i;
  }
  throw std::logic_error("no such member");
}

class CountingBackend final : public Backend {
 public:
  std::string respond(std::string_view input, const GenerationParams&) override {
    ++calls;
    return "echo:" + std::string(input);
  }
  int calls = 0;
};

}  // namespace

TEST_CASE("synthetic task layout", "[backend]") {
  const auto task = make_task(0.0);
  CHECK(task.pool.size() == 40);
  std::vector<std::size_t> per_cluster(4, 0);
  for (std::size_t c : task.pool_clusters) ++per_cluster[c];
  CHECK(per_cluster == std::vector<std::size_t>{10, 10, 10, 10});
  for (std::size_t i = 0; i < task.pool.size(); ++i) CHECK(task.pool_clusters[i] == i % 4);
  CHECK(task.queries.size() == 200);
  for (const auto& q : task.queries) {
    CHECK(q.answer == task.gold_answers[q.cluster]);
    CHECK(q.surface_cluster == q.cluster);
  }
  std::set<std::string> distinct(task.gold_answers.begin(), task.gold_answers.end());
  distinct.insert(task.distractors.begin(), task.distractors.end());
  CHECK(distinct.size() == 8);

  CHECK(make_task(0.0) == task);
  CHECK_FALSE(make_task(0.0, 200, 2) == task);
}

TEST_CASE("synthetic task option validation", "[backend]") {
  SyntheticTaskOptions opt;
  opt.pool_size = 3;
  CHECK_THROWS_AS(generate_synthetic_task(opt), UsageError);
  opt = {};
  opt.n_queries = 0;
  CHECK_THROWS_AS(generate_synthetic_task(opt), UsageError);
  opt = {};
  opt.misalignment = 1.5;
  CHECK_THROWS_AS(generate_synthetic_task(opt), UsageError);
}

TEST_CASE("pool file carries no cluster labels", "[backend]") {
  const auto task = make_task(0.3);
  std::stringstream ss;
  write_pool(ss, task.pool);
  CHECK(ss.str().find("cluster") == std::string::npos);
}

TEST_CASE("nearest exemplar lies in the query cluster when rho = 0", "[backend]") {
  const auto task = make_task(0.0, 1000);
  const HashNgramEncoder enc(32);
  const auto set = encode_pool(task.pool, enc);
  for (const auto& q : task.queries) {
    REQUIRE(task.pool_clusters[detail::nearest_exemplar(enc(q.question), set)] == q.cluster);
  }
}

TEST_CASE("nearest exemplar is uninformative when rho = 1", "[backend]") {
  const auto task = make_task(1.0, 600);
  const HashNgramEncoder enc(32);
  const auto set = encode_pool(task.pool, enc);
  std::size_t hits = 0;
  for (const auto& q : task.queries) {
    hits += task.pool_clusters[detail::nearest_exemplar(enc(q.question), set)] == q.cluster;
  }
  CHECK(static_cast<double>(hits) / 600.0 <= 1.0 / 4.0 + 0.1);
}

TEST_CASE("manifest round-trip", "[backend]") {
  const auto task = make_task(0.5, 50);
  CHECK(task_from_json(nlohmann::json::parse(task_to_json(task).dump())) == task);
  auto bad = task_to_json(task);
  bad["pool"][0]["cluster"] = 99;
  CHECK_THROWS_AS(task_from_json(nlohmann::json::parse(bad.dump())), DataError);
  CHECK(train_split_size(1100) == 900);
  CHECK(train_split_size(220) == 180);
  CHECK(train_split_size(11) == 9);
}

TEST_CASE("synthetic backend answers by cluster membership", "[backend]") {
  const auto task = make_task(0.0, 50);
  SyntheticBackend backend(task, EnvConfig{});
  const auto& q = task.queries[0];
  const std::size_t own = q.cluster, other = (q.cluster + 1) % 4, third = (q.cluster + 2) % 4;

  CHECK(backend.respond(input_with(task, {member(task, own)}, q.question), {}) == q.answer);
  CHECK(backend.respond(input_with(task, {member(task, other)}, q.question), {}) == task.distractors[other]);

  const HashNgramEncoder enc(32);
  const RewardFunction rf(RewardConfig{}, enc);
  CHECK_THAT(rf.score(q.answer, q.answer), WithinAbs(1.0, 1e-12));
  const double zeta_wrong = rf.score(task.distractors[other], q.answer);
  CHECK_THAT(zeta_wrong, WithinAbs(score(task.distractors[other], q.answer, RewardConfig{}, enc), 0.0));
  CHECK(zeta_wrong < 0.6);

  // m = 3: two correct plus one wrong is a majority.
  CHECK(backend.respond(input_with(task, {member(task, own), member(task, other), member(task, own, 1)}, q.question),
                        {}) == q.answer);
  // m = 3: one correct, two of the same foreign cluster.
  CHECK(backend.respond(
            input_with(task, {member(task, other), member(task, own), member(task, other, 1)}, q.question), {}) ==
        task.distractors[other]);
  // m = 2: one correct is ceil(2/2).
  CHECK(backend.respond(input_with(task, {member(task, other), member(task, own)}, q.question), {}) == q.answer);
  // m = 3, all foreign and tied 1-1-1: smallest foreign cluster wins.
  const std::size_t fourth = (q.cluster + 3) % 4;
  const std::size_t smallest = std::min({other, third, fourth});
  CHECK(backend.respond(input_with(task, {member(task, fourth), member(task, other), member(task, third)}, q.question),
                        {}) == task.distractors[smallest]);

  CHECK(backend.respond(compose_zero_shot(q.question, EnvConfig{}), {}) == task.distractors[q.surface_cluster]);
  CHECK_THROWS_AS(backend.respond(input_with(task, {0}, "unknown query"), {}), BackendError);
  CHECK_THROWS_AS(backend.respond("", {}), ContractError);
}

TEST_CASE("synthetic backend is permutation invariant and deterministic", "[backend]") {
  const auto task = make_task(0.5, 60);
  SyntheticBackend a(task, EnvConfig{}, 7), b(task, EnvConfig{}, 7);
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const auto& q = task.queries[rng.below(task.queries.size())];
    std::vector<std::size_t> idx(task.pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(1 + rng.below(3));
    const std::string out = a.respond(input_with(task, idx, q.question), {});
    CHECK(b.respond(input_with(task, idx, q.question), {}) == out);
    rng.shuffle(idx);
    CHECK(a.respond(input_with(task, idx, q.question), {}) == out);
  }
}

TEST_CASE("generation defaults and request body", "[backend]") {
  const GenerationParams p;
  CHECK(p.top_p == 0.8);
  CHECK(p.max_new_tokens == 512);
  CHECK(p.temperature == 1.0);
  CHECK(p.num_beams == 1);
  CHECK_FALSE(p.do_sample);
  const auto body = completion_request("m", "hello", p);
  CHECK(body["top_p"] == 0.8);
  CHECK(body["max_tokens"] == 512);
  CHECK(body["temperature"] == 1.0);
  CHECK(body["prompt"] == "hello");
  CHECK(body["model"] == "m");

  GenerationParams bad;
  bad.top_p = 0.0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = {};
  bad.max_new_tokens = 0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = {};
  bad.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("completion response parsing", "[backend]") {
  CHECK(parse_completion_response(R"({"choices":[{"text":"first"},{"text":"second"}]})") == "first");
  CHECK_THROWS_AS(parse_completion_response(R"({"choices":[]})"), BackendError);
  CHECK_THROWS_AS(parse_completion_response("not json"), BackendError);
}

TEST_CASE("fnv1a64 reference vectors", "[backend]") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
  CHECK(hash_hex(0xabcULL) == "0000000000000abc");
}

TEST_CASE("replay backend record and replay", "[backend]") {
  const auto dir = testing::scratch_dir("replay");
  const std::string path = (dir / "rec.jsonl").string();
  CountingBackend inner;
  {
    ReplayBackend rec(path, ReplayBackend::Mode::record, &inner);
    CHECK(rec.respond("one", {}) == "echo:one");
    CHECK(rec.respond("two", {}) == "echo:two");
    CHECK(rec.respond("one", {}) == "echo:one");
    CHECK(inner.calls == 2);
  }
  {
    ReplayBackend replay(path, ReplayBackend::Mode::replay_strict);
    CHECK(replay.respond("one", {}) == "echo:one");
    CHECK(replay.respond("two", {}) == "echo:two");
    CHECK_THROWS_WITH(replay.respond("three", {}), ContainsSubstring(hash_hex(fnv1a64("three"))));
  }
  CHECK(inner.calls == 2);

  // Reversed line order replays identically.
  std::istringstream lines(testing::read_file(path));
  std::vector<std::string> rows;
  for (std::string l; std::getline(lines, l);) rows.push_back(l);
  CHECK(rows.size() == 2);
  std::reverse(rows.begin(), rows.end());
  testing::write_file(dir / "rev.jsonl", rows[0] + "\n" + rows[1] + "\n");
  ReplayBackend reversed((dir / "rev.jsonl").string(), ReplayBackend::Mode::replay_strict);
  CHECK(reversed.respond("one", {}) == "echo:one");

  ReplayBackend fallback(path, ReplayBackend::Mode::replay_fallback, &inner);
  CHECK(fallback.respond("three", {}) == "echo:three");
  CHECK(inner.calls == 3);
  CHECK(testing::read_file(path).find("three") == std::string::npos);

  CHECK_THROWS_AS(ReplayBackend((dir / "missing.jsonl").string(), ReplayBackend::Mode::replay_strict), DataError);
  CHECK_THROWS_AS(ReplayBackend(path, ReplayBackend::Mode::record, nullptr), UsageError);
  testing::write_file(dir / "bad.jsonl", "{\"input_hash\":1}\n");
  CHECK_THROWS_AS(ReplayBackend((dir / "bad.jsonl").string(), ReplayBackend::Mode::replay_strict), DataError);
}

TEST_CASE("http backend requires a credential before any request", "[backend]") {
  EndpointConfig cfg;
  cfg.url = "http://127.0.0.1:1/v1/completions";
  cfg.credential_env = "PROMPTMATCH_TEST_UNSET_CREDENTIAL";
  ::unsetenv(cfg.credential_env.c_str());
  CHECK_THROWS_AS(HttpBackend(cfg), UsageError);
}

TEST_CASE("http backend against a local server", "[backend]") {
  httplib::Server server;
  std::atomic<int> hits{0};
  std::string last_body, last_auth;
  std::mutex mu;
  server.Post("/ok", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    {
      std::lock_guard lock(mu);
      last_body = req.body;
      last_auth = req.get_header_value("Authorization");
    }
    res.set_content(R"({"choices":[{"text":"completed"}]})", "application/json");
  });
  server.Post("/fail", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 500;
    res.set_content("internal trouble", "text/plain");
  });
  server.Post("/denied", [&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 401;
    res.set_content("no", "text/plain");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("PROMPTMATCH_TEST_KEY", "secret-token", 1);
  EndpointConfig cfg;
  cfg.model = "tiny";
  cfg.credential_env = "PROMPTMATCH_TEST_KEY";
  cfg.backoff_ms = 0;
  cfg.timeout_s = 5;
  const std::string base = "http://127.0.0.1:" + std::to_string(port);

  cfg.url = base + "/ok";
  HttpBackend ok(cfg);
  CHECK(ok.respond("the prompt", GenerationParams{}) == "completed");
  {
    std::lock_guard lock(mu);
    const auto body = nlohmann::json::parse(last_body);
    CHECK(body["prompt"] == "the prompt");
    CHECK(body["model"] == "tiny");
    CHECK(body["top_p"] == 0.8);
    CHECK(body["max_tokens"] == 512);
    CHECK(last_auth == "Bearer secret-token");
  }

  hits = 0;
  cfg.url = base + "/fail";
  HttpBackend failing(cfg);
  try {
    failing.respond("x", {});
    FAIL("expected BackendError");
  } catch (const BackendError& e) {
    CHECK(e.retryable());
    CHECK_THAT(std::string(e.what()), ContainsSubstring("500") && ContainsSubstring("internal trouble"));
  }
  CHECK(hits == 3);  // one attempt plus two retries

  hits = 0;
  cfg.url = base + "/denied";
  HttpBackend denied(cfg);
  CHECK_THROWS_AS(denied.respond("x", {}), BackendError);
  CHECK(hits == 1);

  server.stop();
  thread.join();
  ::unsetenv("PROMPTMATCH_TEST_KEY");
}
