#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <random>

#include "sacp/arch_io.hpp"
#include "sacp/eval_oracle.hpp"
#include "sacp/weight_summaries.hpp"
#include "support.hpp"

using namespace sacp;
using namespace std::chrono_literals;

namespace {

std::string stub(const std::string &args = "") { return std::string(SACP_ORACLE_STUB) + " " + args; }

std::vector<OracleRequest> requests(std::size_t n, const ArchGraph &arch) {
  const auto doc = to_json(arch);
  std::vector<OracleRequest> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto cfg = materialize_masks({std::vector<double>(arch.num_prunable(), 0.5)}, arch, MaskPolicy::prefix, nullptr, 0);
    out.push_back({i, doc, cfg.vector.rates, cfg.masks, 1});
  }
  return out;
}

PruningConfig with_retained(const ArchGraph &arch, double rate, std::vector<std::int64_t> retained) {
  auto cfg = materialize_masks({{rate}}, arch, MaskPolicy::prefix, nullptr, 0);
  cfg.masks[0].retained = std::move(retained);
  return cfg;
}

} // namespace

TEST(ProxyScore, Examples) {
  const auto a = load_arch("toy4");
  const auto s = synthetic_weight_summaries(a, 0);
  EXPECT_DOUBLE_EQ(proxy_score(a, materialize_masks({{0.0, 0.0, 0.0}}, a, MaskPolicy::random, nullptr, 1), s), 1.0);

  const auto one = sacp::testing::chain({4});
  const WeightSummaries flat{{{1, 1, 1, 1}}};
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    EXPECT_DOUBLE_EQ(proxy_score(one, materialize_masks({{0.5}}, one, MaskPolicy::random, nullptr, seed), flat), 0.5);

  const WeightSummaries zero{{{0, 0, 0, 0}}};
  EXPECT_DOUBLE_EQ(proxy_score(one, with_retained(one, 0.0, {0, 1, 2, 3}), zero), 1.0);
  EXPECT_DOUBLE_EQ(proxy_score(one, with_retained(one, 0.75, {2}), zero), 0.25);

  EXPECT_THROW(proxy_score(one, with_retained(one, 0.5, {0}), flat), ValidationError);
  EXPECT_THROW(proxy_score(a, materialize_masks({{0.5, 0.5, 0.5}}, a, MaskPolicy::prefix, nullptr, 0), flat),
               ValidationError);
}

TEST(ProxyScore, NonincreasingAsChannelsAreRemoved) {
  const auto one = sacp::testing::chain({10});
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto s = synthetic_weight_summaries(one, static_cast<std::uint64_t>(t));
    auto cfg = materialize_masks({{0.0}}, one, MaskPolicy::random, nullptr, static_cast<std::uint64_t>(t));
    double prev = proxy_score(one, cfg, s);
    for (int k = 1; k <= 9; ++k) {
      auto &r = cfg.masks[0].retained;
      r.erase(r.begin() + static_cast<std::ptrdiff_t>(rng() % r.size()));
      cfg.vector.rates[0] = k / 10.0;
      const double cur = proxy_score(one, cfg, s);
      EXPECT_LE(cur, prev);
      EXPECT_GE(cur, 0.0);
      prev = cur;
    }
  }
}

TEST(ProxyScore, L1MasksAreOptimalForSmallGroups) {
  const RateGrid grid(0.125);
  for (std::int64_t c = 1; c <= 8; ++c) {
    const auto one = sacp::testing::chain({c});
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto s = synthetic_weight_summaries(one, seed);
      for (double r : grid.values()) {
        const auto keep = pruned_channels(c, r);
        const double best = proxy_score(one, materialize_masks({{r}}, one, MaskPolicy::l1, &s, 0), s);
        for (std::uint32_t bits = 0; bits < (1u << c); ++bits) {
          if (std::popcount(bits) != keep) continue;
          std::vector<std::int64_t> kept;
          for (std::int64_t i = 0; i < c; ++i)
            if (bits >> i & 1u) kept.push_back(i);
          EXPECT_LE(proxy_score(one, with_retained(one, r, kept), s), best + 1e-15);
        }
        for (std::uint64_t rs = 0; rs < 5; ++rs)
          EXPECT_LE(proxy_score(one, materialize_masks({{r}}, one, MaskPolicy::random, nullptr, rs), s), best + 1e-15);
      }
    }
  }
}

TEST(ProxyOracle, BudgetIndependentAndOrdered) {
  const auto a = load_arch("toy4");
  ProxyOracle o(synthetic_weight_summaries(a, 1));
  auto pool = sample_unconstrained(20, RateGrid(0.25), a, 2);
  materialize_pool(pool, a, MaskPolicy::random, nullptr);
  const auto r0 = o.evaluate(a, pool.configs, 0), r9 = o.evaluate(a, pool.configs, 9);
  EXPECT_EQ(r0, r9);
  for (std::size_t i = 0; i < r0.size(); ++i) {
    EXPECT_EQ(r0[i].id, pool.configs[i].id);
    EXPECT_TRUE(r0[i].ok());
  }
  auto broken = pool.configs;
  broken[3].masks[0].retained.clear();
  const auto rb = o.evaluate(a, broken, 0);
  EXPECT_FALSE(rb[3].ok());
  EXPECT_FALSE(rb[3].score.has_value());
  EXPECT_TRUE(rb[4].ok());
}

TEST(Protocol, RequestRoundTrip) {
  const auto a = load_arch("toy4");
  auto reqs = requests(1, a);
  reqs[0].id = 42;
  reqs[0].epochs = 7;
  const auto line = encode_request(reqs[0]);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  const auto back = decode_request(line);
  EXPECT_EQ(back.id, 42u);
  EXPECT_EQ(back.epochs, 7);
  EXPECT_EQ(back.rates, reqs[0].rates);
  EXPECT_EQ(back.masks, reqs[0].masks);
  EXPECT_EQ(parse_arch(back.arch).size(), a.size());
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j["budget"]["epochs"], 7);
  EXPECT_THROW(decode_request(R"({"id":1})"), ValidationError);
  EXPECT_THROW(decode_request("nope"), ValidationError);
}

TEST(Protocol, ResponseCodec) {
  EXPECT_EQ(decode_response(encode_response(oracle_ok(3, 0.25))), oracle_ok(3, 0.25));
  EXPECT_EQ(decode_response(encode_response(oracle_error(4, "boom"))), oracle_error(4, "boom"));
  EXPECT_EQ(decode_response(R"({"id":1,"status":"ok"})"), std::nullopt);
  EXPECT_EQ(decode_response(R"({"id":1,"status":"ok","score":1.5})"), std::nullopt);
  EXPECT_EQ(decode_response(R"({"id":1,"status":"error","score":0.5})"), std::nullopt);
  EXPECT_EQ(decode_response(R"({"id":-1,"status":"ok","score":0.5})"), std::nullopt);
  EXPECT_EQ(decode_response(R"({"id":1,"status":"maybe"})"), std::nullopt);
  EXPECT_EQ(decode_response("[1,2]"), std::nullopt);
  EXPECT_EQ(decode_response("garbage"), std::nullopt);
  const auto r = decode_response(R"({"id":1,"status":"error","score":null})");
  ASSERT_TRUE(r);
  EXPECT_FALSE(r->ok());
}

TEST(ExternalEvaluate, ConstantStub) {
  const auto a = load_arch("toy4");
  const auto reqs = requests(10, a);
  const auto out = external_evaluate(reqs, stub("--score 0.5"));
  ASSERT_EQ(out.size(), 10u);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].id, i);
    EXPECT_TRUE(out[i].ok());
    EXPECT_EQ(*out[i].score, 0.5);
  }
  EXPECT_TRUE(external_evaluate({}, stub()).empty());
}

TEST(ExternalEvaluate, DroppedRequestTimesOut) {
  const auto a = load_arch("toy4");
  ExternalOracleOptions o;
  o.request_timeout = 300ms;
  const auto out = external_evaluate(requests(6, a), stub("--drop 3"), o);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].id, i);
    EXPECT_EQ(out[i].ok(), i != 3) << i;
  }
  EXPECT_NE(out[3].message.find("timed out"), std::string::npos);
}

TEST(ExternalEvaluate, IndependentOfParallelism) {
  const auto a = load_arch("toy4");
  const auto reqs = requests(100, a);
  ExternalOracleOptions one, four;
  four.parallelism = 4;
  const auto r1 = external_evaluate(reqs, stub("--score-by-id"), one);
  const auto r4 = external_evaluate(reqs, stub("--score-by-id"), four);
  EXPECT_EQ(r1, r4);
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_DOUBLE_EQ(*r1[i].score, static_cast<double>(i % 101) / 100.0);
  // staggered answers arrive out of order across workers
  const auto rd = external_evaluate(std::span(reqs).first(12), stub("--score-by-id --delay-ms 5"), four);
  EXPECT_TRUE(std::equal(rd.begin(), rd.end(), r1.begin()));
}

TEST(ExternalEvaluate, FaultInjection) {
  const auto a = load_arch("toy4");
  const auto reqs = requests(5, a);
  ExternalOracleOptions o;
  o.request_timeout = 2s;

  const auto g = external_evaluate(reqs, stub("--garbage 1 --error 2"), o);
  EXPECT_TRUE(g[0].ok());
  EXPECT_FALSE(g[1].ok());
  EXPECT_NE(g[1].message.find("protocol error"), std::string::npos);
  EXPECT_FALSE(g[2].ok());
  EXPECT_TRUE(g[3].ok() && g[4].ok());

  const auto e = external_evaluate(reqs, stub("--exit-after 2"), o);
  EXPECT_TRUE(e[0].ok() && e[1].ok());
  for (std::size_t i = 2; i < 5; ++i) EXPECT_FALSE(e[i].ok()) << i;

  EXPECT_THROW(external_evaluate(reqs, stub("--bad-handshake"), o), RuntimeFailure);
  o.handshake_timeout = 300ms;
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(external_evaluate(reqs, stub("--silent"), o), RuntimeFailure);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, 10s);
  EXPECT_THROW(external_evaluate(reqs, "/nonexistent/oracle", o), RuntimeFailure);
}

TEST(ExternalEvaluate, SendsShutdown) {
  const auto log = ::testing::TempDir() + "oracle_log.jsonl";
  std::remove(log.c_str());
  const auto a = load_arch("toy4");
  external_evaluate(requests(2, a), stub("--log " + log));
  const auto text = read_text_file(log);
  EXPECT_NE(text.find(R"({"cmd":"shutdown"})"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

TEST(ExternalOracle, ScoresConfigsByRates) {
  const auto a = load_arch("toy4");
  auto pool = sample_unconstrained(8, RateGrid(0.25), a, 1);
  materialize_pool(pool, a, MaskPolicy::prefix, nullptr);
  ExternalOracle o(stub("--score-by-rates"), {});
  const auto out = o.evaluate(a, pool.configs, 1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto &r = pool.configs[i].vector.rates;
    double mean = 0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(r.size());
    EXPECT_NEAR(*out[i].score, 1.0 - mean, 1e-12);
  }
  EXPECT_EQ(o.name().rfind("cmd:", 0), 0u);
}

TEST(BruteForce, CountsAndErrors) {
  const auto a = load_arch("toy4");
  ProxyOracle o(synthetic_weight_summaries(a, 0));
  const auto grid = RateGrid::from_values({0.0, 0.5, 0.9});
  const auto r = brute_force_search(a, grid, 0.0, o, MaskPolicy::prefix, nullptr);
  EXPECT_EQ(r.table.size(), 27u);
  EXPECT_EQ(r.best.config.id, 0u); // nothing pruned keeps all mass
  EXPECT_DOUBLE_EQ(r.best.score, 1.0);
  for (const auto &row : r.table) EXPECT_LE(row.score, r.best.score);

  const auto t = brute_force_search(a, grid, 0.5, o, MaskPolicy::prefix, nullptr);
  for (const auto &row : t.table) EXPECT_TRUE(meets_threshold(global_ratio(row.config.vector.rates, a), 0.5));
  EXPECT_LT(t.table.size(), 27u);

  EXPECT_THROW(brute_force_search(a, grid, 0.95, o, MaskPolicy::prefix, nullptr), ValidationError);
  EXPECT_THROW(brute_force_search(a, grid, 0.0, o, MaskPolicy::prefix, nullptr, 0, 26), ValidationError);
}
