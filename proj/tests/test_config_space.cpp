#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "sacp/arch_io.hpp"
#include "sacp/config_space.hpp"
#include "sacp/weight_summaries.hpp"
#include "support.hpp"

using namespace sacp;
using sacp::testing::chain;

namespace {

std::set<std::vector<double>> vectors_of(const CandidatePool &pool) {
  std::set<std::vector<double>> out;
  for (const auto &c : pool.configs) out.insert(c.vector.rates);
  return out;
}

double l1_mass(const std::vector<double> &s, const std::vector<std::int64_t> &retained) {
  double m = 0.0;
  for (auto i : retained) m += s[static_cast<std::size_t>(i)];
  return m;
}

} // namespace

TEST(RateGrid, DefaultGranularity) {
  const RateGrid g(0.1);
  ASSERT_EQ(g.size(), 10u);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 0.1 * static_cast<double>(i));
  EXPECT_EQ(g[3], 0.3);
  EXPECT_EQ(RateGrid(0.5).values(), (std::vector<double>{0.0, 0.5}));
  EXPECT_EQ(RateGrid(0.3).values(), (std::vector<double>{0.0, 0.3, 0.6, 0.9}));
  EXPECT_EQ(RateGrid(0.25).values(), (std::vector<double>{0.0, 0.25, 0.5, 0.75}));
  for (double bad : {0.0, 1.0, -0.1, 1.5}) EXPECT_THROW(RateGrid{bad}, ValidationError);
  EXPECT_THROW(RateGrid::from_values({0.5, 0.2}), ValidationError);
  EXPECT_THROW(RateGrid::from_values({0.0, 1.0}), ValidationError);
}

TEST(GlobalRatio, Examples) {
  const auto a = chain({64, 128});
  EXPECT_EQ(global_ratio(std::vector<double>{0.0, 0.0}, a), 0.0);
  EXPECT_DOUBLE_EQ(global_ratio(std::vector<double>{0.5, 0.5}, a), 0.5);
  EXPECT_NEAR(global_ratio(std::vector<double>{0.5, 0.25}, a), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(global_ratio(std::vector<double>{0.5}, a), ValidationError);
}

TEST(GlobalRatio, ScaleInvariantAndMonotone) {
  const auto a = chain({16, 32, 8});
  const auto b = chain({48, 96, 24});
  const RateGrid grid(0.1);
  enumerate_space(grid, 3, [&](std::span<const double> r) {
    EXPECT_NEAR(global_ratio(r, a), global_ratio(r, b), 1e-12);
    std::vector<double> up(r.begin(), r.end());
    for (std::size_t g = 0; g < 3; ++g) {
      auto idx = *grid.index_of(up[g]);
      if (idx + 1 == grid.size()) continue;
      const double before = global_ratio(up, a);
      up[g] = grid[idx + 1];
      EXPECT_GE(global_ratio(up, a), before);
      up[g] = grid[idx];
    }
  });
}

TEST(SampleUnconstrained, DistinctOnGridDeterministic) {
  const auto a = load_arch("vgg16-cifar");
  const RateGrid grid(0.1);
  const auto p = sample_unconstrained(10'000, grid, a, 42);
  ASSERT_EQ(p.configs.size(), 10'000u);
  EXPECT_EQ(vectors_of(p).size(), 10'000u);
  for (std::size_t i = 0; i < p.configs.size(); ++i) {
    EXPECT_EQ(p.configs[i].id, i);
    for (double r : p.configs[i].vector.rates) ASSERT_TRUE(grid.index_of(r).has_value());
  }
  EXPECT_FALSE(p.tau.has_value());
  const auto q = sample_unconstrained(10'000, grid, a, 42);
  EXPECT_EQ(serialize_pool(p), serialize_pool(q));
  EXPECT_NE(serialize_pool(p), serialize_pool(sample_unconstrained(10'000, grid, a, 43)));
}

TEST(SampleUnconstrained, DegenerateAndSaturated) {
  const auto one = chain({8, 8});
  const auto zero_grid = RateGrid::from_values({0.0});
  const auto p = sample_unconstrained(1, zero_grid, one, 1);
  ASSERT_EQ(p.configs.size(), 1u);
  EXPECT_EQ(p.configs[0].vector.rates, (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(sample_unconstrained(2, zero_grid, one, 1), RuntimeFailure);

  const auto full = sample_unconstrained(100, RateGrid(0.1), one, 9);
  std::set<std::vector<double>> all;
  enumerate_space(RateGrid(0.1), 2, [&](std::span<const double> r) { all.insert({r.begin(), r.end()}); });
  EXPECT_EQ(vectors_of(full), all);
  EXPECT_THROW(sample_unconstrained(101, RateGrid(0.1), one, 9), RuntimeFailure);
  EXPECT_THROW(sample_unconstrained(0, RateGrid(0.1), one, 9), ValidationError);
}

TEST(SampleConstrained, ExactFeasibleSet) {
  const auto a = chain({64, 64});
  const auto grid = RateGrid::from_values({0.0, 0.5, 0.9});
  const auto p = sample_constrained(3, grid, a, 0.7, 5);
  EXPECT_EQ(vectors_of(p), (std::set<std::vector<double>>{{0.5, 0.9}, {0.9, 0.5}, {0.9, 0.9}}));
  EXPECT_EQ(*p.tau, 0.7);
  SamplerOptions tight;
  tight.rejection_budget_factor = 50;
  EXPECT_THROW(sample_constrained(4, grid, a, 0.7, 5, tight), RuntimeFailure);
}

TEST(SampleConstrained, TauZeroMatchesUnconstrained) {
  const auto a = load_arch("resnet56-cifar");
  const RateGrid grid(0.1);
  EXPECT_EQ(vectors_of(sample_constrained(500, grid, a, 0.0, 11)), vectors_of(sample_unconstrained(500, grid, a, 11)));
  const auto p = sample_constrained(500, grid, a, 0.0, 11);
  const auto q = sample_unconstrained(500, grid, a, 11);
  for (std::size_t i = 0; i < p.configs.size(); ++i) EXPECT_EQ(p.configs[i].vector, q.configs[i].vector);
}

TEST(SampleConstrained, AllMembersMeetTau) {
  const RateGrid grid(0.1);
  for (const auto *name : {"vgg16-cifar", "resnet18-cifar", "resnet56-cifar"}) {
    const auto a = load_arch(name);
    for (double tau : {0.3, 0.6}) {
      const auto p = sample_constrained(2'000, grid, a, tau, 7);
      EXPECT_EQ(vectors_of(p).size(), 2'000u);
      for (const auto &c : p.configs) ASSERT_GE(global_ratio(c.vector, a), tau - 1e-12) << name;
    }
  }
}

TEST(SampleConstrained, Errors) {
  const auto a = chain({8, 8});
  const RateGrid grid(0.1);
  EXPECT_THROW(sample_constrained(1, grid, a, 0.95, 1), ValidationError);
  EXPECT_THROW(sample_constrained(1, grid, a, 1.0, 1), ValidationError);
  EXPECT_THROW(sample_constrained(1, grid, a, -0.1, 1), ValidationError);
  EXPECT_NO_THROW(sample_constrained(1, grid, a, 0.9, 1));
}

TEST(MaterializeMasks, Examples) {
  const auto a = chain({4});
  WeightSummaries s{{{0.1, 3.0, 2.0, 0.2}}};
  EXPECT_EQ(materialize_masks({{0.5}}, a, MaskPolicy::l1, &s, 0).masks[0].retained, (std::vector<std::int64_t>{1, 2}));
  EXPECT_EQ(materialize_masks({{0.5}}, a, MaskPolicy::prefix, nullptr, 0).masks[0].retained,
            (std::vector<std::int64_t>{0, 1}));
  for (auto policy : {MaskPolicy::l1, MaskPolicy::random, MaskPolicy::prefix})
    EXPECT_EQ(materialize_masks({{0.0}}, a, policy, &s, 3).masks[0].retained, (std::vector<std::int64_t>{0, 1, 2, 3}));
  EXPECT_THROW(materialize_masks({{0.5}}, a, MaskPolicy::l1, nullptr, 0), ValidationError);
  WeightSummaries zero{{{0.0, 0.0, 0.0, 0.0}}};
  EXPECT_EQ(materialize_masks({{0.5}}, a, MaskPolicy::l1, &zero, 0).masks[0].retained,
            (std::vector<std::int64_t>{0, 1}));
  WeightSummaries tie{{{1.0, 2.0, 2.0, 2.0}}};
  EXPECT_EQ(materialize_masks({{0.5}}, a, MaskPolicy::l1, &tie, 0).masks[0].retained,
            (std::vector<std::int64_t>{1, 2}));
}

TEST(MaterializeMasks, CardinalityAndRange) {
  const auto a = load_arch("resnet18-cifar");
  const auto pool = sample_unconstrained(50, RateGrid(0.1), a, 2);
  const auto s = synthetic_weight_summaries(a, 4);
  for (auto policy : {MaskPolicy::l1, MaskPolicy::random, MaskPolicy::prefix})
    for (const auto &c : pool.configs) {
      const auto cfg = materialize_masks(c.vector, a, policy, &s, 8);
      EXPECT_NO_THROW(validate_config(cfg, a));
      for (std::size_t g = 0; g < a.num_prunable(); ++g) {
        const auto &m = cfg.masks[g].retained;
        EXPECT_EQ(static_cast<std::int64_t>(m.size()), pruned_channels(a.groups()[g].channels, c.vector.rates[g]));
        EXPECT_TRUE(std::is_sorted(m.begin(), m.end()) || policy == MaskPolicy::random);
        EXPECT_EQ(std::set<std::int64_t>(m.begin(), m.end()).size(), m.size());
        for (auto i : m) EXPECT_TRUE(i >= 0 && i < a.groups()[g].channels);
      }
    }
}

TEST(MaterializeMasks, L1MaximizesRetainedMassBruteForce) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const RateGrid grid(0.1);
  for (std::int64_t c = 1; c <= 8; ++c) {
    const auto a = chain({c});
    for (int trial = 0; trial < 10; ++trial) {
      WeightSummaries s{{std::vector<double>(static_cast<std::size_t>(c))}};
      for (auto &v : s.groups[0]) v = std::round(u(rng) * 4.0) / 4.0; // coarse values force ties
      for (double r : grid.values()) {
        const auto keep = pruned_channels(c, r);
        const auto mask = materialize_masks({{r}}, a, MaskPolicy::l1, &s, 0).masks[0].retained;
        double best = -1.0;
        for (unsigned bits = 0; bits < (1u << c); ++bits) {
          if (std::popcount(bits) != keep) continue;
          std::vector<std::int64_t> subset;
          for (std::int64_t i = 0; i < c; ++i)
            if (bits >> i & 1u) subset.push_back(i);
          best = std::max(best, l1_mass(s.groups[0], subset));
        }
        EXPECT_DOUBLE_EQ(l1_mass(s.groups[0], mask), best);
      }
    }
  }
}

TEST(MaterializeMasks, RandomIsSeededAndTiedGroupsShareOneMask) {
  const auto a = load_arch("toy4");
  const PruningVector v{{0.5, 0.5, 0.5}};
  const auto m1 = materialize_masks(v, a, MaskPolicy::random, nullptr, 21);
  const auto m2 = materialize_masks(v, a, MaskPolicy::random, nullptr, 21);
  const auto m3 = materialize_masks(v, a, MaskPolicy::random, nullptr, 22);
  EXPECT_EQ(m1.masks.size(), a.num_prunable());
  for (std::size_t g = 0; g < m1.masks.size(); ++g) EXPECT_EQ(m1.masks[g].retained, m2.masks[g].retained);
  bool differs = false;
  for (std::size_t g = 0; g < m1.masks.size(); ++g) differs |= m1.masks[g].retained != m3.masks[g].retained;
  EXPECT_TRUE(differs);
}

TEST(ValidateConfig, RejectsInconsistentMasks) {
  const auto a = chain({8, 8});
  auto cfg = materialize_masks({{0.5, 0.5}}, a, MaskPolicy::prefix, nullptr, 0);
  EXPECT_NO_THROW(validate_config(cfg, a));
  auto dup = cfg;
  dup.masks[0].retained[1] = dup.masks[0].retained[0];
  EXPECT_THROW(validate_config(dup, a), ValidationError);
  auto range = cfg;
  range.masks[1].retained.back() = 8;
  EXPECT_THROW(validate_config(range, a), ValidationError);
  auto size = cfg;
  size.masks[0].retained.push_back(7);
  EXPECT_THROW(validate_config(size, a), ValidationError);
}

TEST(EnumerateSpace, LexicographicCount) {
  std::vector<std::vector<double>> seen;
  enumerate_space(RateGrid::from_values({0.0, 0.5, 0.9}), 3,
                  [&](std::span<const double> r) { seen.emplace_back(r.begin(), r.end()); });
  ASSERT_EQ(seen.size(), 27u);
  EXPECT_EQ(seen.front(), (std::vector<double>{0.0, 0.0, 0.0}));
  EXPECT_EQ(seen[1], (std::vector<double>{0.0, 0.0, 0.5}));
  EXPECT_EQ(seen.back(), (std::vector<double>{0.9, 0.9, 0.9}));
  EXPECT_TRUE(std::is_sorted(seen.begin(), seen.end()));
}

TEST(PoolFile, RoundTrip) {
  const auto a = load_arch("toy4");
  auto pool = sample_constrained(20, RateGrid(0.1), a, 0.4, 3);
  const auto text = serialize_pool(pool);
  const auto back = parse_pool(text);
  EXPECT_EQ(serialize_pool(back), text);
  EXPECT_EQ(back.seed, 3u);
  EXPECT_EQ(*back.tau, 0.4);
  EXPECT_TRUE(back.configs[0].masks.empty());

  const auto s = synthetic_weight_summaries(a, 1);
  materialize_pool(pool, a, MaskPolicy::l1, &s);
  const auto with = serialize_pool(pool, true);
  const auto again = parse_pool(with);
  EXPECT_EQ(serialize_pool(again, true), with);
  for (std::size_t i = 0; i < pool.configs.size(); ++i) EXPECT_EQ(again.configs[i].masks[0].retained, pool.configs[i].masks[0].retained);

  EXPECT_EQ(text.find("\"id\":0,\"rates\":"), 1u);
  EXPECT_THROW(parse_pool("{\"id\": 0}\n"), ValidationError);
  EXPECT_THROW(parse_pool("garbage\n"), ValidationError);
}

TEST(FeasibleSampler, CountsMatchEnumeration) {
  const auto cases = std::vector<std::tuple<ArchGraph, RateGrid, double>>{
      {chain({64, 64}), RateGrid::from_values({0.0, 0.5, 0.9}), 0.7},
      {load_arch("toy4"), RateGrid::from_values({0.0, 0.3, 0.6, 0.9}), 0.3},
      {chain({3, 5, 7}), RateGrid(0.25), 0.4},
      {chain({16, 8, 8, 4}), RateGrid(0.1), 0.55},
  };
  for (const auto &[arch, grid, tau] : cases) {
    std::uint64_t feasible = 0;
    enumerate_space(grid, arch.num_prunable(), [&](std::span<const double> r) {
      feasible += meets_threshold(global_ratio(r, arch), tau);
    });
    const auto f = detail::FeasibleSampler::build(grid, arch, tau);
    ASSERT_TRUE(f);
    EXPECT_EQ(f->count(), static_cast<double>(feasible));
  }
  EXPECT_FALSE(detail::FeasibleSampler::build(RateGrid::from_values({0.0, 1.0 / std::sqrt(2.0)}), chain({4}), 0.1));
}

TEST(FeasibleSampler, DrawsUniformlyFromFeasibleSet) {
  const auto a = load_arch("toy4");
  const auto grid = RateGrid::from_values({0.0, 0.3, 0.6, 0.9});
  SamplerOptions exact_only;
  exact_only.rejection_budget_factor = 1; // forces the exact path for any tau > 0
  std::map<std::vector<double>, int> counts;
  const int draws = 51 * 200;
  for (int seed = 0; seed < draws; ++seed) {
    const auto p = sample_constrained(1, grid, a, 0.3, static_cast<std::uint64_t>(seed), exact_only);
    ASSERT_TRUE(meets_threshold(global_ratio(p.configs[0].vector.rates, a), 0.3));
    ++counts[p.configs[0].vector.rates];
  }
  ASSERT_EQ(counts.size(), 51u);
  double chi2 = 0;
  for (const auto &[v, c] : counts) chi2 += (c - 200.0) * (c - 200.0) / 200.0;
  EXPECT_LT(chi2, 86.66); // 50 degrees of freedom, p = 0.001
}

TEST(SampleConstrained, NarrowFeasibleRegionOnDeepArch) {
  const auto a = load_arch("resnet56-cifar");
  const auto p = sample_constrained(10'000, RateGrid(0.1), a, 0.7, 3);
  ASSERT_EQ(p.configs.size(), 10'000u);
  for (const auto &c : p.configs) EXPECT_TRUE(meets_threshold(global_ratio(c.vector.rates, a), 0.7));
  EXPECT_EQ(vectors_of(p).size(), 10'000u);
  EXPECT_EQ(serialize_pool(p), serialize_pool(sample_constrained(10'000, RateGrid(0.1), a, 0.7, 3)));
}
