#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "sacp/arch_ir.hpp"
#include "sacp/rng.hpp"

namespace sacp {

/// Discrete set of admissible per-group pruning rates, strictly increasing
/// and below 1.
class RateGrid {
public:
  /// {0, delta, 2*delta, ...} capped below 1. Values are rounded to 1e-9 so
  /// that 3 * 0.1 is stored (and printed) as 0.3.
  explicit RateGrid(double granularity) : granularity_(granularity) {
    if (!(granularity > 0.0 && granularity < 1.0)) throw ValidationError("grid granularity must lie in (0, 1)");
    for (int k = 0;; ++k) {
      const double v = std::round(k * granularity * 1e9) / 1e9;
      if (v >= 1.0 - 1e-12) break;
      values_.push_back(v);
    }
  }

  static RateGrid from_values(std::vector<double> values) {
    if (values.empty()) throw ValidationError("rate grid needs at least one value");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!(values[i] >= 0.0 && values[i] < 1.0)) throw ValidationError("grid values must lie in [0, 1)");
      if (i > 0 && !(values[i] > values[i - 1])) throw ValidationError("grid values must be strictly increasing");
    }
    RateGrid g;
    g.values_ = std::move(values);
    return g;
  }

  const std::vector<double> &values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_.at(i); }
  std::optional<double> granularity() const { return granularity_; }

  std::optional<std::size_t> index_of(double rate) const {
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (std::abs(values_[i] - rate) < 1e-9) return i;
    return std::nullopt;
  }

private:
  RateGrid() = default;
  std::vector<double> values_;
  std::optional<double> granularity_;
};

struct PruningVector {
  std::vector<double> rates;
  friend bool operator==(const PruningVector &, const PruningVector &) = default;
};

enum class MaskPolicy { l1, random, prefix };

inline std::string to_string(MaskPolicy p) {
  switch (p) {
  case MaskPolicy::l1: return "l1";
  case MaskPolicy::random: return "random";
  case MaskPolicy::prefix: return "prefix";
  }
  return "?";
}

inline MaskPolicy parse_mask_policy(const std::string &s) {
  if (s == "l1") return MaskPolicy::l1;
  if (s == "random") return MaskPolicy::random;
  if (s == "prefix") return MaskPolicy::prefix;
  throw ValidationError("unknown mask policy '" + s + "'");
}

/// Per prunable group, per output channel: sum of absolute filter weights.
struct WeightSummaries {
  std::vector<std::vector<double>> groups;
};

struct PruningConfig {
  std::uint64_t id = 0;
  PruningVector vector;
  std::vector<ChannelMask> masks;
  MaskPolicy policy = MaskPolicy::prefix;
};

struct CandidatePool {
  std::vector<PruningConfig> configs;
  std::optional<double> tau;
  std::uint64_t seed = 0;
};

/// R(r) = sum r_g C_g / sum C_g over prunable groups.
inline double global_ratio(std::span<const double> rates, const ArchGraph &arch) {
  if (rates.size() != arch.num_prunable())
    throw ValidationError("pruning vector has " + std::to_string(rates.size()) + " entries, arch has " +
                          std::to_string(arch.num_prunable()) + " prunable groups");
  double num = 0.0, den = 0.0;
  for (std::size_t g = 0; g < rates.size(); ++g) {
    const auto c = static_cast<double>(arch.groups()[g].channels);
    num += rates[g] * c;
    den += c;
  }
  return den > 0.0 ? num / den : 0.0;
}

inline double global_ratio(const PruningVector &v, const ArchGraph &arch) { return global_ratio(v.rates, arch); }

/// R(r) >= tau, with slack for decimal rates that land exactly on tau.
inline bool meets_threshold(double ratio, double tau) { return ratio >= tau - 1e-12; }

/// Checks mask cardinalities and index ranges against the rates.
inline void validate_config(const PruningConfig &cfg, const ArchGraph &arch) {
  const auto &rates = cfg.vector.rates;
  if (rates.size() != arch.num_prunable()) throw ValidationError("rate vector length does not match the arch");
  if (cfg.masks.size() != arch.num_prunable()) throw ValidationError("need one mask per prunable group");
  for (std::size_t g = 0; g < rates.size(); ++g) {
    const auto &m = detail::mask_for_group(arch, g, cfg.masks);
    const auto c = arch.groups()[g].channels;
    const auto keep = pruned_channels(c, rates[g]);
    if (static_cast<std::int64_t>(m.retained.size()) != keep)
      throw ValidationError("mask for '" + m.layer_id + "' keeps " + std::to_string(m.retained.size()) +
                            " channels, rate implies " + std::to_string(keep));
    std::vector<std::int64_t> sorted = m.retained;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ValidationError("mask for '" + m.layer_id + "' repeats a channel");
    if (!sorted.empty() && (sorted.front() < 0 || sorted.back() >= c))
      throw ValidationError("mask for '" + m.layer_id + "' indexes outside [0, C)");
  }
}

inline ArchGraph apply_pruning(const ArchGraph &arch, const PruningConfig &cfg) {
  if (!cfg.masks.empty()) validate_config(cfg, arch);
  return apply_pruning(arch, std::span<const double>(cfg.vector.rates));
}

/// Channel selection for one configuration.
///  - l1: top channels by summary, ascending index on ties
///  - random: uniform subset without replacement, seeded
///  - prefix: channels 0 .. keep-1
inline PruningConfig materialize_masks(const PruningVector &vector, const ArchGraph &arch, MaskPolicy policy,
                                       const WeightSummaries *summaries, std::uint64_t seed) {
  if (vector.rates.size() != arch.num_prunable()) throw ValidationError("rate vector length does not match the arch");
  if (policy == MaskPolicy::l1) {
    if (!summaries) throw ValidationError("l1 mask policy needs weight summaries");
    if (summaries->groups.size() != arch.num_prunable()) throw ValidationError("weight summaries do not cover every group");
  }
  PruningConfig cfg;
  cfg.vector = vector;
  cfg.policy = policy;
  std::mt19937_64 rng(seed);
  for (std::size_t g = 0; g < arch.num_prunable(); ++g) {
    const auto c = arch.groups()[g].channels;
    const auto keep = pruned_channels(c, vector.rates[g]);
    std::vector<std::int64_t> all(static_cast<std::size_t>(c));
    std::iota(all.begin(), all.end(), 0);
    ChannelMask mask{arch.group_id(g), {}};
    switch (policy) {
    case MaskPolicy::prefix:
      mask.retained.assign(all.begin(), all.begin() + keep);
      break;
    case MaskPolicy::random:
      std::sample(all.begin(), all.end(), std::back_inserter(mask.retained), keep, rng);
      break;
    case MaskPolicy::l1: {
      const auto &s = summaries->groups[g];
      if (static_cast<std::int64_t>(s.size()) != c)
        throw ValidationError("weight summaries for '" + arch.group_id(g) + "' have the wrong length");
      std::stable_sort(all.begin(), all.end(), [&](auto a, auto b) { return s[a] > s[b]; });
      mask.retained.assign(all.begin(), all.begin() + keep);
      std::sort(mask.retained.begin(), mask.retained.end());
      break;
    }
    }
    cfg.masks.push_back(std::move(mask));
  }
  return cfg;
}

/// Seed used for the random-policy masks of pool member `id`.
inline std::uint64_t mask_seed(std::uint64_t pool_seed, std::uint64_t id) {
  return derive_seed(pool_seed, "masks", id);
}

/// Fills in masks for every pool member with `policy`.
inline void materialize_pool(CandidatePool &pool, const ArchGraph &arch, MaskPolicy policy,
                             const WeightSummaries *summaries) {
  for (auto &cfg : pool.configs) {
    auto id = cfg.id;
    cfg = materialize_masks(cfg.vector, arch, policy, summaries, mask_seed(pool.seed, id));
    cfg.id = id;
  }
}

struct SamplerOptions {
  /// Give up after this many draws per requested vector.
  std::uint64_t rejection_budget_factor = 1000;
};

namespace detail {

// |grid|^L, saturating at uint64 max.
inline std::uint64_t space_size(std::size_t grid, std::size_t groups) {
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < groups; ++i) {
    if (total > std::numeric_limits<std::uint64_t>::max() / grid) return std::numeric_limits<std::uint64_t>::max();
    total *= grid;
  }
  return total;
}

// Counts grid vectors with R(r) >= tau by dynamic programming over integer
// channel-weighted sums, and draws uniformly among them. Available when every
// grid value is a multiple of 1/q for some q <= 1000.
class FeasibleSampler {
public:
  static std::optional<FeasibleSampler> build(const RateGrid &grid, const ArchGraph &arch, double tau) {
    std::int64_t q = 0;
    for (std::int64_t cand = 1; cand <= 1000 && q == 0; ++cand) {
      bool ok = true;
      for (double v : grid.values()) ok = ok && std::abs(v * static_cast<double>(cand) - std::round(v * static_cast<double>(cand))) < 1e-7;
      if (ok) q = cand;
    }
    if (q == 0) return std::nullopt;
    FeasibleSampler f;
    for (double v : grid.values()) f.units_.push_back(std::llround(v * static_cast<double>(q)));
    std::int64_t total = 0;
    for (const auto &g : arch.groups()) {
      f.weights_.push_back(g.channels);
      total += g.channels;
    }
    const double need = (tau - 1e-12) * static_cast<double>(q) * static_cast<double>(total);
    f.target_ = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(need - 1e-9)));
    const auto width = static_cast<std::size_t>(f.target_) + 1;
    const auto groups = f.weights_.size();
    f.ways_.assign((groups + 1) * width, 0.0);
    f.width_ = width;
    f.ways_[groups * width + width - 1] = 1.0;
    for (std::size_t g = groups; g-- > 0;)
      for (std::size_t s = 0; s < width; ++s) {
        double w = 0.0;
        for (auto u : f.units_) w += f.at(g + 1, f.step(s, g, u));
        f.ways_[g * width + s] = w;
      }
    return f;
  }

  /// Number of feasible vectors (as a double; exact below 2^53).
  double count() const { return at(0, 0); }

  std::vector<std::size_t> draw(std::mt19937_64 &rng) const {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<std::size_t> idx(weights_.size());
    std::size_t s = 0;
    for (std::size_t g = 0; g < weights_.size(); ++g) {
      double x = unit(rng) * at(g, s);
      std::size_t pick = units_.size() - 1;
      for (std::size_t j = 0; j < units_.size(); ++j) {
        const double w = at(g + 1, step(s, g, units_[j]));
        if (w > 0.0 && x < w) {
          pick = j;
          break;
        }
        x -= w;
      }
      while (at(g + 1, step(s, g, units_[pick])) == 0.0) --pick;
      idx[g] = pick;
      s = step(s, g, units_[pick]);
    }
    return idx;
  }

private:
  double at(std::size_t g, std::size_t s) const { return ways_[g * width_ + s]; }
  std::size_t step(std::size_t s, std::size_t g, std::int64_t u) const {
    return static_cast<std::size_t>(std::min<std::int64_t>(target_, static_cast<std::int64_t>(s) + weights_[g] * u));
  }

  std::vector<std::int64_t> units_, weights_;
  std::int64_t target_ = 0;
  std::size_t width_ = 0;
  std::vector<double> ways_;
};

inline CandidatePool sample_pool(std::uint64_t count, const RateGrid &grid, const ArchGraph &arch,
                                 std::optional<double> tau, std::uint64_t seed, const SamplerOptions &opts) {
  if (count < 1) throw ValidationError("sample count must be >= 1");
  const auto groups = arch.num_prunable();
  if (groups == 0) throw ValidationError("arch has no prunable groups");
  const auto space = space_size(grid.size(), groups);
  if (count > space)
    throw RuntimeFailure("requested " + std::to_string(count) + " distinct vectors but the grid only has " +
                         std::to_string(space));

  CandidatePool pool;
  pool.tau = tau;
  pool.seed = seed;
  pool.configs.reserve(static_cast<std::size_t>(count));
  std::mt19937_64 rng(derive_seed(seed, "pool"));
  std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
  std::unordered_set<std::string> seen;
  std::string key(groups, '\0');
  std::vector<double> rates(groups);
  auto accept = [&] {
    if (tau && !meets_threshold(global_ratio(rates, arch), *tau)) return;
    if (!seen.insert(key).second) return;
    PruningConfig cfg;
    cfg.id = pool.configs.size();
    cfg.vector.rates = rates;
    pool.configs.push_back(std::move(cfg));
  };

  // Rejection is used unless its expected cost exceeds the budget; then the
  // exact sampler draws from the same (uniform over feasible) distribution.
  std::optional<FeasibleSampler> exact;
  const auto budget = count * opts.rejection_budget_factor;
  if (tau && *tau > 0.0) {
    exact = FeasibleSampler::build(grid, arch, *tau);
    if (exact) {
      const double feasible = exact->count();
      if (feasible < static_cast<double>(count))
        throw RuntimeFailure("requested " + std::to_string(count) + " distinct vectors but only " +
                             std::to_string(static_cast<std::uint64_t>(feasible)) + " satisfy tau");
      const double fraction = feasible / std::pow(static_cast<double>(grid.size()), static_cast<double>(groups));
      if (static_cast<double>(count) / fraction <= static_cast<double>(budget)) exact.reset();
    }
  }

  std::uint64_t attempts = 0;
  while (pool.configs.size() < count) {
    if (attempts++ >= budget)
      throw RuntimeFailure("sampler exhausted its budget of " + std::to_string(budget) + " draws after finding " +
                           std::to_string(pool.configs.size()) + " of " + std::to_string(count) +
                           " distinct vectors" + (tau ? " satisfying tau" : ""));
    if (exact) {
      const auto idx = exact->draw(rng);
      for (std::size_t g = 0; g < groups; ++g) {
        key[g] = static_cast<char>(idx[g]);
        rates[g] = grid[idx[g]];
      }
    } else {
      for (std::size_t g = 0; g < groups; ++g) {
        const auto idx = pick(rng);
        key[g] = static_cast<char>(idx);
        rates[g] = grid[idx];
      }
    }
    accept();
  }
  return pool;
}

} // namespace detail

/// N distinct vectors drawn uniformly per group, in sampling order.
inline CandidatePool sample_unconstrained(std::uint64_t count, const RateGrid &grid, const ArchGraph &arch,
                                          std::uint64_t seed, const SamplerOptions &opts = {}) {
  if (grid.size() > 256) throw ValidationError("grids above 256 values are not supported");
  return detail::sample_pool(count, grid, arch, std::nullopt, seed, opts);
}

/// N distinct vectors with R(r) >= tau, by rejection against the
/// unconstrained stream (same seed, same draws). When the feasible fraction
/// is too small for the rejection budget, draws come from an exact sampler
/// over the feasible set instead.
inline CandidatePool sample_constrained(std::uint64_t count, const RateGrid &grid, const ArchGraph &arch, double tau,
                                        std::uint64_t seed, const SamplerOptions &opts = {}) {
  if (!(tau >= 0.0 && tau < 1.0)) throw ValidationError("tau must lie in [0, 1)");
  if (grid.size() > 256) throw ValidationError("grids above 256 values are not supported");
  std::vector<double> all_max(arch.num_prunable(), grid.values().back());
  if (!meets_threshold(global_ratio(all_max, arch), tau))
    throw ValidationError("tau " + std::to_string(tau) + " is infeasible: the all-max vector only reaches " +
                          std::to_string(global_ratio(all_max, arch)));
  return detail::sample_pool(count, grid, arch, tau, seed, opts);
}

/// Visits every vector of the grid space in lexicographic index order.
template <typename Visit>
void enumerate_space(const RateGrid &grid, std::size_t groups, Visit &&visit) {
  std::vector<std::size_t> idx(groups, 0);
  std::vector<double> rates(groups, grid[0]);
  while (true) {
    visit(std::span<const double>(rates));
    std::size_t g = groups;
    for (;;) {
      if (g == 0) return;
      --g;
      if (++idx[g] < grid.size()) {
        rates[g] = grid[idx[g]];
        break;
      }
      idx[g] = 0;
      rates[g] = grid[0];
    }
  }
}

// Pool file: one JSON record per line, {id, rates, tau, seed, policy[, masks]}.

inline nlohmann::ordered_json pool_record(const PruningConfig &cfg, const CandidatePool &pool, bool with_masks) {
  nlohmann::ordered_json rec;
  rec["id"] = cfg.id;
  rec["rates"] = cfg.vector.rates;
  rec["tau"] = pool.tau ? nlohmann::ordered_json(*pool.tau) : nlohmann::ordered_json(nullptr);
  rec["seed"] = pool.seed;
  rec["policy"] = to_string(cfg.policy);
  if (with_masks) {
    auto masks = nlohmann::ordered_json::array();
    for (const auto &m : cfg.masks) masks.push_back({{"layer_id", m.layer_id}, {"retained", m.retained}});
    rec["masks"] = std::move(masks);
  }
  return rec;
}

inline std::string serialize_pool(const CandidatePool &pool, bool with_masks = false) {
  std::string out;
  for (const auto &cfg : pool.configs) {
    out += pool_record(cfg, pool, with_masks).dump();
    out += '\n';
  }
  return out;
}

/// Reads a pool file. Masks are re-derived by the caller unless present.
inline CandidatePool parse_pool(const std::string &text) {
  CandidatePool pool;
  std::size_t line_no = 0, start = 0;
  bool first = true;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      PruningConfig cfg;
      cfg.id = rec.at("id").get<std::uint64_t>();
      cfg.vector.rates = rec.at("rates").get<std::vector<double>>();
      cfg.policy = parse_mask_policy(rec.value("policy", std::string("prefix")));
      if (auto m = rec.find("masks"); m != rec.end())
        for (const auto &mj : *m)
          cfg.masks.push_back({mj.at("layer_id").get<std::string>(), mj.at("retained").get<std::vector<std::int64_t>>()});
      if (first) {
        pool.seed = rec.value("seed", std::uint64_t{0});
        if (rec.contains("tau") && !rec["tau"].is_null()) pool.tau = rec["tau"].get<double>();
        first = false;
      }
      pool.configs.push_back(std::move(cfg));
    } catch (const nlohmann::json::exception &e) {
      throw ValidationError("pool line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pool;
}

} // namespace sacp
