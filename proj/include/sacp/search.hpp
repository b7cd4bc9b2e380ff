#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sacp/config_space.hpp"
#include "sacp/eval_oracle.hpp"
#include "sacp/gcn_encoder.hpp"

namespace sacp {

enum class Stage { ranked, top_m, top_k, final };

inline std::string to_string(Stage s) {
  switch (s) {
  case Stage::ranked: return "ranked";
  case Stage::top_m: return "top_m";
  case Stage::top_k: return "top_k";
  case Stage::final: return "final";
  }
  return "?";
}

struct RankingEntry {
  std::uint64_t config_id = 0;
  double similarity = 0.0;
  std::optional<double> light_score;
  std::optional<double> full_score;
  Stage stage = Stage::ranked;
  /// Oracle failure message; a failed entry is disqualified.
  std::string error;

  friend bool operator==(const RankingEntry &, const RankingEntry &) = default;
};

/// Cosine of the angle between two nonzero vectors.
inline double cosine(const Embedding &a, const Embedding &b) {
  if (a.size() != b.size()) throw ValidationError("cosine of vectors with different widths");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw ValidationError("cosine similarity of a zero-norm embedding");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

/// All channels retained: the unpruned network.
inline PruningConfig unpruned_config(const ArchGraph &arch) {
  return materialize_masks(PruningVector{std::vector<double>(arch.num_prunable(), 0.0)}, arch, MaskPolicy::prefix,
                           nullptr, 0);
}

inline Embedding embed_original(const EncoderParams &params, const ArchGraph &arch) {
  return encode(params, normalize_adjacency(arch), config_features(arch, unpruned_config(arch).masks));
}

namespace detail {

// Runs body(i) for i in [0, n) on up to `workers` threads; each index is
// handled exactly once, so results written per index are deterministic.
template <typename Body> void parallel_for(std::size_t n, std::size_t workers, Body &&body) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto &t : threads) t.join();
  for (auto &e : errors)
    if (e) std::rethrow_exception(e);
}

} // namespace detail

/// Scores every pool member by cosine similarity to the unpruned embedding
/// and sorts by (similarity desc, id asc). Pool members must carry masks.
inline std::vector<RankingEntry> rank_candidates(const EncoderParams &params, const ArchGraph &arch,
                                                 const CandidatePool &pool, std::size_t workers = 1) {
  if (pool.configs.empty()) throw ValidationError("cannot rank an empty pool");
  const auto adj = normalize_adjacency(arch);
  const auto z_orig = encode(params, adj, config_features(arch, unpruned_config(arch).masks));
  std::vector<RankingEntry> entries(pool.configs.size());
  detail::parallel_for(pool.configs.size(), workers, [&](std::size_t i) {
    const auto &cfg = pool.configs[i];
    if (cfg.masks.empty()) throw ValidationError("pool member " + std::to_string(cfg.id) + " has no masks");
    entries[i].config_id = cfg.id;
    entries[i].similarity = cosine(encode(params, adj, config_features(arch, cfg.masks)), z_orig);
  });
  std::sort(entries.begin(), entries.end(), [](const RankingEntry &a, const RankingEntry &b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.config_id < b.config_id);
  });
  return entries;
}

struct RefineOptions {
  std::size_t top_m = 150;
  std::size_t top_k = 10;
  int light_epochs = 1;
  int full_epochs = 10;
};

struct SearchReport {
  double tau = 0.0;
  std::size_t top_m = 0;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;
  int light_epochs = 0;
  int full_epochs = 0;
  std::string oracle;
  std::vector<RankingEntry> entries;
  std::uint64_t winner = 0;
  std::vector<double> winner_rates;
  ModelStats base;
  ModelStats pruned;

  double flops_reduction() const { return 1.0 - static_cast<double>(pruned.flops) / static_cast<double>(base.flops); }
  double params_reduction() const {
    return 1.0 - static_cast<double>(pruned.params) / static_cast<double>(base.params);
  }
  const RankingEntry &winner_entry() const {
    for (const auto &e : entries)
      if (e.stage == Stage::final) return e;
    throw ValidationError("report has no winner");
  }
};

namespace detail {

inline const PruningConfig &config_by_id(const CandidatePool &pool, std::uint64_t id) {
  if (id < pool.configs.size() && pool.configs[id].id == id) return pool.configs[id];
  for (const auto &c : pool.configs)
    if (c.id == id) return c;
  throw ValidationError("ranking refers to unknown config " + std::to_string(id));
}

// Scores the entries at `positions`; failures are recorded and disqualified.
inline void score_stage(std::vector<RankingEntry> &entries, std::span<const std::size_t> positions,
                        const CandidatePool &pool, const ArchGraph &arch, Oracle &oracle, int epochs, bool full) {
  std::vector<PruningConfig> batch;
  for (auto p : positions) batch.push_back(config_by_id(pool, entries[p].config_id));
  const auto responses = oracle.evaluate(arch, batch, epochs);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    auto &e = entries[positions[i]];
    if (responses[i].ok())
      (full ? e.full_score : e.light_score) = *responses[i].score;
    else
      e.error = responses[i].message.empty() ? "oracle error" : responses[i].message;
  }
}

} // namespace detail

/// Top-m by similarity get a light evaluation; the top-k of those by light
/// score get a full evaluation; the winner maximizes full score (ties:
/// higher similarity, then lower id). `entries` must be sorted as
/// rank_candidates returns them.
inline SearchReport refine(std::vector<RankingEntry> entries, const CandidatePool &pool, const ArchGraph &arch,
                           Oracle &oracle, const RefineOptions &opts) {
  if (opts.top_k < 1 || opts.top_m < opts.top_k) throw ValidationError("need m >= k >= 1");
  if (opts.top_m > entries.size())
    throw ValidationError("m = " + std::to_string(opts.top_m) + " exceeds the pool size " +
                          std::to_string(entries.size()));
  auto better = [&](std::size_t a, std::size_t b, auto score) {
    const auto &x = entries[a], &y = entries[b];
    if (score(x) != score(y)) return score(x) > score(y);
    if (x.similarity != y.similarity) return x.similarity > y.similarity;
    return x.config_id < y.config_id;
  };

  std::vector<std::size_t> shortlist(opts.top_m);
  std::iota(shortlist.begin(), shortlist.end(), 0);
  for (auto p : shortlist) entries[p].stage = Stage::top_m;
  detail::score_stage(entries, shortlist, pool, arch, oracle, opts.light_epochs, false);

  std::vector<std::size_t> survivors;
  for (auto p : shortlist)
    if (entries[p].light_score) survivors.push_back(p);
  if (survivors.size() < opts.top_k)
    throw RuntimeFailure("only " + std::to_string(survivors.size()) + " candidates survived light evaluation, need " +
                         std::to_string(opts.top_k));
  auto light = [](const RankingEntry &e) { return *e.light_score; };
  std::sort(survivors.begin(), survivors.end(), [&](auto a, auto b) { return better(a, b, light); });
  survivors.resize(opts.top_k);
  for (auto p : survivors) entries[p].stage = Stage::top_k;
  detail::score_stage(entries, survivors, pool, arch, oracle, opts.full_epochs, true);

  std::vector<std::size_t> finalists;
  for (auto p : survivors)
    if (entries[p].full_score) finalists.push_back(p);
  if (finalists.size() < opts.top_k)
    throw RuntimeFailure("only " + std::to_string(finalists.size()) + " candidates survived full evaluation, need " +
                         std::to_string(opts.top_k));
  auto full = [](const RankingEntry &e) { return *e.full_score; };
  const auto win = *std::min_element(finalists.begin(), finalists.end(), [&](auto a, auto b) { return better(a, b, full); });
  entries[win].stage = Stage::final;

  SearchReport report;
  report.tau = pool.tau.value_or(0.0);
  report.top_m = opts.top_m;
  report.top_k = opts.top_k;
  report.seed = pool.seed;
  report.light_epochs = opts.light_epochs;
  report.full_epochs = opts.full_epochs;
  report.oracle = oracle.name();
  report.winner = entries[win].config_id;
  report.winner_rates = detail::config_by_id(pool, report.winner).vector.rates;
  report.base = model_stats(arch);
  report.pruned = model_stats(apply_pruning(arch, std::span<const double>(report.winner_rates)));
  report.entries = std::move(entries);
  return report;
}

struct SearchOptions {
  double tau = 0.6;
  std::uint64_t num_candidates = 1'000'000;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  RefineOptions refine;
  SamplerOptions sampler;
};

/// sample_constrained -> masks (l1 with summaries, else prefix) ->
/// rank_candidates -> refine.
inline SearchReport run_search(const EncoderParams &params, const ArchGraph &arch, const RateGrid &grid,
                               const WeightSummaries *summaries, Oracle &oracle, const SearchOptions &opts) {
  auto pool = sample_constrained(opts.num_candidates, grid, arch, opts.tau, opts.seed, opts.sampler);
  materialize_pool(pool, arch, summaries ? MaskPolicy::l1 : MaskPolicy::prefix, summaries);
  auto entries = rank_candidates(params, arch, pool, opts.workers);
  auto report = refine(std::move(entries), pool, arch, oracle, opts.refine);
  report.seed = opts.seed;
  return report;
}

inline nlohmann::ordered_json report_to_json(const SearchReport &r) {
  nlohmann::ordered_json j;
  j["tau"] = r.tau;
  j["top_m"] = r.top_m;
  j["top_k"] = r.top_k;
  j["seed"] = r.seed;
  j["light_epochs"] = r.light_epochs;
  j["full_epochs"] = r.full_epochs;
  j["oracle"] = r.oracle;
  const auto &w = r.winner_entry();
  nlohmann::ordered_json win;
  win["config_id"] = r.winner;
  win["rates"] = r.winner_rates;
  win["similarity"] = w.similarity;
  win["light_score"] = *w.light_score;
  win["full_score"] = *w.full_score;
  j["winner"] = std::move(win);
  j["base"] = {{"flops", r.base.flops}, {"params", r.base.params}};
  j["pruned"] = {{"flops", r.pruned.flops}, {"params", r.pruned.params}};
  j["flops_reduction"] = r.flops_reduction();
  j["params_reduction"] = r.params_reduction();
  auto entries = nlohmann::ordered_json::array();
  for (const auto &e : r.entries) {
    nlohmann::ordered_json ej;
    ej["config_id"] = e.config_id;
    ej["similarity"] = e.similarity;
    ej["light_score"] = e.light_score ? nlohmann::ordered_json(*e.light_score) : nlohmann::ordered_json(nullptr);
    ej["full_score"] = e.full_score ? nlohmann::ordered_json(*e.full_score) : nlohmann::ordered_json(nullptr);
    ej["stage"] = to_string(e.stage);
    if (!e.error.empty()) ej["error"] = e.error;
    entries.push_back(std::move(ej));
  }
  j["entries"] = std::move(entries);
  return j;
}

} // namespace sacp
