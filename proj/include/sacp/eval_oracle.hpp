#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sacp/config_space.hpp"
#include "sacp/subprocess.hpp"
#include "sacp/weight_summaries.hpp"

namespace sacp {

inline constexpr const char *kOracleProtocol = "sacp-oracle/1";

struct OracleRequest {
  std::uint64_t id = 0;
  nlohmann::json arch;
  std::vector<double> rates;
  std::vector<ChannelMask> masks;
  int epochs = 0;
};

struct OracleResponse {
  enum class Status { ok, error };
  std::uint64_t id = 0;
  std::optional<double> score;
  Status status = Status::error;
  std::string message;

  bool ok() const { return status == Status::ok; }
  friend bool operator==(const OracleResponse &, const OracleResponse &) = default;
};

inline OracleResponse oracle_ok(std::uint64_t id, double score) { return {id, score, OracleResponse::Status::ok, {}}; }
inline OracleResponse oracle_error(std::uint64_t id, std::string msg) {
  return {id, std::nullopt, OracleResponse::Status::error, std::move(msg)};
}

inline std::string encode_request(const OracleRequest &r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["arch"] = r.arch;
  j["rates"] = r.rates;
  auto masks = nlohmann::ordered_json::array();
  for (const auto &m : r.masks) masks.push_back({{"layer_id", m.layer_id}, {"retained", m.retained}});
  j["masks"] = std::move(masks);
  j["budget"] = {{"epochs", r.epochs}};
  return j.dump();
}

inline OracleRequest decode_request(const std::string &line) {
  OracleRequest r;
  try {
    auto j = nlohmann::json::parse(line);
    r.id = j.at("id").get<std::uint64_t>();
    r.arch = j.at("arch");
    r.rates = j.at("rates").get<std::vector<double>>();
    for (const auto &m : j.at("masks"))
      r.masks.push_back({m.at("layer_id").get<std::string>(), m.at("retained").get<std::vector<std::int64_t>>()});
    r.epochs = j.at("budget").at("epochs").get<int>();
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(std::string("malformed oracle request: ") + e.what());
  }
  return r;
}

inline std::string encode_response(const OracleResponse &r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  if (r.score) j["score"] = *r.score;
  j["status"] = r.ok() ? "ok" : "error";
  j["message"] = r.message;
  return j.dump();
}

/// Parses one response line; nullopt for anything that is not a valid
/// response record.
inline std::optional<OracleResponse> decode_response(const std::string &line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error &) {
    return std::nullopt;
  }
  if (!j.is_object() || !j.contains("id") || !j["id"].is_number_unsigned() || !j.contains("status") ||
      !j["status"].is_string())
    return std::nullopt;
  OracleResponse r;
  r.id = j["id"].get<std::uint64_t>();
  const auto status = j["status"].get<std::string>();
  if (auto m = j.find("message"); m != j.end() && m->is_string()) r.message = m->get<std::string>();
  if (status == "ok") {
    auto s = j.find("score");
    if (s == j.end() || !s->is_number()) return std::nullopt;
    const double v = s->get<double>();
    if (!(v >= 0.0 && v <= 1.0)) return std::nullopt;
    r.score = v;
    r.status = OracleResponse::Status::ok;
  } else if (status == "error") {
    if (j.contains("score") && !j["score"].is_null()) return std::nullopt;
    r.status = OracleResponse::Status::error;
  } else {
    return std::nullopt;
  }
  return r;
}

/// Evaluates pruned configurations of one architecture. Responses come back
/// in request order.
class Oracle {
public:
  virtual ~Oracle() = default;
  virtual std::vector<OracleResponse> evaluate(const ArchGraph &arch, std::span<const PruningConfig> configs,
                                               int epochs) = 0;
  virtual std::string name() const = 0;
};

/// Mean over groups of retained L1 mass / total L1 mass. A group with zero
/// total mass contributes its retained channel fraction.
inline double proxy_score(const ArchGraph &arch, const PruningConfig &config, const WeightSummaries &summaries) {
  validate_config(config, arch);
  if (summaries.groups.size() != arch.num_prunable()) throw ValidationError("weight summaries do not cover every group");
  double acc = 0.0;
  for (std::size_t g = 0; g < arch.num_prunable(); ++g) {
    const auto &s = summaries.groups[g];
    const auto c = arch.groups()[g].channels;
    if (static_cast<std::int64_t>(s.size()) != c) throw ValidationError("weight summaries have the wrong length");
    const auto &mask = detail::mask_for_group(arch, g, config.masks);
    double total = 0.0, kept = 0.0;
    for (double v : s) total += v;
    for (auto idx : mask.retained) kept += s[static_cast<std::size_t>(idx)];
    acc += total > 0.0 ? kept / total : static_cast<double>(mask.retained.size()) / static_cast<double>(c);
  }
  return arch.num_prunable() ? acc / static_cast<double>(arch.num_prunable()) : 1.0;
}

/// In-core oracle; budget-independent.
class ProxyOracle final : public Oracle {
public:
  explicit ProxyOracle(WeightSummaries summaries) : summaries_(std::move(summaries)) {}

  std::vector<OracleResponse> evaluate(const ArchGraph &arch, std::span<const PruningConfig> configs, int) override {
    std::vector<OracleResponse> out;
    out.reserve(configs.size());
    for (const auto &cfg : configs) {
      try {
        out.push_back(oracle_ok(cfg.id, proxy_score(arch, cfg, summaries_)));
      } catch (const ValidationError &e) {
        out.push_back(oracle_error(cfg.id, e.what()));
      }
    }
    return out;
  }
  std::string name() const override { return "proxy"; }

private:
  WeightSummaries summaries_;
};

struct ExternalOracleOptions {
  std::size_t parallelism = 1;
  std::chrono::milliseconds request_timeout{600'000};
  std::chrono::milliseconds handshake_timeout{10'000};
};

namespace detail {

inline bool handshake_ok(const std::string &line) {
  try {
    auto j = nlohmann::json::parse(line);
    return j.is_object() && j.value("protocol", std::string()) == kOracleProtocol;
  } catch (const nlohmann::json::parse_error &) {
    return false;
  }
}

} // namespace detail

/// Runs `requests` through child processes speaking sacp-oracle/1, one
/// child per worker, one outstanding request per child. Each request is
/// answered exactly once; results are in request order whatever the arrival
/// order. Throws RuntimeFailure only if no child completes the handshake.
inline std::vector<OracleResponse> external_evaluate(std::span<const OracleRequest> requests, const std::string &command,
                                                     const ExternalOracleOptions &opts = {}) {
  std::vector<std::optional<OracleResponse>> results(requests.size());
  if (requests.empty()) return {};
  const auto workers = std::max<std::size_t>(1, std::min(opts.parallelism, requests.size()));
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> live{0};
  std::mutex failure_mu;
  std::string failure;

  auto worker = [&] {
    std::unique_ptr<ChildProcess> child;
    try {
      child = std::make_unique<ChildProcess>(command);
    } catch (const RuntimeFailure &e) {
      std::lock_guard lock(failure_mu);
      failure = e.what();
      return;
    }
    std::string line;
    const auto hs = child->read_line(line, opts.handshake_timeout);
    if (hs != ChildProcess::ReadStatus::line || !detail::handshake_ok(line)) {
      std::lock_guard lock(failure_mu);
      failure = hs == ChildProcess::ReadStatus::timeout ? "oracle handshake timed out"
                : hs == ChildProcess::ReadStatus::closed ? "oracle exited before the handshake"
                                                         : "bad oracle handshake: " + line;
      return;
    }
    ++live;
    bool alive = true;
    while (alive) {
      const auto i = next++;
      if (i >= requests.size()) break;
      const auto &req = requests[i];
      if (!child->write_line(encode_request(req))) {
        results[i] = oracle_error(req.id, "oracle process stopped reading requests");
        break;
      }
      const auto deadline = std::chrono::steady_clock::now() + opts.request_timeout;
      while (!results[i]) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        const auto st = child->read_line(line, std::max(left, std::chrono::milliseconds(0)));
        if (st == ChildProcess::ReadStatus::timeout) {
          results[i] = oracle_error(req.id, "oracle timed out");
        } else if (st == ChildProcess::ReadStatus::closed) {
          results[i] = oracle_error(req.id, "oracle process exited");
          alive = false;
        } else if (auto resp = decode_response(line)) {
          if (resp->id == req.id) results[i] = *resp;
          // other ids are late answers to requests that already timed out
        } else {
          results[i] = oracle_error(req.id, "protocol error: " + line.substr(0, 200));
        }
      }
    }
    child->write_line(R"({"cmd":"shutdown"})");
    child->terminate(std::chrono::milliseconds(2000));
  };

  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(worker);
  for (auto &t : threads) t.join();
  if (live == 0) throw RuntimeFailure("no oracle worker started: " + failure);

  std::vector<OracleResponse> out;
  out.reserve(results.size());
  for (std::size_t i = 0; i < results.size(); ++i)
    out.push_back(results[i] ? *results[i] : oracle_error(requests[i].id, "no live oracle worker left"));
  return out;
}

/// Oracle backed by an external command.
class ExternalOracle final : public Oracle {
public:
  ExternalOracle(std::string command, ExternalOracleOptions opts) : command_(std::move(command)), opts_(opts) {}

  std::vector<OracleResponse> evaluate(const ArchGraph &arch, std::span<const PruningConfig> configs,
                                       int epochs) override {
    const auto doc = to_json(arch);
    std::vector<OracleRequest> reqs;
    reqs.reserve(configs.size());
    for (const auto &cfg : configs) reqs.push_back({cfg.id, doc, cfg.vector.rates, cfg.masks, epochs});
    return external_evaluate(reqs, command_, opts_);
  }
  std::string name() const override { return "cmd:" + command_; }

private:
  std::string command_;
  ExternalOracleOptions opts_;
};

struct ScoredConfig {
  PruningConfig config;
  double score = 0.0;
};

struct BruteForceResult {
  ScoredConfig best;
  std::vector<ScoredConfig> table;
};

/// Scores every grid vector with R(r) >= tau. Ids are enumeration indices
/// over the whole space. Throws if |grid|^L exceeds `cap` or nothing is
/// feasible.
inline BruteForceResult brute_force_search(const ArchGraph &arch, const RateGrid &grid, double tau, Oracle &oracle,
                                           MaskPolicy policy, const WeightSummaries *summaries, int epochs = 0,
                                           std::uint64_t cap = 100'000) {
  const auto space = detail::space_size(grid.size(), arch.num_prunable());
  if (space > cap)
    throw ValidationError("search space of " + std::to_string(space) + " configs exceeds the cap of " +
                          std::to_string(cap));
  std::vector<PruningConfig> feasible;
  std::uint64_t index = 0;
  enumerate_space(grid, arch.num_prunable(), [&](std::span<const double> rates) {
    const auto id = index++;
    if (!meets_threshold(global_ratio(rates, arch), tau)) return;
    auto cfg = materialize_masks(PruningVector{{rates.begin(), rates.end()}}, arch, policy, summaries, id);
    cfg.id = id;
    feasible.push_back(std::move(cfg));
  });
  if (feasible.empty()) throw ValidationError("no configuration reaches tau " + std::to_string(tau));
  const auto responses = oracle.evaluate(arch, feasible, epochs);
  BruteForceResult out;
  for (std::size_t i = 0; i < feasible.size(); ++i)
    if (responses[i].ok()) out.table.push_back({feasible[i], *responses[i].score});
  if (out.table.empty()) throw RuntimeFailure("oracle failed on every configuration");
  out.best = *std::max_element(out.table.begin(), out.table.end(), [](const auto &a, const auto &b) {
    return a.score < b.score || (a.score == b.score && a.config.id > b.config.id);
  });
  return out;
}

} // namespace sacp
