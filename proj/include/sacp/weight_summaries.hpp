#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sacp/config_space.hpp"

namespace sacp {

/// L1 magnitude of each output channel of a conv weight tensor laid out as
/// [out][in][kh][kw].
inline std::vector<double> channel_l1(std::span<const double> weights, std::int64_t out_channels) {
  if (out_channels < 1 || weights.size() % static_cast<std::size_t>(out_channels) != 0)
    throw ValidationError("weight tensor size is not a multiple of the output channel count");
  const auto per = weights.size() / static_cast<std::size_t>(out_channels);
  std::vector<double> l1(static_cast<std::size_t>(out_channels), 0.0);
  for (std::size_t c = 0; c < l1.size(); ++c)
    for (std::size_t k = 0; k < per; ++k) l1[c] += std::abs(weights[c * per + k]);
  return l1;
}

/// Reduces per-conv weight tensors to group summaries. Tied convs add their
/// per-channel magnitudes.
inline WeightSummaries summarize_conv_weights(const ArchGraph &arch,
                                              const std::map<std::string, std::vector<double>> &conv_weights) {
  WeightSummaries out;
  for (const auto &g : arch.groups()) {
    std::vector<double> acc(static_cast<std::size_t>(g.channels), 0.0);
    for (auto m : g.members) {
      const auto &n = arch.node(m);
      auto it = conv_weights.find(n.id);
      if (it == conv_weights.end()) throw ValidationError("no weights for conv '" + n.id + "'");
      const auto expected = n.kernel.h * n.kernel.w * n.in_channels * n.out_channels;
      if (static_cast<std::int64_t>(it->second.size()) != expected)
        throw ValidationError("weights for '" + n.id + "' have " + std::to_string(it->second.size()) +
                              " values, expected " + std::to_string(expected));
      auto l1 = channel_l1(it->second, n.out_channels);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += l1[c];
    }
    out.groups.push_back(std::move(acc));
  }
  return out;
}

/// Synthetic summaries: filter weights drawn from a seeded standard normal.
inline WeightSummaries synthetic_weight_summaries(const ArchGraph &arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::map<std::string, std::vector<double>> weights;
  for (const auto &g : arch.groups())
    for (auto m : g.members) {
      const auto &n = arch.node(m);
      std::vector<double> w(static_cast<std::size_t>(n.kernel.h * n.kernel.w * n.in_channels * n.out_channels));
      for (auto &x : w) x = normal(rng);
      weights.emplace(n.id, std::move(w));
    }
  return summarize_conv_weights(arch, weights);
}

// Summaries file: {"arch": name, "summaries": [[per-channel L1] per group]}.

inline WeightSummaries parse_weight_summaries(const std::string &text, const ArchGraph &arch) {
  WeightSummaries s;
  try {
    auto doc = nlohmann::json::parse(text);
    s.groups = doc.at("summaries").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(std::string("malformed weight summaries: ") + e.what());
  }
  if (s.groups.size() != arch.num_prunable())
    throw ValidationError("weight summaries cover " + std::to_string(s.groups.size()) + " groups, arch has " +
                          std::to_string(arch.num_prunable()));
  for (std::size_t g = 0; g < s.groups.size(); ++g) {
    if (static_cast<std::int64_t>(s.groups[g].size()) != arch.groups()[g].channels)
      throw ValidationError("weight summaries for group '" + arch.group_id(g) + "' have the wrong length");
    for (double v : s.groups[g])
      if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("weight summaries must be finite and nonnegative");
  }
  return s;
}

inline std::string serialize_weight_summaries(const WeightSummaries &s, const ArchGraph &arch) {
  nlohmann::ordered_json doc;
  doc["arch"] = arch.name();
  doc["summaries"] = s.groups;
  return doc.dump() + "\n";
}

/// "synthetic:<seed>" or a path to a summaries file.
inline WeightSummaries gen_weight_summaries(const ArchGraph &arch, const std::string &source) {
  const std::string prefix = "synthetic:";
  if (source.rfind(prefix, 0) == 0) {
    std::uint64_t seed = 0;
    try {
      seed = std::stoull(source.substr(prefix.size()));
    } catch (const std::logic_error &) {
      throw ValidationError("bad synthetic seed in '" + source + "'");
    }
    return synthetic_weight_summaries(arch, seed);
  }
  return parse_weight_summaries(read_text_file(source), arch);
}

} // namespace sacp
