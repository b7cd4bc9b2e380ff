#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sacp/arch_graph.hpp"
#include "sacp/arch_io.hpp"

namespace sacp {

/// Channels left after pruning `rate` of `channels`: floor((1 - rate) * C).
/// The 1e-9 slack keeps decimal rates such as 0.9 from losing a channel to
/// binary rounding (0.1 * 10 evaluates to 0.99999...).
inline std::int64_t pruned_channels(std::int64_t channels, double rate) {
  if (!(rate >= 0.0) || rate >= 1.0) throw ValidationError("pruning rate must lie in [0, 1), got " + std::to_string(rate));
  if (channels < 0) throw ValidationError("negative channel count");
  return static_cast<std::int64_t>(std::floor((1.0 - rate) * static_cast<double>(channels) + 1e-9));
}

/// Feature width d: the widest prunable layer.
inline std::int64_t max_width(const ArchGraph &arch) {
  if (arch.num_prunable() == 0) throw ValidationError("arch '" + arch.name() + "' has no prunable layers");
  std::int64_t d = 0;
  for (const auto &g : arch.groups()) d = std::max(d, g.channels);
  return d;
}

/// Retained channel indices of one prunable group, keyed by any member id
/// (canonically the group's first conv).
struct ChannelMask {
  std::string layer_id;
  std::vector<std::int64_t> retained;
  friend bool operator==(const ChannelMask &, const ChannelMask &) = default;
};

struct ModelStats {
  std::int64_t flops = 0;
  std::int64_t params = 0;
  friend bool operator==(const ModelStats &, const ModelStats &) = default;
};

/// Weight elements: conv Kh*Kw*Cin*Cout (+Cout bias), bn 2*C, fc Fin*Fout (+Fout).
inline std::int64_t count_params(const ArchGraph &arch) {
  std::int64_t total = 0;
  for (const auto &n : arch.nodes()) {
    switch (n.kind) {
    case LayerKind::conv:
      total += n.kernel.h * n.kernel.w * n.in_channels * n.out_channels + (n.has_bias ? n.out_channels : 0);
      break;
    case LayerKind::bn: total += 2 * n.out_channels; break;
    case LayerKind::fc: total += n.in_channels * n.out_channels + (n.has_bias ? n.out_channels : 0); break;
    default: break;
    }
  }
  return total;
}

/// Multiply-accumulates. bn, pooling, merges and activations count as zero.
inline std::int64_t count_flops(const ArchGraph &arch) {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < arch.size(); ++i) {
    const auto &n = arch.node(i);
    if (n.kind == LayerKind::conv) {
      const auto out = arch.output_extent(i);
      total += n.kernel.h * n.kernel.w * n.in_channels * n.out_channels * out.h * out.w;
    } else if (n.kind == LayerKind::fc) {
      total += n.in_channels * n.out_channels;
    }
  }
  return total;
}

inline ModelStats model_stats(const ArchGraph &arch) { return {count_flops(arch), count_params(arch)}; }

/// Copy of `arch` with each prunable group narrowed to
/// pruned_channels(C_g, rates[g]) and input widths re-derived along the
/// channel flow.
inline ArchGraph apply_pruning(const ArchGraph &arch, std::span<const double> rates) {
  if (rates.size() != arch.num_prunable())
    throw ValidationError("expected " + std::to_string(arch.num_prunable()) + " rates, got " +
                          std::to_string(rates.size()));
  std::vector<std::int64_t> width(arch.num_prunable());
  for (std::size_t g = 0; g < width.size(); ++g) width[g] = pruned_channels(arch.groups()[g].channels, rates[g]);

  auto nodes = arch.nodes();
  for (auto i : arch.topo_order()) {
    auto &n = nodes[i];
    const auto &preds = arch.predecessors(i);
    if (!preds.empty()) {
      const auto carried = nodes[preds.front()].out_channels;
      if (n.kind == LayerKind::fc) {
        const auto in = arch.input_extent(i);
        n.in_channels = carried * in.h * in.w;
      } else {
        n.in_channels = carried;
      }
    }
    if (n.kind == LayerKind::conv) {
      if (auto g = arch.group_of(i)) n.out_channels = width[*g];
    } else if (n.kind != LayerKind::fc) {
      n.out_channels = n.in_channels;
    }
  }
  return ArchGraph(arch.name(), std::move(nodes), arch.edges(), arch.input_resolution(), arch.declared_groups());
}

/// Per-node channel-state rows of width d: +1 retained, -1 pruned, 0 padding.
struct FeatureMatrix {
  std::int64_t width = 0;
  Eigen::MatrixXd rows;
};

namespace detail {

inline const ChannelMask &mask_for_group(const ArchGraph &arch, std::size_t g, std::span<const ChannelMask> masks) {
  for (const auto &m : masks)
    for (auto member : arch.groups()[g].members)
      if (arch.node(member).id == m.layer_id) return m;
  throw ValidationError("no channel mask for group '" + arch.group_id(g) + "'");
}

} // namespace detail

/// Node features for the encoder. Conv rows follow their group's mask (or
/// are all +1 when the conv is not prunable); bn, pool and merge rows copy
/// their input's row; fc rows are all +1.
inline FeatureMatrix build_feature_matrix(const ArchGraph &arch, std::span<const ChannelMask> masks) {
  const auto d = max_width(arch);
  FeatureMatrix fm{d, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(arch.size()), d)};

  std::vector<const ChannelMask *> by_group(arch.num_prunable());
  for (std::size_t g = 0; g < by_group.size(); ++g) {
    by_group[g] = &detail::mask_for_group(arch, g, masks);
    const auto c = arch.groups()[g].channels;
    for (auto idx : by_group[g]->retained)
      if (idx < 0 || idx >= c)
        throw ValidationError("mask index " + std::to_string(idx) + " out of range for '" + arch.group_id(g) + "'");
  }

  for (auto i : arch.topo_order()) {
    const auto &n = arch.node(i);
    auto row = fm.rows.row(static_cast<Eigen::Index>(i));
    const auto &preds = arch.predecessors(i);
    if (n.kind == LayerKind::fc) {
      row.setOnes();
    } else if (n.kind == LayerKind::conv || preds.empty()) {
      const auto c = n.out_channels;
      if (c > d) throw ValidationError("layer '" + n.id + "' is wider than the feature width");
      if (auto g = arch.group_of(i)) {
        row.head(c).setConstant(-1.0);
        for (auto idx : by_group[*g]->retained) row(idx) = 1.0;
      } else {
        row.head(c).setOnes();
      }
    } else {
      row = fm.rows.row(static_cast<Eigen::Index>(preds.front()));
    }
  }
  return fm;
}

} // namespace sacp
