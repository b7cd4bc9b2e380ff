#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sacp/error.hpp"

namespace sacp {

enum class LayerKind { conv, bn, pool, fc, add };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
  case LayerKind::conv: return "conv";
  case LayerKind::bn: return "bn";
  case LayerKind::pool: return "pool";
  case LayerKind::fc: return "fc";
  case LayerKind::add: return "add";
  }
  return "?";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "bn") return LayerKind::bn;
  if (s == "pool") return LayerKind::pool;
  if (s == "fc") return LayerKind::fc;
  if (s == "add") return LayerKind::add;
  return std::nullopt;
}

struct Extent2 {
  std::int64_t h = 0;
  std::int64_t w = 0;
  friend bool operator==(const Extent2 &, const Extent2 &) = default;
};

/// One computational layer. For `fc`, the channel fields hold the input and
/// output feature counts; `add` is an elementwise residual merge.
struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::conv;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  Extent2 kernel{1, 1};
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  bool has_bias = false;
  /// Requested by the spec file. The effective flag is ArchGraph::is_prunable.
  bool prunable = true;
};

using Edge = std::pair<std::size_t, std::size_t>;

/// Conv layers whose outputs must keep one width (they meet at residual
/// merges). The unit of pruning: one rate and one mask per group.
struct PrunableGroup {
  std::vector<std::size_t> members;
  std::int64_t channels = 0;
};

/// Layer-level DAG. Construction validates the whole graph (acyclicity,
/// channel flow, spatial sizes) and derives the prunable groups, so every
/// ArchGraph value in the program is consistent.
class ArchGraph {
public:
  using GroupList = std::vector<std::vector<std::string>>;

  ArchGraph(std::string name, std::vector<LayerSpec> nodes, std::vector<Edge> edges,
            Extent2 input_resolution, std::optional<GroupList> declared_groups = std::nullopt)
      : name_(std::move(name)), nodes_(std::move(nodes)), edges_(std::move(edges)),
        input_resolution_(input_resolution), declared_groups_(std::move(declared_groups)) {
    validate_structure();
    compute_order();
    validate_layers();
    propagate();
    derive_groups();
  }

  const std::string &name() const { return name_; }
  const std::vector<LayerSpec> &nodes() const { return nodes_; }
  const LayerSpec &node(std::size_t i) const { return nodes_.at(i); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Edge> &edges() const { return edges_; }
  Extent2 input_resolution() const { return input_resolution_; }
  const std::optional<GroupList> &declared_groups() const { return declared_groups_; }

  const std::vector<std::size_t> &predecessors(std::size_t i) const { return preds_.at(i); }
  const std::vector<std::size_t> &successors(std::size_t i) const { return succs_.at(i); }
  const std::vector<std::size_t> &topo_order() const { return order_; }

  /// Output spatial size of node i.
  Extent2 output_extent(std::size_t i) const { return extent_.at(i); }
  /// Input spatial size of node i (the input resolution for sources).
  Extent2 input_extent(std::size_t i) const {
    const auto &p = preds_.at(i);
    return p.empty() ? input_resolution_ : extent_.at(p.front());
  }

  const std::vector<PrunableGroup> &groups() const { return groups_; }
  std::size_t num_prunable() const { return groups_.size(); }
  std::optional<std::size_t> group_of(std::size_t node) const { return group_of_.at(node); }
  bool is_prunable(std::size_t node) const { return group_of_.at(node).has_value(); }
  /// Representative id of a group: its first member.
  const std::string &group_id(std::size_t g) const { return nodes_.at(groups_.at(g).members.front()).id; }

  std::optional<std::size_t> index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

private:
  void fail(const std::string &msg) const { throw ValidationError("arch '" + name_ + "': " + msg); }

  void validate_structure() {
    if (nodes_.empty()) fail("no layers");
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].id.empty()) fail("layer " + std::to_string(i) + " has an empty id");
      if (!index_.emplace(nodes_[i].id, i).second) fail("duplicate layer id '" + nodes_[i].id + "'");
    }
    preds_.assign(nodes_.size(), {});
    succs_.assign(nodes_.size(), {});
    std::set<Edge> seen;
    for (const auto &[s, t] : edges_) {
      if (s >= nodes_.size() || t >= nodes_.size()) fail("edge endpoint out of range");
      if (s == t) fail("self-loop at '" + nodes_[s].id + "'");
      if (!seen.insert({s, t}).second)
        fail("duplicate edge " + nodes_[s].id + " -> " + nodes_[t].id);
      preds_[t].push_back(s);
      succs_[s].push_back(t);
    }
  }

  void compute_order() {
    std::vector<std::size_t> indeg(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) indeg[i] = preds_[i].size();
    std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (indeg[i] == 0) ready.push(i);
    while (!ready.empty()) {
      auto i = ready.top();
      ready.pop();
      order_.push_back(i);
      for (auto t : succs_[i])
        if (--indeg[t] == 0) ready.push(t);
    }
    if (order_.size() != nodes_.size()) fail("edges contain a cycle");
  }

  void validate_layers() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto &n = nodes_[i];
      const auto np = preds_[i].size();
      if (n.in_channels < 0 || n.out_channels < 0) fail("negative channel count at '" + n.id + "'");
      if (n.kind == LayerKind::add) {
        if (np != 2) fail("merge '" + n.id + "' needs exactly two inputs, has " + std::to_string(np));
      } else if (np > 1) {
        fail("layer '" + n.id + "' has " + std::to_string(np) + " inputs; only add layers merge");
      }
      if (n.kind == LayerKind::conv || n.kind == LayerKind::pool) {
        if (n.kernel.h < 1 || n.kernel.w < 1) fail("bad kernel at '" + n.id + "'");
        if (n.stride.h < 1 || n.stride.w < 1) fail("bad stride at '" + n.id + "'");
        if (n.padding.h < 0 || n.padding.w < 0) fail("bad padding at '" + n.id + "'");
      }
      if ((n.kind == LayerKind::bn || n.kind == LayerKind::pool || n.kind == LayerKind::add) &&
          n.in_channels != n.out_channels)
        fail("layer '" + n.id + "' must keep its channel count");
    }
  }

  static std::int64_t window_out(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
    const auto span = in + 2 * p - k;
    return span < 0 ? 0 : span / s + 1;
  }

  void propagate() {
    if (input_resolution_.h < 1 || input_resolution_.w < 1) fail("input_resolution must be positive");
    extent_.assign(nodes_.size(), {});
    for (auto i : order_) {
      const auto &n = nodes_[i];
      const auto &p = preds_[i];
      const Extent2 in = p.empty() ? input_resolution_ : extent_[p.front()];
      if (!p.empty()) {
        const auto &src = nodes_[p.front()];
        std::int64_t expected = src.out_channels;
        if (n.kind == LayerKind::fc) expected *= in.h * in.w;
        if (n.kind == LayerKind::add) {
          const auto &other = nodes_[p[1]];
          if (other.out_channels != src.out_channels)
            fail("channel mismatch at merge '" + n.id + "': " + std::to_string(src.out_channels) +
                 " vs " + std::to_string(other.out_channels));
          if (!(extent_[p[1]] == in)) fail("spatial mismatch at merge '" + n.id + "'");
        }
        if (n.in_channels != expected)
          fail("channel mismatch on edge " + src.id + " -> " + n.id + ": expected " +
               std::to_string(expected) + ", got " + std::to_string(n.in_channels));
      }
      Extent2 out = in;
      if (n.kind == LayerKind::conv || n.kind == LayerKind::pool) {
        out = {window_out(in.h, n.kernel.h, n.stride.h, n.padding.h),
               window_out(in.w, n.kernel.w, n.stride.w, n.padding.w)};
        if (out.h < 1 || out.w < 1)
          fail("resolution " + std::to_string(in.h) + "x" + std::to_string(in.w) +
               " too small for window at '" + n.id + "'");
      } else if (n.kind == LayerKind::fc) {
        out = {1, 1};
      }
      extent_[i] = out;
    }
  }

  std::size_t find(std::vector<std::size_t> &parent, std::size_t x) const {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }

  // Union-find over channel spaces: conv opens a space, bn/pool carry it,
  // add unions its two inputs. A source that is not a conv opens an input
  // space, which is never prunable.
  void derive_groups() {
    const auto n = nodes_.size();
    std::vector<std::size_t> parent(n), space(n, n);
    std::iota(parent.begin(), parent.end(), 0);
    for (auto i : order_) {
      const auto &node = nodes_[i];
      const auto &p = preds_[i];
      if (node.kind == LayerKind::conv || p.empty()) {
        space[i] = i;
      } else if (node.kind == LayerKind::fc) {
        space[i] = n;
      } else {
        space[i] = space[p.front()];
        if (node.kind == LayerKind::add) {
          if (space[p[0]] == n || space[p[1]] == n) fail("merge '" + node.id + "' consumes an fc output");
          auto a = find(parent, space[p[0]]), b = find(parent, space[p[1]]);
          if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
      }
      if (space[i] == n && node.kind != LayerKind::fc) fail("layer '" + node.id + "' consumes an fc output");
    }

    std::map<std::size_t, std::vector<std::size_t>> classes;
    std::map<std::size_t, bool> excluded;
    for (std::size_t i = 0; i < n; ++i) {
      if (space[i] != i) continue;
      auto root = find(parent, i);
      if (nodes_[i].kind == LayerKind::conv) {
        classes[root].push_back(i);
        if (!nodes_[i].prunable) excluded[root] = true;
      } else {
        excluded[root] = true;
      }
    }

    if (declared_groups_) check_declared(classes);

    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> ordered;
    for (auto &[root, members] : classes)
      if (!excluded[root]) ordered.emplace_back(members.front(), members);
    std::sort(ordered.begin(), ordered.end());
    group_of_.assign(n, std::nullopt);
    for (auto &[first, members] : ordered) {
      PrunableGroup g;
      g.channels = nodes_[members.front()].out_channels;
      for (auto m : members) {
        if (nodes_[m].out_channels != g.channels) fail("tied convs disagree on width at '" + nodes_[m].id + "'");
        group_of_[m] = groups_.size();
      }
      g.members = std::move(members);
      groups_.push_back(std::move(g));
    }
  }

  void check_declared(const std::map<std::size_t, std::vector<std::size_t>> &classes) const {
    std::set<std::set<std::string>> derived, declared;
    for (const auto &[root, members] : classes) {
      if (members.size() < 2) continue;
      std::set<std::string> ids;
      for (auto m : members) ids.insert(nodes_[m].id);
      derived.insert(std::move(ids));
    }
    for (const auto &grp : *declared_groups_) {
      std::set<std::string> ids;
      for (const auto &id : grp) {
        auto idx = index_of(id);
        if (!idx) fail("residual group names unknown layer '" + id + "'");
        if (nodes_[*idx].kind != LayerKind::conv) fail("residual group member '" + id + "' is not a conv");
        ids.insert(id);
      }
      if (ids.size() < 2) continue;
      declared.insert(std::move(ids));
    }
    if (derived != declared) fail("declared residual_groups do not match the merges in the edge set");
  }

  std::string name_;
  std::vector<LayerSpec> nodes_;
  std::vector<Edge> edges_;
  Extent2 input_resolution_;
  std::optional<GroupList> declared_groups_;

  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> preds_, succs_;
  std::vector<std::size_t> order_;
  std::vector<Extent2> extent_;
  std::vector<PrunableGroup> groups_;
  std::vector<std::optional<std::size_t>> group_of_;
};

} // namespace sacp
