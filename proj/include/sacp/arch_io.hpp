#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "sacp/arch_graph.hpp"

#ifndef SACP_DEFAULT_DATA_DIR
#define SACP_DEFAULT_DATA_DIR "data/archs"
#endif

namespace sacp {

namespace detail {

inline Extent2 read_extent(const nlohmann::json &layer, const char *key, Extent2 fallback) {
  auto it = layer.find(key);
  if (it == layer.end() || it->is_null()) return fallback;
  if (it->is_number_integer()) return {it->get<std::int64_t>(), it->get<std::int64_t>()};
  if (it->is_array() && it->size() == 2 && (*it)[0].is_number_integer() && (*it)[1].is_number_integer())
    return {(*it)[0].get<std::int64_t>(), (*it)[1].get<std::int64_t>()};
  throw ValidationError(std::string("field '") + key + "' must be an integer or [h, w]");
}

inline std::int64_t read_count(const nlohmann::json &layer, const char *key) {
  auto it = layer.find(key);
  if (it == layer.end() || !it->is_number_integer())
    throw ValidationError(std::string("layer field '") + key + "' must be an integer");
  auto v = it->get<std::int64_t>();
  if (v < 1) throw ValidationError(std::string("layer field '") + key + "' must be >= 1");
  return v;
}

} // namespace detail

/// Builds a validated graph from an architecture document:
/// {name, input_resolution: [h, w], layers: [...], edges: [[src, dst], ...],
///  residual_groups: [[conv ids], ...]}.
inline ArchGraph parse_arch(const nlohmann::json &doc) {
  if (!doc.is_object()) throw ValidationError("architecture document must be an object");
  const std::string name = doc.value("name", std::string("unnamed"));
  auto res = doc.find("input_resolution");
  if (res == doc.end()) throw ValidationError("architecture document needs input_resolution");
  const auto resolution = detail::read_extent(doc, "input_resolution", {});

  auto layers = doc.find("layers");
  if (layers == doc.end() || !layers->is_array()) throw ValidationError("'layers' must be an array");
  std::vector<LayerSpec> nodes;
  for (const auto &l : *layers) {
    if (!l.is_object()) throw ValidationError("layer entries must be objects");
    LayerSpec spec;
    if (!l.contains("id") || !l["id"].is_string()) throw ValidationError("layer needs a string id");
    spec.id = l["id"].get<std::string>();
    auto kind = parse_layer_kind(l.value("kind", std::string()));
    if (!kind) throw ValidationError("layer '" + spec.id + "' has unknown kind");
    spec.kind = *kind;
    try {
      spec.in_channels = detail::read_count(l, "in_channels");
      spec.out_channels = detail::read_count(l, "out_channels");
      if (spec.kind == LayerKind::conv && !l.contains("kernel"))
        throw ValidationError("conv layer needs a kernel");
      spec.kernel = detail::read_extent(l, "kernel", {1, 1});
      // pooling defaults to non-overlapping windows
      spec.stride = detail::read_extent(l, "stride", spec.kind == LayerKind::pool ? spec.kernel : Extent2{1, 1});
      spec.padding = detail::read_extent(l, "padding", {0, 0});
    } catch (const ValidationError &e) {
      throw ValidationError("layer '" + spec.id + "': " + e.what());
    }
    spec.has_bias = l.value("bias", spec.kind == LayerKind::fc);
    spec.prunable = l.value("prunable", true);
    nodes.push_back(std::move(spec));
  }

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < nodes.size(); ++i) index.emplace(nodes[i].id, i);
  std::vector<Edge> edges;
  if (auto e = doc.find("edges"); e != doc.end()) {
    if (!e->is_array()) throw ValidationError("'edges' must be an array");
    for (const auto &pair : *e) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_string())
        throw ValidationError("edges must be [src_id, dst_id] pairs");
      auto s = index.find(pair[0].get<std::string>());
      auto t = index.find(pair[1].get<std::string>());
      if (s == index.end() || t == index.end())
        throw ValidationError("edge references unknown layer: " + pair.dump());
      edges.emplace_back(s->second, t->second);
    }
  }

  std::optional<ArchGraph::GroupList> groups;
  if (auto g = doc.find("residual_groups"); g != doc.end() && !g->is_null()) {
    try {
      groups = g->get<ArchGraph::GroupList>();
    } catch (const nlohmann::json::exception &) {
      throw ValidationError("'residual_groups' must be a list of id lists");
    }
  }
  return ArchGraph(name, std::move(nodes), std::move(edges), resolution, std::move(groups));
}

inline ArchGraph parse_arch_text(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error &e) {
    throw ValidationError(std::string("malformed architecture document: ") + e.what());
  }
  return parse_arch(doc);
}

inline nlohmann::json to_json(const ArchGraph &arch) {
  nlohmann::ordered_json doc;
  doc["name"] = arch.name();
  doc["input_resolution"] = {arch.input_resolution().h, arch.input_resolution().w};
  auto layers = nlohmann::ordered_json::array();
  for (const auto &n : arch.nodes()) {
    nlohmann::ordered_json l;
    l["id"] = n.id;
    l["kind"] = to_string(n.kind);
    l["in_channels"] = n.in_channels;
    l["out_channels"] = n.out_channels;
    if (n.kind == LayerKind::conv || n.kind == LayerKind::pool) {
      l["kernel"] = {n.kernel.h, n.kernel.w};
      l["stride"] = {n.stride.h, n.stride.w};
      l["padding"] = {n.padding.h, n.padding.w};
    }
    if (n.kind == LayerKind::conv || n.kind == LayerKind::fc) l["bias"] = n.has_bias;
    if (!n.prunable) l["prunable"] = false;
    layers.push_back(std::move(l));
  }
  doc["layers"] = std::move(layers);
  auto edges = nlohmann::ordered_json::array();
  for (const auto &[s, t] : arch.edges()) edges.push_back({arch.node(s).id, arch.node(t).id});
  doc["edges"] = std::move(edges);
  auto groups = nlohmann::ordered_json::array();
  for (const auto &g : arch.groups()) {
    if (g.members.size() < 2) continue;
    auto ids = nlohmann::ordered_json::array();
    for (auto m : g.members) ids.push_back(arch.node(m).id);
    groups.push_back(std::move(ids));
  }
  doc["residual_groups"] = std::move(groups);
  return nlohmann::json(doc);
}

inline std::string read_text_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Directory holding the built-in specs; SACP_DATA_DIR overrides it.
inline std::filesystem::path data_dir() {
  if (const char *env = std::getenv("SACP_DATA_DIR"); env && *env) return env;
  return SACP_DEFAULT_DATA_DIR;
}

/// Resolves `name_or_path`: an existing file path, else a built-in name
/// (e.g. "vgg16-cifar") looked up in data_dir().
inline std::filesystem::path resolve_arch_path(const std::string &name_or_path) {
  std::filesystem::path p(name_or_path);
  if (std::filesystem::is_regular_file(p)) return p;
  auto builtin = data_dir() / (name_or_path + ".json");
  if (std::filesystem::is_regular_file(builtin)) return builtin;
  throw ValidationError("unknown architecture '" + name_or_path + "' (not a file, not in " +
                        data_dir().string() + ")");
}

inline ArchGraph load_arch(const std::string &name_or_path) {
  return parse_arch_text(read_text_file(resolve_arch_path(name_or_path)));
}

} // namespace sacp
