#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sacp/arch_io.hpp"

namespace sacp::testing {

inline nlohmann::json conv_layer(const std::string &id, std::int64_t in, std::int64_t out, int k = 3, int pad = 1,
                                 int stride = 1, bool bias = false) {
  return {{"id", id},         {"kind", "conv"},          {"in_channels", in},      {"out_channels", out},
          {"kernel", {k, k}}, {"stride", {stride, stride}}, {"padding", {pad, pad}}, {"bias", bias}};
}

inline nlohmann::json bn_layer(const std::string &id, std::int64_t c) {
  return {{"id", id}, {"kind", "bn"}, {"in_channels", c}, {"out_channels", c}};
}

/// conv0 -> bn0 -> conv1 -> bn1 -> ... with the given widths, then global
/// pooling and an fc head; input has `in` channels at `res` x `res`.
inline nlohmann::json chain_doc(const std::vector<std::int64_t> &widths, std::int64_t in = 3, int res = 8,
                                bool with_head = true) {
  nlohmann::json layers = nlohmann::json::array(), edges = nlohmann::json::array();
  std::string prev;
  std::int64_t c = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const auto conv = "conv" + std::to_string(i), bn = "bn" + std::to_string(i);
    layers.push_back(conv_layer(conv, c, widths[i]));
    layers.push_back(bn_layer(bn, widths[i]));
    if (!prev.empty()) edges.push_back({prev, conv});
    edges.push_back({conv, bn});
    prev = bn;
    c = widths[i];
  }
  if (with_head) {
    layers.push_back({{"id", "gap"}, {"kind", "pool"}, {"in_channels", c}, {"out_channels", c}, {"kernel", {res, res}}});
    layers.push_back({{"id", "fc"}, {"kind", "fc"}, {"in_channels", c}, {"out_channels", 10}});
    edges.push_back({prev, "gap"});
    edges.push_back({"gap", "fc"});
  }
  return {{"name", "chain"}, {"input_resolution", {res, res}}, {"layers", layers}, {"edges", edges}};
}

inline ArchGraph chain(const std::vector<std::int64_t> &widths, std::int64_t in = 3, int res = 8,
                       bool with_head = true) {
  return parse_arch(chain_doc(widths, in, res, with_head));
}

inline ArchGraph toy4() { return load_arch("toy4"); }

} // namespace sacp::testing
