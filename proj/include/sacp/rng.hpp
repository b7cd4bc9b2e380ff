#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace sacp {

/// Deterministic child seed for the named stream `tag` (and optional index)
/// of a parent seed. Every random stream in the toolkit fans out from one
/// user seed through this function.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag, std::uint64_t index = 0) {
  std::vector<std::uint32_t> material{static_cast<std::uint32_t>(parent), static_cast<std::uint32_t>(parent >> 32),
                                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  for (unsigned char c : tag) material.push_back(c);
  std::seed_seq seq(material.begin(), material.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

} // namespace sacp
