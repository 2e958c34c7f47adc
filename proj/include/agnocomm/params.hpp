#pragma once

// Generic helpers over parameter containers. A container P qualifies when an
// ADL-visible `visit_tensors(P&, F)` calls F(name, tensor) for each Matrix or
// Vector it owns, in a fixed order.

#include <agnocomm/common.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace agnocomm {

template <class P>
std::vector<std::span<double>> flat_views(P& params) {
  std::vector<std::span<double>> out;
  visit_tensors(params, [&](const std::string&, auto& t) {
    out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

template <class P>
std::vector<std::span<const double>> flat_views(const P& params) {
  std::vector<std::span<const double>> out;
  visit_tensors(params, [&](const std::string&, const auto& t) {
    out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

template <class P>
std::size_t parameter_count(const P& params) {
  std::size_t n = 0;
  for (auto v : flat_views(params)) n += v.size();
  return n;
}

template <class P>
bool all_finite(const P& params) {
  for (auto v : flat_views(params)) {
    for (double x : v) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

// FNV-1a over the raw bytes of every tensor. Detects any bit change.
template <class P>
std::uint64_t checksum(const P& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto v : flat_views(params)) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < v.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template <class P>
void set_zero(P& params) {
  for (auto v : flat_views(params)) std::fill(v.begin(), v.end(), 0.0);
}

}  // namespace agnocomm
