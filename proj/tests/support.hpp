#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stclip/param_store.hpp"
#include "stclip/rng.hpp"
#include "stclip/tensor.hpp"

namespace stclip::testing {

inline Tensor random_tensor(RngStream& rng, Shape shape, float lo = -1.0f, float hi = 1.0f) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Fixed random weights turn any tensor-valued output into a scalar whose
// gradient exercises every output element.
inline Tensor probe_loss(const Tensor& y, std::uint64_t seed = 99) {
  RngStream rng(seed, 7);
  std::vector<float> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0f, 1.0f);
  return sum(mul(y, Tensor(y.shape(), std::move(w))));
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

inline bool all_zero(const Tensor& t) {
  for (float v : t.data())
    if (v != 0.0f) return false;
  return true;
}

}  // namespace stclip::testing
