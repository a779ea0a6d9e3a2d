#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace stclip {

std::uint64_t mix64(std::uint64_t x);
// FNV-1a, used to key parameter and stream names.
std::uint64_t hash_name(std::string_view name);

// Counter-based generator: draw n of stream (seed, stream_id) is a pure
// function of (seed, stream_id, n), so streams can be split and consumed in
// any order or on any thread without changing their values.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits.
  double uniform();
  float uniform(float lo, float hi);
  double normal();
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  RngStream derive(std::uint64_t sub) const;
  RngStream derive(std::string_view name) const { return derive(hash_name(name)); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace stclip
