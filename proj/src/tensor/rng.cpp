#include "stclip/rng.hpp"

#include <cmath>

#include "stclip/errors.hpp"

namespace stclip {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_(stream_id), key_(mix64(mix64(seed) ^ mix64(~stream_id))) {}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t c = counter_++;
  return mix64(key_ ^ mix64(c * 0xD1B54A32D192ED03ull));
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

float RngStream::uniform(float lo, float hi) {
  return static_cast<float>(lo + (static_cast<double>(hi) - lo) * uniform());
}

double RngStream::normal() {
  constexpr double kTwoPi = 6.283185307179586476925;
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

std::size_t RngStream::below(std::size_t n) {
  if (n == 0) throw InputError("RngStream::below(0)");
  // Rejection sampling keeps the draw unbiased; rem = 2^64 mod n.
  const std::uint64_t m = n;
  const std::uint64_t rem = (0 - m) % m;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (rem != 0 && v > ~0ull - rem);
  return static_cast<std::size_t>(v % m);
}

RngStream RngStream::derive(std::uint64_t sub) const {
  return RngStream(seed_, mix64(stream_ ^ mix64(sub + 0x632BE59BD9B4E019ull)));
}

}  // namespace stclip
