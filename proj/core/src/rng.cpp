#include "ugp/rng.hpp"

namespace ugp {

std::uint64_t CounterRng::below(std::uint64_t n) noexcept {
  // Lemire's multiply-shift; the bias is below 2^-64 * n and irrelevant here.
  __extension__ using u128 = unsigned __int128;
  const auto wide = static_cast<u128>(next_u64()) * n;
  return static_cast<std::uint64_t>(wide >> 64);
}

std::size_t CounterRng::categorical(std::span<const double> probabilities) noexcept {
  double total = 0.0;
  for (double p : probabilities) total += p;
  const double target = uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    acc += probabilities[i];
    if (target < acc) return i;
  }
  // Rounding can leave target == total; fall back to the last nonzero entry.
  for (std::size_t i = probabilities.size(); i-- > 0;) {
    if (probabilities[i] > 0.0) return i;
  }
  return 0;
}

}  // namespace ugp
