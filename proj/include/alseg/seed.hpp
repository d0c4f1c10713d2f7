#ifndef ALSEG_SEED_HPP
#define ALSEG_SEED_HPP

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace alseg {

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Keyed sub-seed: distinct keys give independent streams from one root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view key) {
  return splitmix64(root ^ fnv1a64(key));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view key, std::uint64_t index) {
  return splitmix64(derive_seed(root, key) + splitmix64(index));
}

using Rng = std::mt19937_64;

/// Fisher-Yates driven by `rng`.
template <typename T>
void shuffle_in_place(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(items[i - 1], items[pick(rng)]);
  }
}

}  // namespace alseg

#endif  // ALSEG_SEED_HPP
