#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace dcmnet {

// All randomness in the project flows from one root seed through named
// sub-streams, so toggling one consumer (say, augmentation) never shifts
// the draws seen by another (say, parameter init).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    // splitmix64 in counter mode; deterministic on every platform.
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller
  double normal();

  bool coin() { return (next_u64() >> 63) != 0; }

  std::size_t index(std::size_t n) { return n == 0 ? 0 : static_cast<std::size_t>(next_u64() % n); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a root seed and a stream name.
std::uint64_t stream_seed(std::uint64_t root, std::string_view stream);

}  // namespace dcmnet
