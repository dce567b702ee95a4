#ifndef VITAE_RNG_HPP_
#define VITAE_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <vector>

namespace vitae {

// Deterministic PRNG with a single u64 state (splitmix64). Used for all
// initialization, shuffling and synthetic-data draws so that runs are
// bit-reproducible across platforms and serializable into checkpoints.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return double(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; no cached spare so the state stays a
  // single u64.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 5.421010862427522e-20;  // 2^-64, avoids log(0)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Normal(0, std) truncated to [-clip*std, clip*std] by rejection.
  double trunc_normal(double std_dev, double clip = 2.0) {
    for (;;) {
      double z = normal();
      if (z >= -clip && z <= clip) return z * std_dev;
    }
  }

  // Fisher-Yates shuffle of index vector.
  void shuffle(std::vector<int>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

 private:
  uint64_t state_;
};

}  // namespace vitae

#endif
