#ifndef PNFRL_RNG_HPP_
#define PNFRL_RNG_HPP_

#include <cstdint>
#include <random>
#include <string_view>

namespace pnfrl {

// Seeded random stream. All stochastic operations take one of these by
// reference and advance it; independent consumers get their own substream
// via split so that draw order in one consumer never perturbs another.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  uint64_t seed() const { return seed_; }

  // uniform on [0, 1)
  double uniform();
  // uniform on [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // uniform integer in [0, n)
  uint64_t index(uint64_t n);
  uint64_t next() { return engine_(); }

  // deterministic child stream keyed by (this stream's seed, key); does not
  // advance this stream
  Rng split(uint64_t key) const;
  Rng split(std::string_view key) const;

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t Mix64(uint64_t x);

}  // namespace pnfrl

#endif  // PNFRL_RNG_HPP_
