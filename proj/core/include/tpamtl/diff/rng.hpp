#pragma once

#include <cstdint>
#include <string_view>

namespace tpamtl::diff {

// Counter-based random stream: draw n is a pure function of (key, n), so a
// stream replays bit-for-bit and named substreams never perturb each other.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  // Standard normal by Box-Muller; consumes two draws.
  double normal();
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  // Independent stream keyed by this stream's key and a label. Does not
  // advance this stream.
  RngStream substream(std::string_view label) const;
  RngStream substream(std::uint64_t index) const;

 private:
  RngStream(std::uint64_t seed, std::uint64_t key, std::uint64_t counter)
      : seed_(seed), key_(key), counter_(counter) {}

  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t hash_label(std::string_view label);

}  // namespace tpamtl::diff
