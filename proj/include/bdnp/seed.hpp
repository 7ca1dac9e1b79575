#pragma once

#include <cstdint>
#include <random>

namespace bdnp {

/// Independent sub-seed for a named pipeline stage.
enum class SeedStream : std::uint32_t {
  kData = 1,
  kTestData = 2,
  kPoison = 3,
  kInit = 4,
  kShuffle = 5,
  kDefense = 6,
  kBlendPattern = 7,
};

inline std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace bdnp
