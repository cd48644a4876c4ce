#pragma once

#include <cstdint>
#include <random>

namespace sfb {

// Identifies one independent random stream: a master seed and a trajectory
// (or task) index. Streams with different keys or tags are independent.
struct StreamKey {
  std::uint64_t master = 0;
  std::uint64_t index = 0;

  friend bool operator==(const StreamKey&, const StreamKey&) = default;
};

enum class StreamTag : std::uint32_t {
  coupled = 1,   // the shared W driving slow and fast equations
  frozen = 2,    // the independent W~ of the frozen equation
  multistart = 3,
  sampling = 4,
};

inline std::mt19937_64 make_stream(StreamKey key, StreamTag tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(key.master), static_cast<std::uint32_t>(key.master >> 32),
                    static_cast<std::uint32_t>(key.index), static_cast<std::uint32_t>(key.index >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

}  // namespace sfb
