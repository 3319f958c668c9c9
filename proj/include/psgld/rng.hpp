#pragma once

#include <cstdint>
#include <random>

namespace psgld {

// splitmix64 finalizer; good avalanche, cheap, and stable across platforms.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a master seed and up to three
// stream tags (typically iteration, block-row, block-col). Counter-based:
// the same (master, tags) always yields the same stream, so parallel and
// serial execution can draw identical noise.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag_a,
                                 std::uint64_t tag_b = 0, std::uint64_t tag_c = 0) {
    std::uint64_t s = mix64(master ^ 0x6a09e667f3bcc908ULL);
    s = mix64(s ^ tag_a);
    s = mix64(s ^ tag_b);
    s = mix64(s ^ tag_c);
    return s;
}

inline std::mt19937_64 make_stream(std::uint64_t master, std::uint64_t tag_a,
                                   std::uint64_t tag_b = 0, std::uint64_t tag_c = 0) {
    return std::mt19937_64(derive_seed(master, tag_a, tag_b, tag_c));
}

// Fixed tags for the top-level stream families hanging off one master seed.
namespace stream_tag {
inline constexpr std::uint64_t kInitW = 0x101;
inline constexpr std::uint64_t kInitH = 0x102;
inline constexpr std::uint64_t kSyntheticMask = 0x103;
inline constexpr std::uint64_t kSyntheticValues = 0x104;
inline constexpr std::uint64_t kSchedule = 0x105;
inline constexpr std::uint64_t kBaseline = 0x106;
inline constexpr std::uint64_t kBlockNoise = 0x107;
inline constexpr std::uint64_t kPermute = 0x108;
inline constexpr std::uint64_t kHoldout = 0x109;
}  // namespace stream_tag

}  // namespace psgld
