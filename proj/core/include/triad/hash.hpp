#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace triad {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);
/// 16 lowercase hex digits of fnv1a64.
std::string digest_hex(std::string_view bytes);

/// Independent stream seed for a named consumer of a global seed, e.g.
/// derive_seed(seed, "decoder") or derive_seed(seed, "crop", step).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

}  // namespace triad
