#pragma once

#include <cstdint>
#include <string_view>

namespace wavprompt {

// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
    return splitmix64(base ^ splitmix64(salt));
}

// FNV-1a, used only to turn names into seed salts.
constexpr std::uint64_t name_salt(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace wavprompt
