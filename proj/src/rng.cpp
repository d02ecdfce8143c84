#include "erasure/rng.hpp"

#include <sstream>

#include "erasure/errors.hpp"

namespace erasure {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
    return splitmix64(splitmix64(splitmix64(base) ^ fnv1a64(tag)) + index);
}

std::string serialize_rng(const Rng& rng) {
    std::ostringstream out;
    out << rng;
    return out.str();
}

Rng deserialize_rng(const std::string& state) {
    Rng rng;
    std::istringstream in(state);
    in >> rng;
    if (in.fail()) throw ConfigError("corrupt RNG state");
    return rng;
}

std::uint64_t rng_fingerprint(const Rng& rng) { return fnv1a64(serialize_rng(rng)); }

}  // namespace erasure
