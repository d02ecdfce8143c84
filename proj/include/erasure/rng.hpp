#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace erasure {

using Rng = std::mt19937_64;

/// Sub-seed splitting rule: splitmix64 over (base seed, FNV-1a(tag), index).
/// Every random stream in the project is derived from the run seed this way.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& state);

/// Short fingerprint of an engine's full state, for provenance records.
std::uint64_t rng_fingerprint(const Rng& rng);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace erasure
