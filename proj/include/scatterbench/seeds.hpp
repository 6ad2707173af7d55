#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace scatterbench {

/// Hierarchical seed derivation. A child seed is a SplitMix64 finalization
/// of the parent folded with each tag in order, so any stage or item can be
/// re-derived from the master seed without replaying siblings:
///
///   stage_seed = derive_seed(master, "synth")
///   item_seed  = derive_seed(stage_seed, {cell, index})
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> tags);

/// FNV-1a 64-bit; used for config digests and stable string tags.
std::uint64_t fnv1a64(std::string_view bytes);

using Rng = std::mt19937_64;

/// Standard normal draw by Box-Muller on the engine's raw output, so streams
/// are identical across standard library implementations.
double standard_normal(Rng& rng);
/// Uniform in [0, 1) from 53 random bits.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);

}  // namespace scatterbench
