#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "dmha/tensor.hpp"

namespace dmha {

using Rng = std::mt19937_64;

// Independent generator for a named purpose derived from a root seed, so that
// adding or reordering consumers never shifts another consumer's draws.
Rng make_stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

// Tensor of i.i.d. zero-mean normals with standard deviation `stddev`.
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

// Uniform [lo, hi) using the generator's raw 53-bit output, independent of
// the standard library's distribution implementations.
double uniform(Rng& rng, double lo = 0.0, double hi = 1.0);
double normal(Rng& rng);
std::size_t uniform_index(Rng& rng, std::size_t n);

}  // namespace dmha
