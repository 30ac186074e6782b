#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace restune {

using Rng = std::mt19937_64;

// Seeds an engine from a list of integers so that independent streams
// (per block, per tuner slot, ...) do not depend on creation order.
Rng make_rng(std::initializer_list<std::uint64_t> keys);

void fill_uniform(std::span<double> out, double low, double high, Rng& rng);
void fill_normal(std::span<double> out, double mean, double stddev, Rng& rng);
// Normal(0, stddev) resampled until |x| <= 2 * stddev.
void fill_trunc_normal(std::span<double> out, double stddev, Rng& rng);

// PyTorch's kaiming_uniform_ bound: gain = sqrt(2 / (1 + a^2)),
// bound = gain * sqrt(3 / fan_in).
double kaiming_uniform_bound(std::size_t fan_in, double a);

}  // namespace restune
