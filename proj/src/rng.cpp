#include "restune/rng.hpp"

#include <cmath>
#include <vector>

namespace restune {

Rng make_rng(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(keys.size() * 2);
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

void fill_uniform(std::span<double> out, double low, double high, Rng& rng) {
  std::uniform_real_distribution<double> dist(low, high);
  for (double& v : out) v = dist(rng);
}

void fill_normal(std::span<double> out, double mean, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : out) v = dist(rng);
}

void fill_trunc_normal(std::span<double> out, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : out) {
    double x = dist(rng);
    while (std::abs(x) > 2.0 * stddev) x = dist(rng);
    v = x;
  }
}

double kaiming_uniform_bound(std::size_t fan_in, double a) {
  const double gain = std::sqrt(2.0 / (1.0 + a * a));
  return gain * std::sqrt(3.0 / static_cast<double>(fan_in));
}

}  // namespace restune
