#pragma once

#include "ecpec/params.hpp"

#include <algorithm>
#include <vector>

namespace ecpec::testing {

struct PlantedData {
  Matrix X;
  std::vector<int> y;
  std::vector<int> informative;  // sorted
};

// n x D standard normal features; y depends on `k` randomly chosen columns
// (plus a little label noise through a logistic link).
inline PlantedData planted_signal(std::uint64_t seed, int n = 300, int D = 50, int k = 3) {
  Rng rng(seed);
  PlantedData d;
  d.X.resize(n, D);
  for (Eigen::Index i = 0; i < d.X.size(); ++i) d.X.data()[i] = rng.normal();
  std::vector<int> cols(static_cast<std::size_t>(D));
  for (int j = 0; j < D; ++j) cols[static_cast<std::size_t>(j)] = j;
  for (int j = D - 1; j > 0; --j) std::swap(cols[static_cast<std::size_t>(j)], cols[rng.index(static_cast<std::size_t>(j + 1))]);
  d.informative.assign(cols.begin(), cols.begin() + k);
  std::sort(d.informative.begin(), d.informative.end());
  std::vector<double> w;
  for (int j = 0; j < k; ++j) w.push_back((rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(1.5, 2.5));
  for (int i = 0; i < n; ++i) {
    double z = 0;
    for (int j = 0; j < k; ++j) z += w[static_cast<std::size_t>(j)] * d.X(i, d.informative[static_cast<std::size_t>(j)]);
    const double p = 1.0 / (1.0 + std::exp(-3.0 * z));
    d.y.push_back(rng.bernoulli(p) ? 1 : 0);
  }
  return d;
}

}  // namespace ecpec::testing
