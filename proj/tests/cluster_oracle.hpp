#pragma once

// Straightforward O(n^3) average-linkage reference: every round rescans all
// cluster pairs and recomputes each linkage from the member distances.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sembid/cluster.hpp"
#include "sembid/random.hpp"

namespace sembid::test_support {

inline Partition brute_force_agglomerate(const std::vector<Embedding>& x, double threshold) {
  const std::size_t n = x.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) d[i][j] = cosine_distance(x[i], x[j]);
    }
  }
  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < n; ++i) clusters.push_back({i});
  for (;;) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    // clusters stay sorted by smallest member, so (ci, cj) order is (i, j) order
    for (std::size_t ci = 0; ci < clusters.size(); ++ci) {
      for (std::size_t cj = ci + 1; cj < clusters.size(); ++cj) {
        double s = 0.0;
        for (auto a : clusters[ci]) {
          for (auto b : clusters[cj]) s += d[a][b];
        }
        const double l = s / (static_cast<double>(clusters[ci].size()) * static_cast<double>(clusters[cj].size()));
        if (l < best) {
          best = l;
          bi = ci;
          bj = cj;
        }
      }
    }
    if (clusters.size() < 2 || !(best <= threshold)) break;
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    std::sort(clusters[bi].begin(), clusters[bi].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  Partition p;
  p.labels.assign(n, 0);
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    for (auto m : clusters[c]) p.labels[m] = c;
  }
  p.clusters = clusters;
  return p;
}

// Unit vectors scattered around a few random centres, so every threshold
// sees a mix of tight and loose structure.
inline std::vector<Embedding> random_unit_vectors(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, "test.vectors");
  std::normal_distribution<double> g(0.0, 1.0);
  const std::size_t centres = 1 + uniform_index(rng, 5);
  std::vector<Embedding> c(centres, Embedding(dim));
  for (auto& v : c) {
    for (auto& e : v) e = g(rng);
  }
  const double spread = 0.2 + 1.5 * uniform01(rng);
  std::vector<Embedding> out;
  for (std::size_t i = 0; i < n; ++i) {
    Embedding v = c[uniform_index(rng, centres)];
    double norm = 0.0;
    for (auto& e : v) {
      e += spread * g(rng);
      norm += e * e;
    }
    for (auto& e : v) e /= std::sqrt(norm);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace sembid::test_support
