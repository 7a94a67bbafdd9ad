// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Straight-loop reference for the per-ray compositing math, written directly
// against the formulas and kept independent of the library implementation.
// Tests compare the renderer against this oracle; do not share code between
// the two.

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

namespace volcount_test {

struct OracleResult {
  double depth = 0.0;
  std::array<double, 3> color{0.0, 0.0, 0.0};
  double density = 0.0;
  std::vector<double> alphas;
  std::vector<double> weights;
  double accumulation = 0.0;
};

// Two-branch evaluation of 1/(1+exp(-x)); the tails would otherwise overflow,
// and the branch choice must match what any careful implementation does so
// that near-equal deltas cancel identically.
inline double oracle_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// M sample values in, M-1 alphas/weights out; composites use the first M-1
/// samples. alpha_k = max((delta(s_k) - delta(s_{k+1})) / delta(s_k), 0) with
/// the same 1e-9 denominator guard as the implementation contract,
/// w_i = prod_{k<i}(1 - alpha_k) * alpha_i, and raw weighted sums.
inline OracleResult oracle_composite(const std::vector<double>& sdf,
                                     const std::vector<double>& depth,
                                     const std::vector<std::array<double, 3>>& rgb,
                                     const std::vector<double>& density, double beta) {
  const std::size_t m = sdf.size();
  OracleResult out;
  if (m < 2) return out;

  std::vector<double> delta(m);
  for (std::size_t i = 0; i < m; ++i) delta[i] = oracle_sigmoid(sdf[i] * beta);

  out.alphas.resize(m - 1);
  for (std::size_t k = 0; k + 1 < m; ++k) {
    const double denom = delta[k] > 1e-9 ? delta[k] : 1e-9;
    const double raw = (delta[k] - delta[k + 1]) / denom;
    out.alphas[k] = raw > 0.0 ? raw : 0.0;
  }

  out.weights.resize(m - 1);
  double transmittance = 1.0;
  for (std::size_t i = 0; i + 1 < m; ++i) {
    out.weights[i] = transmittance * out.alphas[i];
    transmittance *= 1.0 - out.alphas[i];
  }

  for (std::size_t i = 0; i + 1 < m; ++i) {
    out.depth += out.weights[i] * depth[i];
    out.density += out.weights[i] * density[i];
    for (int c = 0; c < 3; ++c) out.color[static_cast<std::size_t>(c)] += out.weights[i] * rgb[i][static_cast<std::size_t>(c)];
    out.accumulation += out.weights[i];
  }
  return out;
}

}  // namespace volcount_test
