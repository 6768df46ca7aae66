#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the library code they check.

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "mcln/geometry.hpp"

namespace oracle {

inline double softmax_entry(const std::vector<double>& row, std::size_t j) {
  double total = 0.0;
  for (double v : row) total += std::exp(v);
  return std::exp(row[j]) / total;
}

// Volume IoU estimated by uniform sampling of the joint bounding region.
inline double monte_carlo_iou(const mcln::Aabb& a, const mcln::Aabb& b, int samples, std::mt19937_64& rng) {
  const mcln::Vec3 lo = a.min().cwiseMin(b.min()), hi = a.max().cwiseMax(b.max());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  long in_a = 0, in_b = 0, both = 0;
  for (int i = 0; i < samples; ++i) {
    mcln::Vec3 p;
    for (int k = 0; k < 3; ++k) p(k) = lo(k) + u(rng) * (hi(k) - lo(k));
    const bool ia = (p.array() >= a.min().array()).all() && (p.array() <= a.max().array()).all();
    const bool ib = (p.array() >= b.min().array()).all() && (p.array() <= b.max().array()).all();
    in_a += ia;
    in_b += ib;
    both += ia && ib;
  }
  const long uni = in_a + in_b - both;
  return uni == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(uni);
}

// Closed-form per-axis overlap product, written independently of the library.
inline double scalar_iou(const double ca[3], const double sa[3], const double cb[3], const double sb[3]) {
  double inter = 1.0, va = 1.0, vb = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(ca[k] - sa[k] / 2, cb[k] - sb[k] / 2);
    const double hi = std::min(ca[k] + sa[k] / 2, cb[k] + sb[k] / 2);
    inter *= std::max(0.0, hi - lo);
    va *= sa[k];
    vb *= sb[k];
  }
  return inter / (va + vb - inter);
}

inline double scalar_giou(const double ca[3], const double sa[3], const double cb[3], const double sb[3]) {
  double inter = 1.0, va = 1.0, vb = 1.0, enc = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double alo = ca[k] - sa[k] / 2, ahi = ca[k] + sa[k] / 2;
    const double blo = cb[k] - sb[k] / 2, bhi = cb[k] + sb[k] / 2;
    inter *= std::max(0.0, std::min(ahi, bhi) - std::max(alo, blo));
    enc *= std::max(ahi, bhi) - std::min(alo, blo);
    va *= sa[k];
    vb *= sb[k];
  }
  const double uni = va + vb - inter;
  return inter / uni - (enc - uni) / enc;
}

struct BruteNeighbors {
  std::vector<mcln::Index> indices;
  bool fallback = false;
};

// Sort every point by (distance^2, index), keep those within r, cap at k,
// pad with the nearest kept point, or fall back to the global nearest.
inline BruteNeighbors brute_ball_query(const mcln::Vec3& center, const mcln::Matrix& positions, mcln::Index k,
                                       double r) {
  std::vector<std::pair<double, mcln::Index>> all;
  for (mcln::Index i = 0; i < positions.rows(); ++i) {
    const double d2 = (positions.row(i).transpose() - center).squaredNorm();
    all.emplace_back(d2, i);
  }
  std::sort(all.begin(), all.end());
  BruteNeighbors out;
  for (const auto& [d2, i] : all) {
    if (d2 <= r * r && static_cast<mcln::Index>(out.indices.size()) < k) out.indices.push_back(i);
  }
  if (out.indices.empty()) {
    out.fallback = true;
    out.indices.push_back(all.front().second);
  }
  while (static_cast<mcln::Index>(out.indices.size()) < k) out.indices.push_back(out.indices.front());
  return out;
}

inline double w_focal(double x) {
  const double pi = 3.14159265358979323846;
  const double sigma2 = 0.1;
  return 2.0 - std::exp(-(x - 0.5) * (x - 0.5) / (2 * sigma2)) / std::sqrt(2 * pi * sigma2);
}

}  // namespace oracle
