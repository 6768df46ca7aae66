#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "mcln/matrix.hpp"

namespace mcln {

using Vec3 = Eigen::Vector3d;
using BinaryMask = std::vector<std::uint8_t>;

struct PointCloud {
  Matrix positions;  // n x 3, meters
  Matrix colors;     // n x 3, [0,1]

  Index size() const { return positions.rows(); }
  Vec3 position(Index i) const { return positions.row(i).transpose(); }
  void validate() const;
  // n x 6 rows of x,y,z,r,g,b
  Matrix features() const;
};

struct SuperpointPartition {
  std::vector<Index> assignment;             // per point, in [0, m)
  Matrix centers;                            // m x 3 member means
  std::vector<std::vector<Index>> members;   // per superpoint, ascending point index

  Index count() const { return centers.rows(); }
  Vec3 center(Index s) const { return centers.row(s).transpose(); }

  // Validates dense non-empty ids and computes centers and member lists.
  static SuperpointPartition from_assignment(const PointCloud& cloud, std::vector<Index> assignment);
};

struct Aabb {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();

  Vec3 min() const { return center - 0.5 * size; }
  Vec3 max() const { return center + 0.5 * size; }
  double volume() const { return size.prod(); }
  // Closed box: boundary points are inside.
  bool contains(const Vec3& p) const;
  void validate() const;
};

struct SuperpointMask {
  std::vector<double> logits;

  std::vector<double> probabilities() const;
  BinaryMask binary(double tau) const;
};

struct NeighborTable {
  Index k = 0;
  std::vector<Index> indices;         // m*k point indices, superpoint-major
  Matrix offsets;                     // m*k x 3, center minus neighbor position
  std::vector<std::uint8_t> fallback; // per superpoint

  Index superpoints() const { return k == 0 ? 0 : static_cast<Index>(indices.size()) / k; }
  Index neighbor(Index s, Index j) const { return indices[static_cast<std::size_t>(s * k + j)]; }
};

// Up to k points within radius r of each superpoint center, nearest first
// (ties by point index). Short lists repeat their nearest point; an empty
// neighbourhood falls back to the globally nearest point with the flag set.
NeighborTable ball_query(const SuperpointPartition& partition, const PointCloud& cloud,
                         Index k = 2, double radius = 0.2);

double box_iou_3d(const Aabb& a, const Aabb& b);
double giou_3d(const Aabb& a, const Aabb& b);

// |pred & gt| / |pred | gt|; 1 when both empty.
double mask_iou(const BinaryMask& pred, const BinaryMask& gt);

BinaryMask superpoint_mask_to_point_mask(const SuperpointPartition& partition,
                                         const BinaryMask& superpoint_mask);
BinaryMask box_to_superpoint_mask(const Aabb& box, const SuperpointPartition& partition);

// Buckets points by floor(position / cell); ids are assigned in order of first
// appearance.
SuperpointPartition grid_superpoints(const PointCloud& cloud, double cell = 0.25);

std::size_t popcount(const BinaryMask& mask);

}  // namespace mcln
