#include "mcln/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include "mcln/kernels.hpp"

namespace mcln {

void PointCloud::validate() const {
  if (positions.rows() < 1) throw PreconditionError("PointCloud: at least one point required");
  if (positions.cols() != 3 || colors.cols() != 3 || colors.rows() != positions.rows()) {
    throw DimensionError("PointCloud: positions " + shape_str(positions) + ", colors " +
                         shape_str(colors));
  }
  if (!positions.allFinite()) throw PreconditionError("PointCloud: non-finite coordinate");
}

Matrix PointCloud::features() const {
  Matrix out(size(), 6);
  out.leftCols(3) = positions;
  out.rightCols(3) = colors;
  return out;
}

SuperpointPartition SuperpointPartition::from_assignment(const PointCloud& cloud,
                                                         std::vector<Index> assignment) {
  if (static_cast<Index>(assignment.size()) != cloud.size()) {
    throw DimensionError("superpoint assignment has " + std::to_string(assignment.size()) +
                         " entries for " + std::to_string(cloud.size()) + " points");
  }
  Index m = 0;
  for (Index id : assignment) {
    if (id < 0) throw DataConsistencyError("negative superpoint id");
    m = std::max(m, id + 1);
  }
  SuperpointPartition p;
  p.members.assign(static_cast<std::size_t>(m), {});
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    p.members[static_cast<std::size_t>(assignment[i])].push_back(static_cast<Index>(i));
  }
  p.centers = Matrix::Zero(m, 3);
  for (Index s = 0; s < m; ++s) {
    const auto& mem = p.members[static_cast<std::size_t>(s)];
    if (mem.empty()) {
      throw DataConsistencyError("superpoint " + std::to_string(s) + " has no points");
    }
    for (Index i : mem) p.centers.row(s) += cloud.positions.row(i);
    p.centers.row(s) /= static_cast<double>(mem.size());
  }
  p.assignment = std::move(assignment);
  return p;
}

bool Aabb::contains(const Vec3& p) const {
  const Vec3 lo = min(), hi = max();
  return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
}

void Aabb::validate() const {
  if (!center.allFinite() || !size.allFinite() || (size.array() <= 0.0).any()) {
    throw PreconditionError("Aabb: sizes must be positive and finite");
  }
}

std::vector<double> SuperpointMask::probabilities() const {
  std::vector<double> out(logits.size());
  std::transform(logits.begin(), logits.end(), out.begin(),
                 [](double v) { return kernels::sigmoid(v); });
  return out;
}

BinaryMask SuperpointMask::binary(double tau) const {
  BinaryMask out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = kernels::sigmoid(logits[i]) >= tau;
  return out;
}

NeighborTable ball_query(const SuperpointPartition& partition, const PointCloud& cloud, Index k,
                         double radius) {
  if (k < 1) throw PreconditionError("ball_query: K must be >= 1");
  if (!(radius > 0.0)) throw PreconditionError("ball_query: R must be > 0");
  if (cloud.size() < 1) throw PreconditionError("ball_query: empty cloud");

  const Index m = partition.count();
  NeighborTable table;
  table.k = k;
  table.indices.resize(static_cast<std::size_t>(m * k));
  table.offsets.resize(m * k, 3);
  table.fallback.assign(static_cast<std::size_t>(m), 0);

  const double r2 = radius * radius;
  std::vector<std::pair<double, Index>> inside;
  for (Index s = 0; s < m; ++s) {
    const Vec3 c = partition.center(s);
    inside.clear();
    double best_d2 = std::numeric_limits<double>::infinity();
    Index best = 0;
    for (Index i = 0; i < cloud.size(); ++i) {
      const double d2 = (cloud.position(i) - c).squaredNorm();
      if (d2 <= r2) inside.emplace_back(d2, i);
      if (d2 < best_d2) {
        best_d2 = d2;
        best = i;
      }
    }
    std::sort(inside.begin(), inside.end());
    for (Index j = 0; j < k; ++j) {
      Index chosen;
      if (inside.empty()) {
        chosen = best;
      } else if (j < static_cast<Index>(inside.size())) {
        chosen = inside[static_cast<std::size_t>(j)].second;
      } else {
        chosen = inside.front().second;
      }
      table.indices[static_cast<std::size_t>(s * k + j)] = chosen;
      table.offsets.row(s * k + j) = (c - cloud.position(chosen)).transpose();
    }
    table.fallback[static_cast<std::size_t>(s)] = inside.empty();
  }
  return table;
}

namespace {

double overlap_volume(const Aabb& a, const Aabb& b) {
  const Vec3 lo = a.min().cwiseMax(b.min());
  const Vec3 hi = a.max().cwiseMin(b.max());
  return (hi - lo).cwiseMax(0.0).prod();
}

// Volume from the same corner arithmetic as the overlap, so a box overlaps
// itself exactly.
double corner_volume(const Aabb& a) { return (a.max() - a.min()).prod(); }

}  // namespace

double box_iou_3d(const Aabb& a, const Aabb& b) {
  const double inter = overlap_volume(a, b);
  const double uni = corner_volume(a) + corner_volume(b) - inter;
  return uni > 0.0 ? std::min(1.0, inter / uni) : 0.0;
}

double giou_3d(const Aabb& a, const Aabb& b) {
  const double inter = overlap_volume(a, b);
  const double uni = corner_volume(a) + corner_volume(b) - inter;
  const Vec3 lo = a.min().cwiseMin(b.min());
  const Vec3 hi = a.max().cwiseMax(b.max());
  const double enclosing = (hi - lo).prod();
  return inter / uni - (enclosing - uni) / enclosing;
}

std::size_t popcount(const BinaryMask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto b) { return b != 0; }));
}

double mask_iou(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("mask_iou: lengths " + std::to_string(pred.size()) + " vs " +
                         std::to_string(gt.size()));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += (pred[i] && gt[i]);
    uni += (pred[i] || gt[i]);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask superpoint_mask_to_point_mask(const SuperpointPartition& partition,
                                         const BinaryMask& superpoint_mask) {
  if (static_cast<Index>(superpoint_mask.size()) != partition.count()) {
    throw DimensionError("superpoint mask length " + std::to_string(superpoint_mask.size()) +
                         " for " + std::to_string(partition.count()) + " superpoints");
  }
  BinaryMask out(partition.assignment.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = superpoint_mask[static_cast<std::size_t>(partition.assignment[i])];
  }
  return out;
}

BinaryMask box_to_superpoint_mask(const Aabb& box, const SuperpointPartition& partition) {
  BinaryMask out(static_cast<std::size_t>(partition.count()));
  for (Index s = 0; s < partition.count(); ++s) {
    out[static_cast<std::size_t>(s)] = box.contains(partition.center(s));
  }
  return out;
}

SuperpointPartition grid_superpoints(const PointCloud& cloud, double cell) {
  if (!(cell > 0.0)) throw PreconditionError("grid_superpoints: cell must be > 0");
  using Key = std::tuple<long long, long long, long long>;
  std::map<Key, Index> ids;
  std::vector<Index> assignment(static_cast<std::size_t>(cloud.size()));
  for (Index i = 0; i < cloud.size(); ++i) {
    const Key key{static_cast<long long>(std::floor(cloud.positions(i, 0) / cell)),
                  static_cast<long long>(std::floor(cloud.positions(i, 1) / cell)),
                  static_cast<long long>(std::floor(cloud.positions(i, 2) / cell))};
    auto [it, inserted] = ids.emplace(key, static_cast<Index>(ids.size()));
    assignment[static_cast<std::size_t>(i)] = it->second;
  }
  return SuperpointPartition::from_assignment(cloud, std::move(assignment));
}

}  // namespace mcln
