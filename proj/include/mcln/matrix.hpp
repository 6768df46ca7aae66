#pragma once

#include <Eigen/Core>

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mcln/errors.hpp"

namespace mcln {

using Index = Eigen::Index;

// Dense row-major double matrix. Scalars travel as 1x1 matrices.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// Additive attention-mask value for a blocked position.
inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

inline Matrix scalar_matrix(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

inline Matrix row_from(std::span<const double> values) {
  Matrix m(1, static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) m(0, static_cast<Index>(i)) = values[i];
  return m;
}

inline std::vector<double> to_vector(const Matrix& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace mcln
