#include "mcln/kernels.hpp"

#include <cmath>
#include <string>

namespace mcln::kernels {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a) + " x " + shape_str(b));
  }
  return a * b;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) { return sigmoid(v); });
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

double softplus(double x) {
  // log(1 + e^x) without overflow.
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Matrix softplus(const Matrix& x) {
  return x.unaryExpr([](double v) { return softplus(v); });
}

Matrix elem_add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "elem_add");
  return a + b;
}

Matrix elem_mul(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "elem_mul");
  return a.cwiseProduct(b);
}

Matrix row_softmax(const Matrix& x, const std::optional<Matrix>& additive_mask) {
  if (additive_mask) require_same_shape(x, *additive_mask, "row_softmax mask");
  Matrix out = additive_mask ? Matrix(x + *additive_mask) : x;
  if (additive_mask) {
    for (Index r = 0; r < x.rows(); ++r) {
      // A row with every entry masked falls back to the unmasked logits.
      if (!(out.row(r).array() != kMasked).any()) out.row(r) = x.row(r);
    }
  }
  const Eigen::VectorXd row_max = out.rowwise().maxCoeff();
  out.colwise() -= row_max;
  // Vectorized exp clamps its argument, so blocked entries are zeroed explicitly.
  out = (out.array() == kMasked).select(0.0, out.array().exp());
  const Eigen::VectorXd totals = out.rowwise().sum();
  out.array().colwise() /= totals.array();
  return out;
}

MaxPoolResult maxpool_rows(const std::vector<Matrix>& stack) {
  if (stack.empty()) throw PreconditionError("maxpool_rows: empty stack");
  const Index width = stack.front().cols();
  MaxPoolResult result{stack.front().row(0), std::vector<Index>(static_cast<std::size_t>(width), 0)};
  for (std::size_t k = 0; k < stack.size(); ++k) {
    if (stack[k].rows() != 1 || stack[k].cols() != width) {
      throw DimensionError("maxpool_rows: row " + std::to_string(k) + " has shape " +
                           shape_str(stack[k]));
    }
  }
  for (std::size_t k = 1; k < stack.size(); ++k) {
    for (Index c = 0; c < width; ++c) {
      if (stack[k](0, c) > result.row(0, c)) {
        result.row(0, c) = stack[k](0, c);
        result.argmax[static_cast<std::size_t>(c)] = static_cast<Index>(k);
      }
    }
  }
  return result;
}

Matrix group_max_rows(const Matrix& x, Index group, std::vector<Index>* argmax_rows) {
  if (group < 1) throw PreconditionError("group_max_rows: group must be >= 1");
  if (x.rows() % group != 0) {
    throw DimensionError("group_max_rows: " + std::to_string(x.rows()) +
                         " rows not divisible by " + std::to_string(group));
  }
  const Index groups = x.rows() / group;
  Matrix out(groups, x.cols());
  if (argmax_rows) argmax_rows->assign(static_cast<std::size_t>(out.size()), 0);
  for (Index g = 0; g < groups; ++g) {
    for (Index c = 0; c < x.cols(); ++c) {
      Index best = g * group;
      for (Index k = 1; k < group; ++k) {
        if (x(g * group + k, c) > x(best, c)) best = g * group + k;
      }
      out(g, c) = x(best, c);
      if (argmax_rows) (*argmax_rows)[static_cast<std::size_t>(g * x.cols() + c)] = best;
    }
  }
  return out;
}

}  // namespace mcln::kernels
