#pragma once

// Tape-free forward kernels. The tape ops in tape.hpp call these for their
// forward pass; they are also usable on their own for inference.

#include <optional>
#include <vector>

#include "mcln/matrix.hpp"

namespace mcln::kernels {

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix sigmoid(const Matrix& x);
double sigmoid(double x);
Matrix relu(const Matrix& x);
Matrix softplus(const Matrix& x);
double softplus(double x);
Matrix elem_add(const Matrix& a, const Matrix& b);
Matrix elem_mul(const Matrix& a, const Matrix& b);

// Numerically stable softmax of each row. The optional additive mask holds 0 or
// kMasked per entry. A row whose every entry is masked is treated as unmasked.
Matrix row_softmax(const Matrix& x, const std::optional<Matrix>& additive_mask = std::nullopt);

struct MaxPoolResult {
  Matrix row;                 // 1 x width
  std::vector<Index> argmax;  // winning stack index per column
};

// Columnwise maximum over a stack of equal-width rows; ties go to the lowest index.
MaxPoolResult maxpool_rows(const std::vector<Matrix>& stack);

// Columnwise maximum over consecutive groups of `group` rows of x.
// Returns (rows/group) x cols and the absolute winning row per output entry.
Matrix group_max_rows(const Matrix& x, Index group, std::vector<Index>* argmax_rows = nullptr);

}  // namespace mcln::kernels
