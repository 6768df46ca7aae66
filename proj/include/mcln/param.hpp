#pragma once

#include <random>
#include <string>
#include <utility>

#include "mcln/matrix.hpp"

namespace mcln {

// A trainable matrix with its gradient accumulator.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Param() = default;
  Param(std::string param_name, Matrix initial)
      : name(std::move(param_name)), value(std::move(initial)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using Rng = std::mt19937_64;

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Param uniform_param(std::string name, Index rows, Index cols, Index fan_in, Rng& rng);
Param zero_param(std::string name, Index rows, Index cols);

}  // namespace mcln
