#pragma once

// Relative superpoint aggregation: each superpoint feature is the columnwise
// max over its ball-query neighbours' features, each fused with an MLP
// encoding of the centre-to-neighbour offset.

#include <functional>

#include "mcln/geometry.hpp"
#include "mcln/nn.hpp"

namespace mcln {

enum class Fusion { plus, mul };

struct RsaState {
  Mlp relative;  // 3 -> d -> d
  Fusion fusion = Fusion::plus;

  static RsaState init(Index d, Fusion fusion, Rng& rng);
  // Zero relative MLP: r == 0, i.e. plain ball-query max pooling.
  static RsaState plain(Index d, Fusion fusion);
  void for_each_param(const std::function<void(Param&)>& f) { relative.for_each_param(f); }
};

// rows x 3 raw offsets (meters) -> rows x d.
Var encode_relative(Tape& tape, RsaState& rsa, const Matrix& offsets);

// K x d neighbour features and K x d relative encodings -> 1 x d.
//   plus: max_k (r_k + v_k)
//   mul:  max_k (r_k * v_k + v_k)
Var aggregate_superpoint(const Var& neighbor_features, const Var& relative, Fusion fusion);

// V' (n x d) -> V_s (m x d).
Var rsa_forward(Tape& tape, RsaState& rsa, const Var& visual, const NeighborTable& neighbors);

}  // namespace mcln
