#include "mcln/rsa.hpp"

namespace mcln {

namespace {
MlpSpec relative_spec(Index d) { return MlpSpec{{3, d, d}, {Activation::relu, Activation::identity}}; }
}  // namespace

RsaState RsaState::init(Index d, Fusion fusion, Rng& rng) {
  return RsaState{Mlp::init("rsa.relative", relative_spec(d), rng), fusion};
}

RsaState RsaState::plain(Index d, Fusion fusion) {
  return RsaState{Mlp::zeros("rsa.relative", relative_spec(d)), fusion};
}

Var encode_relative(Tape& tape, RsaState& rsa, const Matrix& offsets) {
  if (offsets.cols() != 3) throw DimensionError("encode_relative: offsets must be rows x 3");
  return mlp_forward(tape, rsa.relative, tape.constant(offsets));
}

namespace {

Var fuse(const Var& features, const Var& relative, Fusion fusion) {
  if (fusion == Fusion::plus) return add(relative, features);
  return add(mul(relative, features), features);
}

}  // namespace

Var aggregate_superpoint(const Var& neighbor_features, const Var& relative, Fusion fusion) {
  if (neighbor_features.rows() < 1) throw PreconditionError("aggregate_superpoint: K must be >= 1");
  return group_max_rows(fuse(neighbor_features, relative, fusion), neighbor_features.rows());
}

Var rsa_forward(Tape& tape, RsaState& rsa, const Var& visual, const NeighborTable& neighbors) {
  if (neighbors.k < 1) throw PreconditionError("rsa_forward: empty neighbour table");
  const Var gathered = gather_rows(visual, neighbors.indices);
  const Var relative = encode_relative(tape, rsa, neighbors.offsets);
  return group_max_rows(fuse(gathered, relative, rsa.fusion), neighbors.k);
}

}  // namespace mcln
