#pragma once

// Building blocks shared by the encoder and both decoders: MLPs, multi-head
// attention and the position-wise feed-forward block.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mcln/param.hpp"
#include "mcln/tape.hpp"

namespace mcln {

enum class Activation { relu, identity };

struct MlpSpec {
  // widths.front() is the input width; one activation per affine layer.
  std::vector<Index> widths;
  std::vector<Activation> activations;

  Index layers() const { return static_cast<Index>(activations.size()); }
  void validate() const;
};

struct Mlp {
  MlpSpec spec;
  std::vector<Param> weights;  // widths[i] x widths[i+1]
  std::vector<Param> biases;   // 1 x widths[i+1]

  static Mlp init(const std::string& name, MlpSpec spec, Rng& rng);
  // Same shapes as init(), every entry zero.
  static Mlp zeros(const std::string& name, MlpSpec spec);

  void for_each_param(const std::function<void(Param&)>& f);
};

Var mlp_forward(Tape& tape, Mlp& mlp, const Var& x);

struct AttentionParams {
  Param wq, wk, wv;
  Param wo;  // empty (0x0) when the block has no output projection
  Index heads = 1;

  // d x d projections; with_output adds the d x d output projection.
  static AttentionParams init(const std::string& name, Index d, Index heads, bool with_output,
                              Rng& rng);
  bool has_output() const { return wo.value.size() > 0; }
  void for_each_param(const std::function<void(Param&)>& f);
};

// softmax(Q K^T / sqrt(d_head) + mask) V per head, heads concatenated, then the
// optional output projection. The mask, when given, is rows(queries) x rows(context).
Var attention(Tape& tape, AttentionParams& p, const Var& queries, const Var& context,
              const std::optional<Matrix>& mask = std::nullopt);

struct Ffn {
  Param w1, b1, w2, b2;

  static Ffn init(const std::string& name, Index d, Index hidden, Rng& rng);
  void for_each_param(const std::function<void(Param&)>& f);
};

// relu(x W1 + b1) W2 + b2
Var ffn_forward(Tape& tape, Ffn& f, const Var& x);

}  // namespace mcln
