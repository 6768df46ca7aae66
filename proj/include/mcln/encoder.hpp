#pragma once

// Stand-in visual/text backbones and the cross-modal encoder.
//
// Points are embedded independently by a per-point MLP over (x,y,z,r,g,b);
// tokens by a lookup table plus a learned positional row. E encoder layers
// then mix the two modalities, and k learned object queries read the refined
// visual tokens once.

#include <functional>
#include <vector>

#include "mcln/nn.hpp"

namespace mcln {

struct EncoderConfig {
  Index d = 32;
  Index heads = 1;
  Index layers = 2;
  Index queries = 8;
  Index vocab = 32;
  Index max_tokens = 12;
  Index ffn_hidden = 64;
  bool text_positions = true;
};

struct EncoderLayer {
  AttentionParams visual_self, text_self, visual_cross, text_cross;
  Ffn visual_ffn, text_ffn;
};

struct EncoderState {
  EncoderConfig cfg;
  Mlp point_mlp;        // 6 -> d -> d
  Param token_table;    // vocab x d
  Param token_positions;  // max_tokens x d
  std::vector<EncoderLayer> layers;
  Param object_queries;   // k x d
  AttentionParams query_cross;

  static EncoderState init(const EncoderConfig& cfg, Rng& rng);
  void for_each_param(const std::function<void(Param&)>& f);
};

// n x 6 point features -> n x d visual tokens.
Var encode_points(Tape& tape, EncoderState& enc, const Matrix& points);

// Token ids -> l x d text tokens. Throws VocabularyError on an unknown id and
// PreconditionError when the expression exceeds max_tokens.
Var encode_text(Tape& tape, EncoderState& enc, const std::vector<int>& tokens);

struct CrossModalOutput {
  Var visual;   // V', n x d
  Var text;     // T', l x d
  Var queries;  // O, k x d
};

CrossModalOutput cross_modal_encode(Tape& tape, EncoderState& enc, const Var& visual,
                                    const Var& text);

}  // namespace mcln
