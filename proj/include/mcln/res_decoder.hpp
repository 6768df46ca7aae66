#pragma once

// Segmentation branch: textual queries repeatedly cross-attend to superpoint
// features under a similarity-derived attention mask; the best-scoring token
// then yields the superpoint mask logits and a confidence score.

#include <functional>
#include <vector>

#include "mcln/nn.hpp"

namespace mcln {

struct ResDecoderConfig {
  Index d = 32;
  Index heads = 1;
  Index layers = 2;
  Index ffn_hidden = 64;
  double tau = 0.5;
};

struct ResLayer {
  AttentionParams attn;  // phi_Q, phi_K, phi_V; no output projection
  Ffn ffn;
};

struct ResDecoderState {
  ResDecoderConfig cfg;
  std::vector<ResLayer> layers;
  Mlp confidence;  // d -> d -> 1

  static ResDecoderState init(const ResDecoderConfig& cfg, Rng& rng);
  void for_each_param(const std::function<void(Param&)>& f);
};

struct AttentionMask {
  Matrix similarity;  // l x m, S x V_s^T
  Matrix mask;        // l x m, 0 or kMasked
  Index fallback_rows = 0;
};

// A(i,j) = 0 when sigmoid(M(i,j)) >= tau, else blocked. Rows with nothing
// open are reopened entirely and counted in fallback_rows.
AttentionMask attention_mask(const Matrix& queries, const Matrix& superpoints, double tau);

// One masked cross-attention step with residual, then a residual FFN.
Var decoder_layer(Tape& tape, ResLayer& layer, const Var& queries, const Var& superpoints,
                  const Matrix& mask);

struct TokenChoice {
  Var feature;  // 1 x d
  Index index = 0;
};

// Token whose summed similarity to all superpoints is largest (ties: lowest).
TokenChoice select_highest_token(Tape& tape, const Var& queries, const Var& superpoints);

// 1 x m logits S_h V_s^T.
Var predict_mask(const Var& token, const Var& superpoints);

// sigmoid(MLP(S_h)), 1 x 1.
Var confidence(Tape& tape, ResDecoderState& state, const Var& token);

struct ResOutput {
  Var mask_logits;  // M_p logits
  Var mask_prob;    // sigmoid(M_p)
  Var mu;           // confidence
  Index token = 0;
  Index fallback_rows = 0;
};

ResOutput res_decode(Tape& tape, ResDecoderState& state, const Var& initial_queries,
                     const Var& superpoints);

}  // namespace mcln
