#include "mcln/res_decoder.hpp"

#include "mcln/kernels.hpp"

namespace mcln {

ResDecoderState ResDecoderState::init(const ResDecoderConfig& cfg, Rng& rng) {
  if (cfg.layers < 1) throw PreconditionError("res decoder: at least one layer required");
  if (!(cfg.tau > 0.0 && cfg.tau < 1.0)) throw PreconditionError("res decoder: tau must be in (0,1)");
  ResDecoderState s;
  s.cfg = cfg;
  for (Index i = 0; i < cfg.layers; ++i) {
    const std::string p = "res.layer" + std::to_string(i);
    s.layers.push_back(ResLayer{AttentionParams::init(p + ".attn", cfg.d, cfg.heads, false, rng),
                                Ffn::init(p + ".ffn", cfg.d, cfg.ffn_hidden, rng)});
  }
  s.confidence = Mlp::init("res.confidence",
                           MlpSpec{{cfg.d, cfg.d, 1}, {Activation::relu, Activation::identity}}, rng);
  return s;
}

void ResDecoderState::for_each_param(const std::function<void(Param&)>& f) {
  for (auto& layer : layers) {
    layer.attn.for_each_param(f);
    layer.ffn.for_each_param(f);
  }
  confidence.for_each_param(f);
}

AttentionMask attention_mask(const Matrix& queries, const Matrix& superpoints, double tau) {
  if (queries.cols() != superpoints.cols()) {
    throw DimensionError("attention_mask: " + shape_str(queries) + " vs " + shape_str(superpoints));
  }
  AttentionMask out;
  out.similarity = queries * superpoints.transpose();
  out.mask = Matrix::Zero(out.similarity.rows(), out.similarity.cols());
  for (Index i = 0; i < out.similarity.rows(); ++i) {
    bool open = false;
    for (Index j = 0; j < out.similarity.cols(); ++j) {
      if (kernels::sigmoid(out.similarity(i, j)) >= tau) {
        open = true;
      } else {
        out.mask(i, j) = kMasked;
      }
    }
    if (!open) {
      out.mask.row(i).setZero();
      ++out.fallback_rows;
    }
  }
  return out;
}

Var decoder_layer(Tape& tape, ResLayer& layer, const Var& queries, const Var& superpoints,
                  const Matrix& mask) {
  if (mask.rows() != queries.rows() || mask.cols() != superpoints.rows()) {
    throw DimensionError("decoder_layer: mask " + shape_str(mask));
  }
  const Var attended = add(queries, attention(tape, layer.attn, queries, superpoints, mask));
  return add(attended, ffn_forward(tape, layer.ffn, attended));
}

TokenChoice select_highest_token(Tape& tape, const Var& queries, const Var& superpoints) {
  if (queries.rows() < 1) throw PreconditionError("select_highest_token: no tokens");
  // sum_j (S V_s^T)_{ij} == S (sum_j V_s[j])^T
  const Eigen::VectorXd scores =
      queries.value() * superpoints.value().colwise().sum().transpose();
  Index best = 0;
  for (Index i = 1; i < scores.size(); ++i) {
    if (scores(i) > scores(best)) best = i;
  }
  best = tape.freeze_index(best);
  return TokenChoice{gather_rows(queries, {best}), best};
}

Var predict_mask(const Var& token, const Var& superpoints) { return matmul_nt(token, superpoints); }

Var confidence(Tape& tape, ResDecoderState& state, const Var& token) {
  return sigmoid(mlp_forward(tape, state.confidence, token));
}

ResOutput res_decode(Tape& tape, ResDecoderState& state, const Var& initial_queries,
                     const Var& superpoints) {
  ResOutput out;
  Var s = initial_queries;
  for (auto& layer : state.layers) {
    AttentionMask am = attention_mask(s.value(), superpoints.value(), state.cfg.tau);
    out.fallback_rows += am.fallback_rows;
    const Matrix mask = tape.freeze(std::move(am.mask));
    s = decoder_layer(tape, layer, s, superpoints, mask);
  }
  const TokenChoice choice = select_highest_token(tape, s, superpoints);
  out.token = choice.index;
  out.mask_logits = predict_mask(choice.feature, superpoints);
  out.mask_prob = sigmoid(out.mask_logits);
  out.mu = confidence(tape, state, choice.feature);
  return out;
}

}  // namespace mcln
