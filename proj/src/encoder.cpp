#include "mcln/encoder.hpp"

#include <numeric>

namespace mcln {

EncoderState EncoderState::init(const EncoderConfig& cfg, Rng& rng) {
  EncoderState e;
  e.cfg = cfg;
  e.point_mlp = Mlp::init("encoder.points",
                          MlpSpec{{6, cfg.d, cfg.d}, {Activation::relu, Activation::identity}}, rng);
  e.token_table = uniform_param("encoder.tokens", cfg.vocab, cfg.d, 1, rng);
  e.token_positions = uniform_param("encoder.token_positions", cfg.max_tokens, cfg.d, cfg.d, rng);
  if (!cfg.text_positions) e.token_positions.value.setZero();
  for (Index i = 0; i < cfg.layers; ++i) {
    const std::string p = "encoder.layer" + std::to_string(i);
    EncoderLayer layer;
    layer.visual_self = AttentionParams::init(p + ".visual_self", cfg.d, cfg.heads, true, rng);
    layer.text_self = AttentionParams::init(p + ".text_self", cfg.d, cfg.heads, true, rng);
    layer.visual_cross = AttentionParams::init(p + ".visual_cross", cfg.d, cfg.heads, true, rng);
    layer.text_cross = AttentionParams::init(p + ".text_cross", cfg.d, cfg.heads, true, rng);
    layer.visual_ffn = Ffn::init(p + ".visual_ffn", cfg.d, cfg.ffn_hidden, rng);
    layer.text_ffn = Ffn::init(p + ".text_ffn", cfg.d, cfg.ffn_hidden, rng);
    e.layers.push_back(std::move(layer));
  }
  e.object_queries = uniform_param("encoder.object_queries", cfg.queries, cfg.d, 1, rng);
  e.query_cross = AttentionParams::init("encoder.query_cross", cfg.d, cfg.heads, true, rng);
  return e;
}

void EncoderState::for_each_param(const std::function<void(Param&)>& f) {
  point_mlp.for_each_param(f);
  f(token_table);
  if (cfg.text_positions) f(token_positions);
  for (auto& layer : layers) {
    layer.visual_self.for_each_param(f);
    layer.text_self.for_each_param(f);
    layer.visual_cross.for_each_param(f);
    layer.text_cross.for_each_param(f);
    layer.visual_ffn.for_each_param(f);
    layer.text_ffn.for_each_param(f);
  }
  f(object_queries);
  query_cross.for_each_param(f);
}

Var encode_points(Tape& tape, EncoderState& enc, const Matrix& points) {
  if (points.rows() < 1) throw PreconditionError("encode_points: no points");
  if (points.cols() != 6) throw DimensionError("encode_points: expected n x 6, got " + shape_str(points));
  return mlp_forward(tape, enc.point_mlp, tape.constant(points));
}

Var encode_text(Tape& tape, EncoderState& enc, const std::vector<int>& tokens) {
  if (tokens.empty()) throw PreconditionError("encode_text: empty expression");
  if (static_cast<Index>(tokens.size()) > enc.cfg.max_tokens) {
    throw PreconditionError("encode_text: " + std::to_string(tokens.size()) +
                            " tokens exceed max_tokens " + std::to_string(enc.cfg.max_tokens));
  }
  std::vector<Index> ids;
  for (int t : tokens) {
    if (t < 0 || t >= enc.cfg.vocab) throw VocabularyError("unknown token id " + std::to_string(t));
    ids.push_back(t);
  }
  const Var rows = gather_rows(tape.param(enc.token_table), ids);
  if (!enc.cfg.text_positions) return rows;
  std::vector<Index> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), Index{0});
  return add(rows, gather_rows(tape.param(enc.token_positions), positions));
}

CrossModalOutput cross_modal_encode(Tape& tape, EncoderState& enc, const Var& visual,
                                    const Var& text) {
  if (visual.cols() != enc.cfg.d || text.cols() != enc.cfg.d) {
    throw DimensionError("cross_modal_encode: feature width mismatch");
  }
  Var v = visual;
  Var t = text;
  for (auto& layer : enc.layers) {
    v = add(v, attention(tape, layer.visual_self, v, v));
    t = add(t, attention(tape, layer.text_self, t, t));
    const Var v_cross = attention(tape, layer.visual_cross, v, t);
    const Var t_cross = attention(tape, layer.text_cross, t, v);
    v = add(v, v_cross);
    t = add(t, t_cross);
    v = add(v, ffn_forward(tape, layer.visual_ffn, v));
    t = add(t, ffn_forward(tape, layer.text_ffn, t));
  }
  const Var o0 = tape.param(enc.object_queries);
  const Var o = add(o0, attention(tape, enc.query_cross, o0, v));
  return CrossModalOutput{v, t, o};
}

}  // namespace mcln
