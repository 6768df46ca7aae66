#include <doctest.h>

#include "mcln/encoder.hpp"
#include "mcln/kernels.hpp"
#include "mcln/optim.hpp"

using namespace mcln;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.d = 8;
  c.heads = 2;
  c.layers = 2;
  c.queries = 3;
  c.vocab = 16;
  c.max_tokens = 6;
  c.ffn_hidden = 12;
  return c;
}

Matrix random_points(Index n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(n, 6);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

void zero_attention(AttentionParams& a) {
  a.wq.value.setZero();
  a.wk.value.setZero();
  a.wv.value.setZero();
  if (a.has_output()) a.wo.value.setZero();
}

std::vector<Param*> all_params(EncoderState& enc) {
  std::vector<Param*> out;
  enc.for_each_param([&](Param& p) { out.push_back(&p); });
  return out;
}

}  // namespace

TEST_CASE("encode_points") {
  Rng rng(1);
  EncoderState enc = EncoderState::init(small_config(), rng);
  Matrix pts = random_points(5, rng);
  pts.row(3) = pts.row(1);
  Tape tape;
  const Var v = encode_points(tape, enc, pts);
  CHECK(v.rows() == 5);
  CHECK(v.cols() == 8);
  CHECK(v.value().row(3) == v.value().row(1));
  CHECK(v.value().allFinite());

  // Row i depends on point i only.
  Matrix moved = pts;
  moved(0, 0) += 0.5;
  Tape t2;
  const Matrix w = encode_points(t2, enc, moved).value();
  CHECK(w.bottomRows(4) == v.value().bottomRows(4));
  CHECK(w.row(0) != v.value().row(0));

  std::vector<Param*> inputs;
  enc.point_mlp.for_each_param([&](Param& p) { inputs.push_back(&p); });
  CHECK(grad_check([&](Tape& t) { return sum(encode_points(t, enc, pts)); }, inputs).passed);
}

TEST_CASE("encode_text") {
  Rng rng(2);
  EncoderState enc = EncoderState::init(small_config(), rng);
  Tape tape;
  const Matrix t = encode_text(tape, enc, {4, 7, 4}).value();
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 8);
  const Matrix& pos = enc.token_positions.value;
  CHECK(((t.row(0) - pos.row(0)) - (t.row(2) - pos.row(2))).cwiseAbs().maxCoeff() < 1e-15);

  CHECK_THROWS_AS(encode_text(tape, enc, {16}), VocabularyError);
  CHECK_THROWS_AS(encode_text(tape, enc, {-1}), VocabularyError);
  CHECK_THROWS_AS(encode_text(tape, enc, {1, 2, 3, 4, 5, 6, 7}), PreconditionError);

  SUBCASE("gradient reaches used rows only") {
    Tape g;
    g.backward(sum(encode_text(g, enc, {4, 7, 4})));
    g.flush_param_grads();
    for (Index r = 0; r < 16; ++r) {
      const double mag = enc.token_table.grad.row(r).cwiseAbs().sum();
      if (r == 4) CHECK(enc.token_table.grad(4, 0) == 2.0);
      else if (r == 7) CHECK(enc.token_table.grad(7, 0) == 1.0);
      else CHECK(mag == 0.0);
    }
    enc.token_table.zero_grad();
    enc.token_positions.zero_grad();
    const Matrix weights = Matrix::Random(3, 8);
    CHECK(grad_check(
              [&](Tape& tp) { return sum(mul(encode_text(tp, enc, {4, 7, 4}), tp.constant(weights))); },
              {&enc.token_table, &enc.token_positions})
              .passed);
  }
}

TEST_CASE("cross_modal_encode") {
  Rng rng(3);
  EncoderState enc = EncoderState::init(small_config(), rng);
  const Matrix pts = random_points(4, rng);
  Tape tape;
  const Var v = encode_points(tape, enc, pts);
  const Var t = encode_text(tape, enc, {1, 8, 12});
  const CrossModalOutput out = cross_modal_encode(tape, enc, v, t);
  CHECK(out.visual.rows() == 4);
  CHECK(out.visual.cols() == 8);
  CHECK(out.text.rows() == 3);
  CHECK(out.queries.rows() == 3);
  CHECK(out.queries.cols() == 8);

  SUBCASE("zero attention leaves only the FFN residual path") {
    for (auto& layer : enc.layers) {
      zero_attention(layer.visual_self);
      zero_attention(layer.text_self);
      zero_attention(layer.visual_cross);
      zero_attention(layer.text_cross);
    }
    Tape z;
    const Var v0 = z.constant(v.value()), t0 = z.constant(t.value());
    const CrossModalOutput o = cross_modal_encode(z, enc, v0, t0);
    Matrix ev = v.value(), et = t.value();
    for (auto& layer : enc.layers) {
      Tape f;
      ev = ev + ffn_forward(f, layer.visual_ffn, f.constant(ev)).value();
      et = et + ffn_forward(f, layer.text_ffn, f.constant(et)).value();
    }
    CHECK((o.visual.value() - ev).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((o.text.value() - et).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("end-to-end gradient on a 4-point 3-token input") {
    const Matrix w = Matrix::Random(4, 8);
    const auto rep = grad_check(
        [&](Tape& tp) {
          const auto o = cross_modal_encode(tp, enc, encode_points(tp, enc, pts), encode_text(tp, enc, {1, 8, 12}));
          return add(add(sum(mul(o.visual, tp.constant(w))), sum(o.text)), sum(sigmoid(o.queries)));
        },
        all_params(enc));
    INFO(rep.worst_entry);
    CHECK(rep.passed);
  }
}

TEST_CASE("permuting points permutes the visual tokens") {
  Rng rng(4);
  EncoderConfig cfg = small_config();
  EncoderState enc = EncoderState::init(cfg, rng);
  const Matrix pts = random_points(6, rng);
  const std::vector<Index> perm{3, 0, 5, 1, 4, 2};
  Matrix permuted(6, 6);
  for (Index i = 0; i < 6; ++i) permuted.row(i) = pts.row(perm[static_cast<std::size_t>(i)]);
  Tape a, b;
  const auto oa = cross_modal_encode(a, enc, encode_points(a, enc, pts), encode_text(a, enc, {2, 9}));
  const auto ob = cross_modal_encode(b, enc, encode_points(b, enc, permuted), encode_text(b, enc, {2, 9}));
  for (Index i = 0; i < 6; ++i)
    CHECK((ob.visual.value().row(i) - oa.visual.value().row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((oa.text.value() - ob.text.value()).cwiseAbs().maxCoeff() < 1e-12);
}
