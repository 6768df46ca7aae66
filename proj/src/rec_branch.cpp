#include "mcln/rec_branch.hpp"

#include <cmath>

#include "mcln/kernels.hpp"

namespace mcln {

RecState RecState::init(const RecConfig& cfg, Rng& rng) {
  if (cfg.layers < 1) throw PreconditionError("rec branch: at least one layer required");
  RecState s;
  s.cfg = cfg;
  for (Index i = 0; i < cfg.layers; ++i) {
    const std::string p = "rec.layer" + std::to_string(i);
    RecLayer layer;
    layer.self_attn = AttentionParams::init(p + ".self", cfg.d, cfg.heads, true, rng);
    layer.visual_cross = AttentionParams::init(p + ".visual_cross", cfg.d, cfg.heads, true, rng);
    layer.text_cross = AttentionParams::init(p + ".text_cross", cfg.d, cfg.heads, true, rng);
    layer.ffn = Ffn::init(p + ".ffn", cfg.d, cfg.ffn_hidden, rng);
    s.layers.push_back(std::move(layer));
  }
  s.box_head = Mlp::init("rec.box_head",
                         MlpSpec{{cfg.d, cfg.d, 6}, {Activation::relu, Activation::identity}}, rng);
  s.score_bilinear = uniform_param("rec.score", cfg.d, cfg.d, cfg.d, rng);
  return s;
}

void RecState::for_each_param(const std::function<void(Param&)>& f) {
  for (auto& layer : layers) {
    layer.self_attn.for_each_param(f);
    layer.visual_cross.for_each_param(f);
    layer.text_cross.for_each_param(f);
    layer.ffn.for_each_param(f);
  }
  box_head.for_each_param(f);
  f(score_bilinear);
}

std::vector<Var> rec_decode(Tape& tape, RecState& state, const Var& queries, const Var& visual,
                            const Var& text) {
  std::vector<Var> per_layer;
  Var q = queries;
  for (auto& layer : state.layers) {
    q = add(q, attention(tape, layer.self_attn, q, q));
    q = add(q, attention(tape, layer.visual_cross, q, visual));
    q = add(q, attention(tape, layer.text_cross, q, text));
    q = add(q, ffn_forward(tape, layer.ffn, q));
    per_layer.push_back(q);
  }
  return per_layer;
}

BoxPrediction predict_boxes(Tape& tape, RecState& state, const Var& queries) {
  const Var raw = mlp_forward(tape, state.box_head, queries);
  BoxPrediction out;
  out.centers = slice_cols(raw, 0, 3);
  out.sizes = add_scalar(softplus(slice_cols(raw, 3, 3)), kMinBoxSize);
  const Matrix& c = out.centers.value();
  const Matrix& s = out.sizes.value();
  for (Index i = 0; i < c.rows(); ++i) {
    out.boxes.push_back(Aabb{c.row(i).transpose(), s.row(i).transpose()});
  }
  return out;
}

Var grounding_scores(Tape& tape, RecState& state, const Var& queries, const Var& text) {
  const Var pooled = col_mean(text);  // 1 x d
  return matmul_nt(matmul(queries, tape.param(state.score_bilinear)), pooled);
}

Index select_box(const Matrix& scores) {
  if (scores.size() < 1) throw PreconditionError("select_box: no candidates");
  Index best = 0;
  for (Index i = 1; i < scores.size(); ++i) {
    if (scores.data()[i] > scores.data()[best]) best = i;
  }
  return best;
}

QueryMask query_mask(Tape& tape, const Var& query, const Var& superpoints, double tau,
                     bool sigmoid_first) {
  const Var similarity = matmul_nt(query, superpoints);
  QueryMask out;
  Matrix hard(1, similarity.cols());
  if (sigmoid_first) {
    out.prob = sigmoid(similarity);
    for (Index j = 0; j < hard.cols(); ++j) hard(0, j) = out.prob.value()(0, j) >= tau ? 1.0 : 0.0;
  } else {
    // clamp(x, 0, 1) = x - relu(x - 1) + relu(-x) keeps a gradient inside the box.
    const Var upper = relu(add_scalar(similarity, -1.0));
    const Var lower = relu(scale(similarity, -1.0));
    out.prob = add(sub(similarity, upper), lower);
    for (Index j = 0; j < hard.cols(); ++j) {
      hard(0, j) = similarity.value()(0, j) >= tau ? 1.0 : 0.0;
    }
  }
  hard = tape.freeze(std::move(hard));
  out.hard.resize(static_cast<std::size_t>(hard.cols()));
  for (Index j = 0; j < hard.cols(); ++j) out.hard[static_cast<std::size_t>(j)] = hard(0, j) > 0.5;
  return out;
}

Var giou_loss(const Var& center, const Var& size, const Aabb& target) {
  Tape& tape = center.tape();
  if (center.rows() != 1 || center.cols() != 3 || size.rows() != 1 || size.cols() != 3) {
    throw DimensionError("giou_loss: expected 1x3 centre and size");
  }
  const Eigen::Array3d c = center.value().row(0).transpose().array();
  const Eigen::Array3d s = size.value().row(0).transpose().array();
  const Eigen::Array3d amin = c - 0.5 * s, amax = c + 0.5 * s;
  const Eigen::Array3d bmin = target.min().array(), bmax = target.max().array();

  const Eigen::Array3d hi = amax.min(bmax), lo = amin.max(bmin);
  const Eigen::Array3d overlap = (hi - lo).max(0.0);
  const Eigen::Array3d ehi = amax.max(bmax), elo = amin.min(bmin);
  const Eigen::Array3d extent = ehi - elo;

  const double inter = overlap.prod();
  const double vol_a = s.prod();
  const double uni = vol_a + target.volume() - inter;
  const double enc = extent.prod();
  const double loss = 2.0 - inter / uni - uni / enc;

  // Partial derivatives per axis of overlap/extent w.r.t. centre and size.
  Eigen::Array3d d_inter_dc, d_inter_ds, d_enc_dc, d_enc_ds, d_vol_ds;
  for (int i = 0; i < 3; ++i) {
    double others_o = 1.0, others_e = 1.0, others_s = 1.0;
    for (int j = 0; j < 3; ++j) {
      if (j == i) continue;
      others_o *= overlap(j);
      others_e *= extent(j);
      others_s *= s(j);
    }
    double do_dc = 0.0, do_ds = 0.0;
    if (overlap(i) > 0.0) {
      const double dhi = amax(i) <= bmax(i) ? 1.0 : 0.0;
      const double dlo = amin(i) >= bmin(i) ? 1.0 : 0.0;
      do_dc = dhi - dlo;
      do_ds = 0.5 * (dhi + dlo);
    }
    const double dehi = amax(i) >= bmax(i) ? 1.0 : 0.0;
    const double delo = amin(i) <= bmin(i) ? 1.0 : 0.0;
    d_inter_dc(i) = others_o * do_dc;
    d_inter_ds(i) = others_o * do_ds;
    d_enc_dc(i) = others_e * (dehi - delo);
    d_enc_ds(i) = others_e * 0.5 * (dehi + delo);
    d_vol_ds(i) = others_s;
  }
  // loss = 2 - I/U - U/E with U = V_a + V_b - I
  auto dloss = [&](double d_inter, double d_vol, double d_enc) {
    const double d_uni = d_vol - d_inter;
    return -(d_inter * uni - inter * d_uni) / (uni * uni) - (d_uni * enc - uni * d_enc) / (enc * enc);
  };
  Matrix gc(1, 3), gs(1, 3);
  for (int i = 0; i < 3; ++i) {
    gc(0, i) = dloss(d_inter_dc(i), 0.0, d_enc_dc(i));
    gs(0, i) = dloss(d_inter_ds(i), d_vol_ds(i), d_enc_ds(i));
  }
  const int ic = center.id(), is = size.id();
  const bool needs = tape.requires_grad(center) || tape.requires_grad(size);
  return tape.push(scalar_matrix(loss), needs, [ic, is, gc, gs](Tape& tp, const Matrix& g) {
    tp.accumulate(ic, gc * g(0, 0));
    tp.accumulate(is, gs * g(0, 0));
  });
}

Index assign_positive(const std::vector<Aabb>& boxes, const Aabb& gt) {
  if (boxes.empty()) throw PreconditionError("assign_positive: no boxes");
  Index best = 0;
  double best_iou = box_iou_3d(boxes[0], gt);
  for (std::size_t i = 1; i < boxes.size(); ++i) {
    const double iou = box_iou_3d(boxes[i], gt);
    if (iou > best_iou) {
      best_iou = iou;
      best = static_cast<Index>(i);
    }
  }
  return best;
}

RecLossBreakdown rec_losses(Tape& tape, const std::vector<LayerPrediction>& layers, const Aabb& gt,
                            const RecLossWeights& w) {
  if (layers.empty()) throw PreconditionError("rec_losses: no decoder layers");
  RecLossBreakdown out;
  out.positive = tape.freeze_index(assign_positive(layers.back().boxes.boxes, gt));
  const Var gt_center = tape.constant(gt.center.transpose());
  const Var gt_size = tape.constant(gt.size.transpose());
  const double inv_layers = 1.0 / static_cast<double>(layers.size());

  Var total;
  for (const LayerPrediction& layer : layers) {
    const Var c = gather_rows(layer.boxes.centers, {out.positive});
    const Var s = gather_rows(layer.boxes.sizes, {out.positive});
    const Var l_center = smooth_l1(c, gt_center);
    const Var l_size = smooth_l1(s, gt_size);
    const Var l_giou = giou_loss(c, s, gt);
    const Var l_score = cross_entropy(layer.scores, out.positive);
    out.center += l_center.scalar() * inv_layers;
    out.size += l_size.scalar() * inv_layers;
    out.giou += l_giou.scalar() * inv_layers;
    out.score += l_score.scalar() * inv_layers;
    const Var dec = add(add(scale(l_center, w.center), scale(l_size, w.size)),
                        add(scale(l_giou, w.giou), scale(l_score, w.score)));
    total = total.valid() ? add(total, dec) : dec;
  }
  out.total = scale(total, inv_layers);
  return out;
}

}  // namespace mcln
