#pragma once

// Box branch: object queries are refined by L decoder layers, each layer's
// output feeding shared box and grounding-score heads. The winning query also
// produces the superpoint query mask used to align the two branches.

#include <functional>
#include <vector>

#include "mcln/geometry.hpp"
#include "mcln/nn.hpp"

namespace mcln {

struct RecConfig {
  Index d = 32;
  Index heads = 1;
  Index layers = 2;
  Index ffn_hidden = 64;
};

struct RecLayer {
  AttentionParams self_attn, visual_cross, text_cross;
  Ffn ffn;
};

struct RecState {
  RecConfig cfg;
  std::vector<RecLayer> layers;
  Mlp box_head;            // d -> d -> 6 (cx,cy,cz, raw w,h,d)
  Param score_bilinear;    // d x d

  static RecState init(const RecConfig& cfg, Rng& rng);
  void for_each_param(const std::function<void(Param&)>& f);
};

// One k x d query matrix per decoder layer.
std::vector<Var> rec_decode(Tape& tape, RecState& state, const Var& queries, const Var& visual,
                            const Var& text);

inline constexpr double kMinBoxSize = 1e-3;

struct BoxPrediction {
  Var centers;  // k x 3
  Var sizes;    // k x 3, softplus(raw) + kMinBoxSize
  std::vector<Aabb> boxes;
};

BoxPrediction predict_boxes(Tape& tape, RecState& state, const Var& queries);

// k x 1 scores: queries W mean(T')^T.
Var grounding_scores(Tape& tape, RecState& state, const Var& queries, const Var& text);

// Highest score, ties to the lowest index.
Index select_box(const Matrix& scores);

struct QueryMask {
  Var prob;         // 1 x m, M_q
  BinaryMask hard;  // M^_q
};

// With sigmoid_first, M_q = sigmoid(Q_box V_s^T) and M^_q = M_q >= tau.
// Otherwise the raw similarity is thresholded and M_q is its clamp to [0,1].
QueryMask query_mask(Tape& tape, const Var& query, const Var& superpoints, double tau,
                     bool sigmoid_first = true);

// 1 - GIoU between the predicted box (1x3 centre, 1x3 size) and a fixed target.
Var giou_loss(const Var& center, const Var& size, const Aabb& target);

struct RecLossWeights {
  double center = 5.0;
  double size = 1.0;
  double giou = 1.0;
  double score = 0.5;
};

struct RecLossBreakdown {
  Var total;  // (1/L) sum_i L_dec^i
  // Layer-averaged, unweighted components.
  double center = 0.0, size = 0.0, giou = 0.0, score = 0.0;
  Index positive = 0;
};

// Best-IoU query of the last layer's boxes (ties: lowest index).
Index assign_positive(const std::vector<Aabb>& boxes, const Aabb& gt);

struct LayerPrediction {
  BoxPrediction boxes;
  Var scores;
};

RecLossBreakdown rec_losses(Tape& tape, const std::vector<LayerPrediction>& layers,
                            const Aabb& gt, const RecLossWeights& w);

}  // namespace mcln
