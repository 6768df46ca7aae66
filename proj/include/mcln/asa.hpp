#pragma once

// Adaptive soft alignment between the segmentation mask M_p and the query
// mask M_q from the box branch, the confidence-gated mask fusion, and the
// composition of the segmentation and total losses.
//
// Quality weights (w_focal, w_dice) and the hard alignment target are passed
// through Tape::freeze and carry no gradient.

#include <vector>

#include "mcln/geometry.hpp"
#include "mcln/tape.hpp"

namespace mcln {

struct AsaConfig {
  // Quality weight for the focal alignment term.
  double b = 2.0;
  double mu = 0.5;
  double sigma2 = 0.1;
  // Segmentation loss weights.
  double beta1 = 10.0;
  double beta2 = 2.0;
  // Total loss weights; gamma1 is 1 / (rec_layers + 1) and is derived, not stored.
  double gamma2 = 1.0;
  double gamma3 = 8.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double dice_eps = 1.0;
  double tau = 0.5;
  // Lets gradients flow through W_focal into M_q; off keeps the weights constant.
  bool weight_grad = false;

  void validate() const;
};

double w_focal(double mq, const AsaConfig& cfg);
std::vector<double> w_focal(const std::vector<double>& mq, const AsaConfig& cfg);
Var w_focal(const Var& mq, const AsaConfig& cfg);

inline constexpr double kFocalClamp = 1e-7;

// -alpha_t (1 - p_t)^gamma log p_t, p clamped to [1e-7, 1 - 1e-7].
double focal_loss(double p, int target, double gamma, double alpha);
// Elementwise focal loss over a 1 x m probability row; returns 1 x m.
Var focal_loss(const Var& p, const BinaryMask& target, double gamma, double alpha);

// sum_i w_focal(M_q^i) * focal(M_p^i, M^_q^i), divided by m. With adaptive off
// every weight is 1.
Var point_weighted_focal(const Var& mp, const BinaryMask& mq_hard, const std::vector<double>& mq,
                         const AsaConfig& cfg, bool adaptive = true);
// Same, with M_q on the tape; the weights carry gradient when cfg.weight_grad.
Var point_weighted_focal(const Var& mp, const BinaryMask& mq_hard, const Var& mq, const AsaConfig& cfg,
                         bool adaptive = true);

// 1 / (1 + mean distance over unordered pairs of selected centres); 1 when
// fewer than two superpoints are selected.
double w_dice(const BinaryMask& mq_hard, const Matrix& centers);

double dice_loss(const std::vector<double>& p, const BinaryMask& target, double eps);
Var dice_loss(const Var& p, const BinaryMask& target, double eps);

Var mask_weighted_dice(const Var& mp, const BinaryMask& mq_hard, const Matrix& centers,
                       const AsaConfig& cfg, bool adaptive = true);

// mu * M_p + (1 - mu) * M_q with mu a 1x1 var.
Var fuse_masks(const Var& mp, const Var& mq, const Var& mu);
std::vector<double> fuse_masks(const std::vector<double>& mp, const std::vector<double>& mq,
                               double mu);

struct ResLossInputs {
  Var mp;                 // M_p probabilities, 1 x m
  Var mq;                 // M_q probabilities, 1 x m
  Var mf;                 // M_f probabilities, 1 x m
  BinaryMask align_target;  // M^_q, or the box-derived mask
  BinaryMask gt;          // superpoint ground truth
  Matrix centers;         // m x 3
};

struct ResLossFlags {
  bool alignment = true;  // off drops the point/mask alignment terms
  bool adaptive = true;   // off uses unit weights in the alignment terms
};

struct ResLossBreakdown {
  Var total;
  double focal_p = 0.0, focal_q = 0.0, focal_fin = 0.0, focal_point = 0.0;
  double dice_p = 0.0, dice_q = 0.0, dice_fin = 0.0, dice_mask = 0.0;
};

// beta1 (F_p + F_q + F_fin + F_point) + beta2 (D_p + D_q + D_fin + D_mask);
// unweighted focal terms are mean-reduced over superpoints.
ResLossBreakdown res_loss(Tape& tape, const ResLossInputs& in, const AsaConfig& cfg,
                          const ResLossFlags& flags = {});

inline double gamma1_for_layers(long rec_layers) { return 1.0 / static_cast<double>(rec_layers + 1); }

double total_loss(double rec, double res, double kps, const AsaConfig& cfg, long rec_layers);
Var total_loss(const Var& rec, const Var& res, const AsaConfig& cfg, long rec_layers);

}  // namespace mcln
