#include "mcln/asa.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mcln {

void AsaConfig::validate() const {
  if (!(sigma2 > 0.0)) throw ConfigError("asa: sigma2 must be > 0");
  if (beta1 < 0.0 || beta2 < 0.0 || gamma2 < 0.0 || gamma3 < 0.0) {
    throw ConfigError("asa: loss weights must be >= 0");
  }
  if (!(dice_eps > 0.0)) throw ConfigError("asa: dice epsilon must be > 0");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("asa: tau must be in (0,1)");
}

double w_focal(double mq, const AsaConfig& cfg) {
  const double sigma = std::sqrt(cfg.sigma2);
  const double d = mq - cfg.mu;
  return cfg.b - std::exp(-d * d / (2.0 * cfg.sigma2)) / (std::sqrt(2.0 * std::numbers::pi) * sigma);
}

std::vector<double> w_focal(const std::vector<double>& mq, const AsaConfig& cfg) {
  std::vector<double> out(mq.size());
  std::transform(mq.begin(), mq.end(), out.begin(), [&](double v) { return w_focal(v, cfg); });
  return out;
}

namespace {

struct FocalTerm {
  double value;
  double dp;
};

FocalTerm focal_term(double p_raw, bool positive, double gamma, double alpha) {
  // Outside the clamp the derivative is taken at the clamp boundary, so a
  // saturated wrong prediction still receives a gradient through its sigmoid.
  const double p = std::clamp(p_raw, kFocalClamp, 1.0 - kFocalClamp);
  FocalTerm t{};
  if (positive) {
    const double q = 1.0 - p;
    t.value = -alpha * std::pow(q, gamma) * std::log(p);
    t.dp = alpha * (gamma * std::pow(q, gamma - 1.0) * std::log(p) - std::pow(q, gamma) / p);
  } else {
    const double q = 1.0 - p;
    t.value = -(1.0 - alpha) * std::pow(p, gamma) * std::log(q);
    t.dp = -(1.0 - alpha) * (gamma * std::pow(p, gamma - 1.0) * std::log(q) - std::pow(p, gamma) / q);
  }
  return t;
}

void check_length(const Var& v, std::size_t m, const char* op) {
  if (v.rows() != 1 || static_cast<std::size_t>(v.cols()) != m) {
    throw DimensionError(std::string(op) + ": mask " + shape_str(v.value()) + " vs length " +
                         std::to_string(m));
  }
}

Matrix mask_row(const BinaryMask& mask) {
  Matrix out(1, static_cast<Index>(mask.size()));
  for (std::size_t i = 0; i < mask.size(); ++i) out(0, static_cast<Index>(i)) = mask[i] ? 1.0 : 0.0;
  return out;
}

BinaryMask mask_from_row(const Matrix& row) {
  BinaryMask out(static_cast<std::size_t>(row.cols()));
  for (Index i = 0; i < row.cols(); ++i) out[static_cast<std::size_t>(i)] = row(0, i) > 0.5;
  return out;
}

}  // namespace

double focal_loss(double p, int target, double gamma, double alpha) {
  return focal_term(p, target != 0, gamma, alpha).value;
}

Var focal_loss(const Var& p, const BinaryMask& target, double gamma, double alpha) {
  check_length(p, target.size(), "focal_loss");
  const Index m = p.cols();
  Matrix values(1, m), grads(1, m);
  for (Index i = 0; i < m; ++i) {
    const FocalTerm t = focal_term(p.value()(0, i), target[static_cast<std::size_t>(i)] != 0, gamma, alpha);
    values(0, i) = t.value;
    grads(0, i) = t.dp;
  }
  const int ip = p.id();
  return p.tape().push(std::move(values), p.tape().requires_grad(p),
                       [ip, grads](Tape& tp, const Matrix& g) { tp.accumulate(ip, g.cwiseProduct(grads)); });
}

Var point_weighted_focal(const Var& mp, const BinaryMask& mq_hard, const std::vector<double>& mq,
                         const AsaConfig& cfg, bool adaptive) {
  check_length(mp, mq_hard.size(), "point_weighted_focal");
  if (mq.size() != mq_hard.size()) throw DimensionError("point_weighted_focal: M_q length mismatch");
  Tape& tape = mp.tape();
  Matrix weights = Matrix::Ones(1, mp.cols());
  if (adaptive) {
    for (std::size_t i = 0; i < mq.size(); ++i) weights(0, static_cast<Index>(i)) = w_focal(mq[i], cfg);
  }
  const Var w = tape.constant(tape.freeze(std::move(weights)));
  const Var terms = focal_loss(mp, mq_hard, cfg.focal_gamma, cfg.focal_alpha);
  return mean(mul(w, terms));
}

Var w_focal(const Var& mq, const AsaConfig& cfg) {
  Tape& t = mq.tape();
  const int ix = mq.id();
  const Matrix value = mq.value().unaryExpr([&](double v) { return w_focal(v, cfg); });
  return t.push(value, t.requires_grad(mq), [ix, cfg](Tape& tp, const Matrix& g) {
    const double c = 1.0 / (std::sqrt(2.0 * std::numbers::pi * cfg.sigma2) * cfg.sigma2);
    const Matrix d = tp.value(ix).unaryExpr([&](double v) {
      const double x = v - cfg.mu;
      return c * x * std::exp(-x * x / (2.0 * cfg.sigma2));
    });
    tp.accumulate(ix, g.cwiseProduct(d));
  });
}

Var point_weighted_focal(const Var& mp, const BinaryMask& mq_hard, const Var& mq, const AsaConfig& cfg,
                         bool adaptive) {
  if (!adaptive || !cfg.weight_grad) return point_weighted_focal(mp, mq_hard, to_vector(mq.value()), cfg, adaptive);
  check_length(mp, mq_hard.size(), "point_weighted_focal");
  check_length(mq, mq_hard.size(), "point_weighted_focal");
  return mean(mul(w_focal(mq, cfg), focal_loss(mp, mq_hard, cfg.focal_gamma, cfg.focal_alpha)));
}

double w_dice(const BinaryMask& mq_hard, const Matrix& centers) {
  if (static_cast<Index>(mq_hard.size()) != centers.rows()) {
    throw DimensionError("w_dice: mask length " + std::to_string(mq_hard.size()) + " for " +
                         std::to_string(centers.rows()) + " centres");
  }
  std::vector<Index> selected;
  for (std::size_t i = 0; i < mq_hard.size(); ++i) {
    if (mq_hard[i]) selected.push_back(static_cast<Index>(i));
  }
  if (selected.size() <= 1) return 1.0;
  double total = 0.0;
  for (std::size_t a = 0; a < selected.size(); ++a) {
    for (std::size_t b = a + 1; b < selected.size(); ++b) {
      total += (centers.row(selected[a]) - centers.row(selected[b])).norm();
    }
  }
  const double pairs = 0.5 * static_cast<double>(selected.size()) * static_cast<double>(selected.size() - 1);
  return 1.0 / (1.0 + total / pairs);
}

double dice_loss(const std::vector<double>& p, const BinaryMask& target, double eps) {
  if (p.size() != target.size()) throw DimensionError("dice_loss: length mismatch");
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * (target[i] ? 1.0 : 0.0);
    psum += p[i];
    tsum += target[i] ? 1.0 : 0.0;
  }
  return 1.0 - (2.0 * inter + eps) / (psum + tsum + eps);
}

Var dice_loss(const Var& p, const BinaryMask& target, double eps) {
  check_length(p, target.size(), "dice_loss");
  const Matrix t = mask_row(target);
  const double num = 2.0 * p.value().cwiseProduct(t).sum() + eps;
  const double den = p.value().sum() + t.sum() + eps;
  const int ip = p.id();
  return p.tape().push(scalar_matrix(1.0 - num / den), p.tape().requires_grad(p),
                       [ip, t, num, den](Tape& tp, const Matrix& g) {
                         // d(num/den)/dp_i = (2 t_i den - num) / den^2
                         Matrix d = -((2.0 * den) * t.array() - num) / (den * den);
                         tp.accumulate(ip, d * g(0, 0));
                       });
}

Var mask_weighted_dice(const Var& mp, const BinaryMask& mq_hard, const Matrix& centers,
                       const AsaConfig& cfg, bool adaptive) {
  Tape& tape = mp.tape();
  const double w = adaptive ? w_dice(mq_hard, centers) : 1.0;
  const double kept = tape.freeze(scalar_matrix(w))(0, 0);
  return scale(dice_loss(mp, mq_hard, cfg.dice_eps), kept);
}

Var fuse_masks(const Var& mp, const Var& mq, const Var& mu) {
  // mu * mp + (1 - mu) * mq == mq + mu * (mp - mq)
  return add(mq, mul_scalar_var(sub(mp, mq), mu));
}

std::vector<double> fuse_masks(const std::vector<double>& mp, const std::vector<double>& mq,
                               double mu) {
  if (mp.size() != mq.size()) throw DimensionError("fuse_masks: length mismatch");
  std::vector<double> out(mp.size());
  for (std::size_t i = 0; i < mp.size(); ++i) out[i] = mu * mp[i] + (1.0 - mu) * mq[i];
  return out;
}

ResLossBreakdown res_loss(Tape& tape, const ResLossInputs& in, const AsaConfig& cfg,
                          const ResLossFlags& flags) {
  const std::size_t m = in.gt.size();
  check_length(in.mp, m, "res_loss");
  check_length(in.mq, m, "res_loss");
  check_length(in.mf, m, "res_loss");
  const BinaryMask target = mask_from_row(tape.freeze(mask_row(in.align_target)));

  ResLossBreakdown out;
  auto focal_mean = [&](const Var& p) { return mean(focal_loss(p, in.gt, cfg.focal_gamma, cfg.focal_alpha)); };
  const Var fp = focal_mean(in.mp), fq = focal_mean(in.mq), ff = focal_mean(in.mf);
  const Var dp = dice_loss(in.mp, in.gt, cfg.dice_eps);
  const Var dq = dice_loss(in.mq, in.gt, cfg.dice_eps);
  const Var df = dice_loss(in.mf, in.gt, cfg.dice_eps);
  Var focal_sum = add(add(fp, fq), ff);
  Var dice_sum = add(add(dp, dq), df);
  out.focal_p = fp.scalar();
  out.focal_q = fq.scalar();
  out.focal_fin = ff.scalar();
  out.dice_p = dp.scalar();
  out.dice_q = dq.scalar();
  out.dice_fin = df.scalar();

  if (flags.alignment) {
    const Var point = point_weighted_focal(in.mp, target, in.mq, cfg, flags.adaptive);
    const Var mask = mask_weighted_dice(in.mp, target, in.centers, cfg, flags.adaptive);
    out.focal_point = point.scalar();
    out.dice_mask = mask.scalar();
    focal_sum = add(focal_sum, point);
    dice_sum = add(dice_sum, mask);
  }
  out.total = add(scale(focal_sum, cfg.beta1), scale(dice_sum, cfg.beta2));
  return out;
}

double total_loss(double rec, double res, double kps, const AsaConfig& cfg, long rec_layers) {
  return gamma1_for_layers(rec_layers) * rec + cfg.gamma2 * res + cfg.gamma3 * kps;
}

Var total_loss(const Var& rec, const Var& res, const AsaConfig& cfg, long rec_layers) {
  // The keypoint-sampling term is identically zero here; only its weight is kept.
  return add(scale(rec, gamma1_for_layers(rec_layers)), scale(res, cfg.gamma2));
}

}  // namespace mcln
