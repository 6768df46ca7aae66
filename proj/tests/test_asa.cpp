#include <doctest.h>

#include <cmath>

#include "mcln/asa.hpp"
#include "mcln/optim.hpp"
#include "oracles.hpp"

using namespace mcln;

namespace {

Matrix row(const std::vector<double>& v) { return row_from(v); }

Matrix centers(const std::vector<Vec3>& pts) {
  Matrix m(static_cast<Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Index>(i)) = pts[i].transpose();
  return m;
}

double bce(double p, int t) { return -(t ? std::log(p) : std::log(1 - p)); }

}  // namespace

TEST_CASE("w_focal") {
  const AsaConfig cfg;
  CHECK(std::abs(w_focal(0.5, cfg) - 0.738434) < 1e-6);
  CHECK(std::abs(w_focal(0.0, cfg) - 1.638555) < 1e-6);
  CHECK(std::abs(w_focal(1.0, cfg) - 1.638555) < 1e-6);
  for (double x = 0.0; x <= 0.5; x += 0.01) {
    CHECK(w_focal(0.5 + x, cfg) == doctest::Approx(w_focal(0.5 - x, cfg)).epsilon(1e-14));
    CHECK(w_focal(0.5 + x, cfg) == doctest::Approx(oracle::w_focal(0.5 + x)).epsilon(1e-14));
  }
  double prev = w_focal(0.5, cfg);
  for (double x = 0.02; x <= 0.5; x += 0.02) {
    const double w = w_focal(0.5 + x, cfg);
    CHECK(w > prev);
    CHECK(w >= 0.738434 - 1e-6);
    CHECK(w <= 1.638555 + 1e-6);
    prev = w;
  }
  const auto v = w_focal(std::vector<double>{0.0, 0.5}, cfg);
  CHECK(v[1] == w_focal(0.5, cfg));
}

TEST_CASE("focal_loss") {
  for (double p : {0.1, 0.4, 0.8})
    for (int t : {0, 1}) CHECK(focal_loss(p, t, 0.0, 0.5) == doctest::Approx(0.5 * bce(p, t)));
  CHECK(focal_loss(0.999, 1, 2.0, 0.25) < 1e-5);
  CHECK(focal_loss(0.5, 1, 2.0, 0.25) == doctest::Approx(0.25 * 0.25 * std::log(2.0)));
  CHECK(std::abs(focal_loss(0.5, 1, 2.0, 0.25) - 0.043322) < 1e-6);
  CHECK(std::isfinite(focal_loss(0.0, 1, 2.0, 0.25)));
  CHECK(std::isfinite(focal_loss(1.0, 0, 2.0, 0.25)));
  CHECK(focal_loss(0.0, 1, 2.0, 0.25) == doctest::Approx(focal_loss(kFocalClamp, 1, 2.0, 0.25)));
}

TEST_CASE("point_weighted_focal") {
  const AsaConfig cfg;
  Tape tape;
  const std::vector<double> mp{0.2, 0.7, 0.55, 0.9};
  const BinaryMask hard{0, 1, 1, 0};
  double plain = 0.0;
  for (std::size_t i = 0; i < 4; ++i) plain += focal_loss(mp[i], hard[i], 2.0, 0.25);
  const double half = point_weighted_focal(tape.constant(row(mp)), hard, {0.5, 0.5, 0.5, 0.5}, cfg).scalar();
  CHECK(half == doctest::Approx(w_focal(0.5, cfg) * plain / 4.0));

  const std::vector<double> mq{0.1, 0.9, 0.6, 0.3};
  double weighted = 0.0;
  for (std::size_t i = 0; i < 4; ++i) weighted += oracle::w_focal(mq[i]) * focal_loss(mp[i], hard[i], 2.0, 0.25);
  CHECK(point_weighted_focal(tape.constant(row(mp)), hard, mq, cfg).scalar() == doctest::Approx(weighted / 4.0));
  CHECK(point_weighted_focal(tape.constant(row(mp)), hard, mq, cfg, false).scalar() == doctest::Approx(plain / 4.0));

  const double confident =
      point_weighted_focal(tape.constant(row({0.001, 0.999, 0.999, 0.001})), hard, mq, cfg).scalar();
  CHECK(confident < 1e-4);
  CHECK(confident >= 0.0);
  CHECK_THROWS_AS(point_weighted_focal(tape.constant(row(mp)), {0, 1}, mq, cfg), DimensionError);

  SUBCASE("weights on the tape") {
    for (bool through : {false, true}) {
      AsaConfig c = cfg;
      c.weight_grad = through;
      Param p("mp", row(mp)), q("mq", row(mq));
      Tape t;
      const Var loss = point_weighted_focal(t.param(p), hard, t.param(q), c);
      CHECK(loss.scalar() == doctest::Approx(weighted / 4.0));
      t.backward(loss);
      t.flush_param_grads();
      CHECK((q.grad.cwiseAbs().sum() > 0.0) == through);
      CHECK(p.grad.cwiseAbs().sum() > 0.0);
    }
    Tape t;
    const Matrix w = w_focal(t.constant(row(mq)), cfg).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(w(0, static_cast<Index>(i)) == w_focal(mq[i], cfg));
  }
}

TEST_CASE("w_dice") {
  CHECK(w_dice({0, 1, 0}, centers({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}})) == 1.0);
  CHECK(w_dice({0, 0, 0}, centers({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}})) == 1.0);
  CHECK(w_dice({1, 1, 0}, centers({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}})) == 0.5);
  CHECK(w_dice({1, 1, 1}, centers({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}})) == 1.0);
  // Unordered pairs: distances 1, 2, 1 -> mean 4/3.
  CHECK(w_dice({1, 1, 1}, centers({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}})) == doctest::Approx(1.0 / (1.0 + 4.0 / 3.0)));
  double prev = 1.0;
  for (double s : {0.5, 1.0, 2.0, 4.0}) {
    const double w = w_dice({1, 1, 1}, centers({{0, 0, 0}, {s, 0, 0}, {0, s, 0}}));
    CHECK(w < prev);
    CHECK(w > 0.0);
    prev = w;
  }
}

TEST_CASE("dice_loss") {
  CHECK(dice_loss(std::vector<double>{1, 0, 1}, {1, 0, 1}, 1.0) == 0.0);
  CHECK(dice_loss(std::vector<double>{1, 1, 1, 1}, {0, 0, 0, 0}, 1.0) == doctest::Approx(0.8));
  CHECK(dice_loss(std::vector<double>{0, 0}, {0, 0}, 1.0) == 0.0);
  CHECK_THROWS_AS(dice_loss(std::vector<double>{0, 0}, {0, 0, 1}, 1.0), DimensionError);
  Tape tape;
  CHECK(dice_loss(tape.constant(row({0.3, 0.6, 0.9})), {0, 1, 1}, 1.0).scalar() ==
        doctest::Approx(dice_loss(std::vector<double>{0.3, 0.6, 0.9}, {0, 1, 1}, 1.0)));
}

TEST_CASE("mask_weighted_dice") {
  const AsaConfig cfg;
  Tape tape;
  const std::vector<double> mp{0.3, 0.8, 0.6};
  const Var p = tape.constant(row(mp));
  const double plain = dice_loss(mp, {1, 1, 0}, 1.0);
  CHECK(mask_weighted_dice(p, {1, 1, 0}, centers({{1, 0, 0}, {1, 0, 0}, {5, 0, 0}}), cfg).scalar() ==
        doctest::Approx(plain));
  CHECK(mask_weighted_dice(p, {1, 1, 0}, centers({{0, 0, 0}, {3, 0, 0}, {5, 0, 0}}), cfg).scalar() ==
        doctest::Approx(0.25 * plain));
  CHECK(mask_weighted_dice(p, {1, 1, 0}, centers({{0, 0, 0}, {3, 0, 0}, {5, 0, 0}}), cfg, false).scalar() ==
        doctest::Approx(plain));
  CHECK(mask_weighted_dice(p, {0, 0, 0}, centers({{0, 0, 0}, {3, 0, 0}, {5, 0, 0}}), cfg).scalar() ==
        doctest::Approx(dice_loss(mp, {0, 0, 0}, 1.0)));
}

TEST_CASE("fuse_masks") {
  const std::vector<double> mp{0.8, 0.1, 0.6}, mq{0.2, 0.9, 0.6};
  CHECK(fuse_masks(mp, mq, 1.0) == mp);
  CHECK(fuse_masks(mp, mq, 0.0) == mq);
  CHECK(fuse_masks(mp, mq, 0.5)[0] == doctest::Approx(0.5));
  for (double mu : {0.1, 0.37, 0.9}) {
    const auto f = fuse_masks(mp, mq, mu);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(f[i] >= std::min(mp[i], mq[i]) - 1e-15);
      CHECK(f[i] <= std::max(mp[i], mq[i]) + 1e-15);
    }
  }
  Tape tape;
  const Matrix fv = fuse_masks(tape.constant(row(mp)), tape.constant(row(mq)), tape.constant(scalar_matrix(0.3))).value();
  const auto ref = fuse_masks(mp, mq, 0.3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(fv(0, static_cast<Index>(i)) == doctest::Approx(ref[i]));
}

TEST_CASE("res_loss") {
  const AsaConfig cfg;
  const BinaryMask gt{1, 0, 1, 0};
  const Matrix c = centers({{0, 0, 0}, {1, 0, 0}, {0.1, 0, 0}, {2, 0, 0}});
  const std::vector<double> confident{0.9999, 0.0001, 0.9999, 0.0001};

  SUBCASE("all masks at the ground truth") {
    Tape tape;
    const Var m = tape.constant(row(confident));
    ResLossInputs in{m, m, m, gt, gt, c};
    CHECK(res_loss(tape, in, cfg).total.scalar() < 1e-3);
  }

  SUBCASE("zero betas") {
    AsaConfig z = cfg;
    z.beta1 = 0.0;
    z.beta2 = 0.0;
    Tape tape;
    ResLossInputs in{tape.constant(row({0.3, 0.6, 0.2, 0.9})), tape.constant(row({0.5, 0.5, 0.8, 0.1})),
                     tape.constant(row({0.4, 0.55, 0.5, 0.5})), BinaryMask{0, 1, 1, 0}, gt, c};
    CHECK(res_loss(tape, in, z).total.scalar() == 0.0);
  }

  SUBCASE("composition and the alignment flag") {
    Tape tape;
    const std::vector<double> mp{0.3, 0.6, 0.2, 0.9}, mq{0.5, 0.5, 0.8, 0.1}, mf{0.4, 0.55, 0.5, 0.5};
    const BinaryMask hard{0, 1, 1, 0};
    ResLossInputs in{tape.constant(row(mp)), tape.constant(row(mq)), tape.constant(row(mf)), hard, gt, c};
    const ResLossBreakdown full = res_loss(tape, in, cfg);
    auto mean_focal = [&](const std::vector<double>& p) {
      double s = 0.0;
      for (std::size_t i = 0; i < 4; ++i) s += focal_loss(p[i], gt[i], 2.0, 0.25);
      return s / 4.0;
    };
    CHECK(full.focal_p == doctest::Approx(mean_focal(mp)));
    CHECK(full.focal_q == doctest::Approx(mean_focal(mq)));
    CHECK(full.focal_fin == doctest::Approx(mean_focal(mf)));
    CHECK(full.dice_q == doctest::Approx(dice_loss(mq, gt, 1.0)));
    const double expected = 10.0 * (full.focal_p + full.focal_q + full.focal_fin + full.focal_point) +
                            2.0 * (full.dice_p + full.dice_q + full.dice_fin + full.dice_mask);
    CHECK(full.total.scalar() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(full.focal_point > 0.0);

    const ResLossBreakdown off = res_loss(tape, in, cfg, ResLossFlags{false, true});
    CHECK(off.focal_point == 0.0);
    CHECK(off.dice_mask == 0.0);
    CHECK(off.total.scalar() == doctest::Approx(expected - 10.0 * full.focal_point - 2.0 * full.dice_mask));
  }

  SUBCASE("alignment terms reach the segmentation logits") {
    Param lp("mp_logits", row({-0.4, 0.3, 0.8, -1.0}));
    Param lq("mq_logits", row({0.2, -0.6, 0.5, 0.1}));
    const BinaryMask hard{1, 0, 1, 0};
    Tape t;
    const Var mp = sigmoid(t.param(lp));
    const Var mq = sigmoid(t.param(lq));
    const Var mu = t.constant(scalar_matrix(0.4));
    ResLossInputs in{mp, mq, fuse_masks(mp, mq, mu), hard, gt, c};
    const ResLossBreakdown r = res_loss(t, in, cfg);
    t.backward(r.total);
    t.flush_param_grads();
    CHECK(lp.grad.cwiseAbs().sum() > 0.0);
    CHECK(lq.grad.cwiseAbs().sum() > 0.0);

    lp.zero_grad();
    lq.zero_grad();
    const auto rep = grad_check(
        [&](Tape& tp) {
          const Var p = sigmoid(tp.param(lp));
          const Var q = sigmoid(tp.param(lq));
          ResLossInputs x{p, q, fuse_masks(p, q, tp.constant(scalar_matrix(0.4))), hard, gt, c};
          return res_loss(tp, x, cfg).total;
        },
        {&lp, &lq});
    CHECK(rep.passed);
  }
}

TEST_CASE("total_loss") {
  const AsaConfig cfg;
  CHECK(total_loss(0.0, 0.0, 0.0, cfg, 2) == 0.0);
  CHECK(gamma1_for_layers(6) == doctest::Approx(1.0 / 7.0));
  CHECK(total_loss(3.0, 0.0, 0.0, cfg, 6) == doctest::Approx(3.0 / 7.0));
  CHECK(total_loss(2.0, 5.0, 0.0, cfg, 2) == doctest::Approx(2.0 / 3.0 + 5.0));
  CHECK(total_loss(4.0, 10.0, 0.0, cfg, 2) == doctest::Approx(2.0 * total_loss(2.0, 5.0, 0.0, cfg, 2)));
  Tape tape;
  CHECK(total_loss(tape.constant(scalar_matrix(2.0)), tape.constant(scalar_matrix(5.0)), cfg, 2).scalar() ==
        doctest::Approx(total_loss(2.0, 5.0, 0.0, cfg, 2)));
}
