#include <random>

#include "mcln/errors.hpp"
#include "mcln/pipeline.hpp"

namespace mcln {

namespace {

Param random_input(const std::string& name, Index rows, Index cols, Rng& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return Param(name, std::move(m));
}

// Contracts v with a fixed pseudo-random matrix so every entry reaches the
// scalar output with a distinct weight.
Var probe(const Var& v, std::uint64_t salt = 0) {
  Rng rng(0x5eed + salt + static_cast<std::uint64_t>(v.rows() * 131 + v.cols()));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix w(v.rows(), v.cols());
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  return sum(mul(v, v.tape().constant(std::move(w))));
}

RunConfig toy_config() {
  RunConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.encoder_layers = 1;
  cfg.queries = 4;
  cfg.ffn_hidden = 8;
  cfg.rec_layers = 2;
  cfg.res_layers = 1;
  cfg.scene.total_points = 40;
  cfg.scene.clutter_points = 8;
  cfg.scene.min_objects = 2;
  cfg.scene.max_objects = 2;
  cfg.scene.min_points_per_object = 10;
  cfg.scene.extent = 2.0;
  return cfg;
}

struct Suite {
  GradCheckOptions opts;
  std::vector<GradSuiteEntry> out;

  void run(const std::string& name, const std::function<Var(Tape&)>& f, const std::vector<Param*>& params) {
    out.push_back(GradSuiteEntry{name, grad_check(f, params, opts)});
  }
};

}  // namespace

std::vector<GradSuiteEntry> gradcheck_suite(const GradCheckOptions& opts) {
  Suite s{opts, {}};
  Rng rng(2024);

  // Dense ops.
  Param a = random_input("a", 3, 4, rng), b = random_input("b", 4, 2, rng), c = random_input("c", 3, 4, rng);
  Param row = random_input("row", 1, 4, rng), scalar = random_input("s", 1, 1, rng);
  Param bt = random_input("bt", 2, 4, rng);
  s.run("matmul", [&](Tape& t) { return probe(matmul(t.param(a), t.param(b))); }, {&a, &b});
  s.run("matmul_nt", [&](Tape& t) { return probe(matmul_nt(t.param(a), t.param(bt))); }, {&a, &bt});
  s.run("transpose", [&](Tape& t) { return probe(transpose(t.param(a))); }, {&a});
  s.run("add_sub_mul",
        [&](Tape& t) {
          const Var x = t.param(a), y = t.param(c);
          return probe(add(mul(x, y), sub(scale(x, 0.7), add_scalar(y, 0.3))));
        },
        {&a, &c});
  s.run("add_bias", [&](Tape& t) { return probe(add_bias(t.param(a), t.param(row))); }, {&a, &row});
  s.run("mul_scalar_var", [&](Tape& t) { return probe(mul_scalar_var(t.param(a), t.param(scalar))); }, {&a, &scalar});
  s.run("sigmoid", [&](Tape& t) { return probe(sigmoid(scale(t.param(a), 3.0))); }, {&a});
  s.run("relu", [&](Tape& t) { return probe(relu(t.param(a))); }, {&a});
  s.run("softplus", [&](Tape& t) { return probe(softplus(scale(t.param(a), 3.0))); }, {&a});
  Matrix mask = Matrix::Zero(3, 4);
  mask(0, 1) = kMasked;
  mask(1, 0) = kMasked;
  mask(1, 3) = kMasked;
  mask.row(2).setConstant(kMasked);
  s.run("row_softmax_masked", [&](Tape& t) { return probe(row_softmax(t.param(a), mask)); }, {&a});
  Param tall = random_input("tall", 6, 3, rng);
  s.run("group_max_rows", [&](Tape& t) { return probe(group_max_rows(t.param(tall), 2)); }, {&tall});
  s.run("gather_rows", [&](Tape& t) { return probe(gather_rows(t.param(tall), {5, 0, 0, 3})); }, {&tall});
  s.run("concat_slice",
        [&](Tape& t) { return probe(slice_cols(concat_cols({t.param(a), t.param(c)}), 2, 4)); }, {&a, &c});
  s.run("reductions",
        [&](Tape& t) {
          const Var x = t.param(a);
          return add(add(scale(sum(x), 0.3), mean(x)), add(probe(col_mean(x)), probe(row_sum(x))));
        },
        {&a});
  Param target = random_input("target", 3, 4, rng, 2.0);
  s.run("smooth_l1", [&](Tape& t) { return smooth_l1(scale(t.param(a), 2.0), t.param(target)); }, {&a, &target});
  Param logits = random_input("logits", 5, 1, rng);
  s.run("cross_entropy", [&](Tape& t) { return cross_entropy(t.param(logits), 2); }, {&logits});
  Param w = random_input("w", 4, 2, rng), bias = random_input("bias", 1, 2, rng);
  s.run("affine", [&](Tape& t) { return probe(affine(t.param(a), t.param(w), t.param(bias))); }, {&a, &w, &bias});

  // Network blocks.
  const Index d = 8;
  Param x = random_input("x", 5, d, rng), ctx = random_input("ctx", 7, d, rng);
  Mlp mlp = Mlp::init("mlp", MlpSpec{{d, 6, 3}, {Activation::relu, Activation::identity}}, rng);
  std::vector<Param*> mlp_params{&x};
  mlp.for_each_param([&](Param& p) { mlp_params.push_back(&p); });
  s.run("mlp", [&](Tape& t) { return probe(mlp_forward(t, mlp, t.param(x))); }, mlp_params);
  AttentionParams attn = AttentionParams::init("attn", d, 2, true, rng);
  std::vector<Param*> attn_params{&x, &ctx};
  attn.for_each_param([&](Param& p) { attn_params.push_back(&p); });
  Matrix amask = Matrix::Zero(5, 7);
  amask(0, 2) = kMasked;
  amask(3, 0) = kMasked;
  s.run("attention", [&](Tape& t) { return probe(attention(t, attn, t.param(x), t.param(ctx), amask)); },
        attn_params);
  Ffn ffn = Ffn::init("ffn", d, 12, rng);
  std::vector<Param*> ffn_params{&x};
  ffn.for_each_param([&](Param& p) { ffn_params.push_back(&p); });
  s.run("ffn", [&](Tape& t) { return probe(ffn_forward(t, ffn, t.param(x))); }, ffn_params);

  // Model modules on a toy sample.
  RunConfig cfg = toy_config();
  Rng data_rng(99);
  const SceneSample sample = generate_sample(cfg.scene, data_rng, "toy");
  const std::vector<SceneSample> samples{sample};
  const auto prepared = prepare(samples, cfg);
  const PreparedSample& ps = prepared.front();
  Rng model_rng(5);
  ModelState model = ModelState::init(cfg, model_rng);
  auto collect = [](auto& state) {
    std::vector<Param*> v;
    state.for_each_param([&](Param& p) { v.push_back(&p); });
    return v;
  };

  s.run("encoder",
        [&](Tape& t) {
          const Var v = encode_points(t, model.encoder, ps.features);
          const Var txt = encode_text(t, model.encoder, sample.tokens);
          const CrossModalOutput cm = cross_modal_encode(t, model.encoder, v, txt);
          return add(add(probe(cm.visual), probe(cm.text)), probe(cm.queries));
        },
        collect(model.encoder));

  Param visual = random_input("visual", sample.cloud.size(), cfg.d, rng);
  for (Fusion fusion : {Fusion::plus, Fusion::mul}) {
    RsaState rsa = RsaState::init(cfg.d, fusion, rng);
    std::vector<Param*> p = collect(rsa);
    p.push_back(&visual);
    s.run(fusion == Fusion::plus ? "rsa_plus" : "rsa_mul",
          [&](Tape& t) { return probe(rsa_forward(t, rsa, t.param(visual), ps.neighbors)); }, p);
  }

  Param text = random_input("text", static_cast<Index>(sample.tokens.size()), cfg.d, rng);
  Param superpoints = random_input("superpoints", sample.partition.count(), cfg.d, rng);
  {
    std::vector<Param*> p = collect(model.res);
    p.push_back(&text);
    p.push_back(&superpoints);
    s.run("res_decoder",
          [&](Tape& t) {
            const ResOutput r = res_decode(t, model.res, t.param(text), t.param(superpoints));
            return add(probe(r.mask_prob), scale(r.mu, 2.0));
          },
          p);
  }
  {
    Param queries = random_input("queries", cfg.queries, cfg.d, rng);
    std::vector<Param*> p = collect(model.rec);
    p.push_back(&queries);
    p.push_back(&visual);
    p.push_back(&text);
    s.run("rec_branch",
          [&](Tape& t) {
            const auto layers = rec_decode(t, model.rec, t.param(queries), t.param(visual), t.param(text));
            const BoxPrediction boxes = predict_boxes(t, model.rec, layers.back());
            const Var scores = grounding_scores(t, model.rec, layers.back(), t.param(text));
            return add(add(probe(boxes.centers), probe(boxes.sizes)), probe(scores));
          },
          p);
    Param q = random_input("q", 1, cfg.d, rng);
    for (bool sig : {true, false}) {
      s.run(sig ? "query_mask_sigmoid" : "query_mask_raw",
            [&](Tape& t) { return probe(query_mask(t, t.param(q), t.param(superpoints), 0.5, sig).prob); },
            {&q, &superpoints});
    }
  }
  {
    Param center = Param("center", (Matrix(1, 3) << 0.1, -0.2, 0.05).finished());
    Param size = Param("size", (Matrix(1, 3) << 0.9, 1.3, 0.7).finished());
    const Aabb overlapping{Vec3(0.3, 0.1, 0.0), Vec3(1.0, 0.8, 1.1)};
    const Aabb disjoint{Vec3(2.5, 1.7, -1.9), Vec3(0.6, 0.5, 0.9)};
    s.run("giou_overlapping", [&](Tape& t) { return giou_loss(t.param(center), t.param(size), overlapping); },
          {&center, &size});
    s.run("giou_disjoint", [&](Tape& t) { return giou_loss(t.param(center), t.param(size), disjoint); },
          {&center, &size});
  }
  {
    const Index m = sample.partition.count();
    Param lp = random_input("mp_logits", 1, m, rng, 3.0), lq = random_input("mq_logits", 1, m, rng, 3.0);
    Param lmu = random_input("mu_logit", 1, 1, rng);
    BinaryMask hard(static_cast<std::size_t>(m)), gt = sample.gt_superpoint_mask;
    for (Index i = 0; i < m; ++i) hard[static_cast<std::size_t>(i)] = (i % 3 == 0) ? 1 : 0;
    const AsaConfig acfg;
    s.run("focal_loss", [&](Tape& t) { return probe(focal_loss(sigmoid(t.param(lp)), gt, 2.0, 0.25)); }, {&lp});
    s.run("w_focal", [&](Tape& t) { return probe(w_focal(sigmoid(t.param(lq)), acfg)); }, {&lq});
    s.run("point_weighted_focal",
          [&](Tape& t) {
            const Var q = sigmoid(t.param(lq));
            return point_weighted_focal(sigmoid(t.param(lp)), hard, to_vector(q.value()), acfg, true);
          },
          {&lp, &lq});
    AsaConfig through = acfg;
    through.weight_grad = true;
    s.run("point_weighted_focal[weight_grad]",
          [&](Tape& t) { return point_weighted_focal(sigmoid(t.param(lp)), hard, sigmoid(t.param(lq)), through); },
          {&lp, &lq});
    s.run("dice_loss", [&](Tape& t) { return dice_loss(sigmoid(t.param(lp)), gt, 1.0); }, {&lp});
    s.run("mask_weighted_dice",
          [&](Tape& t) { return mask_weighted_dice(sigmoid(t.param(lp)), hard, sample.partition.centers, acfg); },
          {&lp});
    s.run("fuse_masks",
          [&](Tape& t) { return probe(fuse_masks(sigmoid(t.param(lp)), sigmoid(t.param(lq)), sigmoid(t.param(lmu)))); },
          {&lp, &lq, &lmu});
    s.run("res_loss",
          [&](Tape& t) {
            const Var mp = sigmoid(t.param(lp)), mq = sigmoid(t.param(lq));
            const Var mf = fuse_masks(mp, mq, sigmoid(t.param(lmu)));
            return res_loss(t, ResLossInputs{mp, mq, mf, hard, gt, sample.partition.centers}, acfg).total;
          },
          {&lp, &lq, &lmu});
  }

  // The composite loss end to end, under the default setting and every
  // setting that changes which terms are present or how they connect.
  for (const std::string variant :
       {"default", "asa=off", "align_target=box", "asa_weight_grad=on", "res_queries=visual"}) {
    RunConfig vcfg = cfg;
    if (variant != "default") vcfg.apply_override(variant);
    Rng vrng(5);
    ModelState vmodel = ModelState::init(vcfg, vrng);
    std::vector<Param*> p;
    for (Param* q : vmodel.params()) {
      if (q->trainable) p.push_back(q);
    }
    s.run("full_loss[" + variant + "]", [&](Tape& t) { return forward(t, vmodel, ps, vcfg, true).loss; }, p);
  }
  return s.out;
}

}  // namespace mcln
