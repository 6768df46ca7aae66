#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mcln/pipeline.hpp"

using namespace mcln;

namespace {

RunConfig toy_config(std::uint64_t seed = 1, Index epochs = 2) {
  RunConfig c;
  c.seed = seed;
  c.epochs = epochs;
  return c;
}

const Datasets& toy_data() {
  static const Datasets d{generate_dataset(SceneSpec{}, 16, 11), generate_dataset(SceneSpec{}, 8, 12)};
  return d;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "mcln_test_pipeline";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_params(ModelState& a, ModelState& b) {
  std::vector<Matrix> va, vb;
  a.for_each_param([&](Param& p) { va.push_back(p.value); });
  b.for_each_param([&](Param& p) { vb.push_back(p.value); });
  return va == vb;
}

}  // namespace

TEST_CASE("training reduces the loss on a toy set") {
  int improved = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const TrainResult r = train(toy_config(seed), toy_data());
    REQUIRE(r.log.size() == 3);
    CHECK(r.log[0].epoch == 0);
    improved += r.log[2].train.total < r.log[1].train.total;
  }
  CHECK(improved >= 2);
}

TEST_CASE("loss components sum to the total") {
  const RunConfig cfg = toy_config();
  Rng rng(cfg.seed);
  ModelState model = ModelState::init(cfg, rng);
  const auto prepared = prepare(toy_data().train, cfg);
  const AsaConfig& a = cfg.asa_cfg;
  const RecLossWeights& w = cfg.rec_weights;
  for (const auto& ps : prepared) {
    Tape tape = Tape::inference();
    const LossBreakdown p = forward(tape, model, ps, cfg).parts;
    const double rec = w.center * p.rec_center + w.size * p.rec_size + w.giou * p.rec_giou + w.score * p.rec_score;
    const double res = a.beta1 * (p.focal_p + p.focal_q + p.focal_fin + p.focal_point) +
                       a.beta2 * (p.dice_p + p.dice_q + p.dice_fin + p.dice_mask);
    CHECK(p.rec == doctest::Approx(rec).epsilon(1e-12));
    CHECK(p.res == doctest::Approx(res).epsilon(1e-12));
    CHECK(std::abs(p.total - (rec / static_cast<double>(cfg.rec_layers + 1) + a.gamma2 * res)) < 1e-9);
  }
}

TEST_CASE("ablation flags") {
  const auto prepared = prepare(toy_data().train, toy_config());

  SUBCASE("asa=off drops the alignment terms and the fusion") {
    RunConfig cfg = toy_config();
    cfg.apply_override("asa=off");
    Rng rng(cfg.seed);
    ModelState model = ModelState::init(cfg, rng);
    for (const auto& ps : prepared) {
      Tape tape = Tape::inference();
      const ForwardResult fr = forward(tape, model, ps, cfg);
      CHECK(fr.parts.focal_point == 0.0);
      CHECK(fr.parts.dice_mask == 0.0);
      CHECK(fr.mf == fr.mp);
    }
    const TrainResult r = train(cfg, toy_data());
    CHECK(r.log.back().train.focal_point == 0.0);
    const auto line = nlohmann::json::parse(r.log.back().to_json_line());
    CHECK(line["loss_align_focal"] == 0.0);
    CHECK(line["loss_align_dice"] == 0.0);

    Rng rng2(cfg.seed);
    ModelState on = ModelState::init(toy_config(), rng2);
    Tape tape = Tape::inference();
    const ForwardResult fr = forward(tape, on, prepared[0], toy_config());
    CHECK(fr.parts.focal_point > 0.0);
    CHECK(fr.parts.dice_mask > 0.0);
  }

  SUBCASE("visual tokens as initial RES queries") {
    RunConfig cfg = toy_config();
    cfg.apply_override("res_queries=visual");
    Rng rng(cfg.seed);
    ModelState model = ModelState::init(cfg, rng);
    Tape tape = Tape::inference();
    const ForwardResult fr = forward(tape, model, prepared[0], cfg);
    CHECK(std::isfinite(fr.parts.total));
    CHECK(fr.mp.size() == static_cast<std::size_t>(prepared[0].sample->partition.count()));
    Tape text_tape = Tape::inference();
    CHECK(forward(text_tape, model, prepared[0], toy_config()).mp != fr.mp);
  }

  SUBCASE("rsa=off keeps the relative MLP at zero") {
    RunConfig cfg = toy_config(1, 1);
    cfg.rsa = false;
    TrainResult r = train(cfg, toy_data());
    for (const auto& w : r.final_state.model.rsa.relative.weights) CHECK(w.value.isZero());
    for (const auto& b : r.final_state.model.rsa.relative.biases) CHECK(b.value.isZero());
  }

  SUBCASE("ablate pairs settings per seed") {
    RunConfig base = toy_config(1, 1);
    Datasets tiny{std::vector<SceneSample>(toy_data().train.begin(), toy_data().train.begin() + 4),
                  std::vector<SceneSample>(toy_data().val.begin(), toy_data().val.begin() + 4)};
    const auto out = ablate(base, "asa", {1, 2}, tiny);
    REQUIRE(out["rows"].size() == 4);
    CHECK(out["rows"][0]["setting"] == "asa=on");
    CHECK(out["rows"][1]["setting"] == "asa=off");
    CHECK(out["rows"][2]["seed"] == 2);
    for (const std::string k : {"miou", "rec_acc_05", "die3"}) {
      const double on = (out["rows"][0][k].get<double>() + out["rows"][2][k].get<double>()) / 2.0;
      const double off = (out["rows"][1][k].get<double>() + out["rows"][3][k].get<double>()) / 2.0;
      CHECK(out["deltas"][k].get<double>() == doctest::Approx(on - off).epsilon(1e-12));
    }
    CHECK(out["die3_delta"] == out["deltas"]["die3"]);
    CHECK_THROWS_AS(ablation_pair(base, "heads"), ConfigError);
    CHECK(ablation_pair(base, "fusion").second.fusion == Fusion::mul);
    CHECK(ablation_pair(base, "align_target").second.align_target == AlignTarget::box);
  }
}

TEST_CASE("determinism") {
  const auto a_ck = scratch("a.ckpt"), b_ck = scratch("b.ckpt");
  const auto a_log = scratch("a.jsonl"), b_log = scratch("b.jsonl");
  train(toy_config(4), toy_data(), TrainOptions{.checkpoint = a_ck, .metrics_log = a_log});
  train(toy_config(4), toy_data(), TrainOptions{.checkpoint = b_ck, .metrics_log = b_log});
  CHECK(read_file(a_log) == read_file(b_log));
  CHECK(read_file(a_ck) == read_file(b_ck));
  CHECK(!read_file(a_log).empty());
}

TEST_CASE("checkpoints") {
  const RunConfig cfg = toy_config(5);
  const auto full_ck = scratch("full.ckpt"), full_log = scratch("full.jsonl");
  TrainResult full = train(cfg, toy_data(), TrainOptions{.checkpoint = full_ck, .metrics_log = full_log});

  SUBCASE("round trip") {
    Checkpoint back = load_checkpoint(full_ck);
    CHECK(back.config.to_text() == cfg.to_text());
    CHECK(back.epoch == 2);
    CHECK(back.adam_steps == full.final_state.adam_steps);
    CHECK(back.adam_m == full.final_state.adam_m);
    CHECK(back.adam_v == full.final_state.adam_v);
    CHECK(back.rng_state == full.final_state.rng_state);
    CHECK(same_params(back.model, full.final_state.model));
    const auto again = scratch("again.ckpt");
    save_checkpoint(back, again);
    CHECK(read_file(again) == read_file(full_ck));
  }

  SUBCASE("resume reproduces the uninterrupted run") {
    const auto part_ck = scratch("part.ckpt"), part_log = scratch("part.jsonl");
    train(cfg, toy_data(), TrainOptions{.checkpoint = part_ck, .metrics_log = part_log, .stop_after_epoch = 1});
    CHECK(load_checkpoint(part_ck).epoch == 1);
    train(cfg, toy_data(),
          TrainOptions{.checkpoint = part_ck, .metrics_log = part_log, .resume = load_checkpoint(part_ck)});
    CHECK(read_file(part_ck) == read_file(full_ck));
    CHECK(read_file(part_log) == read_file(full_log));
  }

  SUBCASE("corrupt files") {
    const auto bad = scratch("bad.ckpt");
    const std::string text = read_file(full_ck);
    std::ofstream(bad, std::ios::binary) << text.substr(0, text.size() / 2);
    CHECK_THROWS(load_checkpoint(bad));
    CHECK_THROWS(load_checkpoint(scratch("missing.ckpt")));
  }
}

TEST_CASE("evaluate") {
  TrainResult r = train(toy_config(6, 1), toy_data());
  Checkpoint& ck = r.final_state;
  std::vector<EvalRecord> first, second;
  const Report a = evaluate(ck, toy_data().val, &first);
  const Report b = evaluate(ck, toy_data().val, &second);
  CHECK(a == b);
  CHECK(first.size() == toy_data().val.size());
  CHECK(a == r.log.back().val);
  CHECK_THROWS_AS(evaluate(ck, {}), EmptyEvaluationError);

  SUBCASE("perfect oracle") {
    std::vector<EvalRecord> recs;
    for (const auto& s : toy_data().val) recs.push_back(score_prediction(s, s.gt_box, s.gt_point_mask));
    const Report rep = build_report(recs);
    CHECK(rep.overall.rec_acc_025 == 1.0);
    CHECK(rep.overall.rec_acc_05 == 1.0);
    CHECK(rep.overall.res_acc_025 == 1.0);
    CHECK(rep.overall.res_acc_05 == 1.0);
    CHECK(rep.overall.miou == 1.0);
    CHECK(rep.overall.die3 == 0.0);
  }

  SUBCASE("incompatible dataset") {
    Checkpoint small;
    small.config = toy_config();
    small.config.max_tokens = 4;
    Rng rng(1);
    small.model = ModelState::init(small.config, rng);
    std::vector<SceneSample> long_expr;
    for (const auto& s : generate_dataset(SceneSpec{}, 60, 13))
      if (s.tokens.size() > 4) long_expr.push_back(s);
    REQUIRE(!long_expr.empty());
    CHECK_THROWS_AS(evaluate(small, long_expr), ConfigError);
  }
}

TEST_CASE("random init stays below the accuracy floor") {
  RunConfig cfg;
  cfg.train_samples = 1;
  const Datasets data = load_or_generate(cfg);
  REQUIRE(data.val.size() == 100);
  const auto prepared = prepare(data.val, cfg);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    cfg.seed = seed;
    Rng rng(seed);
    ModelState model = ModelState::init(cfg, rng);
    CHECK(build_report(evaluate_records(model, prepared, cfg)).overall.rec_acc_05 < 0.2);
  }
}

TEST_CASE("run config") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  const RunConfig back = RunConfig::from_kv(KeyValueFile::parse(c.to_text()));
  CHECK(back.to_text() == c.to_text());

  const auto kv = KeyValueFile::parse("# comment\nseed = 9\nasa = off\nfusion = mul\nalign_target = box\n"
                                      "lr = 0.002\nscene.extent = 2.5\n");
  const RunConfig p = RunConfig::from_kv(kv);
  CHECK(p.seed == 9);
  CHECK_FALSE(p.asa);
  CHECK(p.fusion == Fusion::mul);
  CHECK(p.align_target == AlignTarget::box);
  CHECK(p.lr == 0.002);
  CHECK(p.scene.extent == 2.5);

  c.apply_override("rsa=off");
  CHECK_FALSE(c.rsa);
  c.apply_override("epochs = 3");
  CHECK(c.epochs == 3);
  CHECK_THROWS_AS(c.apply_override("asa=maybe"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("no_such_key=1"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("asa"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_kv(KeyValueFile::parse("lr = 0\n")), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_kv(KeyValueFile::parse("fusion = concat\n")), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_kv(KeyValueFile::parse("res_queries = both\n")), ConfigError);
}
