#include "mcln/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "mcln/errors.hpp"
#include "mcln/kernels.hpp"

namespace mcln {

using nlohmann::json;

// ---- configuration ----------------------------------------------------------

namespace {

const std::set<std::string> kRunKeys = {
    "seed", "preset", "d", "heads", "encoder_layers", "queries", "max_tokens", "ffn_hidden", "rec_layers",
    "res_layers", "neighbors", "radius", "tau", "asa_b", "asa_mu", "asa_sigma2", "beta1", "beta2", "gamma2",
    "gamma3", "focal_gamma", "focal_alpha", "dice_eps", "asa_weight_grad", "rec_w_center", "rec_w_size",
    "rec_w_giou", "rec_w_score", "lr", "lr_visual", "weight_decay", "batch_size", "epochs", "asa", "rsa",
    "align_target", "fusion", "adaptive_losses", "mq_sigmoid", "res_queries", "train_data", "val_data",
    "train_samples", "val_samples", "data_seed"};

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* on_off(bool v) { return v ? "on" : "off"; }

}  // namespace

void RunConfig::validate() const {
  if (d < 1 || heads < 1 || d % heads != 0) throw ConfigError("config: d must be a positive multiple of heads");
  if (encoder_layers < 1 || rec_layers < 1 || res_layers < 1) throw ConfigError("config: layer counts must be >= 1");
  if (queries < 1 || max_tokens < 1 || ffn_hidden < 1 || neighbors < 1) {
    throw ConfigError("config: queries, max_tokens, ffn_hidden and neighbors must be >= 1");
  }
  if (!(radius > 0.0)) throw ConfigError("config: radius must be > 0");
  if (!(lr > 0.0) || !(lr_visual > 0.0)) throw ConfigError("config: lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be >= 0");
  if (batch_size < 1 || epochs < 0) throw ConfigError("config: batch_size must be >= 1 and epochs >= 0");
  if (train_samples < 1 || val_samples < 1) throw ConfigError("config: sample counts must be >= 1");
  asa_cfg.validate();
  scene.validate();
}

RunConfig RunConfig::from_kv(const KeyValueFile& kv) {
  KeyValueFile scene_kv;
  KeyValueFile run_kv;
  for (const auto& [k, v] : kv.values()) {
    if (k.rfind("scene.", 0) == 0) {
      scene_kv.set(k.substr(6), v);
    } else {
      run_kv.set(k, v);
    }
  }
  run_kv.require_known(kRunKeys);
  RunConfig c;
  const std::string preset = kv.get_string("preset", "desk");
  if (preset == "paper-scale") {
    c.lr_visual = 2e-3;
    c.lr = 2e-4;
    c.batch_size = 12;
  } else if (preset != "desk") {
    throw ConfigError("config: unknown preset '" + preset + "' (desk | paper-scale)");
  }
  c.seed = static_cast<std::uint64_t>(kv.get_long("seed", static_cast<long>(c.seed)));
  c.d = kv.get_long("d", c.d);
  c.heads = kv.get_long("heads", c.heads);
  c.encoder_layers = kv.get_long("encoder_layers", c.encoder_layers);
  c.queries = kv.get_long("queries", c.queries);
  c.max_tokens = kv.get_long("max_tokens", c.max_tokens);
  c.ffn_hidden = kv.get_long("ffn_hidden", c.ffn_hidden);
  c.rec_layers = kv.get_long("rec_layers", c.rec_layers);
  c.res_layers = kv.get_long("res_layers", c.res_layers);
  c.neighbors = kv.get_long("neighbors", c.neighbors);
  c.radius = kv.get_double("radius", c.radius);
  c.asa_cfg.tau = kv.get_double("tau", c.asa_cfg.tau);
  c.asa_cfg.b = kv.get_double("asa_b", c.asa_cfg.b);
  c.asa_cfg.mu = kv.get_double("asa_mu", c.asa_cfg.mu);
  c.asa_cfg.sigma2 = kv.get_double("asa_sigma2", c.asa_cfg.sigma2);
  c.asa_cfg.beta1 = kv.get_double("beta1", c.asa_cfg.beta1);
  c.asa_cfg.beta2 = kv.get_double("beta2", c.asa_cfg.beta2);
  c.asa_cfg.gamma2 = kv.get_double("gamma2", c.asa_cfg.gamma2);
  c.asa_cfg.gamma3 = kv.get_double("gamma3", c.asa_cfg.gamma3);
  c.asa_cfg.focal_gamma = kv.get_double("focal_gamma", c.asa_cfg.focal_gamma);
  c.asa_cfg.focal_alpha = kv.get_double("focal_alpha", c.asa_cfg.focal_alpha);
  c.asa_cfg.dice_eps = kv.get_double("dice_eps", c.asa_cfg.dice_eps);
  c.asa_cfg.weight_grad = kv.get_bool("asa_weight_grad", c.asa_cfg.weight_grad);
  c.rec_weights.center = kv.get_double("rec_w_center", c.rec_weights.center);
  c.rec_weights.size = kv.get_double("rec_w_size", c.rec_weights.size);
  c.rec_weights.giou = kv.get_double("rec_w_giou", c.rec_weights.giou);
  c.rec_weights.score = kv.get_double("rec_w_score", c.rec_weights.score);
  c.lr = kv.get_double("lr", c.lr);
  c.lr_visual = kv.get_double("lr_visual", kv.has("lr") && preset == "desk" ? c.lr : c.lr_visual);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.batch_size = kv.get_long("batch_size", c.batch_size);
  c.epochs = kv.get_long("epochs", c.epochs);
  c.asa = kv.get_bool("asa", c.asa);
  c.rsa = kv.get_bool("rsa", c.rsa);
  const std::string target = kv.get_string("align_target", "mask");
  if (target == "mask") {
    c.align_target = AlignTarget::mask;
  } else if (target == "box") {
    c.align_target = AlignTarget::box;
  } else {
    throw ConfigError("config: align_target must be mask or box, got '" + target + "'");
  }
  const std::string fusion = kv.get_string("fusion", "plus");
  if (fusion == "plus") {
    c.fusion = Fusion::plus;
  } else if (fusion == "mul") {
    c.fusion = Fusion::mul;
  } else {
    throw ConfigError("config: fusion must be plus or mul, got '" + fusion + "'");
  }
  c.adaptive_losses = kv.get_bool("adaptive_losses", c.adaptive_losses);
  c.mq_sigmoid = kv.get_bool("mq_sigmoid", c.mq_sigmoid);
  const std::string res_queries = kv.get_string("res_queries", "text");
  if (res_queries == "text") {
    c.res_queries = ResQueries::text;
  } else if (res_queries == "visual") {
    c.res_queries = ResQueries::visual;
  } else {
    throw ConfigError("config: res_queries must be text or visual, got '" + res_queries + "'");
  }
  c.train_data = kv.get_string("train_data", "");
  c.val_data = kv.get_string("val_data", "");
  c.train_samples = kv.get_long("train_samples", c.train_samples);
  c.val_samples = kv.get_long("val_samples", c.val_samples);
  c.data_seed = static_cast<std::uint64_t>(kv.get_long("data_seed", static_cast<long>(c.data_seed)));
  c.scene = SceneSpec::from_config(scene_kv);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return from_kv(KeyValueFile::load(path)); }

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o << "seed = " << seed << "\n"
    << "d = " << d << "\nheads = " << heads << "\nencoder_layers = " << encoder_layers << "\nqueries = " << queries
    << "\nmax_tokens = " << max_tokens << "\nffn_hidden = " << ffn_hidden << "\nrec_layers = " << rec_layers
    << "\nres_layers = " << res_layers << "\nneighbors = " << neighbors << "\nradius = " << fmt_double(radius)
    << "\ntau = " << fmt_double(asa_cfg.tau) << "\nasa_b = " << fmt_double(asa_cfg.b)
    << "\nasa_mu = " << fmt_double(asa_cfg.mu) << "\nasa_sigma2 = " << fmt_double(asa_cfg.sigma2)
    << "\nbeta1 = " << fmt_double(asa_cfg.beta1) << "\nbeta2 = " << fmt_double(asa_cfg.beta2)
    << "\ngamma2 = " << fmt_double(asa_cfg.gamma2) << "\ngamma3 = " << fmt_double(asa_cfg.gamma3)
    << "\nfocal_gamma = " << fmt_double(asa_cfg.focal_gamma) << "\nfocal_alpha = " << fmt_double(asa_cfg.focal_alpha)
    << "\ndice_eps = " << fmt_double(asa_cfg.dice_eps) << "\nasa_weight_grad = " << on_off(asa_cfg.weight_grad)
    << "\nrec_w_center = " << fmt_double(rec_weights.center)
    << "\nrec_w_size = " << fmt_double(rec_weights.size) << "\nrec_w_giou = " << fmt_double(rec_weights.giou)
    << "\nrec_w_score = " << fmt_double(rec_weights.score) << "\nlr = " << fmt_double(lr)
    << "\nlr_visual = " << fmt_double(lr_visual) << "\nweight_decay = " << fmt_double(weight_decay)
    << "\nbatch_size = " << batch_size << "\nepochs = " << epochs << "\nasa = " << on_off(asa)
    << "\nrsa = " << on_off(rsa) << "\nalign_target = " << (align_target == AlignTarget::mask ? "mask" : "box")
    << "\nfusion = " << (fusion == Fusion::plus ? "plus" : "mul") << "\nadaptive_losses = " << on_off(adaptive_losses)
    << "\nmq_sigmoid = " << on_off(mq_sigmoid)
    << "\nres_queries = " << (res_queries == ResQueries::text ? "text" : "visual") << "\n";
  if (!train_data.empty()) o << "train_data = " << train_data << "\n";
  if (!val_data.empty()) o << "val_data = " << val_data << "\n";
  o << "train_samples = " << train_samples << "\nval_samples = " << val_samples << "\ndata_seed = " << data_seed
    << "\n";
  o << "scene.min_objects = " << scene.min_objects << "\nscene.max_objects = " << scene.max_objects
    << "\nscene.total_points = " << scene.total_points << "\nscene.min_points_per_object = "
    << scene.min_points_per_object << "\nscene.clutter_points = " << scene.clutter_points
    << "\nscene.extent = " << fmt_double(scene.extent) << "\nscene.size_jitter = " << fmt_double(scene.size_jitter)
    << "\nscene.color_noise = " << fmt_double(scene.color_noise) << "\nscene.gap = " << fmt_double(scene.gap)
    << "\nscene.multiple_fraction = " << fmt_double(scene.multiple_fraction)
    << "\nscene.grid_cell = " << fmt_double(scene.grid_cell)
    << "\nscene.position_margin = " << fmt_double(scene.position_margin)
    << "\nscene.volume_ratio_margin = " << fmt_double(scene.volume_ratio_margin)
    << "\nscene.distance_margin = " << fmt_double(scene.distance_margin) << "\n";
  return o.str();
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  KeyValueFile kv = KeyValueFile::parse(to_text(), "<config>");
  const KeyValueFile one = KeyValueFile::parse(assignment, "<override>");
  for (const auto& [k, v] : one.values()) kv.set(k, v);
  *this = from_kv(kv);
}

// ---- model --------------------------------------------------------------------

ModelState ModelState::init(const RunConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelState m;
  EncoderConfig ec;
  ec.d = cfg.d;
  ec.heads = cfg.heads;
  ec.layers = cfg.encoder_layers;
  ec.queries = cfg.queries;
  ec.vocab = kVocabularySize;
  ec.max_tokens = cfg.max_tokens;
  ec.ffn_hidden = cfg.ffn_hidden;
  m.encoder = EncoderState::init(ec, rng);
  if (cfg.rsa) {
    m.rsa = RsaState::init(cfg.d, cfg.fusion, rng);
  } else {
    m.rsa = RsaState::plain(cfg.d, cfg.fusion);
    m.rsa.for_each_param([](Param& p) { p.trainable = false; });
  }
  m.res = ResDecoderState::init(ResDecoderConfig{cfg.d, cfg.heads, cfg.res_layers, cfg.ffn_hidden, cfg.asa_cfg.tau},
                                rng);
  m.rec = RecState::init(RecConfig{cfg.d, cfg.heads, cfg.rec_layers, cfg.ffn_hidden}, rng);
  return m;
}

void ModelState::for_each_param(const std::function<void(Param&)>& f) {
  encoder.for_each_param(f);
  rsa.for_each_param(f);
  res.for_each_param(f);
  rec.for_each_param(f);
}

std::vector<Param*> ModelState::params() {
  std::vector<Param*> out;
  for_each_param([&](Param& p) { out.push_back(&p); });
  return out;
}

std::vector<PreparedSample> prepare(const std::vector<SceneSample>& samples, const RunConfig& cfg) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    PreparedSample p;
    p.sample = &s;
    p.features = s.cloud.features();
    p.neighbors = ball_query(s.partition, s.cloud, cfg.neighbors, cfg.radius);
    out.push_back(std::move(p));
  }
  return out;
}

// ---- forward ------------------------------------------------------------------

json LossBreakdown::to_json() const {
  return json{{"loss_total", total},     {"loss_rec", rec},           {"loss_res", res},
              {"loss_align_focal", focal_point}, {"loss_align_dice", dice_mask},
              {"rec_center", rec_center}, {"rec_size", rec_size},     {"rec_giou", rec_giou},
              {"rec_score", rec_score},  {"focal_p", focal_p},       {"focal_q", focal_q},
              {"focal_fin", focal_fin},  {"dice_p", dice_p},         {"dice_q", dice_q},
              {"dice_fin", dice_fin}};
}

ForwardResult forward(Tape& tape, ModelState& model, const PreparedSample& ps, const RunConfig& cfg,
                      bool compute_loss) {
  const SceneSample& s = *ps.sample;
  const Var points = encode_points(tape, model.encoder, ps.features);
  const Var text = encode_text(tape, model.encoder, s.tokens);
  const CrossModalOutput cm = cross_modal_encode(tape, model.encoder, points, text);
  const Var superpoints = rsa_forward(tape, model.rsa, cm.visual, ps.neighbors);
  if (superpoints.rows() != s.partition.count()) throw DataConsistencyError("forward: neighbour table does not match partition");

  const ResOutput res =
      res_decode(tape, model.res, cfg.res_queries == ResQueries::text ? cm.text : cm.visual, superpoints);
  const std::vector<Var> queries = rec_decode(tape, model.rec, cm.queries, cm.visual, cm.text);
  std::vector<LayerPrediction> layers;
  for (const Var& q : queries) {
    layers.push_back(LayerPrediction{predict_boxes(tape, model.rec, q), grounding_scores(tape, model.rec, q, cm.text)});
  }
  ForwardResult out;
  out.selected = tape.freeze_index(select_box(layers.back().scores.value()));
  out.box = layers.back().boxes.boxes[static_cast<std::size_t>(out.selected)];
  const Var q_box = gather_rows(queries.back(), {out.selected});
  const QueryMask qm = query_mask(tape, q_box, superpoints, cfg.asa_cfg.tau, cfg.mq_sigmoid);
  const Var mf = cfg.asa ? fuse_masks(res.mask_prob, qm.prob, res.mu) : res.mask_prob;
  out.mp = to_vector(res.mask_prob.value());
  out.mq = to_vector(qm.prob.value());
  out.mf = to_vector(mf.value());
  out.mu = res.mu.scalar();
  if (!compute_loss) return out;

  const RecLossBreakdown rl = rec_losses(tape, layers, s.gt_box, cfg.rec_weights);
  const BinaryMask target =
      cfg.align_target == AlignTarget::mask ? qm.hard : box_to_superpoint_mask(out.box, s.partition);
  const ResLossBreakdown rs = res_loss(tape,
                                       ResLossInputs{res.mask_prob, qm.prob, mf, target, s.gt_superpoint_mask,
                                                     s.partition.centers},
                                       cfg.asa_cfg, ResLossFlags{cfg.asa, cfg.adaptive_losses});
  out.loss = total_loss(rl.total, rs.total, cfg.asa_cfg, static_cast<long>(cfg.rec_layers));
  LossBreakdown& p = out.parts;
  p.total = out.loss.scalar();
  p.rec = rl.total.scalar();
  p.res = rs.total.scalar();
  p.rec_center = rl.center;
  p.rec_size = rl.size;
  p.rec_giou = rl.giou;
  p.rec_score = rl.score;
  p.focal_p = rs.focal_p;
  p.focal_q = rs.focal_q;
  p.focal_fin = rs.focal_fin;
  p.focal_point = rs.focal_point;
  p.dice_p = rs.dice_p;
  p.dice_q = rs.dice_q;
  p.dice_fin = rs.dice_fin;
  p.dice_mask = rs.dice_mask;
  return out;
}

EvalRecord score_prediction(const SceneSample& s, const Aabb& box, const BinaryMask& point_mask) {
  EvalRecord r;
  r.id = s.id;
  r.split = s.split;
  r.rec_iou = box_iou_3d(box, s.gt_box);
  r.res_iou = mask_iou(point_mask, s.gt_point_mask);
  return r;
}

EvalRecord evaluate_sample(ModelState& model, const PreparedSample& ps, const RunConfig& cfg) {
  Tape tape = Tape::inference();
  const ForwardResult fr = forward(tape, model, ps, cfg, false);
  BinaryMask sp(fr.mf.size());
  for (std::size_t i = 0; i < sp.size(); ++i) sp[i] = fr.mf[i] >= cfg.asa_cfg.tau ? 1 : 0;
  return score_prediction(*ps.sample, fr.box, superpoint_mask_to_point_mask(ps.sample->partition, sp));
}

std::vector<EvalRecord> evaluate_records(ModelState& model, const std::vector<PreparedSample>& data,
                                         const RunConfig& cfg) {
  std::vector<EvalRecord> out;
  out.reserve(data.size());
  for (const auto& ps : data) out.push_back(evaluate_sample(model, ps, cfg));
  return out;
}

// ---- checkpoints --------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'C', 'L', 'N', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_ += s;
  }
  void matrix(const Matrix& m) {
    pod<std::int64_t>(m.rows());
    pod<std::int64_t>(m.cols());
    buf_.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  const std::string& data() const { return buf_; }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const auto rows = pod<std::int64_t>();
    const auto cols = pod<std::int64_t>();
    if (rows < 0 || cols < 0) throw ParseError(0, "checkpoint: negative matrix shape");
    need(static_cast<std::size_t>(rows * cols) * sizeof(double));
    Matrix m(rows, cols);
    std::memcpy(m.data(), data_.data() + pos_, static_cast<std::size_t>(m.size()) * sizeof(double));
    pos_ += static_cast<std::size_t>(m.size()) * sizeof(double);
    return m;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw ParseError(0, "checkpoint: truncated file");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.str(ck.config.to_text());
  w.pod<std::int64_t>(ck.epoch);
  w.pod<std::int64_t>(ck.adam_steps);
  w.str(ck.rng_state);
  auto& model = const_cast<ModelState&>(ck.model);
  const auto params = model.params();
  w.pod<std::uint64_t>(params.size());
  for (const Param* p : params) {
    w.str(p->name);
    w.pod<std::uint8_t>(p->trainable ? 1 : 0);
    w.matrix(p->value);
  }
  w.pod<std::uint64_t>(ck.adam_m.size());
  for (std::size_t i = 0; i < ck.adam_m.size(); ++i) {
    w.matrix(ck.adam_m[i]);
    w.matrix(ck.adam_v[i]);
  }
  write_file_atomic(path, w.data());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  Reader r(buf.str());
  if (r.raw(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw ParseError(0, "not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("checkpoint version " + std::to_string(version) + " (supported: " +
                                  std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.config = RunConfig::from_kv(KeyValueFile::parse(r.str(), "<checkpoint config>"));
  ck.epoch = r.pod<std::int64_t>();
  ck.adam_steps = r.pod<std::int64_t>();
  ck.rng_state = r.str();
  Rng shape_rng(ck.config.seed);
  ck.model = ModelState::init(ck.config, shape_rng);
  const auto params = ck.model.params();
  const auto count = r.pod<std::uint64_t>();
  if (count != params.size()) throw ConfigError("checkpoint: parameter count does not match its config");
  for (Param* p : params) {
    const std::string name = r.str();
    if (name != p->name) throw ConfigError("checkpoint: expected parameter " + p->name + ", found " + name);
    p->trainable = r.pod<std::uint8_t>() != 0;
    Matrix value = r.matrix();
    if (value.rows() != p->value.rows() || value.cols() != p->value.cols()) {
      throw ConfigError("checkpoint: parameter " + name + " has shape " + shape_str(value) + ", expected " +
                        shape_str(p->value));
    }
    p->value = std::move(value);
    p->zero_grad();
  }
  const auto moments = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < moments; ++i) {
    ck.adam_m.push_back(r.matrix());
    ck.adam_v.push_back(r.matrix());
  }
  if (!r.done()) throw ParseError(0, "checkpoint: trailing bytes");
  return ck;
}

// ---- training -----------------------------------------------------------------

std::string EpochLog::to_json_line() const {
  json j;
  j["epoch"] = epoch;
  const json train_json = train.to_json();
  for (const auto& [k, v] : train_json.items()) j[k] = v;
  const json val_json = report_to_json(val);
  for (const auto& [k, v] : val_json.items()) {
    if (!v.is_object()) j["val_" + k] = v;
  }
  j["val_unique"] = val_json["unique"];
  j["val_multiple"] = val_json["multiple"];
  return j.dump();
}

Datasets load_or_generate(const RunConfig& cfg) {
  Datasets d;
  d.train = cfg.train_data.empty()
                ? generate_dataset(cfg.scene, static_cast<std::size_t>(cfg.train_samples), cfg.data_seed, "train")
                : load_dataset(cfg.train_data);
  d.val = cfg.val_data.empty()
              ? generate_dataset(cfg.scene, static_cast<std::size_t>(cfg.val_samples), cfg.data_seed + 1, "val")
              : load_dataset(cfg.val_data);
  return d;
}

namespace {

void add_scaled(LossBreakdown& acc, const LossBreakdown& x, double w) {
  acc.total += w * x.total;
  acc.rec += w * x.rec;
  acc.res += w * x.res;
  acc.rec_center += w * x.rec_center;
  acc.rec_size += w * x.rec_size;
  acc.rec_giou += w * x.rec_giou;
  acc.rec_score += w * x.rec_score;
  acc.focal_p += w * x.focal_p;
  acc.focal_q += w * x.focal_q;
  acc.focal_fin += w * x.focal_fin;
  acc.focal_point += w * x.focal_point;
  acc.dice_p += w * x.dice_p;
  acc.dice_q += w * x.dice_q;
  acc.dice_fin += w * x.dice_fin;
  acc.dice_mask += w * x.dice_mask;
}

std::string rng_to_string(const Rng& rng) {
  std::ostringstream o;
  o << rng;
  return o.str();
}

Rng rng_from_string(const std::string& s) {
  Rng rng;
  std::istringstream in(s);
  in >> rng;
  if (!in) throw ParseError(0, "checkpoint: bad RNG state");
  return rng;
}

bool is_visual(const Param& p) {
  return p.name.rfind("encoder.points", 0) == 0 || p.name.rfind("rsa.", 0) == 0;
}

void check_finite(const ForwardResult& fr, const SceneSample& s, long epoch) {
  if (std::isfinite(fr.parts.total)) return;
  throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + ", sample " + s.id +
                       ": components " + fr.parts.to_json().dump());
}

Checkpoint make_initial(const RunConfig& cfg) {
  Checkpoint ck;
  ck.config = cfg;
  Rng init_rng(cfg.seed);
  ck.model = ModelState::init(cfg, init_rng);
  ck.rng_state = rng_to_string(Rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL));
  return ck;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Datasets& data, const TrainOptions& opts) {
  cfg.validate();
  if (data.train.empty() || data.val.empty()) throw PreconditionError("train: empty dataset");
  const auto train_set = prepare(data.train, cfg);
  const auto val_set = prepare(data.val, cfg);

  TrainResult result;
  Checkpoint ck;
  std::vector<std::string> log_lines;
  if (opts.resume) {
    ck = *opts.resume;
    if (ck.config.to_text() != cfg.to_text()) throw ConfigError("resume: checkpoint config differs from run config");
    if (!opts.metrics_log.empty() && std::filesystem::exists(opts.metrics_log)) {
      std::ifstream in(opts.metrics_log);
      std::string line;
      // The epoch-0 line plus one line per completed epoch.
      while (static_cast<long>(log_lines.size()) < ck.epoch + 1 && std::getline(in, line)) log_lines.push_back(line);
    }
  } else {
    ck = make_initial(cfg);
  }
  ModelState& model = ck.model;
  const auto params = model.params();
  AdamW adam(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  adam.first_moments() = ck.adam_m;
  adam.second_moments() = ck.adam_v;
  adam.set_steps(ck.adam_steps);
  Rng shuffle_rng = rng_from_string(ck.rng_state);
  const auto lr_of = [&](const Param& p) { return is_visual(p) ? cfg.lr_visual : cfg.lr; };

  auto flush = [&](const EpochLog& entry) {
    result.log.push_back(entry);
    log_lines.push_back(entry.to_json_line());
    if (!opts.metrics_log.empty()) {
      std::string text;
      for (const auto& l : log_lines) text += l + "\n";
      write_file_atomic(opts.metrics_log, text);
    }
    if (opts.verbose) std::cerr << log_lines.back() << "\n";
  };

  if (!opts.resume) {
    // Epoch 0 records the untrained model.
    EpochLog entry;
    for (const auto& ps : train_set) {
      Tape tape = Tape::inference();
      const ForwardResult fr = forward(tape, model, ps, cfg, true);
      check_finite(fr, *ps.sample, 0);
      add_scaled(entry.train, fr.parts, 1.0 / static_cast<double>(train_set.size()));
    }
    entry.val = build_report(evaluate_records(model, val_set, cfg));
    result.baseline = entry.val;
    flush(entry);
  }

  std::vector<std::size_t> order(train_set.size());
  for (long epoch = ck.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochLog entry;
    entry.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const PreparedSample& ps = train_set[order[b]];
        Tape tape;
        const ForwardResult fr = forward(tape, model, ps, cfg, true);
        check_finite(fr, *ps.sample, epoch);
        tape.backward(scale(fr.loss, inv_batch));
        tape.flush_param_grads();
        add_scaled(entry.train, fr.parts, 1.0 / static_cast<double>(train_set.size()));
      }
      adam.step(params, lr_of);
    }
    entry.val = build_report(evaluate_records(model, val_set, cfg));
    ck.epoch = epoch;
    ck.adam_m = adam.first_moments();
    ck.adam_v = adam.second_moments();
    ck.adam_steps = adam.steps();
    ck.rng_state = rng_to_string(shuffle_rng);
    flush(entry);
    if (!opts.checkpoint.empty()) save_checkpoint(ck, opts.checkpoint);
    if (opts.stop_after_epoch >= 0 && epoch >= opts.stop_after_epoch) break;
  }
  if (!opts.checkpoint.empty() && cfg.epochs == 0) save_checkpoint(ck, opts.checkpoint);
  result.final_state = std::move(ck);
  return result;
}

Report evaluate(Checkpoint& ck, const std::vector<SceneSample>& data, std::vector<EvalRecord>* records) {
  if (data.empty()) throw EmptyEvaluationError("evaluate: empty dataset");
  std::vector<EvalRecord> recs;
  try {
    const auto prepared = prepare(data, ck.config);
    recs = evaluate_records(ck.model, prepared, ck.config);
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("dataset incompatible with checkpoint: ") + e.what());
  } catch (const VocabularyError& e) {
    throw ConfigError(std::string("dataset incompatible with checkpoint: ") + e.what());
  } catch (const PreconditionError& e) {
    throw ConfigError(std::string("dataset incompatible with checkpoint: ") + e.what());
  }
  Report rep = build_report(recs);
  if (records) *records = std::move(recs);
  return rep;
}

// ---- ablation -----------------------------------------------------------------

std::pair<RunConfig, RunConfig> ablation_pair(const RunConfig& base, const std::string& axis) {
  RunConfig on = base, off = base;
  if (axis == "asa") {
    on.asa = true;
    off.asa = false;
  } else if (axis == "rsa") {
    on.rsa = true;
    off.rsa = false;
  } else if (axis == "align_target") {
    on.align_target = AlignTarget::mask;
    off.align_target = AlignTarget::box;
  } else if (axis == "fusion") {
    on.fusion = Fusion::plus;
    off.fusion = Fusion::mul;
  } else if (axis == "adaptive_losses") {
    on.adaptive_losses = true;
    off.adaptive_losses = false;
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "' (asa | rsa | align_target | fusion | adaptive_losses)");
  }
  return {on, off};
}

namespace {

std::pair<std::string, std::string> setting_labels(const std::string& axis) {
  if (axis == "align_target") return {"align_target=mask", "align_target=box"};
  if (axis == "fusion") return {"fusion=plus", "fusion=mul"};
  return {axis + "=on", axis + "=off"};
}

const std::vector<std::string> kMetricKeys = {"rec_acc_025", "rec_acc_05", "res_acc_025", "res_acc_05", "miou", "die3"};

}  // namespace

json ablate(const RunConfig& base, const std::string& axis, const std::vector<std::uint64_t>& seeds,
            const Datasets& data, bool verbose) {
  if (seeds.empty()) throw ConfigError("ablate: at least one seed required");
  const auto [on, off] = ablation_pair(base, axis);
  const auto [on_label, off_label] = setting_labels(axis);
  json rows = json::array();
  json sums = {{"on", json::object()}, {"off", json::object()}};
  for (const auto& k : kMetricKeys) {
    sums["on"][k] = 0.0;
    sums["off"][k] = 0.0;
  }
  for (std::uint64_t seed : seeds) {
    for (int which = 0; which < 2; ++which) {
      RunConfig cfg = which == 0 ? on : off;
      cfg.seed = seed;
      TrainOptions opts;
      opts.verbose = verbose;
      const TrainResult tr = train(cfg, data, opts);
      const json rep = report_to_json(tr.log.back().val);
      json row = {{"setting", which == 0 ? on_label : off_label}, {"seed", seed}};
      for (const auto& k : kMetricKeys) {
        row[k] = rep[k];
        sums[which == 0 ? "on" : "off"][k] = sums[which == 0 ? "on" : "off"][k].get<double>() + rep[k].get<double>();
      }
      row["unique"] = rep["unique"];
      row["multiple"] = rep["multiple"];
      rows.push_back(row);
    }
  }
  json means = {{on_label, json::object()}, {off_label, json::object()}};
  json deltas = json::object();
  const double count = static_cast<double>(seeds.size());
  for (const auto& k : kMetricKeys) {
    const double a = sums["on"][k].get<double>() / count, b = sums["off"][k].get<double>() / count;
    means[on_label][k] = a;
    means[off_label][k] = b;
    deltas[k] = a - b;
  }
  json out = {{"axis", axis}, {"settings", {on_label, off_label}}, {"seeds", seeds},
              {"rows", rows}, {"means", means},                    {"deltas", deltas}};
  if (axis == "asa") out["die3_delta"] = deltas["die3"];
  return out;
}

}  // namespace mcln
