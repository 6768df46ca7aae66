#pragma once

// Model assembly, training loop, evaluation, checkpoints, gradient suite and
// ablation runner.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcln/asa.hpp"
#include "mcln/data.hpp"
#include "mcln/encoder.hpp"
#include "mcln/kvconfig.hpp"
#include "mcln/metrics.hpp"
#include "mcln/optim.hpp"
#include "mcln/rec_branch.hpp"
#include "mcln/res_decoder.hpp"
#include "mcln/rsa.hpp"

namespace mcln {

enum class AlignTarget { mask, box };
// Initial RES decoder queries: refined text tokens or refined visual tokens.
enum class ResQueries { text, visual };

struct RunConfig {
  std::uint64_t seed = 1;

  Index d = 32;
  Index heads = 1;
  Index encoder_layers = 2;
  Index queries = 8;
  Index max_tokens = 12;
  Index ffn_hidden = 64;
  Index rec_layers = 2;
  Index res_layers = 2;
  Index neighbors = 2;
  double radius = 0.2;

  AsaConfig asa_cfg;
  RecLossWeights rec_weights;

  double lr = 1e-3;
  double lr_visual = 1e-3;  // point encoder and RSA
  double weight_decay = 1e-4;
  Index batch_size = 8;
  Index epochs = 60;

  bool asa = true;
  bool rsa = true;
  AlignTarget align_target = AlignTarget::mask;
  Fusion fusion = Fusion::plus;
  bool adaptive_losses = true;
  bool mq_sigmoid = true;
  ResQueries res_queries = ResQueries::text;

  // Datasets; generated from `scene` when the paths are empty.
  std::string train_data, val_data;
  Index train_samples = 500;
  Index val_samples = 100;
  std::uint64_t data_seed = 1000;
  SceneSpec scene;

  void validate() const;
  static RunConfig from_kv(const KeyValueFile& kv);
  static RunConfig load(const std::filesystem::path& path);
  // Round-trips through from_kv.
  std::string to_text() const;
  // Applies one `key=value` override, e.g. from --ablate-flag asa=off.
  void apply_override(const std::string& assignment);
};

struct ModelState {
  EncoderState encoder;
  RsaState rsa;
  ResDecoderState res;
  RecState rec;

  static ModelState init(const RunConfig& cfg, Rng& rng);
  void for_each_param(const std::function<void(Param&)>& f);
  std::vector<Param*> params();
};

// Model inputs derived once per sample.
struct PreparedSample {
  const SceneSample* sample = nullptr;
  Matrix features;  // n x 6
  NeighborTable neighbors;
};

std::vector<PreparedSample> prepare(const std::vector<SceneSample>& samples, const RunConfig& cfg);

struct LossBreakdown {
  double total = 0.0;
  double rec = 0.0, res = 0.0;
  double rec_center = 0.0, rec_size = 0.0, rec_giou = 0.0, rec_score = 0.0;
  double focal_p = 0.0, focal_q = 0.0, focal_fin = 0.0, focal_point = 0.0;
  double dice_p = 0.0, dice_q = 0.0, dice_fin = 0.0, dice_mask = 0.0;

  nlohmann::json to_json() const;
};

struct ForwardResult {
  Var loss;  // total; only meaningful when gt was used
  LossBreakdown parts;
  Aabb box;                  // B_box
  Index selected = 0;
  std::vector<double> mp, mq, mf;  // superpoint probabilities
  double mu = 0.0;
};

// Full forward pass. With compute_loss the composite loss is assembled from
// the sample's ground truth.
ForwardResult forward(Tape& tape, ModelState& model, const PreparedSample& ps, const RunConfig& cfg,
                      bool compute_loss = true);

// IoUs of a box and a point mask against the sample's ground truth.
EvalRecord score_prediction(const SceneSample& s, const Aabb& box, const BinaryMask& point_mask);
EvalRecord evaluate_sample(ModelState& model, const PreparedSample& ps, const RunConfig& cfg);
std::vector<EvalRecord> evaluate_records(ModelState& model, const std::vector<PreparedSample>& data,
                                         const RunConfig& cfg);

struct Checkpoint {
  RunConfig config;
  ModelState model;
  std::vector<Matrix> adam_m, adam_v;
  long adam_steps = 0;
  long epoch = 0;  // completed epochs
  std::string rng_state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochLog {
  long epoch = 0;
  LossBreakdown train;  // means over the epoch's samples
  Report val;
  std::string to_json_line() const;
};

struct TrainOptions {
  std::filesystem::path checkpoint;   // written after every epoch when set
  std::filesystem::path metrics_log;  // JSON Lines, rewritten atomically per epoch
  std::optional<Checkpoint> resume;
  long stop_after_epoch = -1;         // stop early (for resume tests)
  bool verbose = false;
};

struct TrainResult {
  Checkpoint final_state;
  std::vector<EpochLog> log;
  Report baseline;  // validation report of the untrained model
};

struct Datasets {
  std::vector<SceneSample> train, val;
};
Datasets load_or_generate(const RunConfig& cfg);

TrainResult train(const RunConfig& cfg, const Datasets& data, const TrainOptions& opts = {});

Report evaluate(Checkpoint& ck, const std::vector<SceneSample>& data, std::vector<EvalRecord>* records = nullptr);

struct GradSuiteEntry {
  std::string name;
  GradCheckReport report;
};
// Finite-difference checks of every differentiable module and of the full
// loss on one toy sample.
std::vector<GradSuiteEntry> gradcheck_suite(const GradCheckOptions& opts = {});

// Paired runs of an ablation axis over seeds. Rows hold final validation
// metrics; deltas are on-minus-off means.
nlohmann::json ablate(const RunConfig& base, const std::string& axis, const std::vector<std::uint64_t>& seeds,
                      const Datasets& data, bool verbose = false);
// The two settings of an axis, "on" first.
std::pair<RunConfig, RunConfig> ablation_pair(const RunConfig& base, const std::string& axis);

}  // namespace mcln
