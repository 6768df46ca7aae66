// Command-line front end: gen-data, train, eval, gradcheck, ablate.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "mcln/errors.hpp"
#include "mcln/pipeline.hpp"

using namespace mcln;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw ConfigError("--seeds: no seeds given");
  return out;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::load(path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MCLN 3D visual grounding: synthetic data, training, evaluation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic referring dataset (JSON Lines)");
  std::string gen_spec, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::size_t gen_count = 500;
  gen->add_option("--spec", gen_spec, "Scene spec file (key = value)");
  gen->add_option("--out", gen_out, "Output dataset path")->required();
  gen->add_option("--seed", gen_seed, "Generation seed (default: the spec's seed key)");
  gen->add_option("--count", gen_count, "Number of samples")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string tr_config, tr_out, tr_log, tr_resume;
  std::vector<std::string> tr_flags;
  tr->add_option("--config", tr_config, "Run config file (key = value)");
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--log", tr_log, "Metrics log path (default: <out>.metrics.jsonl)");
  tr->add_option("--resume", tr_resume, "Resume from this checkpoint");
  tr->add_option("--ablate-flag", tr_flags, "Config override key=value, e.g. asa=off (repeatable)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_report, ev_csv;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--data", ev_data, "Dataset path")->required();
  ev->add_option("--report", ev_report, "Report JSON path")->required();
  ev->add_option("--csv", ev_csv, "Optional per-sample CSV path");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable module");

  auto* ab = app.add_subcommand("ablate", "Paired training runs along one ablation axis");
  std::string ab_axis, ab_config, ab_seeds, ab_out;
  ab->add_option("--axis", ab_axis, "asa | rsa | align_target | fusion | adaptive_losses")->required();
  ab->add_option("--config", ab_config, "Base run config file");
  ab->add_option("--seeds", ab_seeds, "Comma-separated seeds")->required();
  ab->add_option("--out", ab_out, "Output JSON path")->required();

  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Print per-epoch progress to stderr");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      SceneSpec spec = gen_spec.empty() ? SceneSpec{} : SceneSpec::from_config(KeyValueFile::load(gen_spec));
      save_dataset(generate_dataset(spec, gen_count, gen_seed.value_or(spec.seed)), gen_out);
      std::cout << "wrote " << gen_count << " samples to " << gen_out << "\n";
    } else if (*tr) {
      const RunConfig cfg = load_config(tr_config, tr_flags);
      TrainOptions opts;
      opts.checkpoint = tr_out;
      opts.metrics_log = tr_log.empty() ? tr_out + ".metrics.jsonl" : tr_log;
      opts.verbose = verbose;
      if (!tr_resume.empty()) opts.resume = load_checkpoint(tr_resume);
      const auto start = std::chrono::steady_clock::now();
      const TrainResult result = train(cfg, load_or_generate(cfg), opts);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << report_to_json(result.log.back().val).dump(2) << "\n"
                << "trained " << result.final_state.epoch << " epochs in " << std::fixed << std::setprecision(1)
                << secs << " s; checkpoint " << tr_out << "\n";
    } else if (*ev) {
      Checkpoint ck = load_checkpoint(ev_ckpt);
      std::vector<EvalRecord> records;
      const Report rep = evaluate(ck, load_dataset(ev_data), &records);
      write_file_atomic(ev_report, report_to_json(rep).dump(2) + "\n");
      if (!ev_csv.empty()) write_file_atomic(ev_csv, records_to_csv(records));
      std::cout << report_to_json(rep).dump(2) << "\n";
    } else if (*gc) {
      const auto start = std::chrono::steady_clock::now();
      bool ok = true;
      for (const auto& e : gradcheck_suite()) {
        ok = ok && e.report.passed;
        std::cout << (e.report.passed ? "PASS " : "FAIL ") << std::left << std::setw(36) << e.name
                  << " max_rel_err=" << std::scientific << std::setprecision(2) << e.report.max_rel_error
                  << " entries=" << e.report.entries_checked;
        if (!e.report.passed) std::cout << " worst " << e.report.worst_entry;
        std::cout << "\n";
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << std::fixed << std::setprecision(1) << "gradcheck " << (ok ? "passed" : "FAILED") << " in " << secs
                << " s\n";
      return ok ? 0 : 1;
    } else if (*ab) {
      const RunConfig base = load_config(ab_config, {});
      const auto out = ablate(base, ab_axis, parse_seeds(ab_seeds), load_or_generate(base), verbose);
      write_file_atomic(ab_out, out.dump(2) + "\n");
      std::cout << out["deltas"].dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
