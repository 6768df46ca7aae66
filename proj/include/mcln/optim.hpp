#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mcln/param.hpp"
#include "mcln/tape.hpp"

namespace mcln {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// AdamW with decoupled weight decay. Moments are kept per parameter slot, in
// the order the parameter list is given to step(); that order must not change
// between steps.
class AdamW {
 public:
  explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One update. Throws NonFiniteError (naming the parameter) and leaves every
  // parameter untouched when any trainable gradient is non-finite. Gradients
  // are zeroed afterwards. Untrainable parameters are skipped.
  void step(const std::vector<Param*>& params, const std::function<double(const Param&)>& lr_of);
  void step(const std::vector<Param*>& params, double lr) {
    step(params, [lr](const Param&) { return lr; });
  }

  long steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }

  // Checkpoint access.
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  void set_steps(long s) { steps_ = s; }

 private:
  AdamConfig cfg_;
  long steps_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error, so gradients that are
  // analytically ~0 are compared in absolute terms at tol * floor.
  double abs_floor = 1e-3;
  // 0 checks every entry; otherwise a seeded random subset per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 7;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_entry;
  std::size_t entries_checked = 0;
  bool passed = true;
};

// Compares analytic gradients of a scalar function against central finite
// differences. `f` builds the scalar on the tape it is handed and must be
// deterministic; it is invoked once with gradients enabled and twice per
// probed entry with the recorded frozen values replayed.
GradCheckReport grad_check(const std::function<Var(Tape&)>& f, const std::vector<Param*>& inputs,
                           const GradCheckOptions& opts = {});

}  // namespace mcln
