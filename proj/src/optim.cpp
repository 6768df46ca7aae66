#include "mcln/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mcln {

void AdamW::step(const std::vector<Param*>& params,
                 const std::function<double(const Param&)>& lr_of) {
  for (const Param* p : params) {
    if (p->trainable && !p->grad.allFinite()) {
      throw NonFiniteError("adam_step: non-finite gradient in parameter '" + p->name + "'");
    }
  }
  if (m_.empty()) {
    for (const Param* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) {
    throw DataConsistencyError("adam_step: parameter list changed between steps");
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (p.trainable) {
      const double lr = lr_of(p);
      Matrix& m = m_[i];
      Matrix& v = v_[i];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p.grad;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
      const auto update = (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
      p.value.array() -= lr * (update + cfg_.weight_decay * p.value.array());
    }
    p.zero_grad();
  }
}

GradCheckReport grad_check(const std::function<Var(Tape&)>& f, const std::vector<Param*>& inputs,
                           const GradCheckOptions& opts) {
  for (Param* p : inputs) p->zero_grad();
  FreezeLog log;
  {
    Tape tape(&log);
    const Var out = f(tape);
    tape.backward(out);
    tape.flush_param_grads();
  }
  log.start_replay();

  auto evaluate = [&]() {
    log.rewind();
    Tape tape(&log, false);
    return f(tape).scalar();
  };

  GradCheckReport report;
  std::mt19937_64 rng(opts.seed);
  for (Param* p : inputs) {
    const Index count = p->value.size();
    std::vector<Index> entries(static_cast<std::size_t>(count));
    std::iota(entries.begin(), entries.end(), Index{0});
    if (opts.max_entries_per_param > 0 && entries.size() > opts.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(opts.max_entries_per_param);
    }
    for (Index e : entries) {
      double& slot = p->value.data()[e];
      const double saved = slot;
      slot = saved + opts.eps;
      const double plus = evaluate();
      slot = saved - opts.eps;
      const double minus = evaluate();
      slot = saved;
      const double numeric = (plus - minus) / (2.0 * opts.eps);
      const double analytic = p->grad.data()[e];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), opts.abs_floor});
      const double err = std::abs(numeric - analytic) / denom;
      ++report.entries_checked;
      if (!(err <= report.max_rel_error)) {
        report.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        report.worst_entry = p->name + "[" + std::to_string(e) + "] analytic=" +
                             std::to_string(analytic) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  report.passed = report.max_rel_error < opts.tol;
  for (Param* p : inputs) p->zero_grad();
  return report;
}

}  // namespace mcln
