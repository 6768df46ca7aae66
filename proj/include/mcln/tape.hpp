#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every op executed during one forward pass together with the
// closure that maps the op's output gradient onto its inputs. Parameters enter
// as leaves bound to a Param; flush_param_grads() adds their gradients into
// Param::grad once backward() has run.
//
// Quantities that must not carry gradient (adaptive loss weights, hard labels,
// attention masks, argmax choices) are routed through freeze()/freeze_index().
// With a FreezeLog in record mode these values are captured; in replay mode the
// captured values are returned instead of the freshly computed ones, so a
// finite-difference probe differentiates the same function that backward()
// does.

#include <cstddef>
#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include "mcln/matrix.hpp"
#include "mcln/param.hpp"

namespace mcln {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class FreezeLog {
 public:
  enum class Mode { record, replay };

  explicit FreezeLog(Mode mode = Mode::record) : mode_(mode) {}

  Mode mode() const { return mode_; }
  void start_replay() {
    mode_ = Mode::replay;
    cursor_ = 0;
  }
  void rewind() { cursor_ = 0; }
  std::size_t size() const { return entries_.size(); }

  Matrix pass(Matrix fresh);

 private:
  Mode mode_;
  std::vector<Matrix> entries_;
  std::size_t cursor_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  explicit Tape(FreezeLog* freeze_log = nullptr, bool grad_enabled = true)
      : freeze_log_(freeze_log), grad_enabled_(grad_enabled) {}

  // Inference tape: parameters enter as constants and no closures are kept.
  static Tape inference() { return Tape(nullptr, false); }
  bool grad_enabled() const { return grad_enabled_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;

  Var constant(Matrix value);
  // One leaf per Param per tape; repeated calls return the same Var.
  Var param(Param& p);
  Var push(Matrix value, bool requires_grad, Backward backward);
  // Attach the backward closure after the node exists, for closures that read
  // their own output value.
  void set_backward(const Var& v, Backward backward);

  Matrix freeze(Matrix value);
  Index freeze_index(Index index);
  Var freeze_var(const Var& v) { return constant(freeze(v.value())); }

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(const Var& v) const {
    return nodes_[static_cast<std::size_t>(v.id())].requires_grad;
  }
  // Gradient reaching v after backward(); empty when none reached it.
  const Matrix& grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].grad; }

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  void accumulate(int id, Matrix g);
  void backward(const Var& root);
  void flush_param_grads();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
    Param* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, int> param_nodes_;
  FreezeLog* freeze_log_;
  bool grad_enabled_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// ---- ops --------------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_bias(const Var& a, const Var& row);        // broadcast a 1 x cols row over rows
Var mul_scalar_var(const Var& a, const Var& s);    // a * s where s is 1x1
Var sigmoid(const Var& x);
Var relu(const Var& x);
Var softplus(const Var& x);
Var row_softmax(const Var& x, const std::optional<Matrix>& additive_mask = std::nullopt);
Var group_max_rows(const Var& x, Index group);
Var gather_rows(const Var& a, const std::vector<Index>& rows);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Index begin, Index count);
Var sum(const Var& a);       // -> 1x1
Var mean(const Var& a);      // -> 1x1
Var col_mean(const Var& a);  // -> 1 x cols
Var row_sum(const Var& a);   // -> rows x 1
Var smooth_l1(const Var& a, const Var& b, double beta = 1.0);  // summed -> 1x1
// -log softmax(logits)[target] for a single column or row of logits.
Var cross_entropy(const Var& logits, Index target);
Var affine(const Var& x, const Var& weight, const Var& bias);

}  // namespace mcln
