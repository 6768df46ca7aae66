#include "mcln/tape.hpp"

#include <cmath>
#include <string>

#include "mcln/kernels.hpp"

namespace mcln {

Param uniform_param(std::string name, Index rows, Index cols, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return Param(std::move(name), std::move(m));
}

Param zero_param(std::string name, Index rows, Index cols) {
  return Param(std::move(name), Matrix::Zero(rows, cols));
}

Matrix FreezeLog::pass(Matrix fresh) {
  if (mode_ == Mode::record) {
    entries_.push_back(fresh);
    return fresh;
  }
  if (cursor_ >= entries_.size()) {
    throw DataConsistencyError("FreezeLog: replay requested more values than were recorded");
  }
  const Matrix& recorded = entries_[cursor_++];
  if (recorded.rows() != fresh.rows() || recorded.cols() != fresh.cols()) {
    throw DataConsistencyError("FreezeLog: replayed value has shape " + shape_str(recorded) +
                               ", expected " + shape_str(fresh));
  }
  return recorded;
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Param& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value, Matrix(), grad_enabled_, nullptr, &p});
  const int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                        requires_grad ? std::move(backward) : nullptr, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::set_backward(const Var& v, Backward backward) {
  Node& node = nodes_[static_cast<std::size_t>(v.id())];
  if (node.requires_grad) node.backward = std::move(backward);
}

Matrix Tape::freeze(Matrix value) {
  if (!freeze_log_) return value;
  return freeze_log_->pass(std::move(value));
}

Index Tape::freeze_index(Index index) {
  const Matrix kept = freeze(scalar_matrix(static_cast<double>(index)));
  return static_cast<Index>(kept(0, 0));
}

void Tape::accumulate(int id, Matrix g) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = std::move(g);
  } else {
    node.grad += g;
  }
}

void Tape::backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw DimensionError("backward: root must be 1x1, got " + shape_str(root.value()));
  }
  accumulate(root.id(), scalar_matrix(1.0));
  for (int id = root.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.backward || node.grad.size() == 0) continue;
    // Closures only touch earlier nodes, so the gradient can be lent out and
    // put back.
    Matrix g = std::move(node.grad);
    node.backward(*this, g);
    nodes_[static_cast<std::size_t>(id)].grad = std::move(g);
  }
}

void Tape::flush_param_grads() {
  for (auto& [param, id] : param_nodes_) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad.size() == 0) continue;
    Param* p = const_cast<Param*>(param);
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
    p->grad += node.grad;
  }
}

// ---- ops --------------------------------------------------------------------

namespace {

Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw PreconditionError(std::string(op) + ": vars on different tapes");
  return a.tape();
}

bool any_grad(const Var& a) { return a.tape().requires_grad(a); }
bool any_grad(const Var& a, const Var& b) { return any_grad(a) || any_grad(b); }

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "matmul");
  const int ia = a.id(), ib = b.id();
  return t.push(kernels::matmul(a.value(), b.value()), any_grad(a, b),
                [ia, ib](Tape& tp, const Matrix& g) {
                  if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                  if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_str(a.value()) + " x " + shape_str(b.value()) + "^T");
  }
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value().transpose(), any_grad(a, b),
                [ia, ib](Tape& tp, const Matrix& g) {
                  if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
                  if (tp.needs_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
                });
}

Var transpose(const Var& a) {
  const int ia = a.id();
  return a.tape().push(a.value().transpose(), any_grad(a),
                       [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose()); });
}

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return t.push(kernels::elem_add(a.value(), b.value()), any_grad(a, b),
                [ia, ib](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, g);
                  tp.accumulate(ib, g);
                });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), any_grad(a, b), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return t.push(kernels::elem_mul(a.value(), b.value()), any_grad(a, b),
                [ia, ib](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                  tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                });
}

Var scale(const Var& a, double s) {
  const int ia = a.id();
  return a.tape().push(a.value() * s, any_grad(a),
                       [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * s); });
}

Var add_scalar(const Var& a, double s) {
  const int ia = a.id();
  return a.tape().push(a.value().array() + s, any_grad(a),
                       [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

Var add_bias(const Var& a, const Var& row) {
  Tape& t = same_tape(a, row, "add_bias");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(row.value()) + " for " + shape_str(a.value()));
  }
  const int ia = a.id(), ib = row.id();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), any_grad(a, row), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g.colwise().sum());
  });
}

Var mul_scalar_var(const Var& a, const Var& s) {
  Tape& t = same_tape(a, s, "mul_scalar_var");
  if (s.rows() != 1 || s.cols() != 1) throw DimensionError("mul_scalar_var: scale must be 1x1");
  const int ia = a.id(), is = s.id();
  return t.push(a.value() * s.scalar(), any_grad(a, s), [ia, is](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g * tp.value(is)(0, 0));
    tp.accumulate(is, scalar_matrix(g.cwiseProduct(tp.value(ia)).sum()));
  });
}

Var sigmoid(const Var& x) {
  const int ix = x.id();
  Tape& t = x.tape();
  Var out = t.push(kernels::sigmoid(x.value()), any_grad(x), nullptr);
  const int iy = out.id();
  t.set_backward(out, [ix, iy](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(iy);
    tp.accumulate(ix, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
  return out;
}

Var relu(const Var& x) {
  const int ix = x.id();
  return x.tape().push(kernels::relu(x.value()), any_grad(x), [ix](Tape& tp, const Matrix& g) {
    const Matrix& in = tp.value(ix);
    tp.accumulate(ix, (in.array() > 0.0).select(g, 0.0));
  });
}

Var softplus(const Var& x) {
  const int ix = x.id();
  return x.tape().push(kernels::softplus(x.value()), any_grad(x),
                       [ix](Tape& tp, const Matrix& g) {
                         tp.accumulate(ix, g.cwiseProduct(kernels::sigmoid(tp.value(ix))));
                       });
}

Var row_softmax(const Var& x, const std::optional<Matrix>& additive_mask) {
  Tape& t = x.tape();
  const int ix = x.id();
  Var out = t.push(kernels::row_softmax(x.value(), additive_mask), any_grad(x), nullptr);
  const int iy = out.id();
  t.set_backward(out, [ix, iy](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(iy);
    // dx = y * (g - rowsum(g * y))
    const Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = g;
    dx.colwise() -= dots;
    tp.accumulate(ix, dx.cwiseProduct(y));
  });
  return out;
}

Var group_max_rows(const Var& x, Index group) {
  std::vector<Index> winners;
  Matrix out = kernels::group_max_rows(x.value(), group, &winners);
  const int ix = x.id();
  const Index in_rows = x.rows(), cols = x.cols();
  return x.tape().push(std::move(out), any_grad(x),
                       [ix, in_rows, cols, winners = std::move(winners)](Tape& tp, const Matrix& g) {
                         Matrix dx = Matrix::Zero(in_rows, cols);
                         for (Index r = 0; r < g.rows(); ++r) {
                           for (Index c = 0; c < cols; ++c) {
                             dx(winners[static_cast<std::size_t>(r * cols + c)], c) += g(r, c);
                           }
                         }
                         tp.accumulate(ix, dx);
                       });
}

Var gather_rows(const Var& a, const std::vector<Index>& rows) {
  const Matrix& src = a.value();
  Matrix out(static_cast<Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= src.rows()) {
      throw DataConsistencyError("gather_rows: row " + std::to_string(rows[i]) +
                                 " out of range for " + shape_str(src));
    }
    out.row(static_cast<Index>(i)) = src.row(rows[i]);
  }
  const int ia = a.id();
  const Index src_rows = src.rows();
  return a.tape().push(std::move(out), any_grad(a),
                       [ia, src_rows, rows](Tape& tp, const Matrix& g) {
                         Matrix dx = Matrix::Zero(src_rows, g.cols());
                         for (std::size_t i = 0; i < rows.size(); ++i) {
                           dx.row(rows[i]) += g.row(static_cast<Index>(i));
                         }
                         tp.accumulate(ia, dx);
                       });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw PreconditionError("concat_cols: no parts");
  Tape& t = parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  bool needs = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
    needs = needs || any_grad(p);
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  return t.push(std::move(out), needs, [spans](Tape& tp, const Matrix& g) {
    for (const auto& [id, begin] : spans) {
      tp.accumulate(id, g.middleCols(begin, tp.value(id).cols()));
    }
  });
}

Var slice_cols(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") of " + shape_str(a.value()));
  }
  const int ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  return a.tape().push(a.value().middleCols(begin, count), any_grad(a),
                       [ia, rows, cols, begin, count](Tape& tp, const Matrix& g) {
                         Matrix dx = Matrix::Zero(rows, cols);
                         dx.middleCols(begin, count) = g;
                         tp.accumulate(ia, dx);
                       });
}

Var sum(const Var& a) {
  const int ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  return a.tape().push(scalar_matrix(a.value().sum()), any_grad(a),
                       [ia, rows, cols](Tape& tp, const Matrix& g) {
                         tp.accumulate(ia, Matrix::Constant(rows, cols, g(0, 0)));
                       });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw PreconditionError("mean: empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var col_mean(const Var& a) {
  const int ia = a.id();
  const Index rows = a.rows();
  return a.tape().push(a.value().colwise().mean(), any_grad(a), [ia, rows](Tape& tp, const Matrix& g) {
    Matrix dx = g.replicate(rows, 1) / static_cast<double>(rows);
    tp.accumulate(ia, dx);
  });
}

Var row_sum(const Var& a) {
  const int ia = a.id();
  const Index cols = a.cols();
  return a.tape().push(a.value().rowwise().sum(), any_grad(a), [ia, cols](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.replicate(1, cols));
  });
}

Var smooth_l1(const Var& a, const Var& b, double beta) {
  Tape& t = same_tape(a, b, "smooth_l1");
  require_same_shape(a.value(), b.value(), "smooth_l1");
  const Matrix diff = a.value() - b.value();
  double total = 0.0;
  for (Index i = 0; i < diff.size(); ++i) {
    const double d = std::abs(diff.data()[i]);
    total += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
  }
  const int ia = a.id(), ib = b.id();
  return t.push(scalar_matrix(total), any_grad(a, b), [ia, ib, diff, beta](Tape& tp, const Matrix& g) {
    Matrix d = diff.unaryExpr([beta](double v) {
      return std::abs(v) < beta ? v / beta : (v > 0.0 ? 1.0 : -1.0);
    });
    d *= g(0, 0);
    tp.accumulate(ia, d);
    tp.accumulate(ib, -d);
  });
}

Var cross_entropy(const Var& logits, Index target) {
  const Matrix& z = logits.value();
  if (z.rows() != 1 && z.cols() != 1) throw DimensionError("cross_entropy: logits must be a vector");
  if (target < 0 || target >= z.size()) throw PreconditionError("cross_entropy: target out of range");
  const double zmax = z.maxCoeff();
  const double lse = zmax + std::log((z.array() - zmax).exp().sum());
  Matrix probs = (z.array() - lse).exp();
  const int iz = logits.id();
  return logits.tape().push(scalar_matrix(lse - z.data()[target]), any_grad(logits),
                            [iz, target, probs](Tape& tp, const Matrix& g) {
                              Matrix d = probs;
                              d.data()[target] -= 1.0;
                              tp.accumulate(iz, d * g(0, 0));
                            });
}

Var affine(const Var& x, const Var& weight, const Var& bias) {
  return add_bias(matmul(x, weight), bias);
}

}  // namespace mcln
