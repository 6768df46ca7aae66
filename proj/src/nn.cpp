#include "mcln/nn.hpp"

#include <cmath>

namespace mcln {

void MlpSpec::validate() const {
  if (activations.empty()) throw PreconditionError("MlpSpec: at least one layer required");
  if (widths.size() != activations.size() + 1) {
    throw DimensionError("MlpSpec: " + std::to_string(widths.size()) + " widths for " +
                         std::to_string(activations.size()) + " layers");
  }
  for (Index w : widths) {
    if (w < 1) throw DimensionError("MlpSpec: widths must be positive");
  }
}

Mlp Mlp::init(const std::string& name, MlpSpec spec, Rng& rng) {
  spec.validate();
  Mlp mlp;
  for (Index i = 0; i < spec.layers(); ++i) {
    const Index in = spec.widths[static_cast<std::size_t>(i)];
    const Index out = spec.widths[static_cast<std::size_t>(i + 1)];
    const std::string layer = name + ".l" + std::to_string(i);
    mlp.weights.push_back(uniform_param(layer + ".w", in, out, in, rng));
    mlp.biases.push_back(uniform_param(layer + ".b", 1, out, in, rng));
  }
  mlp.spec = std::move(spec);
  return mlp;
}

Mlp Mlp::zeros(const std::string& name, MlpSpec spec) {
  spec.validate();
  Mlp mlp;
  for (Index i = 0; i < spec.layers(); ++i) {
    const Index in = spec.widths[static_cast<std::size_t>(i)];
    const Index out = spec.widths[static_cast<std::size_t>(i + 1)];
    const std::string layer = name + ".l" + std::to_string(i);
    mlp.weights.push_back(zero_param(layer + ".w", in, out));
    mlp.biases.push_back(zero_param(layer + ".b", 1, out));
  }
  mlp.spec = std::move(spec);
  return mlp;
}

void Mlp::for_each_param(const std::function<void(Param&)>& f) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    f(weights[i]);
    f(biases[i]);
  }
}

Var mlp_forward(Tape& tape, Mlp& mlp, const Var& x) {
  if (x.cols() != mlp.spec.widths.front()) {
    throw DimensionError("mlp_forward: input width " + std::to_string(x.cols()) + ", expected " +
                         std::to_string(mlp.spec.widths.front()));
  }
  Var h = x;
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    h = affine(h, tape.param(mlp.weights[i]), tape.param(mlp.biases[i]));
    if (mlp.spec.activations[i] == Activation::relu) h = relu(h);
  }
  return h;
}

AttentionParams AttentionParams::init(const std::string& name, Index d, Index heads,
                                      bool with_output, Rng& rng) {
  if (heads < 1 || d % heads != 0) {
    throw PreconditionError("attention: d=" + std::to_string(d) + " not divisible by heads=" +
                            std::to_string(heads));
  }
  AttentionParams p;
  p.wq = uniform_param(name + ".wq", d, d, d, rng);
  p.wk = uniform_param(name + ".wk", d, d, d, rng);
  p.wv = uniform_param(name + ".wv", d, d, d, rng);
  if (with_output) p.wo = uniform_param(name + ".wo", d, d, d, rng);
  p.heads = heads;
  return p;
}

void AttentionParams::for_each_param(const std::function<void(Param&)>& f) {
  f(wq);
  f(wk);
  f(wv);
  if (has_output()) f(wo);
}

Var attention(Tape& tape, AttentionParams& p, const Var& queries, const Var& context,
              const std::optional<Matrix>& mask) {
  const Index dh = p.wq.value.cols() / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Var q = scale(matmul(queries, tape.param(p.wq)), inv_sqrt);
  const Var k = matmul(context, tape.param(p.wk));
  const Var v = matmul(context, tape.param(p.wv));

  Var out;
  if (p.heads == 1) {
    out = matmul(row_softmax(matmul_nt(q, k), mask), v);
  } else {
    std::vector<Var> parts;
    for (Index h = 0; h < p.heads; ++h) {
      const Var qh = slice_cols(q, h * dh, dh);
      const Var kh = slice_cols(k, h * dh, dh);
      const Var vh = slice_cols(v, h * dh, dh);
      parts.push_back(matmul(row_softmax(matmul_nt(qh, kh), mask), vh));
    }
    out = concat_cols(parts);
  }
  if (p.has_output()) out = matmul(out, tape.param(p.wo));
  return out;
}

Ffn Ffn::init(const std::string& name, Index d, Index hidden, Rng& rng) {
  Ffn f;
  f.w1 = uniform_param(name + ".w1", d, hidden, d, rng);
  f.b1 = uniform_param(name + ".b1", 1, hidden, d, rng);
  f.w2 = uniform_param(name + ".w2", hidden, d, hidden, rng);
  f.b2 = uniform_param(name + ".b2", 1, d, hidden, rng);
  return f;
}

void Ffn::for_each_param(const std::function<void(Param&)>& f) {
  f(w1);
  f(b1);
  f(w2);
  f(b2);
}

Var ffn_forward(Tape& tape, Ffn& f, const Var& x) {
  const Var h = relu(affine(x, tape.param(f.w1), tape.param(f.b1)));
  return affine(h, tape.param(f.w2), tape.param(f.b2));
}

}  // namespace mcln
