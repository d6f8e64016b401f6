#include "asen/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "asen/error.hpp"

namespace asen::ops {

namespace {

Tape& tape_of(Var v) {
  if (v.tape() == nullptr) throw ContractError("operation on an unbound Var");
  return *v.tape();
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                       shape_string(b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

Real sigmoid_of(Real x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor one_hot(std::size_t length, std::size_t index) {
  if (index >= length) {
    throw VocabularyError("one-hot index " + std::to_string(index) + " >= " +
                          std::to_string(length));
  }
  Tensor t(Shape{length});
  t[index] = 1.0;
  return t;
}

Var conv_1x1(Var input, Var kernel, std::optional<Var> bias) {
  Tape& tape = tape_of(input);
  const Tensor& in = input.value();
  const Tensor& k = kernel.value();
  require_rank("conv_1x1", in, 3);
  require_rank("conv_1x1", k, 2);
  const std::size_t cin = in.dim(0), hw = in.dim(1) * in.dim(2), cout = k.dim(0);
  if (k.dim(1) != cin) mismatch("conv_1x1", k.shape(), in.shape());
  if (bias && bias->value().shape() != Shape{cout}) mismatch("conv_1x1", bias->shape(), k.shape());

  Tensor out(Shape{cout, in.dim(1), in.dim(2)});
  for (std::size_t o = 0; o < cout; ++o) {
    Real* dst = out.data().data() + o * hw;
    if (bias) std::fill(dst, dst + hw, bias->value()[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const Real w = k[o * cin + c];
      const Real* src = in.data().data() + c * hw;
      for (std::size_t j = 0; j < hw; ++j) dst[j] += w * src[j];
    }
  }

  auto backward = [input, kernel, cin, cout, hw](const Tensor& g, std::span<Tensor* const> pg) {
    const Tensor& in = input.value();
    const Tensor& k = kernel.value();
    if (Tensor* gi = pg[0]) {
      for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t c = 0; c < cin; ++c) {
          const Real w = k[o * cin + c];
          for (std::size_t j = 0; j < hw; ++j) (*gi)[c * hw + j] += w * g[o * hw + j];
        }
      }
    }
    if (Tensor* gk = pg[1]) {
      for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t c = 0; c < cin; ++c) {
          Real acc = 0;
          for (std::size_t j = 0; j < hw; ++j) acc += g[o * hw + j] * in[c * hw + j];
          (*gk)[o * cin + c] += acc;
        }
      }
    }
    if (pg.size() > 2 && pg[2] != nullptr) {
      for (std::size_t o = 0; o < cout; ++o) {
        Real acc = 0;
        for (std::size_t j = 0; j < hw; ++j) acc += g[o * hw + j];
        (*pg[2])[o] += acc;
      }
    }
  };
  if (bias) return tape.record(std::move(out), {input, kernel, *bias}, backward, "conv_1x1");
  return tape.record(std::move(out), {input, kernel}, backward, "conv_1x1");
}

Var fully_connected(Var input, Var weight, std::optional<Var> bias) {
  Tape& tape = tape_of(input);
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  require_rank("fully_connected", x, 1);
  require_rank("fully_connected", w, 2);
  const std::size_t din = x.dim(0), dout = w.dim(0);
  if (w.dim(1) != din) mismatch("fully_connected", w.shape(), x.shape());
  if (bias && bias->value().shape() != Shape{dout}) {
    mismatch("fully_connected", bias->shape(), w.shape());
  }

  Tensor out(Shape{dout});
  for (std::size_t o = 0; o < dout; ++o) {
    Real acc = bias ? bias->value()[o] : 0.0;
    for (std::size_t i = 0; i < din; ++i) acc += w[o * din + i] * x[i];
    out[o] = acc;
  }

  auto backward = [input, weight, din, dout](const Tensor& g, std::span<Tensor* const> pg) {
    const Tensor& x = input.value();
    const Tensor& w = weight.value();
    if (Tensor* gx = pg[0]) {
      for (std::size_t o = 0; o < dout; ++o) {
        for (std::size_t i = 0; i < din; ++i) (*gx)[i] += w[o * din + i] * g[o];
      }
    }
    if (Tensor* gw = pg[1]) {
      for (std::size_t o = 0; o < dout; ++o) {
        for (std::size_t i = 0; i < din; ++i) (*gw)[o * din + i] += g[o] * x[i];
      }
    }
    if (pg.size() > 2 && pg[2] != nullptr) pg[2]->add_(g);
  };
  if (bias) return tape.record(std::move(out), {input, weight, *bias}, backward, "fully_connected");
  return tape.record(std::move(out), {input, weight}, backward, "fully_connected");
}

Var select_column(Var weight, std::size_t index) {
  Tape& tape = tape_of(weight);
  const Tensor& w = weight.value();
  require_rank("select_column", w, 2);
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  if (index >= cols) {
    throw VocabularyError("attribute index " + std::to_string(index) + " >= " +
                          std::to_string(cols));
  }
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) out[r] = w[r * cols + index];
  return tape.record(
      std::move(out), {weight},
      [rows, cols, index](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t r = 0; r < rows; ++r) (*pg[0])[r * cols + index] += g[r];
      },
      "select_column");
}

Var select_row(Var weight, std::size_t index) {
  Tape& tape = tape_of(weight);
  const Tensor& w = weight.value();
  require_rank("select_row", w, 2);
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  if (index >= rows) {
    throw VocabularyError("attribute index " + std::to_string(index) + " >= " +
                          std::to_string(rows));
  }
  const auto first = w.values().begin() + static_cast<std::ptrdiff_t>(index * cols);
  Tensor out(Shape{cols}, std::vector<Real>(first, first + static_cast<std::ptrdiff_t>(cols)));
  return tape.record(
      std::move(out), {weight},
      [cols, index](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t c = 0; c < cols; ++c) (*pg[0])[index * cols + c] += g[c];
      },
      "select_row");
}

Var activation(Var input, Activation kind) {
  Tape& tape = tape_of(input);
  const Tensor& x = input.value();
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    switch (kind) {
      case Activation::tanh: out[i] = std::tanh(x[i]); break;
      case Activation::relu: out[i] = x[i] > 0 ? x[i] : 0.0; break;
      case Activation::sigmoid: out[i] = sigmoid_of(x[i]); break;
    }
  }
  // The derivative is expressed through the output value, read back at backward time.
  auto holder = std::make_shared<Var>();
  Var result = tape.record(
      std::move(out), {input},
      [input, kind, holder](const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& x = input.value();
        const Tensor& y = holder->value();
        Tensor& gi = *pg[0];
        for (std::size_t i = 0; i < x.size(); ++i) {
          switch (kind) {
            case Activation::tanh: gi[i] += g[i] * (1.0 - y[i] * y[i]); break;
            case Activation::relu: gi[i] += x[i] > 0 ? g[i] : 0.0; break;
            case Activation::sigmoid: gi[i] += g[i] * y[i] * (1.0 - y[i]); break;
          }
        }
      },
      "activation");
  *holder = result;
  return result;
}

Var softmax_flat(Var scores) {
  Tape& tape = tape_of(scores);
  const Tensor& s = scores.value();
  require_rank("softmax_flat", s, 3);
  if (s.dim(0) != 1) {
    throw DimensionError("softmax_flat: expected a single channel, got shape " +
                         shape_string(s.shape()));
  }
  const std::size_t h = s.dim(1), w = s.dim(2), n = h * w;
  if (n == 0) throw DimensionError("softmax_flat: empty spatial extent");

  const Real peak = *std::max_element(s.data().begin(), s.data().end());
  Tensor out(Shape{h, w});
  Real total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(s[j] - peak);
    total += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= total;

  auto holder = std::make_shared<Var>();
  Var result = tape.record(
      std::move(out), {scores},
      [holder, n](const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& a = holder->value();
        Real dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * a[j];
        for (std::size_t j = 0; j < n; ++j) (*pg[0])[j] += a[j] * (g[j] - dot);
      },
      "softmax_flat");
  *holder = result;
  return result;
}

namespace {

// Shared kernel so uniform weights and mean pooling agree bit for bit.
void spatial_accumulate(const Tensor& f, std::span<const Real> weights, std::size_t c,
                        std::size_t n, Tensor& out) {
  for (std::size_t k = 0; k < c; ++k) {
    Real acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += weights[j] * f[k * n + j];
    out[k] = acc;
  }
}

}  // namespace

Var weighted_spatial_sum(Var features, Var weights) {
  Tape& tape = tape_of(features);
  const Tensor& f = features.value();
  const Tensor& a = weights.value();
  require_rank("weighted_spatial_sum", f, 3);
  require_rank("weighted_spatial_sum", a, 2);
  if (a.dim(0) != f.dim(1) || a.dim(1) != f.dim(2)) {
    mismatch("weighted_spatial_sum", f.shape(), a.shape());
  }
  const std::size_t c = f.dim(0), n = a.size();
  Tensor out(Shape{c});
  spatial_accumulate(f, a.data(), c, n, out);

  return tape.record(
      std::move(out), {features, weights},
      [features, weights, c, n](const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& f = features.value();
        const Tensor& a = weights.value();
        if (Tensor* gf = pg[0]) {
          for (std::size_t k = 0; k < c; ++k) {
            for (std::size_t j = 0; j < n; ++j) (*gf)[k * n + j] += g[k] * a[j];
          }
        }
        if (Tensor* ga = pg[1]) {
          for (std::size_t j = 0; j < n; ++j) {
            Real acc = 0;
            for (std::size_t k = 0; k < c; ++k) acc += g[k] * f[k * n + j];
            (*ga)[j] += acc;
          }
        }
      },
      "weighted_spatial_sum");
}

Var mean_pool_spatial(Var features) {
  Tape& tape = tape_of(features);
  const Tensor& f = features.value();
  require_rank("mean_pool_spatial", f, 3);
  const std::size_t c = f.dim(0), n = f.dim(1) * f.dim(2);
  if (n == 0) throw DimensionError("mean_pool_spatial: empty spatial extent");
  const Real w = 1.0 / static_cast<Real>(n);
  const std::vector<Real> uniform(n, w);
  Tensor out(Shape{c});
  spatial_accumulate(f, uniform, c, n, out);

  return tape.record(
      std::move(out), {features},
      [c, n, w](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t k = 0; k < c; ++k) {
          for (std::size_t j = 0; j < n; ++j) (*pg[0])[k * n + j] += g[k] * w;
        }
      },
      "mean_pool_spatial");
}

Var spatial_broadcast(Var vec, std::size_t height, std::size_t width) {
  Tape& tape = tape_of(vec);
  const Tensor& v = vec.value();
  require_rank("spatial_broadcast", v, 1);
  const std::size_t c = v.dim(0), n = height * width;
  Tensor out(Shape{c, height, width});
  for (std::size_t k = 0; k < c; ++k) {
    std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(k * n), n, v[k]);
  }
  return tape.record(
      std::move(out), {vec},
      [c, n](const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t k = 0; k < c; ++k) {
          Real acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[k * n + j];
          (*pg[0])[k] += acc;
        }
      },
      "spatial_broadcast");
}

Var combine(Var a, Var b, Combine kind) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (kind == Combine::mul) {
    if (x.shape() != y.shape()) mismatch("mul", x.shape(), y.shape());
    Tensor out = Tensor::zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return tape.record(
        std::move(out), {a, b},
        [a, b](const Tensor& g, std::span<Tensor* const> pg) {
          const Tensor& x = a.value();
          const Tensor& y = b.value();
          if (pg[0]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * y[i];
          }
          if (pg[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * x[i];
          }
        },
        "mul");
  }

  if (x.rank() == 0 || x.rank() != y.rank() ||
      !std::equal(x.shape().begin() + 1, x.shape().end(), y.shape().begin() + 1)) {
    mismatch("concat", x.shape(), y.shape());
  }
  Shape shape = x.shape();
  shape[0] += y.dim(0);
  std::vector<Real> data(x.values());
  data.insert(data.end(), y.values().begin(), y.values().end());
  const std::size_t split = x.size();
  return tape.record(
      Tensor(std::move(shape), std::move(data)), {a, b},
      [split](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0]) {
          for (std::size_t i = 0; i < split; ++i) (*pg[0])[i] += g[i];
        }
        if (pg[1]) {
          for (std::size_t i = split; i < g.size(); ++i) (*pg[1])[i - split] += g[i];
        }
      },
      "concat");
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a);
  if (a.shape() != b.shape()) mismatch("add", a.shape(), b.shape());
  Tensor out = a.value();
  out.add_(b.value());
  return tape.record(
      std::move(out), {a, b},
      [](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0]) pg[0]->add_(g);
        if (pg[1]) pg[1]->add_(g);
      },
      "add");
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a);
  if (a.shape() != b.shape()) mismatch("sub", a.shape(), b.shape());
  Tensor out = a.value();
  out.add_scaled_(b.value(), -1.0);
  return tape.record(
      std::move(out), {a, b},
      [](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0]) pg[0]->add_(g);
        if (pg[1]) pg[1]->add_scaled_(g, -1.0);
      },
      "sub");
}

Var sum(std::span<const Var> terms) {
  if (terms.empty()) throw ContractError("sum of zero terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Var mean(std::span<const Var> terms) {
  if (terms.empty()) throw ContractError("mean of zero terms");
  return affine(sum(terms), 1.0 / static_cast<Real>(terms.size()), 0.0);
}

Var sum_all(Var x) {
  Tape& tape = tape_of(x);
  Real total = 0;
  for (Real v : x.value().data()) total += v;
  return tape.record(
      Tensor::scalar(total), {x},
      [](const Tensor& g, std::span<Tensor* const> pg) {
        for (Real& v : pg[0]->data()) v += g[0];
      },
      "sum_all");
}

Var affine(Var x, Real scale, Real shift) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (Real& v : out.data()) v = scale * v + shift;
  return tape.record(
      std::move(out), {x},
      [scale](const Tensor& g, std::span<Tensor* const> pg) { pg[0]->add_scaled_(g, scale); },
      "affine");
}

Var cosine_similarity(Var u, Var v) {
  Tape& tape = tape_of(u);
  const Tensor& a = u.value();
  const Tensor& b = v.value();
  require_rank("cosine_similarity", a, 1);
  if (a.shape() != b.shape()) mismatch("cosine_similarity", a.shape(), b.shape());
  Real dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kDegenerateNorm || nb < kDegenerateNorm) {
    throw DegenerateVectorError("cosine_similarity: vector norm below 1e-12");
  }
  const Real cos = dot / (na * nb);
  return tape.record(
      Tensor::scalar(cos), {u, v},
      [u, v, na, nb, cos](const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& a = u.value();
        const Tensor& b = v.value();
        const Real s = g[0];
        if (pg[0]) {
          for (std::size_t i = 0; i < a.size(); ++i) {
            (*pg[0])[i] += s * (b[i] / (na * nb) - cos * a[i] / (na * na));
          }
        }
        if (pg[1]) {
          for (std::size_t i = 0; i < b.size(); ++i) {
            (*pg[1])[i] += s * (a[i] / (na * nb) - cos * b[i] / (nb * nb));
          }
        }
      },
      "cosine_similarity");
}

}  // namespace asen::ops
