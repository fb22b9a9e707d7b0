#include "roboenc/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "roboenc/errors.hpp"

namespace roboenc {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

CMapR as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapR(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MapR as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MapR(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* tape = vars.begin()->tape();
  if (tape == nullptr) throw ContractError("operand is not on a tape");
  for (const Var& v : vars) {
    if (v.tape() != tape) throw ContractError("operands recorded on different tapes");
  }
  return *tape;
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(v.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
}

Var finish(Tape& tape, Tensor value, std::vector<std::size_t> parents, Tape::BackwardFn fn,
           const char* op) {
  value.require_finite(op);
  return tape.record(std::move(value), std::move(parents), std::move(fn));
}

// Elementwise unary op with derivative computed from (input, output).
template <typename F, typename D>
Var unary(Var a, const char* op, F f, D df) {
  Tape& tape = same_tape({a});
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return finish(
      tape, std::move(y), {ia},
      [ia, df](const Tape& t, const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& x = t.value(ia);
        Tensor& gx = *pg[0];
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * df(x[i]);
      },
      op);
}

std::size_t last_dim(const Tensor& t) { return t.shape().empty() ? 1 : t.shape().back(); }

}  // namespace

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("Var is not bound to a tape");
  return tape_->value(*this);
}

Tensor Gradients::of(Var v) const {
  if (v.id() >= grads_.size()) throw ContractError("Var is not part of this gradient map");
  if (grads_[v.id()]) return *grads_[v.id()];
  return Tensor(shapes_[v.id()], 0.0);
}

bool Gradients::reached(Var v) const {
  return v.id() < grads_.size() && grads_[v.id()].has_value();
}

Var Tape::leaf(Tensor value) {
  value.require_finite("leaf tensor");
  nodes_.push_back(Node{std::move(value), {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  value.require_finite("constant tensor");
  nodes_.push_back(Node{std::move(value), {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  bool needs = false;
  for (std::size_t p : parents) {
    if (p >= nodes_.size()) throw ContractError("parent recorded after child");
    needs = needs || nodes_[p].requires_grad;
  }
  if (!needs) backward = nullptr;
  nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward), needs});
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var root) const {
  if (root.tape() != this) throw ContractError("backward root is not on this tape");
  if (value(root).size() != 1 || !value(root).shape().empty()) {
    throw ContractError("backward root must be a scalar, got " +
                        shape_to_string(value(root).shape()));
  }
  Gradients out;
  out.grads_.resize(nodes_.size());
  out.shapes_.reserve(nodes_.size());
  for (const Node& n : nodes_) out.shapes_.push_back(n.value.shape());
  if (!nodes_[root.id()].requires_grad) return out;

  out.grads_[root.id()] = Tensor::scalar(1.0);
  std::vector<Tensor*> parent_grads;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.backward || !out.grads_[i]) continue;
    parent_grads.clear();
    for (std::size_t p : node.parents) {
      if (!nodes_[p].requires_grad) {
        parent_grads.push_back(nullptr);
        continue;
      }
      if (!out.grads_[p]) out.grads_[p] = Tensor(nodes_[p].value.shape(), 0.0);
      parent_grads.push_back(&*out.grads_[p]);
    }
    node.backward(*this, *out.grads_[i], parent_grads);
  }
  return out;
}

namespace ad {

Var matmul(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  Tensor y(Shape{n, m});
  as_matrix(y, n, m).noalias() = as_matrix(a.value(), n, k) * as_matrix(b.value(), k, m);
  const std::size_t ia = a.id(), ib = b.id();
  return finish(
      tape, std::move(y), {ia, ib},
      [ia, ib, n, k, m](const Tape& t, const Tensor& g, std::span<Tensor* const> pg) {
        auto gm = as_matrix(g, n, m);
        if (pg[0]) as_matrix(*pg[0], n, k).noalias() += gm * as_matrix(t.value(ib), k, m).transpose();
        if (pg[1]) as_matrix(*pg[1], k, m).noalias() += as_matrix(t.value(ia), n, k).transpose() * gm;
      },
      "matmul");
}

Var add(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t ia = a.id(), ib = b.id();
  if (x.shape() == y.shape()) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return finish(
        tape, std::move(out), {ia, ib},
        [](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
          for (Tensor* p : pg) {
            if (!p) continue;
            for (std::size_t i = 0; i < g.size(); ++i) (*p)[i] += g[i];
          }
        },
        "add");
  }
  if (y.rank() == 1 && x.rank() >= 1 && y.size() == last_dim(x)) {
    const std::size_t width = y.size();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % width];
    return finish(
        tape, std::move(out), {ia, ib},
        [width](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
          if (pg[0]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
          }
          if (pg[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i % width] += g[i];
          }
        },
        "add");
  }
  throw ShapeError("add: incompatible shapes " + shape_to_string(x.shape()) + " and " +
                   shape_to_string(y.shape()));
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return finish(
      tape, std::move(out), {a.id(), b.id()},
      [](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        }
        if (pg[1]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
        }
      },
      "sub");
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return finish(
      tape, std::move(out), {ia, ib},
      [ia, ib](const Tape& t, const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(ib);
        if (pg[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * y[i];
        }
        if (pg[1]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * x[i];
        }
      },
      "mul");
}

Var scale(Var a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return factor * x; },
      [factor](double) { return factor; });
}

Var relu(Var a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(Var a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var log(Var a) {
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var softmax(Var a) {
  Tape& tape = same_tape({a});
  const Tensor& x = a.value();
  const std::size_t width = last_dim(x);
  const std::size_t rows = x.size() / width;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * width;
    double* out = y.data().data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) z += (out[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < width; ++j) out[j] /= z;
  }
  Tensor saved = y;
  return finish(
      tape, std::move(y), {a.id()},
      [saved = std::move(saved), rows, width](const Tape&, const Tensor& g,
                                              std::span<Tensor* const> pg) {
        Tensor& gx = *pg[0];
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t o = r * width;
          double dot = 0.0;
          for (std::size_t j = 0; j < width; ++j) dot += g[o + j] * saved[o + j];
          for (std::size_t j = 0; j < width; ++j) gx[o + j] += saved[o + j] * (g[o + j] - dot);
        }
      },
      "softmax");
}

Var log_softmax(Var a) {
  Tape& tape = same_tape({a});
  const Tensor& x = a.value();
  const std::size_t width = last_dim(x);
  const std::size_t rows = x.size() / width;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * width;
    double* out = y.data().data() + r * width;
    const double mx = *std::max_element(in, in + width);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < width; ++j) out[j] = in[j] - lse;
  }
  Tensor saved = y;
  return finish(
      tape, std::move(y), {a.id()},
      [saved = std::move(saved), rows, width](const Tape&, const Tensor& g,
                                              std::span<Tensor* const> pg) {
        Tensor& gx = *pg[0];
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t o = r * width;
          double total = 0.0;
          for (std::size_t j = 0; j < width; ++j) total += g[o + j];
          for (std::size_t j = 0; j < width; ++j) {
            gx[o + j] += g[o + j] - std::exp(saved[o + j]) * total;
          }
        }
      },
      "log_softmax");
}

Var sum(Var a) {
  Tape& tape = same_tape({a});
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return finish(
      tape, Tensor::scalar(s), {a.id()},
      [](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
        const double gv = g[0];
        for (double& v : pg[0]->data()) v += gv;
      },
      "sum");
}

Var mean(Var a) {
  Tape& tape = same_tape({a});
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return finish(
      tape, Tensor::scalar(s / n), {a.id()},
      [n](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
        const double gv = g[0] / n;
        for (double& v : pg[0]->data()) v += gv;
      },
      "mean");
}

Var reshape(Var a, Shape shape) {
  Tape& tape = same_tape({a});
  Tensor y = a.value().reshaped(std::move(shape));
  return finish(
      tape, std::move(y), {a.id()},
      [](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
        Tensor& gx = *pg[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      "reshape");
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, ho, wo;
  std::size_t patch() const { return c * k * k; }
  std::size_t pixels() const { return ho * wo; }
};

// col[(ch*k + ki)*k + kj, oy*wo + ox] = x[ch, oy*stride + ki, ox*stride + kj]
void im2col(const double* x, const ConvGeometry& g, double* col) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = col + ((ch * g.k + ki) * g.k + kj) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const double* src = x + (ch * g.h + oy * g.stride + ki) * g.w + kj;
          for (std::size_t ox = 0; ox < g.wo; ++ox) row[oy * g.wo + ox] = src[ox * g.stride];
        }
      }
}

void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = col + ((ch * g.k + ki) * g.k + kj) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          double* dst = x + (ch * g.h + oy * g.stride + ki) * g.w + kj;
          for (std::size_t ox = 0; ox < g.wo; ++ox) dst[ox * g.stride] += row[oy * g.wo + ox];
        }
      }
}

}  // namespace

Var conv2d(Var x, Var w, std::optional<Var> bias, std::size_t stride) {
  Tape& tape = bias ? same_tape({x, w, *bias}) : same_tape({x, w});
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3]) {
    throw ShapeError("conv2d: kernel " + shape_to_string(ws) + " incompatible with input " +
                     shape_to_string(xs));
  }
  if (ws[2] > xs[2] || ws[2] > xs[3]) throw ShapeError("conv2d: kernel larger than input");
  if (bias && (bias->shape().size() != 1 || bias->shape()[0] != ws[0])) {
    throw ShapeError("conv2d: bias must have one entry per output channel");
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, 0, 0};
  g.ho = (g.h - g.k) / stride + 1;
  g.wo = (g.w - g.k) / stride + 1;

  Tensor y(Shape{g.n, g.o, g.ho, g.wo});
  std::vector<double> col(g.patch() * g.pixels());
  const auto wm = as_matrix(w.value(), g.o, g.patch());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(x.value().data().data() + n * g.c * g.h * g.w, g, col.data());
    MapR out(y.data().data() + n * g.o * g.pixels(), static_cast<Eigen::Index>(g.o),
             static_cast<Eigen::Index>(g.pixels()));
    out.noalias() = wm * CMapR(col.data(), static_cast<Eigen::Index>(g.patch()),
                               static_cast<Eigen::Index>(g.pixels()));
    if (bias) {
      const Tensor& b = bias->value();
      for (std::size_t oc = 0; oc < g.o; ++oc) out.row(static_cast<Eigen::Index>(oc)).array() += b[oc];
    }
  }
  std::vector<std::size_t> parents{x.id(), w.id()};
  if (bias) parents.push_back(bias->id());
  const std::size_t ix = x.id(), iw = w.id();
  return finish(
      tape, std::move(y), std::move(parents),
      [g, ix, iw](const Tape& t, const Tensor& grad, std::span<Tensor* const> pg) {
        const Tensor& xv = t.value(ix);
        const auto wm = as_matrix(t.value(iw), g.o, g.patch());
        std::vector<double> col(g.patch() * g.pixels());
        std::vector<double> gcol(g.patch() * g.pixels());
        for (std::size_t n = 0; n < g.n; ++n) {
          CMapR gout(grad.data().data() + n * g.o * g.pixels(), static_cast<Eigen::Index>(g.o),
                     static_cast<Eigen::Index>(g.pixels()));
          if (pg[1]) {
            im2col(xv.data().data() + n * g.c * g.h * g.w, g, col.data());
            as_matrix(*pg[1], g.o, g.patch()).noalias() +=
                gout * CMapR(col.data(), static_cast<Eigen::Index>(g.patch()),
                             static_cast<Eigen::Index>(g.pixels()))
                           .transpose();
          }
          if (pg[0]) {
            MapR(gcol.data(), static_cast<Eigen::Index>(g.patch()),
                 static_cast<Eigen::Index>(g.pixels()))
                .noalias() = wm.transpose() * gout;
            col2im_add(gcol.data(), g, pg[0]->data().data() + n * g.c * g.h * g.w);
          }
          if (pg.size() > 2 && pg[2]) {
            for (std::size_t oc = 0; oc < g.o; ++oc) {
              (*pg[2])[oc] += gout.row(static_cast<Eigen::Index>(oc)).sum();
            }
          }
        }
      },
      "conv2d");
}

Var pick(Var x, std::span<const std::size_t> index) {
  Tape& tape = same_tape({x});
  require_rank(x, 2, "pick");
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  if (index.size() != n) throw ShapeError("pick: one index per row required");
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor y(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    if (idx[r] >= k) throw ContractError("pick: index out of range");
    y[r] = x.value()[r * k + idx[r]];
  }
  return finish(
      tape, std::move(y), {x.id()},
      [idx = std::move(idx), k](const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t r = 0; r < idx.size(); ++r) (*pg[0])[r * k + idx[r]] += g[r];
      },
      "pick");
}

Var l2_normalize_rows(Var x) {
  Tape& tape = same_tape({x});
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  Tensor y(x.shape());
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x.value()[r * d + j] * x.value()[r * d + j];
    norms[r] = std::sqrt(s);
    if (!(norms[r] > 0.0)) throw NumericError("l2_normalize_rows: zero-norm row");
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = x.value()[r * d + j] / norms[r];
  }
  Tensor saved = y;
  return finish(
      tape, std::move(y), {x.id()},
      [saved = std::move(saved), norms = std::move(norms), n, d](
          const Tape&, const Tensor& g, std::span<Tensor* const> pg) {
        for (std::size_t r = 0; r < n; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * saved[r * d + j];
          for (std::size_t j = 0; j < d; ++j) {
            (*pg[0])[r * d + j] += (g[r * d + j] - saved[r * d + j] * dot) / norms[r];
          }
        }
      },
      "l2_normalize_rows");
}

Var row_mse(Var s, const Tensor& rows) {
  Tape& tape = same_tape({s});
  require_rank(s, 2, "row_mse");
  if (rows.rank() != 2 || rows.shape()[1] != s.shape()[1]) {
    throw ShapeError("row_mse: target rows " + shape_to_string(rows.shape()) +
                     " incompatible with " + shape_to_string(s.shape()));
  }
  const std::size_t n = s.shape()[0], l = s.shape()[1], k = rows.shape()[0];
  const double inv_l = 1.0 / static_cast<double>(l);
  Tensor y(Shape{n, k});
  for (std::size_t r = 0; r < n; ++r) {
    const double* sv = s.value().data().data() + r * l;
    for (std::size_t i = 0; i < k; ++i) {
      const double* cv = rows.data().data() + i * l;
      double acc = 0.0;
      for (std::size_t j = 0; j < l; ++j) {
        const double d = sv[j] - cv[j];
        acc += d * d;
      }
      y[r * k + i] = acc * inv_l;
    }
  }
  const std::size_t is = s.id();
  return finish(
      tape, std::move(y), {is},
      [is, rows, n, l, k, inv_l](const Tape& t, const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& sv = t.value(is);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t i = 0; i < k; ++i) {
            const double c = 2.0 * inv_l * g[r * k + i];
            if (c == 0.0) continue;
            for (std::size_t j = 0; j < l; ++j) {
              (*pg[0])[r * l + j] += c * (sv[r * l + j] - rows[i * l + j]);
            }
          }
        }
      },
      "row_mse");
}

Var margin(Var d, std::span<const std::size_t> label) {
  Tape& tape = same_tape({d});
  require_rank(d, 2, "margin");
  const std::size_t n = d.shape()[0], k = d.shape()[1];
  if (k < 2) throw ContractError("margin: needs at least two classes");
  if (label.size() != n) throw ShapeError("margin: one label per row required");
  std::vector<std::size_t> lab(label.begin(), label.end());
  std::vector<std::size_t> other(n);
  Tensor y(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    if (lab[r] >= k) throw ContractError("margin: label out of range");
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
      if (i == lab[r]) continue;
      if (d.value()[r * k + i] < best) {
        best = d.value()[r * k + i];
        other[r] = i;
      }
    }
    y[r] = best - d.value()[r * k + lab[r]];
  }
  return finish(
      tape, std::move(y), {d.id()},
      [lab = std::move(lab), other = std::move(other), k](const Tape&, const Tensor& g,
                                                          std::span<Tensor* const> pg) {
        for (std::size_t r = 0; r < lab.size(); ++r) {
          (*pg[0])[r * k + other[r]] += g[r];
          (*pg[0])[r * k + lab[r]] -= g[r];
        }
      },
      "margin");
}

Var clamp_min(Var x, double floor) {
  return unary(
      x, "clamp_min", [floor](double v) { return v > floor ? v : floor; },
      [floor](double v) { return v > floor ? 1.0 : 0.0; });
}

}  // namespace ad

namespace {

constexpr std::array kAllOps{
    OpKind::matmul, OpKind::add,        OpKind::sub,     OpKind::mul,
    OpKind::scale,  OpKind::relu,       OpKind::square,  OpKind::log,
    OpKind::softmax, OpKind::log_softmax, OpKind::sum,   OpKind::mean,
    OpKind::reshape, OpKind::conv2d,    OpKind::pick,    OpKind::l2_normalize_rows,
    OpKind::row_mse, OpKind::margin,    OpKind::clamp_min,
};

void require_arity(std::span<const Var> inputs, std::size_t n, OpKind kind) {
  if (inputs.size() != n) {
    throw ContractError(std::string(op_name(kind)) + " takes " + std::to_string(n) +
                        " operand(s)");
  }
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::square: return "square";
    case OpKind::log: return "log";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::conv2d: return "conv2d";
    case OpKind::pick: return "pick";
    case OpKind::l2_normalize_rows: return "l2_normalize_rows";
    case OpKind::row_mse: return "row_mse";
    case OpKind::margin: return "margin";
    case OpKind::clamp_min: return "clamp_min";
  }
  return "unknown";
}

std::span<const OpKind> all_op_kinds() { return kAllOps; }

Var forward_op(OpKind kind, std::span<const Var> in, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::matmul: require_arity(in, 2, kind); return ad::matmul(in[0], in[1]);
    case OpKind::add: require_arity(in, 2, kind); return ad::add(in[0], in[1]);
    case OpKind::sub: require_arity(in, 2, kind); return ad::sub(in[0], in[1]);
    case OpKind::mul: require_arity(in, 2, kind); return ad::mul(in[0], in[1]);
    case OpKind::scale: require_arity(in, 1, kind); return ad::scale(in[0], attrs.scalar);
    case OpKind::relu: require_arity(in, 1, kind); return ad::relu(in[0]);
    case OpKind::square: require_arity(in, 1, kind); return ad::square(in[0]);
    case OpKind::log: require_arity(in, 1, kind); return ad::log(in[0]);
    case OpKind::softmax: require_arity(in, 1, kind); return ad::softmax(in[0]);
    case OpKind::log_softmax: require_arity(in, 1, kind); return ad::log_softmax(in[0]);
    case OpKind::sum: require_arity(in, 1, kind); return ad::sum(in[0]);
    case OpKind::mean: require_arity(in, 1, kind); return ad::mean(in[0]);
    case OpKind::reshape: require_arity(in, 1, kind); return ad::reshape(in[0], attrs.shape);
    case OpKind::conv2d:
      if (in.size() == 2) return ad::conv2d(in[0], in[1], std::nullopt, attrs.stride);
      require_arity(in, 3, kind);
      return ad::conv2d(in[0], in[1], in[2], attrs.stride);
    case OpKind::pick: require_arity(in, 1, kind); return ad::pick(in[0], attrs.index);
    case OpKind::l2_normalize_rows: require_arity(in, 1, kind); return ad::l2_normalize_rows(in[0]);
    case OpKind::row_mse: require_arity(in, 1, kind); return ad::row_mse(in[0], attrs.rows);
    case OpKind::margin: require_arity(in, 1, kind); return ad::margin(in[0], attrs.index);
    case OpKind::clamp_min: require_arity(in, 1, kind); return ad::clamp_min(in[0], attrs.scalar);
  }
  throw ContractError("unknown op kind");
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace roboenc
