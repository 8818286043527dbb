#include "stiffnet/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace stiffnet::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
  return st;
}

// Per-output-axis strides of an operand right-aligned against `out`; broadcast
// axes get stride 0.
Shape aligned_strides(const Shape& operand, const Shape& out) {
  Shape st(out.size(), 0);
  const Shape nat = strides_of(operand);
  const std::size_t off = out.size() - operand.size();
  for (std::size_t d = 0; d < operand.size(); ++d) {
    st[off + d] = operand[d] == 1 && out[off + d] != 1 ? 0 : nat[d];
  }
  return st;
}

// True when `operand` (minus leading unit axes) equals the trailing axes of
// `out`, so its flat index is the output flat index modulo its size.
bool is_suffix(const Shape& operand, const Shape& out) {
  std::size_t first = 0;
  while (first < operand.size() && operand[first] == 1) ++first;
  const std::size_t len = operand.size() - first;
  if (len > out.size()) return false;
  return std::equal(operand.begin() + static_cast<std::ptrdiff_t>(first), operand.end(),
                    out.end() - static_cast<std::ptrdiff_t>(len));
}

template <class F>
void for_each_broadcast(const Shape& out, const Shape& as, const Shape& bs, F&& f) {
  const std::size_t n = numel(out);
  if (as == out && bs == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (as == out && is_suffix(bs, out)) {
    const std::size_t nb = numel(bs);
    for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
    return;
  }
  if (bs == out && is_suffix(as, out)) {
    const std::size_t na = numel(as);
    for (std::size_t i = 0; i < n; ++i) f(i, i % na, i);
    return;
  }
  const Shape sa = aligned_strides(as, out);
  const Shape sb = aligned_strides(bs, out);
  const std::size_t nd = out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::logic_error("operation on an unbound Var");
  return *a.tape();
}

Tape& common_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::logic_error("operands live on different tapes");
  return tape_of(a);
}

template <class Fwd, class Bwd>
Var unary(const Var& a, Fwd fwd, Bwd dydx) {
  const Tensor& x = a.value();
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return tape_of(a).record(std::move(y), {a}, [dydx](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const Tensor& x = ctx.in_value(0);
    const Tensor& y = ctx.out_value();
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * dydx(x[i], y[i]);
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape));
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void Parameter::zero_grad() {
  if (grad.shape != value.shape) grad = Tensor(value.shape);
  std::fill(grad.data.begin(), grad.data.end(), 0.0);
}

// ---- Var / Tape ------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("unbound Var");
  return tape_->nodes_[id_].value;
}

double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar of shape " + to_string(v.shape));
  return v[0];
}

bool Var::requires_grad() const { return tape_ && tape_->nodes_[id_].requires_grad; }

const Tensor& BackwardContext::out_value() const { return tape_.nodes_[node_].value; }
const Tensor& BackwardContext::out_grad() const { return tape_.nodes_[node_].grad; }
const Tensor& BackwardContext::in_value(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].value;
}
Tensor* BackwardContext::in_grad(std::size_t k) {
  auto& in = tape_.nodes_[tape_.nodes_[node_].inputs[k]];
  return in.requires_grad ? &in.grad : nullptr;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  if (grad_enabled_) {
    n.requires_grad = true;
    n.param = &p;
  }
  return push(std::move(n));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape() != this) throw std::logic_error("input recorded on a different tape");
    n.inputs.push_back(v.id());
    needs = needs || nodes_[v.id()].requires_grad;
  }
  if (grad_enabled_ && needs) {
    n.requires_grad = true;
    n.backward = std::move(backward);
  }
  return push(std::move(n));
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw std::logic_error("backward root belongs to another tape");
  if (root.size() != 1) {
    throw ShapeError("backward root must be a scalar, got shape " + to_string(root.shape()));
  }
  if (unwound_) throw std::logic_error("tape already unwound");
  unwound_ = true;
  if (!nodes_[root.id()].requires_grad) return;

  for (std::size_t i = 0; i <= root.id(); ++i) {
    Node& n = nodes_[i];
    if (n.requires_grad) n.grad = Tensor(n.value.shape);
  }
  nodes_[root.id()].grad[0] = 1.0;

  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    ++visits_;
    if (n.backward) {
      BackwardContext ctx(*this, i);
      n.backward(ctx);
    }
  }
  for (std::size_t i = 0; i <= root.id(); ++i) {
    Node& n = nodes_[i];
    if (!n.param) continue;
    Parameter& p = *n.param;
    if (p.grad.shape != p.value.shape) p.grad = Tensor(p.value.shape);
    for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
  }
}

const Tensor& Tape::grad(const Var& v) const {
  const Node& n = nodes_.at(v.id());
  if (!n.requires_grad || n.grad.shape != n.value.shape) {
    throw std::logic_error("no gradient recorded for node " + std::to_string(v.id()));
  }
  return n.grad;
}

bool Tape::has_grad(const Var& v) const {
  const Node& n = nodes_.at(v.id());
  return n.requires_grad && n.grad.shape == n.value.shape && !n.value.data.empty();
}

bool Tape::topologically_ordered() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (std::size_t in : nodes_[i].inputs) {
      if (in >= i) return false;
    }
  }
  return true;
}

// ---- shapes ----------------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t d = 0; d < nd; ++d) {
    const std::size_t da = d + a.size() >= nd ? a[d + a.size() - nd] : 1;
    const std::size_t db = d + b.size() >= nd ? b[d + b.size() - nd] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    }
    out[d] = std::max(da, db);
  }
  return out;
}

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Shape out_shape = broadcast_shapes(x.shape, y.shape);
  Tensor out(out_shape);
  for_each_broadcast(out.shape, x.shape, y.shape,
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = x[ia] + y[ib]; });
  return t.record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    Tensor* gb = ctx.in_grad(1);
    const Tensor& g = ctx.out_grad();
    for_each_broadcast(g.shape, ctx.in_value(0).shape, ctx.in_value(1).shape,
                       [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         if (ga) (*ga)[ia] += g[i];
                         if (gb) (*gb)[ib] += g[i];
                       });
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(broadcast_shapes(x.shape, y.shape));
  for_each_broadcast(out.shape, x.shape, y.shape,
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = x[ia] - y[ib]; });
  return t.record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    Tensor* gb = ctx.in_grad(1);
    const Tensor& g = ctx.out_grad();
    for_each_broadcast(g.shape, ctx.in_value(0).shape, ctx.in_value(1).shape,
                       [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         if (ga) (*ga)[ia] += g[i];
                         if (gb) (*gb)[ib] -= g[i];
                       });
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(broadcast_shapes(x.shape, y.shape));
  for_each_broadcast(out.shape, x.shape, y.shape,
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = x[ia] * y[ib]; });
  return t.record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    Tensor* gb = ctx.in_grad(1);
    const Tensor& x = ctx.in_value(0);
    const Tensor& y = ctx.in_value(1);
    const Tensor& g = ctx.out_grad();
    for_each_broadcast(g.shape, x.shape, y.shape, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += g[i] * y[ib];
      if (gb) (*gb)[ib] += g[i] * x[ia];
    });
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var softmax_lastdim(const Var& a) {
  const Tensor& x = a.value();
  if (x.ndim() == 0) throw ShapeError("softmax of a scalar");
  const std::size_t n = x.shape.back();
  const std::size_t rows = x.size() / n;
  Tensor y(x.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * n;
    double* yr = y.data.data() + r * n;
    const double m = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - m));
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  return tape_of(a).record(std::move(y), {a}, [n, rows](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const Tensor& y = ctx.out_value();
    const Tensor& g = ctx.out_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[o + j] * y[o + j];
      for (std::size_t j = 0; j < n; ++j) (*gx)[o + j] += y[o + j] * (g[o + j] - dot);
    }
  });
}

Var layernorm_lastdim(const Var& a, double eps) {
  const Tensor& x = a.value();
  if (x.ndim() == 0) throw ShapeError("layernorm of a scalar");
  const std::size_t n = x.shape.back();
  const std::size_t rows = x.size() / n;
  Tensor y(x.shape);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * n;
    double* yr = y.data.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) yr[j] = (xr[j] - mu) * is;
  }
  return tape_of(a).record(std::move(y), {a}, [n, rows, inv_std = std::move(inv_std)](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const Tensor& y = ctx.out_value();
    const Tensor& g = ctx.out_grad();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mg += g[o + j];
        mgy += g[o + j] * y[o + j];
      }
      mg *= inv_n;
      mgy *= inv_n;
      for (std::size_t j = 0; j < n; ++j) {
        (*gx)[o + j] += inv_std[r] * (g[o + j] - mg - y[o + j] * mgy);
      }
    }
  });
}

// ---- matmul ----------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.ndim() < 2 || y.ndim() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(x.shape) + " and " +
                     to_string(y.shape));
  }
  const std::size_t p = x.shape[x.ndim() - 2], q = x.shape.back();
  const std::size_t q2 = y.shape[y.ndim() - 2], r = y.shape.back();
  if (q != q2) {
    throw ShapeError("matmul inner extents differ: " + to_string(x.shape) + " x " +
                     to_string(y.shape));
  }
  const Shape xb(x.shape.begin(), x.shape.end() - 2);
  const Shape yb(y.shape.begin(), y.shape.end() - 2);
  const Shape ob = broadcast_shapes(xb, yb);
  Shape out_shape = ob;
  out_shape.push_back(p);
  out_shape.push_back(r);
  Tensor out(out_shape);

  // Right operand shared by every batch entry: one tall GEMM.
  const bool flat = numel(yb) == 1 && xb == ob;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (flat) {
    const auto rows = static_cast<Eigen::Index>(numel(xb) * p);
    MMap(out.data.data(), rows, static_cast<Eigen::Index>(r)).noalias() =
        CMap(x.data.data(), rows, static_cast<Eigen::Index>(q)) *
        CMap(y.data.data(), static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(r));
  } else {
    pairs.reserve(numel(ob));
    for_each_broadcast(ob, xb, yb, [&](std::size_t, std::size_t ia, std::size_t ib) {
      pairs.emplace_back(ia, ib);
    });
    const auto P = static_cast<Eigen::Index>(p), Q = static_cast<Eigen::Index>(q),
               R = static_cast<Eigen::Index>(r);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      MMap(out.data.data() + k * p * r, P, R).noalias() =
          CMap(x.data.data() + pairs[k].first * p * q, P, Q) *
          CMap(y.data.data() + pairs[k].second * q * r, Q, R);
    }
  }

  return t.record(std::move(out), {a, b}, [flat, p, q, r, pairs = std::move(pairs)](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    Tensor* gb = ctx.in_grad(1);
    const Tensor& x = ctx.in_value(0);
    const Tensor& y = ctx.in_value(1);
    const Tensor& g = ctx.out_grad();
    const auto P = static_cast<Eigen::Index>(p), Q = static_cast<Eigen::Index>(q),
               R = static_cast<Eigen::Index>(r);
    if (flat) {
      const auto rows = static_cast<Eigen::Index>(x.size() / q);
      CMap G(g.data.data(), rows, R);
      if (ga) MMap(ga->data.data(), rows, Q).noalias() += G * CMap(y.data.data(), Q, R).transpose();
      if (gb) MMap(gb->data.data(), Q, R).noalias() += CMap(x.data.data(), rows, Q).transpose() * G;
      return;
    }
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      CMap G(g.data.data() + k * p * r, P, R);
      const auto [ia, ib] = pairs[k];
      if (ga) {
        MMap(ga->data.data() + ia * p * q, P, Q).noalias() +=
            G * CMap(y.data.data() + ib * q * r, Q, R).transpose();
      }
      if (gb) {
        MMap(gb->data.data() + ib * q * r, Q, R).noalias() +=
            CMap(x.data.data() + ia * p * q, P, Q).transpose() * G;
      }
    }
  });
}

// ---- structural ------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  const Tensor& x = a.value();
  if (numel(shape) != x.size()) {
    throw ShapeError("cannot reshape " + to_string(x.shape) + " to " + to_string(shape));
  }
  Tensor out(std::move(shape), x.data);
  return tape_of(a).record(std::move(out), {a}, [](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

namespace {

// Source offset for every output element of a permutation.
std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& axes,
                                       Shape& out_shape) {
  const std::size_t nd = in.size();
  const Shape st = strides_of(in);
  out_shape.assign(nd, 0);
  Shape src_stride(nd);
  for (std::size_t d = 0; d < nd; ++d) {
    out_shape[d] = in[axes[d]];
    src_stride[d] = st[axes[d]];
  }
  const std::size_t n = numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = src;
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Var permute(const Var& a, const std::vector<std::size_t>& axes) {
  const Tensor& x = a.value();
  const std::size_t nd = x.ndim();
  std::vector<std::size_t> check = axes;
  std::sort(check.begin(), check.end());
  bool ok = axes.size() == nd;
  for (std::size_t d = 0; ok && d < nd; ++d) ok = check[d] == d;
  if (!ok) throw ShapeError("invalid permutation for shape " + to_string(x.shape));

  Shape out_shape;
  std::vector<std::size_t> map = permute_index(x.shape, axes, out_shape);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = x[map[i]];
  return tape_of(a).record(std::move(out), {a}, [map = std::move(map)](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < map.size(); ++i) (*gx)[map[i]] += g[i];
  });
}

Var transpose(const Var& a, std::size_t i, std::size_t j) {
  std::vector<std::size_t> axes(a.ndim());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  if (i >= axes.size() || j >= axes.size()) {
    throw ShapeError("transpose axes out of range for " + to_string(a.shape()));
  }
  std::swap(axes[i], axes[j]);
  return permute(a, axes);
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (axis >= x.ndim() || begin >= end || end > x.shape[axis]) {
    throw ShapeError("bad slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + to_string(x.shape));
  }
  const std::size_t outer = numel(Shape(x.shape.begin(), x.shape.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(x.shape.begin() + static_cast<std::ptrdiff_t>(axis) + 1, x.shape.end()));
  const std::size_t len = x.shape[axis];
  const std::size_t take = end - begin;
  Shape s = x.shape;
  s[axis] = take;
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>((o * len + begin) * inner), take * inner,
                out.data.begin() + static_cast<std::ptrdiff_t>(o * take * inner));
  }
  return tape_of(a).record(std::move(out), {a}, [=](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const Tensor& g = ctx.out_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < take * inner; ++k) {
        (*gx)[(o * len + begin) * inner + k] += g[o * take * inner + k];
      }
    }
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape& t = tape_of(parts.front());
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range for " + to_string(ref));
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const Var& v : parts) {
    common_tape(parts.front(), v);
    const Shape& s = v.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) throw ShapeError("concat shape mismatch: " + to_string(ref) + " vs " + to_string(s));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  const std::size_t outer = numel(Shape(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(ref.begin() + static_cast<std::ptrdiff_t>(axis) + 1, ref.end()));
  Shape s = ref;
  s[axis] = total;
  Tensor out(s);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& x = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * inner), lens[k] * inner,
                  out.data.begin() + static_cast<std::ptrdiff_t>((o * total + off) * inner));
    }
    off += lens[k];
  }
  return t.record(std::move(out), parts, [=](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    std::size_t off = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      if (Tensor* gx = ctx.in_grad(k)) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < lens[k] * inner; ++j) {
            (*gx)[o * lens[k] * inner + j] += g[(o * total + off) * inner + j];
          }
        }
      }
      off += lens[k];
    }
  });
}

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data) s += v;
  return tape_of(a).record(Tensor::scalar(s), {a}, [](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const double g = ctx.out_grad()[0];
    for (double& v : gx->data) v += g;
  });
}

Var mean(const Var& a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  return tape_of(a).record(Tensor::scalar(s * inv), {a}, [inv](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    const double g = ctx.out_grad()[0] * inv;
    for (double& v : gx->data) v += g;
  });
}

}  // namespace stiffnet::ad
