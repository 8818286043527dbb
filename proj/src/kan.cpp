#include "stiffnet/kan.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace stiffnet::kan {

namespace {

constexpr std::size_t kMaxOrder = 8;

// Knot span i with t_i <= x < t_{i+1}, restricted to the interior intervals.
std::size_t find_span(double x, const BSplineGrid& g) {
  const double u = (x - g.lo) / g.spacing();
  const auto last = static_cast<std::ptrdiff_t>(g.n_intervals) - 1;
  auto j = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(std::floor(u)), 0, last);
  // Agree with knot() exactly so no basis value goes slightly negative at a knot.
  const auto knot = [&](std::ptrdiff_t k) { return g.knot(static_cast<std::size_t>(k) + g.order); };
  while (j > 0 && x < knot(j)) --j;
  while (j < last && x >= knot(j + 1)) ++j;
  return static_cast<std::size_t>(j) + g.order;
}

// Nonzero basis values of order p on span i: B_{i-p..i, p}(x).
void nonzero_basis(double x, std::size_t span, std::size_t p, const BSplineGrid& g, double* n) {
  std::array<double, kMaxOrder + 1> left{}, right{};
  n[0] = 1.0;
  for (std::size_t j = 1; j <= p; ++j) {
    left[j] = x - g.knot(span + 1 - j);
    right[j] = g.knot(span + j) - x;
    double saved = 0.0;
    for (std::size_t r = 0; r < j; ++r) {
      const double tmp = n[r] / (right[r + 1] + left[j - r]);
      n[r] = saved + right[r + 1] * tmp;
      saved = left[j - r] * tmp;
    }
    n[j] = saved;
  }
}

void check_grid(const BSplineGrid& g) {
  if (g.order > kMaxOrder || g.n_intervals == 0 || !(g.hi > g.lo)) {
    throw std::invalid_argument("invalid B-spline grid");
  }
}

}  // namespace

void bspline_basis(double x, const BSplineGrid& grid, std::span<double> out) {
  check_grid(grid);
  if (out.size() != grid.n_basis()) throw std::invalid_argument("basis buffer has wrong length");
  std::fill(out.begin(), out.end(), 0.0);
  const double xc = grid.clamp(x);
  const std::size_t span = find_span(xc, grid);
  std::array<double, kMaxOrder + 1> n{};
  nonzero_basis(xc, span, grid.order, grid, n.data());
  for (std::size_t r = 0; r <= grid.order; ++r) out[span - grid.order + r] = n[r];
}

std::vector<double> bspline_basis(double x, const BSplineGrid& grid) {
  std::vector<double> out(grid.n_basis());
  bspline_basis(x, grid, out);
  return out;
}

void bspline_basis_and_derivative(double x, const BSplineGrid& grid, std::span<double> values,
                                  std::span<double> derivatives) {
  bspline_basis(x, grid, values);
  std::fill(derivatives.begin(), derivatives.end(), 0.0);
  if (grid.clamps(x) || grid.order == 0) return;
  const std::size_t p = grid.order;
  const double xc = grid.clamp(x);
  const std::size_t span = find_span(xc, grid);
  std::array<double, kMaxOrder + 1> lower{};
  nonzero_basis(xc, span, p - 1, grid, lower.data());  // B_{span-p+1..span, p-1}
  // Uniform knots: dB_{m,p}/dx = (B_{m,p-1} - B_{m+1,p-1}) / h.
  const double inv_h = 1.0 / grid.spacing();
  for (std::size_t r = 0; r <= p; ++r) {
    const double left = r >= 1 ? lower[r - 1] : 0.0;
    const double right = r < p ? lower[r] : 0.0;
    derivatives[span - p + r] = (left - right) * inv_h;
  }
}

Var bspline_features(const Var& x, const BSplineGrid& grid, ClampStats* stats) {
  check_grid(grid);
  const ad::Tensor& xv = x.value();
  const std::size_t nb = grid.n_basis();
  ad::Shape shape = xv.shape;
  shape.push_back(nb);
  ad::Tensor out(shape);
  ad::Tensor deriv(shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    bspline_basis_and_derivative(xv[i], grid, std::span<double>(out.data.data() + i * nb, nb),
                                 std::span<double>(deriv.data.data() + i * nb, nb));
    if (stats && grid.clamps(xv[i])) ++stats->clamped;
  }
  if (stats) stats->total += xv.size();
  return x.tape()->record(std::move(out), {x}, [nb, deriv = std::move(deriv)](ad::BackwardContext& ctx) {
    ad::Tensor* gx = ctx.in_grad(0);
    const ad::Tensor& g = ctx.out_grad();
    for (std::size_t i = 0; i < gx->size(); ++i) {
      double acc = 0.0;
      for (std::size_t m = 0; m < nb; ++m) acc += g[i * nb + m] * deriv[i * nb + m];
      (*gx)[i] += acc;
    }
  });
}

KanLayer::KanLayer(nn::ParamStore& store, const std::string& name, std::size_t in_dim, std::size_t out_dim,
                   const BSplineGrid& g, Rng& rng)
    : grid(g), in(in_dim), out(out_dim) {
  check_grid(grid);
  coeff = &store.add(name + ".coeff", {in, out, grid.n_basis()});
  nn::normal_init(*coeff, 0.1, rng);
  base = &store.add(name + ".base", {in, out});
  nn::xavier_uniform(*base, in, out, rng);
}

Var KanLayer::operator()(Tape& tape, const Var& x, ClampStats* stats) const {
  const ad::Shape& s = x.shape();
  if (s.empty() || s.back() != in) {
    throw ad::ShapeError("KAN layer expects last extent " + std::to_string(in) + ", got " + ad::to_string(s));
  }
  const std::size_t rows = x.size() / in;
  const std::size_t nb = grid.n_basis();
  Var flat = ad::reshape(x, {rows, in});
  Var features = ad::reshape(bspline_features(flat, grid, stats), {rows, in * nb});
  Var c = ad::reshape(ad::permute(tape.param(*coeff), {0, 2, 1}), {in * nb, out});
  Var y = ad::add(ad::matmul(features, c), ad::matmul(ad::silu(flat), tape.param(*base)));
  ad::Shape out_shape(s.begin(), s.end() - 1);
  out_shape.push_back(out);
  return ad::reshape(y, out_shape);
}

const char* to_string(HeadKind k) { return k == HeadKind::kan ? "kan" : "linear"; }

HeadKind parse_head(const std::string& s) {
  if (s == "kan") return HeadKind::kan;
  if (s == "linear") return HeadKind::linear;
  throw std::invalid_argument("unknown head '" + s + "' (expected kan|linear)");
}

KanHead::KanHead(nn::ParamStore& store, const std::string& name, std::size_t d_model, std::size_t neurons,
                 std::size_t seg_len, const BSplineGrid& grid, Rng& rng) {
  layers_.emplace_back(store, name + ".kan0", d_model, neurons, grid, rng);
  layers_.emplace_back(store, name + ".kan1", neurons, seg_len, grid, rng);
}

Var KanHead::operator()(Tape& tape, const Var& x, ClampStats* stats) const {
  Var h = x;
  for (const KanLayer& l : layers_) h = l(tape, h, stats);
  return h;
}

LinearHead::LinearHead(nn::ParamStore& store, const std::string& name, std::size_t d_model, std::size_t seg_len,
                       Rng& rng)
    : proj_(store, name + ".proj", d_model, seg_len, true, rng) {}

Var LinearHead::operator()(Tape& tape, const Var& x, ClampStats*) const { return proj_(tape, x); }

}  // namespace stiffnet::kan
