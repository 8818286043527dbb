#include "doctest.h"

#include "layer_check.hpp"
#include "stiffnet/kan.hpp"

#include <Eigen/Dense>

#include <cmath>

using namespace stiffnet;
using namespace stiffnet::kan;

TEST_CASE("basis matches recursive Cox-de Boor") {
  for (std::size_t G : {5, 15, 50}) {
    const BSplineGrid g{-1.0, 1.0, G, 3};
    const auto knots = oracle::uniform_knots(-1, 1, G, 3);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
      const double x = -1.0 + 2.0 * i / 1000.0;  // [lo, hi)
      const auto b = bspline_basis(x, g);
      for (std::size_t m = 0; m < g.n_basis(); ++m) worst = std::max(worst, std::abs(b[m] - oracle::cox_de_boor(knots, m, 3, x)));
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("partition of unity and local support") {
  for (std::size_t G : {5, 15, 50}) {
    const BSplineGrid g{-1.0, 1.0, G, 3};
    double worst = 0;
    for (int i = 0; i <= 10000; ++i) {
      const double x = -1.0 + 2.0 * i / 10000.0;
      const auto b = bspline_basis(x, g);
      double s = 0;
      for (std::size_t m = 0; m < b.size(); ++m) {
        s += b[m];
        CHECK(b[m] >= 0.0);
        // B_m is supported on [t_m, t_{m+4}).
        if (x < g.knot(m) || x > g.knot(m + 4)) CHECK(b[m] == 0.0);
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("inputs outside the grid are clamped") {
  const BSplineGrid g{-1.0, 1.0, 5, 3};
  CHECK(bspline_basis(3.0, g) == bspline_basis(1.0, g));
  CHECK(bspline_basis(-7.0, g) == bspline_basis(-1.0, g));
  std::vector<double> v(g.n_basis()), d(g.n_basis());
  bspline_basis_and_derivative(1.5, g, v, d);
  for (double x : d) CHECK(x == 0.0);
}

TEST_CASE("basis derivative matches finite differences") {
  const BSplineGrid g{-1.0, 1.0, 15, 3};
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(-0.99, 0.99);
    std::vector<double> v(g.n_basis()), d(g.n_basis());
    bspline_basis_and_derivative(x, g, v, d);
    const auto p = bspline_basis(x + 1e-6, g), m = bspline_basis(x - 1e-6, g);
    for (std::size_t k = 0; k < g.n_basis(); ++k) CHECK(std::abs(d[k] - (p[k] - m[k]) / 2e-6) < 1e-5);
  }
}

TEST_CASE("a single edge reproduces a fitted spline of sin") {
  const BSplineGrid g{-1.0, 1.0, 5, 3};
  const auto knots = oracle::uniform_knots(-1, 1, 5, 3);
  // Least-squares fit of sin(3x) on a dense set, basis from the recursive oracle.
  const int n = 400;
  Eigen::MatrixXd A(n, g.n_basis());
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    const double x = -1.0 + 2.0 * (i + 0.5) / n;
    for (std::size_t m = 0; m < g.n_basis(); ++m) A(i, static_cast<Eigen::Index>(m)) = oracle::cox_de_boor(knots, m, 3, x);
    y[i] = std::sin(3 * x);
  }
  const Eigen::VectorXd c = A.colPivHouseholderQr().solve(y);

  nn::ParamStore store;
  Rng rng(1);
  KanLayer layer(store, "edge", 1, 1, g, rng);
  for (std::size_t m = 0; m < g.n_basis(); ++m) layer.coeff->value[m] = c[static_cast<Eigen::Index>(m)];
  layer.base->value[0] = 0.0;

  ad::Tape tape(false);
  double worst_fit = 0, worst_oracle = 0;
  for (std::size_t j = 0; j < 5; ++j) {
    const double mid = -1.0 + 0.4 * (j + 0.5);
    const double out = layer(tape, tape.constant(ad::Tensor({1, 1}, {mid}))).item();
    double ref = 0;
    for (std::size_t m = 0; m < g.n_basis(); ++m) ref += c[static_cast<Eigen::Index>(m)] * oracle::cox_de_boor(knots, m, 3, mid);
    worst_oracle = std::max(worst_oracle, std::abs(out - ref));
    worst_fit = std::max(worst_fit, std::abs(out - std::sin(3 * mid)));
  }
  CHECK(worst_oracle < 1e-12);
  // Cubic spline error bound (5/384) h^4 max|f''''| with h = 0.4 and f'''' <= 81.
  CHECK(worst_fit < 5.0 / 384.0 * std::pow(0.4, 4) * 81.0);
}

TEST_CASE("KAN layer gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    nn::ParamStore store;
    KanLayer layer(store, "k", 3, 2, {-1.0, 1.0, 5, 3}, rng);
    const auto r = oracle::check_layer(store, oracle::random_tensor({4, 3}, rng, -0.95, 0.95),
                                       [&](ad::Tape& t, const ad::Var& x) { return layer(t, x); }, rng, 0);
    INFO(r.worst_where);
    CHECK(r.failures == 0);
  }
}

TEST_CASE("heads: gradients, shapes and clamp statistics") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed, 3);
    nn::ParamStore ks, ls;
    KanHead kh(ks, "head", 6, 5, 4, {-1.0, 1.0, 5, 3}, rng);
    LinearHead lh(ls, "head", 6, 4, rng);
    const auto x = oracle::random_tensor({2, 3, 6}, rng, -0.9, 0.9);
    auto rk = oracle::check_layer(ks, x, [&](ad::Tape& t, const ad::Var& v) { return kh(t, v); }, rng);
    auto rl = oracle::check_layer(ls, x, [&](ad::Tape& t, const ad::Var& v) { return lh(t, v); }, rng);
    INFO(rk.worst_where);
    CHECK(rk.failures == 0);
    CHECK(rl.failures == 0);
  }
  Rng rng(4);
  nn::ParamStore store;
  KanHead kh(store, "head", 6, 5, 4, {-1.0, 1.0, 5, 3}, rng);
  CHECK(store.count() == KanHead::param_count(6, 5, 4, {-1.0, 1.0, 5, 3}));
  ad::Tape t(false);
  ClampStats stats;
  ad::Tensor x({1, 6}, {-3, -0.5, 0, 0.5, 2, 0.1});
  CHECK(kh(t, t.constant(x), &stats).shape() == ad::Shape{1, 4});
  CHECK(stats.total == 6 + 5);
  CHECK(stats.clamped >= 2);
  CHECK_THROWS_AS(kh(t, t.constant(ad::Tensor({1, 5}))), ad::ShapeError);
  CHECK(parse_head("linear") == HeadKind::linear);
  CHECK_THROWS(parse_head("mlp"));
}
