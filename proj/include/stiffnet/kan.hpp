#pragma once

// Kolmogorov-Arnold output head: every edge carries a learnable univariate
// function w_b * silu(x) + sum_m c_m B_m(x) over a uniform cubic B-spline grid.
// The plain affine head used as the ablation baseline lives here too.

#include "stiffnet/nn.hpp"

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stiffnet::kan {

using ad::Tape;
using ad::Var;

/// Uniform knots on [lo, hi], extended by `order` knots on each side.
struct BSplineGrid {
  double lo = -1.0;
  double hi = 1.0;
  std::size_t n_intervals = 5;
  std::size_t order = 3;

  std::size_t n_basis() const { return n_intervals + order; }
  std::size_t n_knots() const { return n_intervals + 2 * order + 1; }
  double spacing() const { return (hi - lo) / static_cast<double>(n_intervals); }
  double knot(std::size_t i) const {
    return lo + (static_cast<double>(i) - static_cast<double>(order)) * spacing();
  }
  double clamp(double x) const { return x < lo ? lo : (x > hi ? hi : x); }
  bool clamps(double x) const { return x < lo || x > hi; }
};

/// All n_basis() basis values at clamp(x). `out` must hold n_basis() entries.
void bspline_basis(double x, const BSplineGrid& grid, std::span<double> out);
std::vector<double> bspline_basis(double x, const BSplineGrid& grid);

/// Basis values and their derivatives with respect to x (zero where x is clamped).
void bspline_basis_and_derivative(double x, const BSplineGrid& grid, std::span<double> values,
                                  std::span<double> derivatives);

struct ClampStats {
  std::size_t clamped = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(clamped) / static_cast<double>(total) : 0.0; }
};

/// Tape op: x[...] -> basis values [..., n_basis], differentiable in x.
Var bspline_features(const Var& x, const BSplineGrid& grid, ClampStats* stats = nullptr);

struct KanLayer {
  BSplineGrid grid;
  std::size_t in = 0, out = 0;
  ad::Parameter* coeff = nullptr;  // [in, out, n_basis]
  ad::Parameter* base = nullptr;   // [in, out]

  KanLayer() = default;
  KanLayer(nn::ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
           const BSplineGrid& grid, Rng& rng);

  /// x [..., in] -> [..., out]
  Var operator()(Tape& tape, const Var& x, ClampStats* stats = nullptr) const;

  static std::size_t param_count(std::size_t in, std::size_t out, const BSplineGrid& grid) {
    return in * out * (grid.n_basis() + 1);
  }
};

enum class HeadKind { kan, linear };

const char* to_string(HeadKind k);
HeadKind parse_head(const std::string& s);

/// Maps decoder vectors [..., d_model] to per-segment samples [..., seg_len].
class OutputHead {
 public:
  virtual ~OutputHead() = default;
  virtual Var operator()(Tape& tape, const Var& x, ClampStats* stats = nullptr) const = 0;
  virtual HeadKind kind() const = 0;
};

class KanHead final : public OutputHead {
 public:
  KanHead(nn::ParamStore& store, const std::string& name, std::size_t d_model, std::size_t neurons,
          std::size_t seg_len, const BSplineGrid& grid, Rng& rng);
  Var operator()(Tape& tape, const Var& x, ClampStats* stats = nullptr) const override;
  HeadKind kind() const override { return HeadKind::kan; }
  const std::vector<KanLayer>& layers() const { return layers_; }

  static std::size_t param_count(std::size_t d_model, std::size_t neurons, std::size_t seg_len,
                                 const BSplineGrid& grid) {
    return KanLayer::param_count(d_model, neurons, grid) + KanLayer::param_count(neurons, seg_len, grid);
  }

 private:
  std::vector<KanLayer> layers_;
};

class LinearHead final : public OutputHead {
 public:
  LinearHead(nn::ParamStore& store, const std::string& name, std::size_t d_model, std::size_t seg_len, Rng& rng);
  Var operator()(Tape& tape, const Var& x, ClampStats* stats = nullptr) const override;
  HeadKind kind() const override { return HeadKind::linear; }
  const nn::Linear& projection() const { return proj_; }

  static std::size_t param_count(std::size_t d_model, std::size_t seg_len) {
    return nn::Linear::param_count(d_model, seg_len, true);
  }

 private:
  nn::Linear proj_;
};

}  // namespace stiffnet::kan
