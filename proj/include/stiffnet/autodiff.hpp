#pragma once

// Dense row-major tensors with a define-by-run tape for reverse-mode
// differentiation. Every model in the library is assembled from these ops.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace stiffnet::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  bool all_finite() const;
};

/// A trainable tensor owned by a model. `grad` accumulates across backward
/// passes until zeroed.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  std::size_t ndim() const { return value().ndim(); }
  double item() const;
  bool requires_grad() const;

  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// View handed to an op's backward rule while the tape unwinds.
class BackwardContext {
 public:
  const Tensor& out_value() const;
  const Tensor& out_grad() const;
  const Tensor& in_value(std::size_t k) const;
  /// Gradient buffer of input k, or nullptr when that input needs no gradient.
  Tensor* in_grad(std::size_t k);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}
  Tape& tape_;
  std::size_t node_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext&)>;

  /// With grad disabled every node is a constant and no closures are kept.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var param(Parameter& p);

  /// Appends an op node. The backward rule is dropped if no input needs a gradient.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  /// Reverse accumulation from a scalar root. Parameter gradients are added
  /// into Parameter::grad. A tape can be unwound once.
  void backward(const Var& root);

  const Tensor& grad(const Var& v) const;
  bool has_grad(const Var& v) const;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return visits_; }
  /// True when every node's inputs precede it.
  bool topologically_ordered() const;

 private:
  friend class Var;
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // deque: value references stay valid while recording
  bool grad_enabled_;
  bool unwound_ = false;
  std::size_t visits_ = 0;
};

// ---- shape utilities -------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b);

// ---- elementwise -----------------------------------------------------------

/// Binary ops broadcast with NumPy rules.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var square(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var softmax_lastdim(const Var& a);
/// Zero mean, unit variance over the last axis (no affine terms).
Var layernorm_lastdim(const Var& a, double eps = 1e-5);

// ---- linear algebra --------------------------------------------------------

/// a[..., p, q] x b[..., q, r] with broadcast batch extents.
Var matmul(const Var& a, const Var& b);

// ---- structural ------------------------------------------------------------

Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& axes);
Var transpose(const Var& a, std::size_t i, std::size_t j);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var concat(const std::vector<Var>& parts, std::size_t axis);

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

}  // namespace stiffnet::ad
