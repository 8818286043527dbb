#pragma once

#include "stiffnet/autodiff.hpp"
#include "stiffnet/rng.hpp"

#include <deque>
#include <string>
#include <vector>

namespace stiffnet::nn {

using ad::Parameter;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Owns every parameter of a model. Element addresses are stable.
class ParamStore {
 public:
  Parameter& add(std::string name, Shape shape);

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  Parameter* find(const std::string& name);
  std::size_t count() const;  // scalar parameters
  void zero_grad();

 private:
  std::deque<Parameter> params_;
};

void xavier_uniform(Parameter& p, std::size_t fan_in, std::size_t fan_out, Rng& rng);
void normal_init(Parameter& p, double stddev, Rng& rng);

struct Linear {
  Parameter* weight = nullptr;  // [in, out]
  Parameter* bias = nullptr;    // [out] or null
  std::size_t in = 0, out = 0;

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, bool with_bias,
         Rng& rng);
  Var operator()(Tape& tape, const Var& x) const;
  static std::size_t param_count(std::size_t in, std::size_t out, bool with_bias) {
    return in * out + (with_bias ? out : 0);
  }
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t dim);
  Var operator()(Tape& tape, const Var& x) const;
  static std::size_t param_count(std::size_t dim) { return 2 * dim; }
};

struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& name, std::size_t d_model, std::size_t d_ff, Rng& rng);
  Var operator()(Tape& tape, const Var& x) const;
  static std::size_t param_count(std::size_t d_model, std::size_t d_ff) {
    return Linear::param_count(d_model, d_ff, true) + Linear::param_count(d_ff, d_model, true);
  }
};

/// Collects post-softmax attention weights for inspection.
struct AttentionProbe {
  std::vector<Tensor> weights;
};

/// Scaled dot-product multi-head attention. Query [..., Lq, d] attends over
/// source [..., Lk, d]; leading extents broadcast.
struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, std::size_t d_model, std::size_t heads,
                     Rng& rng);
  Var operator()(Tape& tape, const Var& query, const Var& source, AttentionProbe* probe = nullptr) const;
  static std::size_t param_count(std::size_t d_model) { return 4 * Linear::param_count(d_model, d_model, true); }
};

/// Splits the last axis into heads: [..., L, d] -> [..., H, L, d/H].
Var split_heads(const Var& x, std::size_t heads);
/// Inverse of split_heads.
Var merge_heads(const Var& x);

}  // namespace stiffnet::nn
