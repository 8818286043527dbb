#include "stiffnet/nn.hpp"

#include <cmath>
#include <numeric>

namespace stiffnet::nn {

Parameter& ParamStore::add(std::string name, Shape shape) {
  for (const Parameter& p : params_) {
    if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  }
  Parameter& p = params_.emplace_back();
  p.name = std::move(name);
  p.value = Tensor(shape);
  p.grad = Tensor(std::move(shape));
  return p;
}

Parameter* ParamStore::find(const std::string& name) {
  for (Parameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

void xavier_uniform(Parameter& p, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : p.value.data) v = rng.uniform(-a, a);
}

void normal_init(Parameter& p, double stddev, Rng& rng) {
  for (double& v : p.value.data) v = stddev * rng.normal();
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in_dim, std::size_t out_dim,
               bool with_bias, Rng& rng)
    : in(in_dim), out(out_dim) {
  weight = &store.add(name + ".weight", {in, out});
  xavier_uniform(*weight, in, out, rng);
  if (with_bias) bias = &store.add(name + ".bias", {out});
}

Var Linear::operator()(Tape& tape, const Var& x) const {
  if (x.ndim() < 1 || x.shape().back() != in) {
    throw ad::ShapeError("linear layer expects last extent " + std::to_string(in) + ", got " +
                         ad::to_string(x.shape()));
  }
  Var y;
  if (x.ndim() == 1) {
    y = ad::reshape(ad::matmul(ad::reshape(x, {1, in}), tape.param(*weight)), {out});
  } else {
    y = ad::matmul(x, tape.param(*weight));
  }
  return bias ? ad::add(y, tape.param(*bias)) : y;
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t dim) {
  gamma = &store.add(name + ".gamma", {dim});
  beta = &store.add(name + ".beta", {dim});
  std::fill(gamma->value.data.begin(), gamma->value.data.end(), 1.0);
}

Var LayerNorm::operator()(Tape& tape, const Var& x) const {
  return ad::add(ad::mul(ad::layernorm_lastdim(x), tape.param(*gamma)), tape.param(*beta));
}

FeedForward::FeedForward(ParamStore& store, const std::string& name, std::size_t d_model, std::size_t d_ff,
                         Rng& rng)
    : fc1(store, name + ".fc1", d_model, d_ff, true, rng), fc2(store, name + ".fc2", d_ff, d_model, true, rng) {}

Var FeedForward::operator()(Tape& tape, const Var& x) const { return fc2(tape, ad::silu(fc1(tape, x))); }

Var split_heads(const Var& x, std::size_t heads) {
  const Shape& s = x.shape();
  const std::size_t nd = s.size();
  const std::size_t d = s.back();
  if (d % heads != 0) {
    throw ad::ShapeError("head count " + std::to_string(heads) + " does not divide model width " +
                         std::to_string(d));
  }
  Shape s2(s.begin(), s.end() - 1);
  s2.push_back(heads);
  s2.push_back(d / heads);
  // [..., L, H, dh] -> [..., H, L, dh]
  return ad::transpose(ad::reshape(x, s2), nd - 2, nd - 1);
}

Var merge_heads(const Var& x) {
  const Shape& s = x.shape();
  const std::size_t nd = s.size();
  // [..., H, L, dh] -> [..., L, H, dh] -> [..., L, H*dh]
  Var t = ad::transpose(x, nd - 3, nd - 2);
  Shape s2(s.begin(), s.end() - 3);
  s2.push_back(s[nd - 2]);
  s2.push_back(s[nd - 3] * s[nd - 1]);
  return ad::reshape(t, s2);
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name, std::size_t d_model,
                                       std::size_t n_heads, Rng& rng)
    : q(store, name + ".q", d_model, d_model, true, rng),
      k(store, name + ".k", d_model, d_model, true, rng),
      v(store, name + ".v", d_model, d_model, true, rng),
      o(store, name + ".o", d_model, d_model, true, rng),
      heads(n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ad::ShapeError("head count " + std::to_string(n_heads) + " does not divide d_model " +
                         std::to_string(d_model));
  }
}

Var MultiHeadAttention::operator()(Tape& tape, const Var& query, const Var& source, AttentionProbe* probe) const {
  const std::size_t d = q.in;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d / heads));
  Var qh = split_heads(q(tape, query), heads);   // [..., H, Lq, dh]
  Var kh = split_heads(k(tape, source), heads);  // [..., H, Lk, dh]
  Var vh = split_heads(v(tape, source), heads);
  Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh, kh.ndim() - 1, kh.ndim() - 2)), inv_sqrt);
  Var attn = ad::softmax_lastdim(scores);
  if (probe) probe->weights.push_back(attn.value());
  return o(tape, merge_heads(ad::matmul(attn, vh)));
}

}  // namespace stiffnet::nn
