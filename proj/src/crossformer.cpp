#include "stiffnet/crossformer.hpp"

#include "stiffnet/binary_io.hpp"

#include <cstring>

namespace stiffnet::model {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (in_dims == 0 || out_dims == 0) fail("in_dims and out_dims must be positive");
  if (seg_len == 0 || seq_len % seg_len != 0) {
    fail("seg_len " + std::to_string(seg_len) + " does not divide seq_len " + std::to_string(seq_len));
  }
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    fail("n_heads " + std::to_string(n_heads) + " does not divide d_model " + std::to_string(d_model));
  }
  if (n_routers == 0) fail("n_routers must be positive");
  if (e_levels == 0) fail("e_levels must be at least 1");
  if (head == HeadKind::kan && (kan_neurons == 0 || kan_grid == 0 || kan_order == 0)) {
    fail("kan_neurons, kan_grid and kan_order must be positive");
  }
}

std::vector<std::size_t> ModelConfig::level_segments() const {
  std::vector<std::size_t> out{n_segments()};
  for (std::size_t l = 1; l < e_levels; ++l) out.push_back((out.back() + 1) / 2);
  return out;
}

// ---- embedding -------------------------------------------------------------

DswEmbedding::DswEmbedding(nn::ParamStore& store, const std::string& name, std::size_t dims, std::size_t n_seg,
                           std::size_t seg, std::size_t d_model, Rng& rng)
    : proj(store, name + ".proj", seg, d_model, false, rng), seg_len(seg) {
  pos = &store.add(name + ".pos", {dims, n_seg, d_model});
  nn::normal_init(*pos, 0.02, rng);
}

Var DswEmbedding::operator()(Tape& tape, const Var& x) const {
  const ad::Shape& s = x.shape();
  if (s.size() != 3) throw ad::ShapeError("embedding expects [B, D, T], got " + ad::to_string(s));
  if (s[2] % seg_len != 0) {
    throw ad::ShapeError("series length " + std::to_string(s[2]) + " is not divisible by segment length " +
                         std::to_string(seg_len));
  }
  Var segs = ad::reshape(x, {s[0], s[1], s[2] / seg_len, seg_len});
  return ad::add(proj(tape, segs), tape.param(*pos));
}

// ---- two-stage attention ---------------------------------------------------

TwoStageAttention::TwoStageAttention(nn::ParamStore& store, const std::string& name, std::size_t n_seg,
                                     std::size_t d_model, std::size_t n_heads, std::size_t n_routers,
                                     std::size_t d_ff, Rng& rng)
    : time_norm(store, name + ".time_norm", d_model),
      time_ff_norm(store, name + ".time_ff_norm", d_model),
      dim_norm(store, name + ".dim_norm", d_model),
      dim_ff_norm(store, name + ".dim_ff_norm", d_model),
      time_attn(store, name + ".time_attn", d_model, n_heads, rng),
      dim_sender(store, name + ".dim_sender", d_model, n_heads, rng),
      dim_receiver(store, name + ".dim_receiver", d_model, n_heads, rng),
      time_ff(store, name + ".time_ff", d_model, d_ff, rng),
      dim_ff(store, name + ".dim_ff", d_model, d_ff, rng) {
  router = &store.add(name + ".router", {n_seg, n_routers, d_model});
  nn::normal_init(*router, 0.02, rng);
}

Var TwoStageAttention::cross_time(Tape& tape, const Var& h, ForwardProbe* probe) const {
  nn::AttentionProbe* ap = probe ? &probe->attention : nullptr;
  Var n = time_norm(tape, h);
  Var x = ad::add(h, time_attn(tape, n, n, ap));
  return ad::add(x, time_ff(tape, time_ff_norm(tape, x)));
}

Var TwoStageAttention::cross_dimension(Tape& tape, const Var& h, ForwardProbe* probe) const {
  nn::AttentionProbe* ap = probe ? &probe->attention : nullptr;
  Var hs = ad::transpose(h, 1, 2);  // [B, S, D, d]
  Var n = dim_norm(tape, hs);
  Var buffer = dim_sender(tape, tape.param(*router), n, ap);  // [B, S, r, d]
  Var x = ad::add(hs, dim_receiver(tape, n, buffer, ap));
  x = ad::add(x, dim_ff(tape, dim_ff_norm(tape, x)));
  return ad::transpose(x, 1, 2);
}

Var TwoStageAttention::operator()(Tape& tape, const Var& h, ForwardProbe* probe) const {
  const ad::Shape& s = h.shape();
  if (s.size() != 4 || s[2] != router->value.shape[0]) {
    throw ad::ShapeError("two-stage attention expects [B, D, " + std::to_string(router->value.shape[0]) +
                         ", d], got " + ad::to_string(s));
  }
  Var t = cross_time(tape, h, probe);
  if (probe) probe->stage1_outputs.push_back(t.value());
  return cross_dimension(tape, t, probe);
}

// ---- segment merge ---------------------------------------------------------

SegmentMerge::SegmentMerge(nn::ParamStore& store, const std::string& name, std::size_t d_model, Rng& rng)
    : norm(store, name + ".norm", 2 * d_model), proj(store, name + ".proj", 2 * d_model, d_model, true, rng) {}

Var SegmentMerge::operator()(Tape& tape, const Var& h) const {
  const ad::Shape& s = h.shape();
  const std::size_t n_seg = s[2];
  const std::size_t pairs = n_seg / 2;
  if (pairs == 0) return h;
  // Row-major storage makes segments 2i and 2i+1 contiguous.
  Var even = n_seg % 2 ? ad::slice(h, 2, 0, 2 * pairs) : h;
  Var merged = proj(tape, norm(tape, ad::reshape(even, {s[0], s[1], pairs, 2 * s[3]})));
  if (n_seg % 2 == 0) return merged;
  return ad::concat({merged, ad::slice(h, 2, n_seg - 1, n_seg)}, 2);
}

std::vector<Var> Encoder::operator()(Tape& tape, const Var& embedded, ForwardProbe* probe) const {
  std::vector<Var> levels;
  Var x = embedded;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (l > 0) x = merges[l - 1](tape, x);
    x = layers[l](tape, x, probe);
    levels.push_back(x);
  }
  return levels;
}

// ---- decoder ---------------------------------------------------------------

DecoderLayer::DecoderLayer(nn::ParamStore& store, const std::string& name, std::size_t d_model,
                           std::size_t n_heads, std::size_t d_ff, Rng& rng)
    : self_norm(store, name + ".self_norm", d_model),
      cross_norm(store, name + ".cross_norm", d_model),
      ff_norm(store, name + ".ff_norm", d_model),
      self_attn(store, name + ".self_attn", d_model, n_heads, rng),
      cross_attn(store, name + ".cross_attn", d_model, n_heads, rng),
      ff(store, name + ".ff", d_model, d_ff, rng) {}

Var DecoderLayer::operator()(Tape& tape, const Var& x, const Var& memory, ForwardProbe* probe) const {
  nn::AttentionProbe* ap = probe ? &probe->attention : nullptr;
  Var n = self_norm(tape, x);
  Var h = ad::add(x, self_attn(tape, n, n, ap));
  h = ad::add(h, cross_attn(tape, cross_norm(tape, h), memory, ap));
  return ad::add(h, ff(tape, ff_norm(tape, h)));
}

Var Decoder::operator()(Tape& tape, const std::vector<Var>& levels, ForwardProbe* probe) const {
  if (levels.size() != layers.size()) {
    throw ad::ShapeError("decoder has " + std::to_string(layers.size()) + " layers but received " +
                         std::to_string(levels.size()) + " encoder levels");
  }
  const ad::Shape& qs = queries->value.shape;  // [N, S, d]
  const std::size_t batch = levels.front().shape()[0];
  Var x = ad::reshape(tape.param(*queries), {qs[0] * qs[1], qs[2]});
  Var acc;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ad::Shape& es = levels[l].shape();
    Var memory = ad::reshape(levels[l], {es[0], es[1] * es[2], es[3]});
    x = layers[l](tape, x, memory, probe);
    acc = acc.valid() ? ad::add(acc, x) : x;
  }
  return ad::reshape(final_norm(tape, acc), {batch, qs[0], qs[1], qs[2]});
}

// ---- model -----------------------------------------------------------------

CrossformerModel::CrossformerModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed, 0xC0FFEEULL);
  const std::size_t d = cfg_.d_model;
  const std::size_t ff = cfg_.ff_width();
  const auto segs = cfg_.level_segments();

  embedding_ = DswEmbedding(params_, "embed", cfg_.in_dims, cfg_.n_segments(), cfg_.seg_len, d, rng);
  for (std::size_t l = 0; l < cfg_.e_levels; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    if (l > 0) encoder_.merges.emplace_back(params_, p + ".merge", d, rng);
    encoder_.layers.emplace_back(params_, p + ".tsa", segs[l], d, cfg_.n_heads, cfg_.n_routers, ff, rng);
  }
  decoder_.queries = &params_.add("decoder.queries", {cfg_.out_dims, cfg_.n_segments(), d});
  nn::normal_init(*decoder_.queries, 0.02, rng);
  for (std::size_t l = 0; l < cfg_.e_levels; ++l) {
    decoder_.layers.emplace_back(params_, "decoder." + std::to_string(l), d, cfg_.n_heads, ff, rng);
  }
  decoder_.final_norm = nn::LayerNorm(params_, "decoder.final_norm", d);
  if (cfg_.head == HeadKind::kan) {
    head_ = std::make_unique<kan::KanHead>(params_, "head", d, cfg_.kan_neurons, cfg_.seg_len, cfg_.grid(), rng);
  } else {
    head_ = std::make_unique<kan::LinearHead>(params_, "head", d, cfg_.seg_len, rng);
  }
}

Var CrossformerModel::forward(Tape& tape, const Var& x, kan::ClampStats* stats, ForwardProbe* probe) const {
  const ad::Shape& s = x.shape();
  if (s.size() != 3 || s[1] != cfg_.in_dims || s[2] != cfg_.seq_len) {
    throw ad::ShapeError("model expects input [B, " + std::to_string(cfg_.in_dims) + ", " +
                         std::to_string(cfg_.seq_len) + "], got " + ad::to_string(s));
  }
  const std::vector<Var> levels = encoder_(tape, embedding_(tape, x), probe);
  Var rep = decoder_(tape, levels, probe);  // [B, N, S, d]
  Var y = (*head_)(tape, rep, stats);       // [B, N, S, seg_len]
  return ad::reshape(y, {s[0], cfg_.out_dims, cfg_.seq_len});
}

Tensor CrossformerModel::predict(const Tensor& x) const {
  Tape tape(false);
  return forward(tape, tape.constant(x)).value();
}

std::vector<Tensor> CrossformerModel::snapshot() const {
  std::vector<Tensor> out;
  for (const auto& p : params_.all()) out.push_back(p.value);
  return out;
}

void CrossformerModel::restore(const std::vector<Tensor>& values) {
  auto& ps = params_.all();
  if (values.size() != ps.size()) throw std::invalid_argument("snapshot does not match the model");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (values[i].shape != ps[i].value.shape) {
      throw std::invalid_argument("snapshot shape mismatch for " + ps[i].name);
    }
    ps[i].value = values[i];
  }
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, ff = cfg.ff_width();
  const std::size_t ln = nn::LayerNorm::param_count(d);
  const std::size_t mha = nn::MultiHeadAttention::param_count(d);
  const std::size_t ffn = nn::FeedForward::param_count(d, ff);
  std::size_t n = nn::Linear::param_count(cfg.seg_len, d, false) + cfg.in_dims * cfg.n_segments() * d;
  for (std::size_t segs : cfg.level_segments()) n += 4 * ln + 3 * mha + 2 * ffn + segs * cfg.n_routers * d;
  n += (cfg.e_levels - 1) * (nn::LayerNorm::param_count(2 * d) + nn::Linear::param_count(2 * d, d, true));
  n += cfg.out_dims * cfg.n_segments() * d;
  n += cfg.e_levels * (3 * ln + 2 * mha + ffn) + ln;
  n += cfg.head == HeadKind::kan ? kan::KanHead::param_count(d, cfg.kan_neurons, cfg.seg_len, cfg.grid())
                                 : kan::LinearHead::param_count(d, cfg.seg_len);
  return n;
}

// ---- checkpoint ------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'C', 'K', 'P'};

void put_config(binary::Writer& w, const ModelConfig& c) {
  for (std::uint64_t v : {std::uint64_t{c.in_dims}, std::uint64_t{c.out_dims}, std::uint64_t{c.seq_len},
                          std::uint64_t{c.seg_len}, std::uint64_t{c.d_model}, std::uint64_t{c.n_heads},
                          std::uint64_t{c.n_routers}, std::uint64_t{c.e_levels}, std::uint64_t{c.d_ff},
                          std::uint64_t{c.head == HeadKind::kan ? 0U : 1U}, std::uint64_t{c.kan_neurons},
                          std::uint64_t{c.kan_grid}, std::uint64_t{c.kan_order}, c.seed}) {
    w.put(v);
  }
  const kan::BSplineGrid g = c.grid();
  w.put(g.lo);
  w.put(g.hi);
}

ModelConfig get_config(binary::Reader& r) {
  ModelConfig c;
  for (std::size_t* f : {&c.in_dims, &c.out_dims, &c.seq_len, &c.seg_len, &c.d_model, &c.n_heads, &c.n_routers,
                         &c.e_levels, &c.d_ff}) {
    *f = r.get<std::uint64_t>();
  }
  const auto head = r.get<std::uint64_t>();
  if (head > 1) throw CheckpointError("unknown head kind in checkpoint");
  c.head = head == 0 ? HeadKind::kan : HeadKind::linear;
  c.kan_neurons = r.get<std::uint64_t>();
  c.kan_grid = r.get<std::uint64_t>();
  c.kan_order = r.get<std::uint64_t>();
  c.seed = r.get<std::uint64_t>();
  const double lo = r.get<double>(), hi = r.get<double>();
  if (lo != -1.0 || hi != 1.0) throw CheckpointError("unsupported spline domain in checkpoint");
  return c;
}

struct Contents {
  ModelConfig cfg;
  std::vector<NamedTensor> tensors;
};

Contents read_contents(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = binary::read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("bad magic: " + path.string() + " is not an SCKP checkpoint");
  }
  try {
    binary::Reader r(bytes);
    r.skip(4);
    const auto version = r.get<std::uint16_t>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint version mismatch: " + std::to_string(version));
    }
    r.skip(2);
    Contents c;
    c.cfg = get_config(r);
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      NamedTensor t;
      t.name = r.string();
      const auto nd = r.get<std::uint32_t>();
      ad::Shape shape(nd);
      for (auto& e : shape) e = r.get<std::uint64_t>();
      t.value = Tensor(shape);
      for (double& v : t.value.data) v = r.get<double>();
      c.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw CheckpointError("trailing bytes in checkpoint");
    return c;
  } catch (const binary::Truncated& e) {
    throw CheckpointError(std::string("truncated checkpoint: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const CrossformerModel& m, const std::filesystem::path& path) {
  std::vector<std::uint8_t> out;
  binary::Writer w(out);
  w.bytes(kMagic, 4);
  w.put(kCheckpointVersion);
  w.put(std::uint16_t{0});
  put_config(w, m.config());
  w.put(static_cast<std::uint32_t>(m.params().all().size()));
  for (const auto& p : m.params().all()) {
    w.string(p.name);
    w.put(static_cast<std::uint32_t>(p.value.ndim()));
    for (std::size_t e : p.value.shape) w.put(static_cast<std::uint64_t>(e));
    for (double v : p.value.data) w.put(v);
  }
  binary::write_file(path, out);
}

std::unique_ptr<CrossformerModel> load_checkpoint(const std::filesystem::path& path) {
  Contents c = read_contents(path);
  auto m = std::make_unique<CrossformerModel>(c.cfg);
  auto& ps = m->params().all();
  if (ps.size() != c.tensors.size()) throw CheckpointError("checkpoint parameter count does not match its config");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].name != c.tensors[i].name || ps[i].value.shape != c.tensors[i].value.shape) {
      throw CheckpointError("checkpoint tensor " + c.tensors[i].name + " does not match parameter " + ps[i].name);
    }
    ps[i].value = std::move(c.tensors[i].value);
  }
  return m;
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) { return read_contents(path).cfg; }

std::vector<NamedTensor> read_checkpoint_tensors(const std::filesystem::path& path) {
  return read_contents(path).tensors;
}

}  // namespace stiffnet::model
