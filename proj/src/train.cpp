#include "stiffnet/train.hpp"

#include "stiffnet/binary_io.hpp"
#include "stiffnet/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace stiffnet::train {

// ---- loss and metric -----------------------------------------------------------

Var mse_loss(const Var& y, const Var& y_hat) {
  if (y.shape() != y_hat.shape()) {
    throw ad::ShapeError("loss operands differ in shape: " + ad::to_string(y.shape()) + " vs " +
                         ad::to_string(y_hat.shape()));
  }
  return ad::mean(ad::square(ad::sub(y, y_hat)));
}

double mse_loss(const Tensor& y, const Tensor& y_hat) {
  if (y.shape != y_hat.shape) {
    throw ad::ShapeError("loss operands differ in shape: " + ad::to_string(y.shape) + " vs " +
                         ad::to_string(y_hat.shape));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

double nrmse_percent(const Tensor& y, const Tensor& y_hat) { return 100.0 * std::sqrt(mse_loss(y, y_hat)); }

// ---- optimizers ----------------------------------------------------------------

const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "rmsprop"; }

OptimizerKind parse_optimizer(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "adam") return OptimizerKind::adam;
  if (l == "rmsprop") return OptimizerKind::rmsprop;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected adam|rmsprop)");
}

std::unique_ptr<Optimizer> Optimizer::make(OptimizerKind kind) {
  if (kind == OptimizerKind::adam) return std::make_unique<Adam>();
  return std::make_unique<RmsProp>();
}

namespace {

void ensure_slots(std::vector<Tensor>& slots, const std::deque<ad::Parameter>& params) {
  if (slots.size() == params.size()) return;
  slots.clear();
  for (const auto& p : params) slots.emplace_back(p.value.shape);
}

}  // namespace

void Adam::step(std::deque<ad::Parameter>& params, double lr) {
  ensure_slots(m_, params);
  ensure_slots(v_, params);
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (p.grad.shape != p.value.shape) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m_[k][i] = beta1 * m_[k][i] + (1.0 - beta1) * g;
      v_[k][i] = beta2 * v_[k][i] + (1.0 - beta2) * g * g;
      p.value[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps);
    }
  }
}

std::vector<Tensor> Adam::state() const {
  std::vector<Tensor> s = m_;
  s.insert(s.end(), v_.begin(), v_.end());
  s.push_back(Tensor::scalar(static_cast<double>(t_)));
  return s;
}

void Adam::load_state(const std::vector<Tensor>& s) {
  if (s.empty() || s.size() % 2 != 1) throw std::invalid_argument("malformed Adam state");
  const std::size_t n = s.size() / 2;
  m_.assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n));
  v_.assign(s.begin() + static_cast<std::ptrdiff_t>(n), s.end() - 1);
  t_ = static_cast<std::uint64_t>(s.back()[0]);
}

void RmsProp::step(std::deque<ad::Parameter>& params, double lr) {
  ensure_slots(v_, params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (p.grad.shape != p.value.shape) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      v_[k][i] = rho * v_[k][i] + (1.0 - rho) * g * g;
      p.value[i] -= lr * g / (std::sqrt(v_[k][i]) + eps);
    }
  }
}

std::vector<Tensor> RmsProp::state() const { return v_; }
void RmsProp::load_state(const std::vector<Tensor>& s) { v_ = s; }

double clip_grad_norm(std::deque<ad::Parameter>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad.data) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      for (double& g : p.grad.data) g *= s;
    }
  }
  return norm;
}

// ---- configuration ---------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, auto value, const std::string& legal) {
    std::ostringstream os;
    os << "invalid " << key << ' ' << value << " (legal: " << legal << ')';
    throw std::invalid_argument(os.str());
  };
  if (lr != 1e-3 && lr != 1e-4 && lr != 1e-5) fail("lr", lr, "1e-3, 1e-4, 1e-5");
  if (head == kan::HeadKind::kan) {
    if (kan_neurons != 5 && kan_neurons != 10) fail("kan_neurons", kan_neurons, "5, 10");
    if (kan_grid != 5 && kan_grid != 15 && kan_grid != 50) fail("kan_grid", kan_grid, "5, 15, 50");
  }
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) fail("d_model", d_model, "positive multiple of n_heads");
  if (batch_size == 0) fail("batch_size", batch_size, ">= 1");
  if (seg_len == 0) fail("seg_len", seg_len, ">= 1");
  if (e_levels == 0) fail("e_levels", e_levels, ">= 1");
  if (n_routers == 0) fail("n_routers", n_routers, ">= 1");
}

bool TrainConfig::in_tuning_grid() const { return d_model == 256 || d_model == 512; }

model::ModelConfig TrainConfig::model_config(std::size_t seq_len) const {
  model::ModelConfig m;
  m.seq_len = seq_len;
  m.seg_len = seg_len;
  m.d_model = d_model;
  m.n_heads = n_heads;
  m.n_routers = n_routers;
  m.e_levels = e_levels;
  m.d_ff = d_ff;
  m.head = head;
  m.kan_neurons = kan_neurons;
  m.kan_grid = kan_grid;
  m.seed = seed;
  return m;
}

// ---- logs ------------------------------------------------------------------------

void RunLog::write_csv(const std::filesystem::path& path, bool with_timing) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "epoch,train_loss,val_loss,train_nrmse_percent,val_nrmse_percent,clamp_rate" << (with_timing ? ",wall_ms" : "")
     << '\n' << std::setprecision(17);
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << 100.0 * std::sqrt(e.train_loss) << ','
       << 100.0 * std::sqrt(e.val_loss) << ',' << e.clamp_rate;
    if (with_timing) os << ',' << e.wall_ms;
    os << '\n';
  }
}

bool RunLog::same_values(const RunLog& o) const {
  auto same = [](double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; };
  if (epochs.size() != o.epochs.size() || best_epoch != o.best_epoch || early_stopped != o.early_stopped ||
      !same(best_val_loss, o.best_val_loss) || !same(test_nrmse, o.test_nrmse)) {
    return false;
  }
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = o.epochs[i];
    if (a.epoch != b.epoch || !same(a.train_loss, b.train_loss) || !same(a.val_loss, b.val_loss) ||
        !same(a.clamp_rate, b.clamp_rate)) {
      return false;
    }
  }
  return true;
}

TrainingError::TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
    : std::runtime_error(what), epoch_(epoch), batch_(batch) {}

// ---- run state (resume) -----------------------------------------------------------

namespace {

constexpr char kStateMagic[4] = {'S', 'C', 'T', 'S'};

std::string config_key(const TrainConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17) << c.lr << '|' << to_string(c.optimizer) << '|' << c.d_model << '|'
     << kan::to_string(c.head) << '|' << c.kan_neurons << '|' << c.kan_grid << '|' << c.batch_size << '|'
     << c.patience << '|' << c.seed << '|' << c.clip_norm << '|' << c.seg_len << '|' << c.e_levels << '|'
     << c.n_heads << '|' << c.n_routers << '|' << c.d_ff;
  return os.str();
}

struct RunState {
  std::size_t next_epoch = 0;
  std::size_t since_best = 0;
  RunLog log;
  std::vector<Tensor> params, best, optimizer;
};

void put_tensors(binary::Writer& w, const std::vector<Tensor>& ts) {
  w.put(static_cast<std::uint64_t>(ts.size()));
  for (const Tensor& t : ts) {
    w.put(static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t e : t.shape) w.put(static_cast<std::uint64_t>(e));
    for (double v : t.data) w.put(v);
  }
}

std::vector<Tensor> get_tensors(binary::Reader& r) {
  std::vector<Tensor> ts(r.get<std::uint64_t>());
  for (Tensor& t : ts) {
    ad::Shape s(r.get<std::uint32_t>());
    for (auto& e : s) e = r.get<std::uint64_t>();
    t = Tensor(s);
    for (double& v : t.data) v = r.get<double>();
  }
  return ts;
}

void save_state(const std::filesystem::path& path, const TrainConfig& cfg, const RunState& s) {
  std::vector<std::uint8_t> out;
  binary::Writer w(out);
  w.bytes(kStateMagic, 4);
  w.put(std::uint16_t{1});
  w.string(config_key(cfg));
  w.put(static_cast<std::uint64_t>(s.next_epoch));
  w.put(static_cast<std::uint64_t>(s.since_best));
  w.put(static_cast<std::uint64_t>(s.log.best_epoch));
  w.put(s.log.best_val_loss);
  w.put(static_cast<std::uint8_t>(s.log.early_stopped));
  w.put(static_cast<std::uint64_t>(s.log.epochs.size()));
  for (const auto& e : s.log.epochs) {
    w.put(static_cast<std::uint64_t>(e.epoch));
    w.put(e.train_loss);
    w.put(e.val_loss);
    w.put(e.wall_ms);
    w.put(e.clamp_rate);
  }
  put_tensors(w, s.params);
  put_tensors(w, s.best);
  put_tensors(w, s.optimizer);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  binary::write_file(tmp, out);
  std::filesystem::rename(tmp, path);
}

RunState load_state(const std::filesystem::path& path, const TrainConfig& cfg) {
  const auto bytes = binary::read_file(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kStateMagic, 4) != 0) {
    throw std::runtime_error("bad magic: " + path.string() + " is not a training state file");
  }
  try {
    binary::Reader r(bytes);
    r.skip(4);
    if (r.get<std::uint16_t>() != 1) throw std::runtime_error("training state version mismatch");
    if (r.string() != config_key(cfg)) {
      throw std::runtime_error("training state was written with a different configuration");
    }
    RunState s;
    s.next_epoch = r.get<std::uint64_t>();
    s.since_best = r.get<std::uint64_t>();
    s.log.best_epoch = r.get<std::uint64_t>();
    s.log.best_val_loss = r.get<double>();
    s.log.early_stopped = r.get<std::uint8_t>() != 0;
    s.log.epochs.resize(r.get<std::uint64_t>());
    for (auto& e : s.log.epochs) {
      e.epoch = r.get<std::uint64_t>();
      e.train_loss = r.get<double>();
      e.val_loss = r.get<double>();
      e.wall_ms = r.get<double>();
      e.clamp_rate = r.get<double>();
    }
    s.params = get_tensors(r);
    s.best = get_tensors(r);
    s.optimizer = get_tensors(r);
    return s;
  } catch (const binary::Truncated& e) {
    throw std::runtime_error(std::string("truncated training state: ") + e.what());
  }
}

}  // namespace

// ---- training ----------------------------------------------------------------------

double mean_loss(const CrossformerModel& m, const data::Dataset& d, std::span<const std::size_t> indices,
                 std::size_t batch_size) {
  if (indices.empty()) throw std::invalid_argument("mean_loss over zero records");
  double total = 0.0;
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    const auto chunk = indices.subspan(b, std::min(batch_size, indices.size() - b));
    const data::Batch batch = data::make_batch(d, chunk);
    const Tensor pred = m.predict(batch.inputs);
    total += mse_loss(batch.targets, pred) * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(indices.size());
}

RunLog train(CrossformerModel& m, const data::Dataset& d, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const std::vector<std::size_t> train_idx = d.indices(data::Split::train);
  const std::vector<std::size_t> val_idx = d.indices(data::Split::val);
  if (train_idx.empty()) throw std::invalid_argument("dataset has no train split");
  if (val_idx.empty()) throw std::invalid_argument("dataset has no validation split");

  auto& params = m.params().all();
  std::unique_ptr<Optimizer> opt = Optimizer::make(cfg.optimizer);
  RunState st;
  st.best = m.snapshot();
  if (opts.resume) {
    st = load_state(opts.state_path, cfg);
    m.restore(st.params);
    opt->load_state(st.optimizer);
  }
  RunLog& log = st.log;

  using Clock = std::chrono::steady_clock;
  for (std::size_t epoch = st.next_epoch; epoch < cfg.max_epochs && !log.early_stopped; ++epoch) {
    const auto t0 = Clock::now();
    std::vector<std::size_t> order = train_idx;
    Rng rng(cfg.seed, 1000 + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    kan::ClampStats clamp;
    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++batch_no) {
      const std::span<const std::size_t> chunk(order.data() + b, std::min(cfg.batch_size, order.size() - b));
      const data::Batch batch = data::make_batch(d, chunk);
      ad::Tape tape;
      Var y_hat = m.forward(tape, tape.constant(batch.inputs), &clamp);
      Var loss = mse_loss(tape.constant(batch.targets), y_hat);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                std::to_string(batch_no),
                            epoch + 1, batch_no);
      }
      m.params().zero_grad();
      tape.backward(loss);
      if (cfg.clip_norm > 0) clip_grad_norm(params, cfg.clip_norm);
      opt->step(params, cfg.lr);
      loss_sum += lv * static_cast<double>(chunk.size());
    }

    EpochLog e;
    e.epoch = epoch + 1;
    e.train_loss = loss_sum / static_cast<double>(order.size());
    e.val_loss = mean_loss(m, d, val_idx);
    e.clamp_rate = clamp.rate();
    e.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    log.epochs.push_back(e);

    if (e.val_loss < log.best_val_loss) {
      log.best_val_loss = e.val_loss;
      log.best_epoch = e.epoch;
      st.best = m.snapshot();
      st.since_best = 0;
    } else {
      ++st.since_best;
    }
    if (st.since_best >= cfg.patience) log.early_stopped = true;
    st.next_epoch = epoch + 1;
    if (!opts.state_path.empty()) {
      st.params = m.snapshot();
      st.optimizer = opt->state();
      save_state(opts.state_path, cfg, st);
    }
    if (opts.on_epoch) opts.on_epoch(e);
  }
  m.restore(st.best);
  return log;
}

TrainedModel train(const data::Dataset& d, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  TrainedModel out;
  out.model = std::make_unique<CrossformerModel>(cfg.model_config(d.n_samples));
  out.log = train(*out.model, d, cfg, opts);
  return out;
}

// ---- evaluation ------------------------------------------------------------------

EvalReport evaluate(const Predictor& predict, const data::Dataset& d, data::Split split) {
  const std::vector<std::size_t> idx = d.indices(split);
  if (idx.empty()) throw std::invalid_argument(std::string("split '") + data::to_string(split) + "' is empty");
  EvalReport rep;
  double sum = 0.0;
  for (std::size_t i : idx) {
    const data::Record& r = d.records[i];
    const Tensor truth = data::normalized_targets(r);
    const Tensor pred = predict(r);
    const double l = mse_loss(truth, pred);
    rep.record_indices.push_back(i);
    rep.loss.push_back(l);
    rep.nrmse.push_back(100.0 * std::sqrt(l));
    sum += rep.nrmse.back();
  }
  rep.mean_nrmse = sum / static_cast<double>(idx.size());
  return rep;
}

EvalReport evaluate(const CrossformerModel& m, const data::Dataset& d, data::Split split, std::size_t batch_size) {
  const std::vector<std::size_t> idx = d.indices(split);
  if (idx.empty()) throw std::invalid_argument(std::string("split '") + data::to_string(split) + "' is empty");
  EvalReport rep;
  double sum = 0.0;
  const std::size_t T = d.n_samples;
  const std::size_t per = data::kOutputRows * T;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::span<const std::size_t> chunk(idx.data() + b, std::min(batch_size, idx.size() - b));
    const data::Batch batch = data::make_batch(d, chunk);
    const Tensor pred = m.predict(batch.inputs);
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      Tensor y({data::kOutputRows, T}), yh({data::kOutputRows, T});
      std::copy_n(batch.targets.data.begin() + static_cast<std::ptrdiff_t>(k * per), per, y.data.begin());
      std::copy_n(pred.data.begin() + static_cast<std::ptrdiff_t>(k * per), per, yh.data.begin());
      const double l = mse_loss(y, yh);
      rep.record_indices.push_back(chunk[k]);
      rep.loss.push_back(l);
      rep.nrmse.push_back(100.0 * std::sqrt(l));
      sum += rep.nrmse.back();
    }
  }
  rep.mean_nrmse = sum / static_cast<double>(idx.size());
  return rep;
}

// ---- ablation --------------------------------------------------------------------

std::vector<ArmResult> ablation_run(const data::Dataset& d, const TrainConfig& base, ArmTrainer trainer) {
  if (!trainer) {
    trainer = [&d](const TrainConfig& cfg) {
      auto trained = std::make_shared<TrainedModel>(train(d, cfg));
      Predictor p = [trained](const data::Record& r) {
        Tensor x = data::normalized_inputs(r);
        x.shape.insert(x.shape.begin(), 1);
        Tensor y = trained->model->predict(x);
        y.shape.erase(y.shape.begin());
        return y;
      };
      return ArmOutcome{std::move(p), trained->log};
    };
  }
  std::vector<ArmResult> out;
  for (kan::HeadKind head : {kan::HeadKind::linear, kan::HeadKind::kan}) {
    TrainConfig cfg = base;
    cfg.head = head;
    ArmOutcome arm = trainer(cfg);
    ArmResult r;
    r.head = head;
    r.test_nrmse = evaluate(arm.predictor, d, data::Split::test).mean_nrmse;
    r.log = std::move(arm.log);
    r.log.test_nrmse = r.test_nrmse;
    r.best_epoch = r.log.best_epoch;
    r.epochs_run = r.log.epochs.size();
    r.early_stopped = r.log.early_stopped;
    out.push_back(std::move(r));
  }
  return out;
}

void write_comparison_csv(const std::vector<ArmResult>& arms, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "model,test_nrmse_percent,best_epoch,epochs_run,early_stopped\n" << std::setprecision(10);
  for (const auto& a : arms) {
    os << (a.head == kan::HeadKind::kan ? "crossformer+kan" : "crossformer") << ',' << a.test_nrmse << ','
       << a.best_epoch << ',' << a.epochs_run << ',' << (a.early_stopped ? 1 : 0) << '\n';
  }
}

}  // namespace stiffnet::train
