// One PASS/FAIL line per acceptance criterion. `--only 3,5` runs a subset;
// `--out DIR` keeps the ablation tables.

#include "layer_check.hpp"
#include "oracles.hpp"
#include "stiffnet/adc.hpp"
#include "stiffnet/crossformer.hpp"
#include "stiffnet/dataset.hpp"
#include "stiffnet/kan.hpp"
#include "stiffnet/signal.hpp"
#include "stiffnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

using namespace stiffnet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int p = 4) {
  std::ostringstream os;
  os << std::setprecision(p) << v;
  return os.str();
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// ---- 1: gradients ---------------------------------------------------------------

void gradient_correctness(Outcome& o) {
  const auto t0 = Clock::now();
  struct Tally {
    std::size_t checked = 0, failures = 0;
    double worst = 0;
  };
  std::map<std::string, Tally> tally;
  auto record = [&](const std::string& layer, const oracle::GradCheckResult& r) {
    auto& t = tally[layer];
    t.checked += r.checked;
    t.failures += r.failures;
    t.worst = std::max(t.worst, r.worst_rel);
  };
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed, 0xAC);
    {
      nn::ParamStore s;
      model::DswEmbedding e(s, "e", 3, 4, 5, 8, rng);
      record("dsw_embedding", oracle::check_layer(s, oracle::random_tensor({2, 3, 20}, rng),
                                                  [&](ad::Tape& t, const ad::Var& x) { return e(t, x); }, rng));
    }
    {
      nn::ParamStore s;
      model::TwoStageAttention a(s, "a", 3, 8, 2, 2, 16, rng);
      record("two_stage_attention", oracle::check_layer(s, oracle::random_tensor({2, 3, 3, 8}, rng),
                                                        [&](ad::Tape& t, const ad::Var& x) { return a(t, x); }, rng));
    }
    {
      nn::ParamStore s;
      model::SegmentMerge m(s, "m", 8, rng);
      record("segment_merge", oracle::check_layer(s, oracle::random_tensor({2, 3, 5, 8}, rng),
                                                  [&](ad::Tape& t, const ad::Var& x) { return m(t, x); }, rng));
    }
    {
      nn::ParamStore s;
      model::DecoderLayer d(s, "d", 8, 2, 16, rng);
      const ad::Tensor mem = oracle::random_tensor({2, 6, 8}, rng);
      record("decoder_block", oracle::check_layer(s, oracle::random_tensor({2, 5, 8}, rng),
                                                  [&](ad::Tape& t, const ad::Var& x) { return d(t, x, t.constant(mem)); }, rng));
    }
    {
      nn::ParamStore s;
      kan::KanLayer k(s, "k", 3, 2, {-1.0, 1.0, 5, 3}, rng);
      record("kan_layer", oracle::check_layer(s, oracle::random_tensor({4, 3}, rng, -0.95, 0.95),
                                              [&](ad::Tape& t, const ad::Var& x) { return k(t, x); }, rng, 0));
    }
    {
      nn::ParamStore s;
      kan::LinearHead h(s, "h", 8, 5, rng);
      record("linear_head", oracle::check_layer(s, oracle::random_tensor({2, 3, 8}, rng),
                                                [&](ad::Tape& t, const ad::Var& x) { return h(t, x); }, rng, 0));
    }
  }
  const double secs = seconds_since(t0);
  for (const auto& [layer, t] : tally) {
    o.require(t.failures == 0, layer + " has " + std::to_string(t.failures) + " bad coordinates");
    o.detail << layer << " " << t.checked << " coords, worst rel above atol " << fmt(t.worst, 2) << "; ";
  }
  o.require(secs < 120, "runtime " + fmt(secs) + " s");
  o.detail << "10 seeds, " << fmt(secs, 3) << " s";
}

// ---- 2: B-splines -----------------------------------------------------------------

void bspline_suite(Outcome& o) {
  double worst_pou = 0, worst_oracle = 0;
  std::size_t support_violations = 0;
  for (std::size_t G : {5, 15, 50}) {
    const kan::BSplineGrid g{-1.0, 1.0, G, 3};
    const auto knots = oracle::uniform_knots(-1, 1, G, 3);
    for (int i = 0; i < 10000; ++i) {
      const double x = -1.0 + 2.0 * i / 10000.0;
      const auto b = kan::bspline_basis(x, g);
      double s = 0;
      for (std::size_t m = 0; m < b.size(); ++m) {
        s += b[m];
        const bool inside = x >= g.knot(m) && x < g.knot(m + 4);
        if (!inside && b[m] != 0.0) ++support_violations;
        if (b[m] < 0) ++support_violations;
        worst_oracle = std::max(worst_oracle, std::abs(b[m] - oracle::cox_de_boor(knots, m, 3, x)));
      }
      worst_pou = std::max(worst_pou, std::abs(s - 1.0));
    }
    // At most order + 1 basis functions are nonzero anywhere.
    for (int i = 0; i < 1000; ++i) {
      const auto b = kan::bspline_basis(-1.0 + 2.0 * i / 1000.0, g);
      if (std::count_if(b.begin(), b.end(), [](double v) { return v != 0.0; }) > 4) ++support_violations;
    }
  }
  o.require(worst_pou < 1e-10, "partition of unity");
  o.require(support_violations == 0, "local support");
  o.require(worst_oracle < 1e-12, "Cox-de Boor agreement");
  o.detail << "grids {5,15,50}: max |sum-1| " << fmt(worst_pou, 2) << ", max |B - oracle| " << fmt(worst_oracle, 2)
           << ", support violations " << support_violations;
}

// ---- 3: signal and circuit -----------------------------------------------------------

void signal_oracles(Outcome& o) {
  const auto bits = signal::gen_prbs({7, 1, 300});
  const std::size_t period = oracle::brute_force_period(bits);
  const auto ones = std::count(bits.begin(), bits.begin() + 127, 1);
  o.require(period == 127, "PRBS period " + std::to_string(period));
  o.require(ones == 64, "PRBS balance");

  const double dt = 0.25e-9, f = 175e6;
  const auto y = signal::channel_filter(std::vector<double>(8000, 1.0), dt, f);
  double worst = 0;
  for (std::size_t k = 0; k < y.size(); ++k)
    worst = std::max(worst, std::abs(y[k] - oracle::critically_damped_step(static_cast<double>(k) * dt, f)));
  o.require(worst < 1e-6, "channel step response");

  const double lambda = 1e6;
  const adc::Rhs decay = [&](const adc::Vec& v) -> adc::Vec { return -lambda * v; };
  bool stable = true;
  for (double h : {1e-9, 1e-6, 1e-3, 1.0}) {
    adc::Vec v(1);
    v << 1.0;
    double prev = 1.0;
    for (int k = 0; k < 200; ++k) {
      v = adc::backward_euler_step(decay, v, h);
      stable = stable && std::isfinite(v[0]) && std::abs(v[0]) <= prev;
      prev = std::abs(v[0]);
    }
  }
  o.require(stable, "backward Euler stability");
  // Global error at T = 5 us on the same decay for h and h/2.
  auto err = [&](int steps) {
    const double T = 5e-6, h = T / steps;
    adc::Vec v(1);
    v << 1.0;
    for (int k = 0; k < steps; ++k) v = adc::backward_euler_step(decay, v, h);
    return std::abs(v[0] - std::exp(-lambda * T));
  };
  const double order = std::log2(err(400) / err(800));
  o.require(order >= 0.9 && order <= 1.1, "convergence order " + fmt(order));
  o.detail << "PRBS-7 period " << period << " (" << ones << "/" << 127 - ones << "), step max err " << fmt(worst, 2)
           << ", BE stable for lambda*h up to 1e6, measured order " << fmt(order, 4);
}

// ---- 4: dataset contract --------------------------------------------------------------

void dataset_contract(Outcome& o) {
  const auto t0 = Clock::now();
  data::Dataset d = data::build_dataset(2000, 1);
  data::split_dataset(d);
  bool shapes = d.size() == 2000;
  for (const auto& r : d.records) shapes = shapes && r.n_samples == 500 && r.values.size() == 5 * 500;
  const std::size_t ntr = d.indices(data::Split::train).size(), nva = d.indices(data::Split::val).size(),
                    nte = d.indices(data::Split::test).size();
  o.require(shapes, "2000 records of 5x500");
  o.require(ntr == 1400 && nva == 300 && nte == 300, "split sizes");

  const auto bytes = data::serialize(d);
  const fs::path path = fs::temp_directory_path() / "stiffnet_acceptance.scds";
  data::save(d, path);
  const data::Dataset back = data::load(path);
  fs::remove(path);
  bool roundtrip = back.split == d.split && back.size() == d.size() && data::serialize(back) == bytes;
  for (std::size_t i = 0; roundtrip && i < d.size(); ++i) roundtrip = bit_equal(d.records[i].values, back.records[i].values);
  o.require(roundtrip, "save/load round-trip");

  data::Dataset again = data::build_dataset(2000, 1);
  data::split_dataset(again);
  o.require(data::serialize(again) == bytes, "regeneration");
  const double secs = seconds_since(t0);
  o.require(secs < 600, "runtime " + fmt(secs) + " s");
  o.detail << d.size() << " records 5x500, split " << ntr << "/" << nva << "/" << nte << ", " << bytes.size()
           << " bytes round-trip exact, regeneration identical, " << fmt(secs, 3) << " s";
}

// ---- 5: loss and metric ---------------------------------------------------------------

void loss_metric(Outcome& o) {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed, 5);
    const ad::Tensor y = oracle::random_tensor({16, 2 * 500}, rng, 0, 1), yh = oracle::random_tensor({16, 2 * 500}, rng, 0, 1);
    const double ref = oracle::loss_double_loop(y.data, yh.data, 16, 1000);
    ad::Tape t;
    worst = std::max(worst, std::abs(train::mse_loss(y, yh) - ref));
    worst = std::max(worst, std::abs(train::mse_loss(t.constant(y), t.constant(yh)).item() - ref));
  }
  const double pct = train::nrmse_percent(ad::Tensor({2, 500}, 0.25), ad::Tensor({2, 500}, 0.25 + 0.211));
  o.require(worst < 1e-14, "loss vs double loop");
  o.require(std::abs(pct - 21.1) < 1e-10, "constant 0.211 error reports " + fmt(pct, 17));
  o.detail << "max |loss - double loop| " << fmt(worst, 2) << "; constant 0.211 error -> " << fmt(pct, 6) << "%";
}

// ---- 6 + 7: ablation and convergence ----------------------------------------------------

struct AblationSeed {
  std::uint64_t seed;
  std::vector<train::ArmResult> arms;  // linear, kan
  double seconds[2];
};

std::vector<AblationSeed>& ablation_results(const fs::path& out_dir) {
  static std::vector<AblationSeed> runs;
  if (!runs.empty()) return runs;
  data::Dataset d = data::build_dataset(200, 1);
  data::split_dataset(d);
  for (std::uint64_t seed : {1, 2, 3}) {
    train::TrainConfig cfg;
    cfg.d_model = 64;
    cfg.seg_len = 20;
    cfg.e_levels = 2;
    cfg.seed = seed;
    AblationSeed s{seed, {}, {0, 0}};
    int arm = 0;
    auto timed = [&](const train::TrainConfig& c) {
      const auto t0 = Clock::now();
      auto trained = std::make_shared<train::TrainedModel>(train::train(d, c));
      s.seconds[arm++] = seconds_since(t0);
      train::Predictor p = [trained](const data::Record& r) {
        ad::Tensor x = data::normalized_inputs(r);
        x.shape.insert(x.shape.begin(), 1);
        ad::Tensor y = trained->model->predict(x);
        y.shape.erase(y.shape.begin());
        return y;
      };
      return train::ArmOutcome{p, trained->log};
    };
    s.arms = train::ablation_run(d, cfg, timed);
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      train::write_comparison_csv(s.arms, out_dir / ("ablation_seed" + std::to_string(seed) + ".csv"));
      for (const auto& a : s.arms)
        a.log.write_csv(out_dir / ("runlog_seed" + std::to_string(seed) + "_" + kan::to_string(a.head) + ".csv"), true);
    }
    std::cout << "  seed " << seed << ": linear " << fmt(s.arms[0].test_nrmse) << "% (" << s.arms[0].epochs_run
              << " epochs, " << fmt(s.seconds[0], 3) << " s), kan " << fmt(s.arms[1].test_nrmse) << "% ("
              << s.arms[1].epochs_run << " epochs, " << fmt(s.seconds[1], 3) << " s)\n";
    std::cout.flush();
    runs.push_back(std::move(s));
  }
  return runs;
}

void directional_ablation(Outcome& o, const fs::path& out_dir) {
  int wins = 0;
  double slowest = 0;
  for (const auto& s : ablation_results(out_dir)) {
    const bool win = s.arms[1].test_nrmse <= s.arms[0].test_nrmse;
    wins += win;
    slowest = std::max({slowest, s.seconds[0], s.seconds[1]});
    o.detail << "seed " << s.seed << ": kan " << fmt(s.arms[1].test_nrmse) << "% vs linear " << fmt(s.arms[0].test_nrmse)
             << "%" << (win ? "" : " (linear better)") << "; ";
  }
  o.require(wins >= 2, "KAN arm not better in 2 of 3 seeds");
  o.require(slowest < 1800, "an arm took " + fmt(slowest) + " s");
  o.detail << "KAN <= linear in " << wins << "/3, slowest arm " << fmt(slowest, 3) << " s";
}

void convergence_budget(Outcome& o, const fs::path& out_dir) {
  int ok = 0, total = 0;
  for (const auto& s : ablation_results(out_dir)) {
    for (const auto& a : s.arms) {
      const bool hit = a.early_stopped && a.best_epoch < 100 && a.epochs_run < 100;
      o.detail << kan::to_string(a.head) << "/seed" << s.seed << " best " << a.best_epoch << " stop " << a.epochs_run
               << "; ";
      if (a.head == kan::HeadKind::kan) {
        ok += hit;
        ++total;
      }
    }
  }
  o.require(ok >= 2, "early stopping before the cap in " + std::to_string(ok) + "/3 KAN runs");
  o.detail << "KAN runs stopped early in " << ok << "/" << total;
}

// ---- 8: overfit ---------------------------------------------------------------------------

void overfit_sanity(Outcome& o) {
  const auto t0 = Clock::now();
  data::Dataset d = data::build_dataset(10, 8);
  d.split.assign(10, data::Split::train);
  d.split[8] = data::Split::val;
  d.split[9] = data::Split::test;
  train::TrainConfig cfg;  // full default model
  cfg.max_epochs = 300;
  cfg.patience = 300;
  cfg.batch_size = 1;
  cfg.lr = 1e-4;
  model::CrossformerModel m(cfg.model_config(500));
  const auto train_idx = d.indices(data::Split::train);
  double train_nrmse = 100.0 * std::sqrt(train::mean_loss(m, d, train_idx));
  std::size_t reached = 0;
  // The epoch log averages over changing weights, so confirm with a clean pass
  // and stop once the fit is reached.
  struct Reached {};
  train::TrainOptions opts;
  opts.on_epoch = [&](const train::EpochLog& e) {
    if (100.0 * std::sqrt(e.train_loss) > 6.0) return;
    train_nrmse = 100.0 * std::sqrt(train::mean_loss(m, d, train_idx));
    if (train_nrmse < 5.0) {
      reached = e.epoch;
      throw Reached{};
    }
  };
  try {
    train::train(m, d, cfg, opts);
    train_nrmse = 100.0 * std::sqrt(train::mean_loss(m, d, train_idx));
  } catch (const Reached&) {
  }
  const double secs = seconds_since(t0);
  o.require(train_nrmse < 5.0, "train NRMSE " + fmt(train_nrmse) + "%");
  o.detail << "8 train records, d_model 256, 3 levels, batch 1, lr 1e-4: train NRMSE " << fmt(train_nrmse) << "% "
           << (reached ? "at epoch " + std::to_string(reached) : std::string("after 300 epochs")) << ", "
           << fmt(secs, 3) << " s";
}

// ---- 9: determinism -------------------------------------------------------------------------

void determinism(Outcome& o) {
  data::Dataset d = data::build_dataset(30, 4, {}, 1);
  data::split_dataset(d, {0.7, 0.15, 0.15}, 2);
  train::TrainConfig cfg;
  cfg.d_model = 32;
  cfg.e_levels = 2;
  cfg.max_epochs = 5;
  cfg.seed = 11;
  const auto a = train::train(d, cfg);
  const auto b = train::train(d, cfg);
  bool weights = true;
  const auto sa = a.model->snapshot(), sb = b.model->snapshot();
  for (std::size_t i = 0; i < sa.size(); ++i) weights = weights && bit_equal(sa[i].data, sb[i].data);
  o.require(a.log.same_values(b.log), "RunLog differs");
  o.require(weights, "weights differ");
  o.detail << a.log.epochs.size() << " epochs, RunLog values and " << sa.size()
           << " parameter tensors bitwise equal (wall-clock excluded)";
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  fs::path out_dir;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string x; std::getline(ss, x, ',');) only.insert(std::stoi(x));
    } else if (a == "--out" && i + 1 < argc) {
      out_dir = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--out DIR]\n";
      return 2;
    }
  }
  struct Criterion {
    int id;
    const char* name;
    std::function<void(Outcome&)> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "B-spline suite", bspline_suite},
      {3, "signal/circuit oracles", signal_oracles},
      {4, "dataset contract", dataset_contract},
      {5, "loss/metric correctness", loss_metric},
      {6, "directional ablation", [&](Outcome& o) { directional_ablation(o, out_dir); }},
      {7, "convergence budget", [&](Outcome& o) { convergence_budget(o, out_dir); }},
      {8, "overfit sanity", overfit_sanity},
      {9, "determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail.str() << std::endl;
  }
  return failed ? 1 : 0;
}
