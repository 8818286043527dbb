#pragma once

#include "stiffnet/crossformer.hpp"
#include "stiffnet/dataset.hpp"

#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace stiffnet::train {

using ad::Tensor;
using ad::Var;
using model::CrossformerModel;

// ---- loss and metric -----------------------------------------------------------

/// (1/(N*T)) * sum_i sum_j (y_ij - yhat_ij)^2 over equally shaped tensors. For
/// batches of equal-size records this is the mean of the per-record values.
Var mse_loss(const Var& y, const Var& y_hat);
double mse_loss(const Tensor& y, const Tensor& y_hat);

/// 100 * sqrt(mse_loss) in normalized space (unit range per channel).
double nrmse_percent(const Tensor& y, const Tensor& y_hat);

// ---- optimizers ----------------------------------------------------------------

enum class OptimizerKind { adam, rmsprop };
const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::deque<ad::Parameter>& params, double lr) = 0;
  /// Internal moments, in parameter order, for checkpointing a run.
  virtual std::vector<Tensor> state() const = 0;
  virtual void load_state(const std::vector<Tensor>& s) = 0;

  static std::unique_ptr<Optimizer> make(OptimizerKind kind);
};

class Adam final : public Optimizer {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  void step(std::deque<ad::Parameter>& params, double lr) override;
  std::vector<Tensor> state() const override;
  void load_state(const std::vector<Tensor>& s) override;
  std::uint64_t steps() const { return t_; }

 private:
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

class RmsProp final : public Optimizer {
 public:
  double rho = 0.99, eps = 1e-8;
  void step(std::deque<ad::Parameter>& params, double lr) override;
  std::vector<Tensor> state() const override;
  void load_state(const std::vector<Tensor>& s) override;

 private:
  std::vector<Tensor> v_;
};

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::deque<ad::Parameter>& params, double max_norm);

// ---- configuration and logs -------------------------------------------------------

struct TrainConfig {
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t d_model = 256;
  kan::HeadKind head = kan::HeadKind::kan;
  std::size_t kan_neurons = 5;
  std::size_t kan_grid = 5;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t seg_len = 20;
  std::size_t e_levels = 3;
  std::size_t n_heads = 4;
  std::size_t n_routers = 4;
  std::size_t d_ff = 0;

  /// Checks enumerated fields against their legal sets (d_model only needs to
  /// be divisible by n_heads; see in_tuning_grid for the full grid).
  void validate() const;
  /// True when d_model is also one of the tuned widths {256, 512}.
  bool in_tuning_grid() const;
  model::ModelConfig model_config(std::size_t seq_len) const;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double wall_ms = 0;
  double clamp_rate = 0;
};

struct RunLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;  // 0: the initial weights were kept
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
  double test_nrmse = std::numeric_limits<double>::quiet_NaN();

  /// Wall-clock timings are left out unless asked for, so reruns hash equal.
  void write_csv(const std::filesystem::path& path, bool with_timing = false) const;
  /// Everything except wall-clock time, for reproducibility checks.
  bool same_values(const RunLog& other) const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch);
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

struct TrainOptions {
  /// When set, the full run state is written here after every epoch.
  std::filesystem::path state_path;
  /// Continue from state_path instead of starting fresh.
  bool resume = false;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Minimizes mse_loss over the train split with early stopping on the
/// validation split. On return `m` holds the best-validation weights.
RunLog train(CrossformerModel& m, const data::Dataset& d, const TrainConfig& cfg, const TrainOptions& opts = {});

struct TrainedModel {
  std::unique_ptr<CrossformerModel> model;
  RunLog log;
};

TrainedModel train(const data::Dataset& d, const TrainConfig& cfg, const TrainOptions& opts = {});

// ---- evaluation ------------------------------------------------------------------

/// Normalized [2, T] prediction for one record.
using Predictor = std::function<Tensor(const data::Record&)>;

struct EvalReport {
  double mean_nrmse = 0;
  std::vector<std::size_t> record_indices;
  std::vector<double> nrmse;
  std::vector<double> loss;
};

EvalReport evaluate(const Predictor& predict, const data::Dataset& d, data::Split split);
EvalReport evaluate(const CrossformerModel& m, const data::Dataset& d, data::Split split,
                    std::size_t batch_size = 32);

/// Mean mse_loss over the given records.
double mean_loss(const CrossformerModel& m, const data::Dataset& d, std::span<const std::size_t> indices,
                 std::size_t batch_size = 32);

// ---- ablation ----------------------------------------------------------------------

struct ArmOutcome {
  Predictor predictor;
  RunLog log;
};

using ArmTrainer = std::function<ArmOutcome(const TrainConfig&)>;

struct ArmResult {
  kan::HeadKind head;
  double test_nrmse = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  RunLog log;
};

/// Trains the linear-head and KAN-head arms with identical seeds and
/// hyperparameters. The default trainer is train().
std::vector<ArmResult> ablation_run(const data::Dataset& d, const TrainConfig& base, ArmTrainer trainer = {});

void write_comparison_csv(const std::vector<ArmResult>& arms, const std::filesystem::path& path);

}  // namespace stiffnet::train
