#pragma once

// Behavioral 1.5-bit pipeline sub-ADC: a clocked latched comparator driving two
// RC-loaded output nodes, integrated with an implicit (backward Euler) stepper.

#include "stiffnet/signal.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace stiffnet::adc {

/// Two-bit output code (D1, D0). 11 is never produced.
enum class Code : std::uint8_t { k00 = 0b00, k01 = 0b01, k10 = 0b10 };

inline bool bit1(Code c) { return (static_cast<std::uint8_t>(c) & 0b10) != 0; }
inline bool bit0(Code c) { return (static_cast<std::uint8_t>(c) & 0b01) != 0; }

/// 10 above +v_ref/4, 00 below -v_ref/4, 01 in between.
Code comparator_code(double v_diff, double v_ref);

struct AdcConfig {
  double v_ref = 0.4;
  double r_drv = 1e3;
  double v_high = 0.9;
  double clk_threshold = 0.45;
};

struct AdcState {
  Code latch = Code::k00;
  double v_out1 = 0.0;
  double v_out2 = 0.0;
  double last_clk = 0.0;
};

class NewtonError : public std::runtime_error {
 public:
  NewtonError(double residual, int iterations);
  double residual() const { return residual_; }
  int iterations() const { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

using Vec = Eigen::VectorXd;
using Rhs = std::function<Vec(const Vec&)>;
using Jacobian = std::function<Eigen::MatrixXd(const Vec&)>;

struct StiffOdeStepper {
  double newton_tol = 1e-10;
  int newton_max_iter = 50;

  /// Solves y_next = y + h*f(y_next) by damped Newton. The Jacobian of f is
  /// taken from `jac` when given, otherwise by forward differences.
  Vec step(const Rhs& f, const Vec& y, double h, const Jacobian& jac = {}) const;
};

Vec backward_euler_step(const Rhs& f, const Vec& y, double h, const Jacobian& jac = {});

struct SimulationResult {
  std::vector<double> dout1;  // at t = k*fine_dt, k = 0..n_steps
  std::vector<double> dout0;
  std::vector<double> latch_times;
  std::vector<Code> latch_codes;
  AdcState final_state;
};

/// Upward crossings of `threshold` by a PWL waveform, exact to its segments.
std::vector<double> upward_crossings(const signal::Pwl& w, double threshold, double t_end);

SimulationResult simulate_record(const signal::Pwl& vin_p, const signal::Pwl& vin_m,
                                 const signal::Pwl& clk, const signal::RecordParams& params,
                                 double fine_dt, double duration = 1250e-9,
                                 const AdcConfig& cfg = {});

}  // namespace stiffnet::adc
