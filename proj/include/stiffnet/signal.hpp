#pragma once

// Randomized stimulus generation: PRBS data through a lossy channel as a
// differential analog pair, plus the evaluation clock.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace stiffnet::signal {

struct PrbsConfig {
  int register_length = 7;
  std::uint64_t seed = 1;
  std::size_t n_bits = 127;
};

/// Fibonacci LFSR with a maximal-length feedback polynomial.
class Lfsr {
 public:
  Lfsr(int register_length, std::uint64_t seed);

  /// Shifts once and returns the new output bit.
  std::uint8_t next();
  std::uint64_t state() const { return state_; }
  int register_length() const { return length_; }

  /// Supported orders: 7, 9, 11, 15, 23, 31.
  static bool supported(int register_length);

 private:
  int length_;
  int tap_a_;
  int tap_b_;
  std::uint64_t mask_;
  std::uint64_t state_;
};

std::vector<std::uint8_t> gen_prbs(const PrbsConfig& cfg);

struct Breakpoint {
  double t;
  double v;
};

/// Piecewise-linear waveform. Holds its end values outside the breakpoint span.
class Pwl {
 public:
  explicit Pwl(std::vector<Breakpoint> points);

  double at(double t) const;
  /// Values at t = k*dt for k = 0..n-1.
  std::vector<double> sample(double dt, std::size_t n) const;
  const std::vector<Breakpoint>& points() const { return points_; }
  double end_time() const { return points_.back().t; }

  /// Waveform through (k*dt, values[k]).
  static Pwl from_samples(std::span<const double> values, double dt);

 private:
  std::vector<Breakpoint> points_;
};

/// Trapezoidal NRZ waveform. The line idles at v_lo before t = 0; bit j's
/// transition starts at j*bit_time.
Pwl bits_to_pwl(std::span<const std::uint8_t> bits, double bit_time, double rise, double fall,
                double v_lo, double v_hi);

struct DifferentialPair {
  Pwl p;
  Pwl m;
};

/// `pwl` carries logical levels in [-1/2, 1/2].
DifferentialPair differential_pair(const Pwl& pwl, double v_cm, double v_dm);

std::pair<std::vector<double>, std::vector<double>> differential_pair(
    std::span<const double> normalized, double v_cm, double v_dm);

/// Critically damped second-order low-pass (Q = 1/2, unity DC gain) discretized
/// by exact zero-order hold, starting from rest.
std::vector<double> channel_filter(std::span<const double> samples, double dt, double f_cut);

/// Closed-form unit-step response of the channel at time t.
double channel_step_response(double t, double f_cut);

struct RecordParams {
  double bit_time = 100e-9;
  double edge_frac = 0.25;
  double v_cm = 0.45;
  double v_dm = 0.2;
  double clk_period = 57.5e-9;
  double clk_phase = 0.0;  // degrees
  double clk_edge = 2.5e-9;
  double r_load = 5.0;
  double c_load = 100e-12;
  std::uint64_t rng_seed = 1;

  bool in_range() const;
};

inline constexpr double kClockHigh = 0.9;

/// 50%-duty trapezoidal clock from 0 V to kClockHigh over [0, duration],
/// first rising edge at (clk_phase/360)*clk_period.
Pwl gen_clock(const RecordParams& params, double duration);

/// Rising-edge start times of the clock inside [0, duration).
std::vector<double> clock_rising_edges(const RecordParams& params, double duration);

RecordParams sample_params(std::uint64_t master_seed, std::uint64_t record_index);

}  // namespace stiffnet::signal
