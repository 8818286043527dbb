#include "doctest.h"

#include "oracles.hpp"
#include "stiffnet/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace stiffnet;
using namespace stiffnet::signal;

TEST_CASE("PRBS-7 has period 127 and 64/63 balance") {
  const auto bits = gen_prbs({7, 1, 300});
  CHECK(oracle::brute_force_period(bits) == 127);
  const auto ones = std::count(bits.begin(), bits.begin() + 127, 1);
  CHECK(ones == 64);
  CHECK(127 - ones == 63);
}

TEST_CASE("PRBS-7 visits every nonzero state once per period") {
  Lfsr l(7, 0x5A);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 127; ++i) {
    seen.insert(l.state());
    l.next();
  }
  CHECK(seen.size() == 127);
  CHECK(seen.count(0) == 0);
  CHECK(l.state() == 0x5A);
}

TEST_CASE("longer registers are maximal on a prefix") {
  for (int n : {9, 11}) {
    const auto bits = gen_prbs({n, 3, 3 * ((1u << n) - 1)});
    CHECK(oracle::brute_force_period(bits) == (1u << n) - 1);
  }
  CHECK_THROWS(Lfsr(7, 0));
  CHECK_THROWS(Lfsr(8, 1));
}

TEST_CASE("bits_to_pwl stays between its levels") {
  Rng rng(11);
  std::vector<std::uint8_t> bits(30);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng.below(2));
  const Pwl w = bits_to_pwl(bits, 100e-9, 20e-9, 25e-9, -0.5, 0.5);
  for (double t = -10e-9; t < 3.1e-6; t += 0.37e-9) {
    const double v = w.at(t);
    CHECK(v >= -0.5);
    CHECK(v <= 0.5);
  }
  CHECK(w.at(-1e-9) == -0.5);
  CHECK_THROWS(bits_to_pwl(bits, 100e-9, 60e-9, 50e-9, 0, 1));
}

TEST_CASE("trapezoid edges take exactly the rise time") {
  const std::vector<std::uint8_t> bits{1, 1, 0};
  const Pwl w = bits_to_pwl(bits, 100e-9, 20e-9, 10e-9, 0.0, 1.0);
  CHECK(w.at(0) == doctest::Approx(0.0));
  CHECK(w.at(10e-9) == doctest::Approx(0.5));
  CHECK(w.at(20e-9) == doctest::Approx(1.0));
  CHECK(w.at(150e-9) == doctest::Approx(1.0));
  CHECK(w.at(205e-9) == doctest::Approx(0.5));
  CHECK(w.at(250e-9) == doctest::Approx(0.0));
}

TEST_CASE("differential pair is complementary about the common mode") {
  Rng rng(12);
  std::vector<std::uint8_t> bits(15);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng.below(2));
  const Pwl w = bits_to_pwl(bits, 80e-9, 20e-9, 20e-9, -0.5, 0.5);
  const auto pair = differential_pair(w, 0.45, 0.2);
  double worst = 0;
  for (double t = 0; t < 1.25e-6; t += 0.1e-9) worst = std::max(worst, std::abs(pair.p.at(t) + pair.m.at(t) - 0.9));
  CHECK(worst < 1e-12);
  CHECK(pair.p.at(40e-9) - pair.m.at(40e-9) == doctest::Approx(bits[0] ? 0.2 : -0.2));
}

TEST_CASE("channel step response matches the critically damped closed form") {
  const double dt = 0.25e-9, f = 175e6;
  const std::vector<double> step(8000, 1.0);
  const auto y = channel_filter(step, dt, f);
  double worst = 0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double t = static_cast<double>(k) * dt;
    worst = std::max(worst, std::abs(y[k] - oracle::critically_damped_step(t, f)));
    worst = std::max(worst, std::abs(channel_step_response(t, f) - oracle::critically_damped_step(t, f)));
  }
  CHECK(worst < 1e-6);
  CHECK(y[0] == 0.0);
}

TEST_CASE("channel settles to unity DC gain") {
  const double f = 175e6, w = 2 * 3.14159265358979 * f;
  // Residual at 5/w is (1 + 5) e^-5, about 4%; 0.1% needs t > 9.23/w.
  CHECK(1 - channel_step_response(5 / w, f) == doctest::Approx(6 * std::exp(-5.0)));
  CHECK(1 - channel_step_response(10 / w, f) < 1e-3);
}

TEST_CASE("channel is linear") {
  Rng rng(13);
  std::vector<double> x(2000), y(2000), z(2000);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.uniform(-1, 1);
    y[i] = rng.uniform(-1, 1);
    z[i] = 0.3 * x[i] - 1.7 * y[i];
  }
  const auto fx = channel_filter(x, 0.25e-9, 175e6), fy = channel_filter(y, 0.25e-9, 175e6),
             fz = channel_filter(z, 0.25e-9, 175e6);
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(fz[i] - (0.3 * fx[i] - 1.7 * fy[i])));
  CHECK(worst < 1e-10);
}

TEST_CASE("clock timing") {
  RecordParams p;
  p.clk_period = 57.5e-9;
  p.clk_phase = 0;
  // Edges at k * 57.5 ns for k = 0..21 all start and finish inside 1250 ns.
  const auto edges = clock_rising_edges(p, 1250e-9);
  CHECK(edges.size() == static_cast<std::size_t>(std::floor(1250 / 57.5)) + 1);
  CHECK(edges.size() == 22);
  CHECK(edges.back() + p.clk_edge < 1250e-9);

  p.clk_phase = 180;
  CHECK(clock_rising_edges(p, 1250e-9).front() == doctest::Approx(57.5e-9 / 2));
  const Pwl clk = gen_clock(p, 1250e-9);
  CHECK(clk.at(0) == doctest::Approx(kClockHigh));
  CHECK(clk.at(57.5e-9 / 2 + 1.25e-9) == doctest::Approx(0.45));
  for (double t = 0; t < 1250e-9; t += 0.1e-9) {
    CHECK(clk.at(t) >= 0.0);
    CHECK(clk.at(t) <= kClockHigh);
  }
}

TEST_CASE("record parameters are uniform in their ranges") {
  double lo = 1, hi = 0, sum = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const auto p = sample_params(42, i);
    lo = std::min(lo, p.bit_time);
    hi = std::max(hi, p.bit_time);
    sum += p.bit_time;
    CHECK(p.v_cm == 0.45);
    CHECK(p.in_range());
  }
  CHECK(lo >= 50e-9);
  CHECK(hi <= 150e-9);
  CHECK(std::abs(sum / 10000 - 100e-9) < 0.02 * 100e-9);
  const auto a = sample_params(5, 17), b = sample_params(5, 17);
  CHECK(a.bit_time == b.bit_time);
  CHECK(a.rng_seed == b.rng_seed);
}

TEST_CASE("pwl validation and sampling") {
  CHECK_THROWS(Pwl({{1.0, 0.0}, {2.0, 1.0}}));
  CHECK_THROWS(Pwl({{0.0, 0.0}, {0.0, 1.0}}));
  const Pwl w({{0.0, 0.0}, {1.0, 2.0}});
  const auto s = w.sample(0.25, 6);
  CHECK(s[2] == doctest::Approx(1.0));
  CHECK(s[5] == doctest::Approx(2.0));
  const std::vector<double> vals{1, 3, 2};
  CHECK(Pwl::from_samples(vals, 0.5).at(0.75) == doctest::Approx(2.5));
}
