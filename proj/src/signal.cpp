#include "stiffnet/signal.hpp"

#include "stiffnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace stiffnet::signal {

namespace {

struct Taps {
  int order, a, b;
};

// x^order + x^b + 1 (a == order); each polynomial is primitive.
constexpr Taps kTaps[] = {{7, 7, 6}, {9, 9, 5}, {11, 11, 9}, {15, 15, 14}, {23, 23, 18}, {31, 31, 28}};

const Taps* find_taps(int order) {
  for (const Taps& t : kTaps) {
    if (t.order == order) return &t;
  }
  return nullptr;
}

}  // namespace

// ---- PRBS ------------------------------------------------------------------

bool Lfsr::supported(int register_length) { return find_taps(register_length) != nullptr; }

Lfsr::Lfsr(int register_length, std::uint64_t seed) : length_(register_length) {
  const Taps* taps = find_taps(register_length);
  if (!taps) throw std::invalid_argument("unsupported LFSR order " + std::to_string(register_length));
  tap_a_ = taps->a;
  tap_b_ = taps->b;
  mask_ = (std::uint64_t{1} << length_) - 1;
  state_ = seed & mask_;
  if (state_ == 0) throw std::invalid_argument("LFSR seed must be nonzero in the low " +
                                               std::to_string(length_) + " bits");
}

std::uint8_t Lfsr::next() {
  const auto bit = static_cast<std::uint8_t>(((state_ >> (tap_a_ - 1)) ^ (state_ >> (tap_b_ - 1))) & 1U);
  state_ = ((state_ << 1) | bit) & mask_;
  return bit;
}

std::vector<std::uint8_t> gen_prbs(const PrbsConfig& cfg) {
  Lfsr lfsr(cfg.register_length, cfg.seed);
  std::vector<std::uint8_t> bits(cfg.n_bits);
  for (auto& b : bits) b = lfsr.next();
  return bits;
}

// ---- PWL -------------------------------------------------------------------

Pwl::Pwl(std::vector<Breakpoint> points) : points_(std::move(points)) {
  if (points_.empty()) throw std::invalid_argument("PWL needs at least one breakpoint");
  if (points_.front().t != 0.0) throw std::invalid_argument("PWL must start at t = 0");
  for (std::size_t i = 1; i < points_.size(); ++i) {
    if (!(points_[i].t > points_[i - 1].t)) {
      throw std::invalid_argument("PWL times must be strictly increasing (index " + std::to_string(i) + ")");
    }
  }
}

double Pwl::at(double t) const {
  if (t <= points_.front().t) return points_.front().v;
  if (t >= points_.back().t) return points_.back().v;
  auto it = std::upper_bound(points_.begin(), points_.end(), t,
                             [](double x, const Breakpoint& b) { return x < b.t; });
  const Breakpoint& hi = *it;
  const Breakpoint& lo = *(it - 1);
  return lo.v + (hi.v - lo.v) * (t - lo.t) / (hi.t - lo.t);
}

std::vector<double> Pwl::sample(double dt, std::size_t n) const {
  std::vector<double> out(n);
  std::size_t seg = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) * dt;
    while (seg + 1 < points_.size() && points_[seg + 1].t <= t) ++seg;
    if (seg + 1 >= points_.size()) {
      out[k] = points_.back().v;
    } else {
      const Breakpoint& lo = points_[seg];
      const Breakpoint& hi = points_[seg + 1];
      out[k] = t <= lo.t ? lo.v : lo.v + (hi.v - lo.v) * (t - lo.t) / (hi.t - lo.t);
    }
  }
  return out;
}

Pwl Pwl::from_samples(std::span<const double> values, double dt) {
  std::vector<Breakpoint> pts(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) pts[k] = {static_cast<double>(k) * dt, values[k]};
  return Pwl(std::move(pts));
}

Pwl bits_to_pwl(std::span<const std::uint8_t> bits, double bit_time, double rise, double fall,
                double v_lo, double v_hi) {
  if (!(bit_time > 0) || !(rise > 0) || !(fall > 0)) {
    throw std::invalid_argument("bit_time, rise and fall must be positive");
  }
  if (rise + fall > bit_time) {
    throw std::invalid_argument("rise + fall (" + std::to_string(rise + fall) + " s) exceeds bit_time (" +
                                std::to_string(bit_time) + " s)");
  }
  std::vector<Breakpoint> pts{{0.0, v_lo}};
  double level = v_lo;
  for (std::size_t j = 0; j < bits.size(); ++j) {
    const double target = bits[j] ? v_hi : v_lo;
    if (target == level) continue;
    const double t0 = static_cast<double>(j) * bit_time;
    if (t0 > pts.back().t) pts.push_back({t0, level});
    pts.push_back({t0 + (target > level ? rise : fall), target});
    level = target;
  }
  const double t_end = static_cast<double>(bits.size()) * bit_time;
  if (t_end > pts.back().t) pts.push_back({t_end, level});
  return Pwl(std::move(pts));
}

DifferentialPair differential_pair(const Pwl& pwl, double v_cm, double v_dm) {
  std::vector<Breakpoint> p, m;
  p.reserve(pwl.points().size());
  m.reserve(pwl.points().size());
  for (const Breakpoint& b : pwl.points()) {
    p.push_back({b.t, v_cm + v_dm * b.v});
    m.push_back({b.t, v_cm - v_dm * b.v});
  }
  return {Pwl(std::move(p)), Pwl(std::move(m))};
}

std::pair<std::vector<double>, std::vector<double>> differential_pair(std::span<const double> normalized,
                                                                      double v_cm, double v_dm) {
  std::vector<double> p(normalized.size()), m(normalized.size());
  for (std::size_t k = 0; k < normalized.size(); ++k) {
    p[k] = v_cm + v_dm * normalized[k];
    m[k] = v_cm - v_dm * normalized[k];
  }
  return {std::move(p), std::move(m)};
}

// ---- channel ---------------------------------------------------------------

std::vector<double> channel_filter(std::span<const double> samples, double dt, double f_cut) {
  if (!(dt > 0) || !(f_cut > 0)) throw std::invalid_argument("channel_filter needs dt > 0 and f_cut > 0");
  const double w = 2.0 * std::numbers::pi * f_cut;
  const double e = std::exp(-w * dt);
  // exp(A dt) for A = [[0, 1], [-w^2, -2w]] (double pole at -w).
  const double a00 = e * (1.0 + w * dt), a01 = e * dt;
  const double a10 = -e * w * w * dt, a11 = e * (1.0 - w * dt);
  // Steady state for a unit input is [1, 0], so Bd = (I - Ad) [1, 0]^T.
  const double b0 = 1.0 - a00, b1 = -a10;

  std::vector<double> out(samples.size());
  double y = 0.0, dy = 0.0;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    out[k] = y;
    const double u = samples[k];
    const double ny = a00 * y + a01 * dy + b0 * u;
    const double ndy = a10 * y + a11 * dy + b1 * u;
    y = ny;
    dy = ndy;
  }
  return out;
}

double channel_step_response(double t, double f_cut) {
  const double w = 2.0 * std::numbers::pi * f_cut;
  return 1.0 - (1.0 + w * t) * std::exp(-w * t);
}

// ---- record parameters and clock ------------------------------------------

bool RecordParams::in_range() const {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  return in(bit_time, 50e-9, 150e-9) && in(edge_frac, 0.20, 0.30) && v_cm == 0.45 &&
         in(v_dm, 0.15, 0.25) && in(clk_period, 55e-9, 60e-9) && in(clk_phase, 0.0, 180.0) &&
         clk_edge == 2.5e-9 && in(r_load, 0.0, 10.0) && in(c_load, 90e-12, 110e-12);
}

std::vector<double> clock_rising_edges(const RecordParams& params, double duration) {
  const double delay = params.clk_phase / 360.0 * params.clk_period;
  std::vector<double> edges;
  for (long k = 0;; ++k) {
    const double t = delay + static_cast<double>(k) * params.clk_period;
    if (t >= duration) break;
    edges.push_back(t);
  }
  return edges;
}

Pwl gen_clock(const RecordParams& params, double duration) {
  const double period = params.clk_period;
  const double edge = params.clk_edge;
  if (!(period > 0) || !(edge > 0) || !(edge < period / 2)) {
    throw std::invalid_argument("clock edge must be positive and shorter than half a period");
  }
  const double delay = params.clk_phase / 360.0 * period;
  // Periodic trapezoid, starting one cycle early so t = 0 lands mid-pattern.
  std::vector<Breakpoint> raw;
  for (long k = -1;; ++k) {
    const double rs = delay + static_cast<double>(k) * period;
    if (rs >= duration) break;
    const double fs = rs + period / 2;
    raw.push_back({rs, 0.0});
    raw.push_back({rs + edge, kClockHigh});
    raw.push_back({fs, kClockHigh});
    raw.push_back({fs + edge, 0.0});
  }
  auto value_at = [&](double t) {
    if (t <= raw.front().t) return raw.front().v;
    for (std::size_t i = 1; i < raw.size(); ++i) {
      if (t <= raw[i].t) {
        return raw[i - 1].v + (raw[i].v - raw[i - 1].v) * (t - raw[i - 1].t) / (raw[i].t - raw[i - 1].t);
      }
    }
    return raw.back().v;
  };
  std::vector<Breakpoint> pts{{0.0, value_at(0.0)}};
  for (const Breakpoint& b : raw) {
    if (b.t > 0.0 && b.t < duration) pts.push_back(b);
  }
  if (duration > pts.back().t) pts.push_back({duration, value_at(duration)});
  return Pwl(std::move(pts));
}

RecordParams sample_params(std::uint64_t master_seed, std::uint64_t record_index) {
  Rng rng(master_seed, record_index);
  RecordParams p;
  p.bit_time = rng.uniform(50e-9, 150e-9);
  p.edge_frac = rng.uniform(0.20, 0.30);
  p.v_cm = 0.45;
  p.v_dm = rng.uniform(0.15, 0.25);
  p.clk_period = rng.uniform(55e-9, 60e-9);
  p.clk_phase = rng.uniform(0.0, 180.0);
  p.clk_edge = 2.5e-9;
  p.r_load = rng.uniform(0.0, 10.0);
  p.c_load = rng.uniform(90e-12, 110e-12);
  p.rng_seed = rng.next_u64();
  return p;
}

}  // namespace stiffnet::signal
