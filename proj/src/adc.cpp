#include "stiffnet/adc.hpp"

#include <Eigen/LU>

#include <cmath>
#include <string>

namespace stiffnet::adc {

Code comparator_code(double v_diff, double v_ref) {
  if (v_diff > v_ref / 4) return Code::k10;
  if (v_diff < -v_ref / 4) return Code::k00;
  return Code::k01;
}

NewtonError::NewtonError(double residual, int iterations)
    : std::runtime_error("Newton iteration did not converge after " + std::to_string(iterations) +
                         " iterations (residual " + std::to_string(residual) + ")"),
      residual_(residual),
      iterations_(iterations) {}

Vec StiffOdeStepper::step(const Rhs& f, const Vec& y, double h, const Jacobian& jac) const {
  const Eigen::Index n = y.size();
  auto residual = [&](const Vec& z) -> Vec { return z - y - h * f(z); };

  Vec z = y;
  Vec r = residual(z);
  double rn = r.lpNorm<Eigen::Infinity>();
  Eigen::PartialPivLU<Eigen::MatrixXd> lu;
  bool factored = false;
  // One extra solve with the last factorization pushes a converged iterate
  // down to rounding level.
  auto polish = [&] {
    if (!factored) return;
    const Vec cand = z + lu.solve(-r);
    const Vec rc = residual(cand);
    if (rc.lpNorm<Eigen::Infinity>() <= rn) {
      z = cand;
      r = rc;
      rn = rc.lpNorm<Eigen::Infinity>();
    }
  };
  for (int it = 0; it < newton_max_iter; ++it) {
    if (!std::isfinite(rn)) break;
    if (rn < newton_tol) {
      polish();
      return z;
    }

    Eigen::MatrixXd jf;
    if (jac) {
      jf = jac(z);
    } else {
      jf.resize(n, n);
      const Vec fz = f(z);
      for (Eigen::Index j = 0; j < n; ++j) {
        Vec zp = z;
        const double d = 1e-7 * std::max(1.0, std::abs(z[j]));
        zp[j] += d;
        jf.col(j) = (f(zp) - fz) / d;
      }
    }
    lu.compute(Eigen::MatrixXd::Identity(n, n) - h * jf);
    factored = true;
    const Vec delta = lu.solve(-r);

    // Halve the step until the residual drops.
    double lambda = 1.0;
    Vec cand = z + delta;
    Vec rc = residual(cand);
    double rcn = rc.lpNorm<Eigen::Infinity>();
    for (int k = 0; k < 30 && !(rcn < rn); ++k) {
      lambda *= 0.5;
      cand = z + lambda * delta;
      rc = residual(cand);
      rcn = rc.lpNorm<Eigen::Infinity>();
    }
    z = cand;
    r = rc;
    rn = rcn;
  }
  if (rn < newton_tol) {
    polish();
    return z;
  }
  throw NewtonError(rn, newton_max_iter);
}

Vec backward_euler_step(const Rhs& f, const Vec& y, double h, const Jacobian& jac) {
  return StiffOdeStepper{}.step(f, y, h, jac);
}

std::vector<double> upward_crossings(const signal::Pwl& w, double threshold, double t_end) {
  std::vector<double> out;
  const auto& pts = w.points();
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const auto& a = pts[i - 1];
    const auto& b = pts[i];
    if (a.v < threshold && b.v >= threshold) {
      const double t = a.t + (threshold - a.v) / (b.v - a.v) * (b.t - a.t);
      if (t <= t_end) out.push_back(t);
    }
  }
  return out;
}

SimulationResult simulate_record(const signal::Pwl& vin_p, const signal::Pwl& vin_m,
                                 const signal::Pwl& clk, const signal::RecordParams& params,
                                 double fine_dt, double duration, const AdcConfig& cfg) {
  if (!(fine_dt > 0)) throw std::invalid_argument("fine_dt must be positive");
  const auto n_steps = static_cast<std::size_t>(std::llround(duration / fine_dt));
  const double tau = (cfg.r_drv + params.r_load) * params.c_load;

  SimulationResult res;
  res.dout1.resize(n_steps + 1);
  res.dout0.resize(n_steps + 1);
  const std::vector<double> events = upward_crossings(clk, cfg.clk_threshold, duration);

  AdcState st;
  st.last_clk = clk.at(0.0);
  Vec y(2);
  y << st.v_out1, st.v_out2;
  Vec target(2);

  const Rhs f = [&](const Vec& v) -> Vec { return (target - v) / tau; };
  const Jacobian jac = [&](const Vec&) -> Eigen::MatrixXd {
    return Eigen::MatrixXd::Identity(2, 2) * (-1.0 / tau);
  };
  auto set_target = [&] {
    target << (bit1(st.latch) ? cfg.v_high : 0.0), (bit0(st.latch) ? cfg.v_high : 0.0);
  };
  set_target();

  const StiffOdeStepper stepper;
  std::size_t next_event = 0;
  res.dout1[0] = y[0];
  res.dout0[0] = y[1];
  for (std::size_t k = 1; k <= n_steps; ++k) {
    double t = static_cast<double>(k - 1) * fine_dt;
    const double t_next = static_cast<double>(k) * fine_dt;
    while (next_event < events.size() && events[next_event] <= t_next) {
      const double te = events[next_event++];
      if (te > t) {
        y = stepper.step(f, y, te - t, jac);
        t = te;
      }
      st.latch = comparator_code(vin_p.at(te) - vin_m.at(te), cfg.v_ref);
      res.latch_times.push_back(te);
      res.latch_codes.push_back(st.latch);
      set_target();
    }
    if (t_next > t) y = stepper.step(f, y, t_next - t, jac);
    res.dout1[k] = y[0];
    res.dout0[k] = y[1];
  }
  st.v_out1 = y[0];
  st.v_out2 = y[1];
  st.last_clk = clk.at(duration);
  res.final_state = st;
  return res;
}

}  // namespace stiffnet::adc
