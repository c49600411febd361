#include "cssdiff/schedule.hpp"

#include <cmath>
#include <numbers>

#include "cssdiff/errors.hpp"

namespace cssdiff {

namespace {

void check_step(int t, const DiffusionSchedule& s) {
  if (t < 1 || t > s.steps())
    throw RangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.steps()) + "]");
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError("tensor shapes differ");
}

// Tensor arithmetic runs in double and is cast back to the input dtype.
torch::Tensor affine(const torch::Tensor& a, double ca, const torch::Tensor& b, double cb) {
  const auto out = a.to(torch::kDouble) * ca + b.to(torch::kDouble) * cb;
  return out.to(a.scalar_type());
}

}  // namespace

std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ParameterError("unknown schedule kind: " + s);
}

DiffusionSchedule DiffusionSchedule::build(int steps, double beta_start, double beta_end, ScheduleKind kind) {
  if (steps < 1) throw ParameterError("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ParameterError("schedule requires 0 < beta_start <= beta_end < 1");

  DiffusionSchedule s;
  s.kind_ = kind;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.beta_.resize(steps);
  if (kind == ScheduleKind::linear) {
    for (int i = 0; i < steps; ++i) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
      s.beta_[i] = beta_start + frac * (beta_end - beta_start);
    }
  } else {
    // Squared-cosine alpha_bar, betas clipped into [beta_start, beta_end].
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      return std::pow(std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0), 2);
    };
    for (int i = 0; i < steps; ++i) {
      const double b = 1.0 - f(i + 1.0) / f(i);
      s.beta_[i] = std::clamp(b, beta_start, beta_end);
    }
  }
  s.alpha_bar_.resize(steps + 1);
  s.alpha_bar_[0] = 1.0;
  for (int t = 1; t <= steps; ++t) s.alpha_bar_[t] = s.alpha_bar_[t - 1] * (1.0 - s.beta_[t - 1]);
  return s;
}

DiffusionSchedule DiffusionSchedule::default_for(int steps) {
  if (steps < 1) throw ParameterError("schedule needs at least one step");
  const double scale = 1000.0 / steps;
  const double lo = std::min(1e-4 * scale, kMaxBeta);
  const double hi = std::min(2e-2 * scale, kMaxBeta);
  return build(steps, lo, hi, ScheduleKind::linear);
}

double DiffusionSchedule::beta(int t) const {
  check_step(t, *this);
  return beta_[t - 1];
}

double DiffusionSchedule::alpha(int t) const { return 1.0 - beta(t); }

double DiffusionSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps()) throw RangeError("alpha_bar index outside [0, T]");
  return alpha_bar_[t];
}

nlohmann::json DiffusionSchedule::to_json() const {
  return {{"T_steps", steps()}, {"kind", to_string(kind_)}, {"beta_start", beta_start_}, {"beta_end", beta_end_}};
}

DiffusionSchedule DiffusionSchedule::from_json(const nlohmann::json& j) {
  return build(j.at("T_steps").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>(),
               schedule_kind_from(j.at("kind").get<std::string>()));
}

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps, const DiffusionSchedule& sched) {
  check_same_shape(x0, eps);
  check_step(t, sched);
  const double ab = sched.alpha_bar(t);
  return affine(x0, std::sqrt(ab), eps, std::sqrt(1.0 - ab));
}

torch::Tensor estimate_x0(const torch::Tensor& x_t, int t, const torch::Tensor& eps_pred, const DiffusionSchedule& sched) {
  check_same_shape(x_t, eps_pred);
  check_step(t, sched);
  const double ab = sched.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(ab);
  return affine(x_t, inv, eps_pred, -std::sqrt(1.0 - ab) * inv);
}

torch::Tensor ddim_step(const torch::Tensor& x_t, int t, const torch::Tensor& eps_pred, const DiffusionSchedule& sched) {
  check_same_shape(x_t, eps_pred);
  check_step(t, sched);
  const double ab = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t - 1);
  // Folding x0_hat into one affine map keeps t = 1 exact: the eps coefficient is 0.
  const double cx = std::sqrt(ab_prev) / std::sqrt(ab);
  const double ce = std::sqrt(1.0 - ab_prev) - std::sqrt(ab_prev) * std::sqrt(1.0 - ab) / std::sqrt(ab);
  if (t == 1) return estimate_x0(x_t, t, eps_pred, sched);
  return affine(x_t, cx, eps_pred, ce);
}

}  // namespace cssdiff
