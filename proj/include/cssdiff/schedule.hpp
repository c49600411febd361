#pragma once

#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace cssdiff {

enum class ScheduleKind { linear, cosine };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from(const std::string& s);

// beta/alpha/alpha_bar for a T-step forward process. Indices are 1-based for
// beta and alpha; alpha_bar(0) == 1. Everything is held in double precision.
class DiffusionSchedule {
 public:
  static DiffusionSchedule build(int steps, double beta_start, double beta_end, ScheduleKind kind);

  // Linear betas rescaled to the chain length: [1e-4, 2e-2] * (1000 / T),
  // each capped below 1 (see README for the cap).
  static DiffusionSchedule default_for(int steps);

  int steps() const { return static_cast<int>(beta_.size()); }
  ScheduleKind kind() const { return kind_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;  // t in [0, T]

  nlohmann::json to_json() const;
  static DiffusionSchedule from_json(const nlohmann::json& j);

 private:
  DiffusionSchedule() = default;

  ScheduleKind kind_ = ScheduleKind::linear;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;  // size T + 1
};

constexpr double kMaxBeta = 0.999;

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps, const DiffusionSchedule& sched);

// (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
torch::Tensor estimate_x0(const torch::Tensor& x_t, int t, const torch::Tensor& eps_pred, const DiffusionSchedule& sched);

// Deterministic (eta = 0) update from t to t-1.
torch::Tensor ddim_step(const torch::Tensor& x_t, int t, const torch::Tensor& eps_pred, const DiffusionSchedule& sched);

}  // namespace cssdiff
